"""Baselines (constant velocity, linear regression), displacement metrics and the
discrete Pearson chi-square / least-squares discriminator oracle."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

# ----------------------------------------------------------------- baselines


def cvm_predict(obs, t_fut):
    """Extrapolate the last observed velocity. obs (..., T_h, 2) -> (..., T_f, 2)."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape[-2] < 2:
        raise ValueError("constant velocity needs at least 2 observed steps")
    last = obs[..., -1:, :]
    vel = obs[..., -1:, :] - obs[..., -2:-1, :]
    steps = np.arange(1, t_fut + 1, dtype=float)[:, None]
    return last + steps * vel


def lr_predict(obs, t_fut):
    """Per-coordinate least-squares line over observed steps, extrapolated."""
    obs = np.asarray(obs, dtype=float)
    t_hist = obs.shape[-2]
    if t_hist < 2:
        raise ValueError("linear regression needs at least 2 observed steps")
    t = np.arange(t_hist, dtype=float)
    tc = t - t.mean()
    mean = obs.mean(axis=-2, keepdims=True)
    slope = np.einsum("t,...tc->...c", tc, obs)[..., None, :] / (tc @ tc)
    future_t = np.arange(t_hist, t_hist + t_fut, dtype=float) - t.mean()
    return mean + future_t[:, None] * slope


# ------------------------------------------------------------------- metrics


def _distances(pred, truth):
    pred, truth = np.asarray(pred, dtype=float), np.asarray(truth, dtype=float)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ")
    return np.linalg.norm(pred - truth, axis=-1)  # (..., T)


def _valid_weights(shape, valid):
    if valid is None:
        return np.ones(shape)
    return np.broadcast_to(np.asarray(valid, dtype=float), shape)


def ade(pred, truth, valid=None):
    """Mean point distance over valid agents and all predicted steps."""
    d = _distances(pred, truth)
    w = _valid_weights(d.shape[:-1], valid)
    return float((d.mean(axis=-1) * w).sum() / max(w.sum(), 1e-300))


def fde(pred, truth, valid=None):
    d = _distances(pred, truth)
    w = _valid_weights(d.shape[:-1], valid)
    return float((d[..., -1] * w).sum() / max(w.sum(), 1e-300))


@dataclass
class HorizonRow:
    step: int
    seconds: float
    best_ade: float
    best_fde: float
    mean_ade: float
    mean_fde: float


@dataclass
class MetricReport:
    """Displacement errors of K samples per window.

    ``best_*`` take, per window, the sample with the lowest error over all
    valid agents; ``mean_*`` average the error over samples.  ``ade``/``fde``
    follow ``protocol``.
    """

    k: int
    best_ade: float
    best_fde: float
    mean_ade: float
    mean_fde: float
    horizons: list = field(default_factory=list)
    protocol: str = "best_of_k"
    violation_rate: float | None = None

    @property
    def ade(self):
        return self.best_ade if self.protocol == "best_of_k" else self.mean_ade

    @property
    def fde(self):
        return self.best_fde if self.protocol == "best_of_k" else self.mean_fde

    def row_at(self, seconds):
        for row in self.horizons:
            if abs(row.seconds - seconds) < 1e-9:
                return row
        raise KeyError(seconds)

    def to_json(self):
        d = asdict(self)
        d["ade"], d["fde"] = self.ade, self.fde
        return d


def min_of_k(preds, truth, valid=None, dt=1.0, violation_rate=None, protocol="best_of_k"):
    """Best-of-K and mean-over-K ADE/FDE with a per-step horizon breakdown.

    ``preds`` is (K, W, N, T, 2) (or (K, N, T, 2) for a single window) and
    ``truth`` the matching (W, N, T, 2).  The best sample is chosen per window
    (lowest error summed over its valid agents); errors are then averaged
    over all valid agents, so K=1 reproduces :func:`ade` and :func:`fde`.
    """
    preds = np.asarray(preds, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if preds.ndim == 4:
        preds, truth = preds[:, None], truth[None]
        valid = None if valid is None else np.asarray(valid)[None]
    if preds.shape[1:] != truth.shape:
        raise ValueError(f"samples {preds.shape} do not match truth {truth.shape}")
    k = preds.shape[0]
    if k < 1:
        raise ValueError("need at least one sample")
    d = np.linalg.norm(preds - truth[None], axis=-1)  # K W N T
    w = _valid_weights(d.shape[1:3], valid)
    count = max(w.sum(), 1e-300)
    step_sum = (d * w[None, :, :, None]).sum(axis=2)  # K W T, summed over agents
    cum_sum = np.cumsum(step_sum, axis=-1) / np.arange(1, step_sum.shape[-1] + 1)
    rows = []
    for s in range(step_sum.shape[-1]):
        rows.append(HorizonRow(
            step=s + 1,
            seconds=round((s + 1) * dt, 9),
            best_ade=float(cum_sum[:, :, s].min(axis=0).sum() / count),
            best_fde=float(step_sum[:, :, s].min(axis=0).sum() / count),
            mean_ade=float(cum_sum[:, :, s].sum() / (k * count)),
            mean_fde=float(step_sum[:, :, s].sum() / (k * count)),
        ))
    last = rows[-1]
    return MetricReport(k, last.best_ade, last.best_fde, last.mean_ade, last.mean_fde, rows,
                        protocol, violation_rate)


def write_report_csv(path, reports):
    """One row per horizon step; ``reports`` maps a column prefix to a MetricReport."""
    names = list(reports)
    first = reports[names[0]]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["step", "seconds"]
        for n in names:
            header += [f"{n}_best_ade", f"{n}_best_fde", f"{n}_mean_ade", f"{n}_mean_fde"]
        writer.writerow(header)
        for i, row in enumerate(first.horizons):
            line = [row.step, repr(row.seconds)]
            for n in names:
                r = reports[n].horizons[i]
                line += [repr(r.best_ade), repr(r.best_fde), repr(r.mean_ade), repr(r.mean_fde)]
            writer.writerow(line)


def write_report_json(path, reports, meta=None):
    doc = {"meta": meta or {}, "reports": {n: r.to_json() for n, r in reports.items()}}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


# ------------------------------------------------- divergence oracle (discrete)


def as_distribution(p, tol=1e-12):
    p = np.asarray(p, dtype=float).reshape(-1)
    if np.any(p < 0) or abs(p.sum() - 1.0) > tol:
        raise ValueError("not a probability vector (negative entries or sum != 1)")
    return p


def _aligned(p, q):
    p, q = as_distribution(p), as_distribution(q)
    if p.shape != q.shape:
        raise ValueError(f"supports differ: {p.size} vs {q.size} outcomes")
    return p, q


def pearson_chi2(p, q):
    """sum_y (2 q_y - (p_y + q_y))^2 / (p_y + q_y) over bins where p + q > 0.

    ``p`` plays the data distribution and ``q`` the model distribution.
    """
    p, q = _aligned(p, q)
    s = p + q
    on = s > 0
    return float(np.sum((2 * q[on] - s[on]) ** 2 / s[on]))


def lsq_discriminator_objective(scores, p, q):
    """0.5 E_p[(D - 1)^2] + 0.5 E_q[(D + 1)^2] for a tabular discriminator."""
    scores = np.asarray(scores, dtype=float)
    return float(0.5 * np.sum(p * (scores - 1) ** 2) + 0.5 * np.sum(q * (scores + 1) ** 2))


def tabular_optimal_discriminator(p, q):
    """Per-bin minimiser (p - q) / (p + q) of the least-squares objective; NaN where p + q = 0."""
    p, q = _aligned(p, q)
    s = p + q
    out = np.full_like(s, np.nan)
    on = s > 0
    out[on] = (p[on] - q[on]) / s[on]
    return out
