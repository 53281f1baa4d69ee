"""Accelerations, path curvature and the soft kinematic-feasibility penalty.

The literal barrier ``max(0, sgn(|a| - a_max))`` is piecewise constant, so
its gradient vanishes almost everywhere.  Training therefore uses the hinge
``max(0, |a| - a_max)``; the indicator form is kept as a metric.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

SPEED_FLOOR = 1e-6


@dataclass(frozen=True)
class KinematicLimits:
    a_max: float = 4.0
    kappa_max: float = 0.2
    dt: float = 0.5

    def __post_init__(self):
        for name in ("a_max", "kappa_max", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be strictly positive")


def _check_len(points):
    if points.shape[-2] < 3:
        raise ValueError(f"need at least 3 waypoints, got {points.shape[-2]}")
    if points.shape[-1] != 2:
        raise ValueError(f"waypoints must be (..., T, 2), got {points.shape}")


def _differences(points):
    """Central first and second differences at interior points, per unit step."""
    nxt, cur, prv = points[..., 2:, :], points[..., 1:-1, :], points[..., :-2, :]
    first = (nxt - prv) * 0.5
    second = nxt - cur * 2.0 + prv
    return first, second


def acceleration_tensor(points, dt, smooth=0.0):
    """|second difference| / dt^2 at the T-2 interior points of (..., T, 2)."""
    points = ad.as_tensor(points)
    _check_len(points)
    _, second = _differences(points)
    sq = (second * second).sum(axis=-1)
    if smooth:
        sq = sq + smooth
    return ad.sqrt(sq) * (1.0 / dt**2)


def curvature_tensor(points, floor=SPEED_FLOOR):
    """Unsigned curvature at interior points; steps slower than ``floor`` get 0.

    Returns ``(kappa, stationary)`` where ``stationary`` is a boolean array.
    """
    points = ad.as_tensor(points)
    _check_len(points)
    first, second = _differences(points)
    dx, dy = first[..., 0], first[..., 1]
    ddx, ddy = second[..., 0], second[..., 1]
    cross = dx * ddy - dy * ddx
    speed2 = dx * dx + dy * dy
    stationary = speed2.data < floor * floor
    keep = Tensor((~stationary).astype(float))
    denom = (speed2 + Tensor(stationary.astype(float))) ** 1.5
    return ad.abs_(cross) * keep / denom, stationary


def accelerations(waypoints, dt):
    """Acceleration magnitudes from central second differences, (..., T-2)."""
    with ad.no_tape():
        return acceleration_tensor(np.asarray(waypoints, dtype=float), dt).data


def curvatures(waypoints, floor=SPEED_FLOOR):
    """Curvatures at interior waypoints plus the stationary-step flags."""
    with ad.no_tape():
        kappa, stationary = curvature_tensor(np.asarray(waypoints, dtype=float), floor)
    return kappa.data, stationary


def with_history(pred, history):
    """Prepend the last observed position so kinematics start at the first predicted step.

    ``pred`` is (..., T_f, 2) and ``history`` (..., 2).
    """
    pred = ad.as_tensor(pred)
    if history is None:
        return pred
    hist = ad.as_tensor(np.asarray(getattr(history, "data", history), dtype=float))
    return ad.concat([hist.reshape(hist.shape[:-1] + (1, 2)), pred], axis=-2)


def feasibility_loss(
    pred,
    limits,
    alpha1=1000.0,
    alpha2=1000.0,
    surrogate="hinge",
    history=None,
    valid=None,
    scale=1.0,
    reduction="mean",
    smooth=1e-12,
):
    """Penalty on acceleration and curvature bound violations.

    ``pred`` holds trajectories (..., T, 2) in units of ``1/scale`` metres.
    The per-trajectory sum over steps is averaged (``reduction="mean"``) or
    summed over trajectories; ``valid`` (shape ``pred.shape[:-2]``) drops
    padded agents.
    """
    if surrogate not in ("hinge", "indicator"):
        raise ValueError(f"unknown surrogate {surrogate!r}")
    pts = with_history(pred, history)
    if scale != 1.0:
        pts = pts * (1.0 / scale)
    acc = acceleration_tensor(pts, limits.dt, smooth if surrogate == "hinge" else 0.0)
    kappa, _ = curvature_tensor(pts)
    if surrogate == "hinge":
        pa = ad.relu(acc - limits.a_max)
        pk = ad.relu(kappa - limits.kappa_max)
    else:
        pa = Tensor((acc.data > limits.a_max).astype(float))
        pk = Tensor((kappa.data > limits.kappa_max).astype(float))
    per_traj = pa.sum(axis=-1) * alpha1 + pk.sum(axis=-1) * alpha2
    if valid is not None:
        w = np.broadcast_to(np.asarray(valid, dtype=float), per_traj.shape)
        per_traj = per_traj * Tensor(w)
        count = w.sum()
    else:
        count = per_traj.size
    total = per_traj.sum()
    if reduction == "sum":
        return total
    return total * (1.0 / max(count, 1.0))


def violation_mask(samples, limits, history=None, scale=1.0):
    """Boolean (..., T-1) array: step violates either bound."""
    with ad.no_tape():
        pts = with_history(np.asarray(getattr(samples, "data", samples), dtype=float), history)
        pts = pts.data / scale
        acc = acceleration_tensor(pts, limits.dt).data
        kappa, _ = curvature_tensor(pts)
    return (acc > limits.a_max) | (kappa.data > limits.kappa_max)


def violation_rate(samples, limits, history=None, valid=None, scale=1.0):
    """Fraction of evaluated predicted steps that violate either bound."""
    samples = np.asarray(getattr(samples, "data", samples), dtype=float)
    if samples.size == 0:
        raise ValueError("no samples to evaluate")
    if history is not None:
        history = np.broadcast_to(np.asarray(history, dtype=float), samples.shape[:-2] + (2,))
    bad = violation_mask(samples, limits, history, scale)
    if valid is not None:
        w = np.broadcast_to(np.asarray(valid, dtype=bool), bad.shape[:-1])
        bad = bad[w]
    if bad.size == 0:
        return 0.0
    return float(bad.mean())
