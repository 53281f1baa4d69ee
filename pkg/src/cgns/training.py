"""Alternating discriminator / generator-encoder optimisation, sampling, checkpoints."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import Batch, Normalizer, make_anchor
from .layers import frozen
from .model import CGNS, TERMS, total_loss

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration",) + TERMS + ("total_g", "total_d")


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration, side, terms):
        breakdown = ", ".join(f"{k}={v!r}" for k, v in terms.items())
        super().__init__(f"non-finite {side} loss at iteration {iteration}: {breakdown}")
        self.iteration = iteration
        self.side = side
        self.terms = terms


class Adam:
    """Adam with optional rescaling of the whole gradient to a maximum global norm."""

    def __init__(self, params, lr=0.002, beta1=0.9, beta2=0.999, eps=1e-8, clip_norm=None):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.clip_norm = clip_norm
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def grad_norm(self):
        return float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in self.params if p.grad is not None)))

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        factor = 1.0
        if self.clip_norm:
            norm = self.grad_norm()
            if norm > self.clip_norm:
                factor = self.clip_norm / norm
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad * factor if p.grad is not None else 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self, prefix):
        out = {f"{prefix}.t": np.array(float(self.t))}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"{prefix}.m.{i}"] = m
            out[f"{prefix}.v.{i}"] = v
        return out

    def load_state(self, state, prefix):
        if f"{prefix}.t" not in state:
            return
        self.t = int(state[f"{prefix}.t"])
        for i in range(len(self.params)):
            self.m[i][...] = state[f"{prefix}.m.{i}"]
            self.v[i][...] = state[f"{prefix}.v.{i}"]


def build_model(config, seed=None):
    rng = np.random.default_rng(config.seed if seed is None else seed)
    return CGNS(config.arch, config.max_agents, config.t_hist, config.t_fut, rng,
                context=config.context, raster_size=config.raster_size)


def _train_rng(seed):
    return np.random.default_rng([int(seed), 1])


@dataclass
class TrainResult:
    model: CGNS
    log: list
    d_updates: int = 0
    g_updates: int = 0
    checkpoints: list = field(default_factory=list)
    state: dict = field(default_factory=dict)


class _Sampler:
    """Endless shuffled mini-batches drawn from the run's generator."""

    def __init__(self, n, batch_size, rng):
        self.n, self.bs, self.rng = n, min(batch_size, n), rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self):
        if self.pos + self.bs > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return idx


def _finite(loss, params):
    if not np.isfinite(loss.data).all():
        return False
    return all(p.grad is None or np.isfinite(p.grad).all() for p in params)


def make_checkpoint(model, config, iteration, adam_g=None, adam_d=None, extra=None):
    optim = {}
    if adam_g is not None:
        optim.update(adam_g.state("g"))
    if adam_d is not None:
        optim.update(adam_d.state("d"))
    return Checkpoint(model.state_dict(), config.doc, config.model_hash(), int(config.seed),
                      int(iteration), optim, extra or {})


def restore(path_or_ckpt, config=None, override_hash_check=False):
    """Model (and config) from a checkpoint, checking compatibility with ``config``."""
    if isinstance(path_or_ckpt, Checkpoint):
        ckpt = path_or_ckpt
        if config is not None and ckpt.config_hash != config.model_hash() and not override_hash_check:
            from .checkpoint import CheckpointError

            raise CheckpointError(
                f"config hash {ckpt.config_hash} does not match {config.model_hash()}"
            )
    else:
        expected = None if config is None else config.model_hash()
        ckpt = load_checkpoint(path_or_ckpt, expected, override_hash_check)
    cfg = RunConfig(ckpt.config)
    model = build_model(cfg)
    model.load_state_dict(ckpt.params)
    return model, cfg, ckpt


def train(model, data, config, log_path=None, checkpoint_dir=None, resume=None, log_comment=None):
    """Run ``config.iterations`` (or ``config.epochs``) alternating updates.

    Every iteration performs ``d_steps`` discriminator updates (skipped when
    both adversarial weights are 0) and one generator/encoder update, each on
    a fresh mini-batch with fresh latent noise.  ``log_comment`` becomes a
    leading ``#`` line of the CSV log.
    """
    w = config.weights
    limits = config.limits
    opt = config.optimizer
    hyper = (opt["lr"], opt["beta1"], opt["beta2"], opt["eps"], opt.get("clip_norm"))
    adam_g = Adam(model.generator_side_parameters(), *hyper)
    adam_d = Adam(model.discriminator_parameters(), *hyper)
    rng = _train_rng(config.seed)
    if len(data) == 0:
        raise ValueError("training set is empty")
    sampler = _Sampler(len(data), config.batch_size, rng)
    iterations = config.iterations
    if config.epochs is not None:
        iterations = int(config.epochs) * math.ceil(len(data) / sampler.bs)
    start, d_updates, g_updates = 0, 0, 0
    if resume is not None:
        adam_g.load_state(resume.optimizer, "g")
        adam_d.load_state(resume.optimizer, "d")
        st = resume.extra
        if "rng" in st:
            rng.bit_generator.state = st["rng"]
            sampler.order = np.array(st["order"], dtype=np.int64)
            sampler.pos = st["pos"]
        start, d_updates, g_updates = resume.iteration, st.get("d_updates", 0), st.get("g_updates", 0)

    adversarial = w.vdm > 0 or w.vdm_enc > 0
    ge_params, d_params = adam_g.params, adam_d.params
    rows, saved = [], []
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        if log_comment:
            fh.write(f"# {log_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(LOG_COLUMNS)

    def state():
        return {"rng": rng.bit_generator.state, "order": sampler.order.tolist(),
                "pos": sampler.pos, "d_updates": d_updates, "g_updates": g_updates}

    try:
        for it in range(start + 1, iterations + 1):
            d_terms, total_d = dict.fromkeys(TERMS, 0.0), 0.0
            if adversarial:
                for _ in range(int(w.d_steps)):
                    batch = data.batch(sampler.next())
                    b = len(batch)
                    n_prior, n_post = rng.standard_normal((b, 2)), rng.standard_normal((b, 2))
                    with frozen(ge_params), ad.Tape():
                        loss, d_terms = total_loss(model, batch, w, "discriminator", n_prior,
                                                   n_post, limits, config.scale)
                    adam_d.zero_grad()
                    ad.backward(loss)
                    if not _finite(loss, d_params):
                        raise TrainingDiverged(it, "discriminator", d_terms)
                    adam_d.step()
                    d_updates += 1
                    total_d = float(loss.data)

            batch = data.batch(sampler.next())
            b = len(batch)
            n_prior, n_post = rng.standard_normal((b, 2)), rng.standard_normal((b, 2))
            with frozen(d_params), ad.Tape():
                loss, g_terms = total_loss(model, batch, w, "generator", n_prior, n_post,
                                           limits, config.scale)
            adam_g.zero_grad()
            if loss.requires_grad:
                ad.backward(loss)
            if not _finite(loss, ge_params):
                raise TrainingDiverged(it, "generator", g_terms)
            adam_g.step()
            g_updates += 1

            row = {"iteration": it}
            for k in TERMS:
                row[k] = d_terms[k] if k in ("loss_d_vdm", "loss_de_vdm") else g_terms[k]
            row["total_g"], row["total_d"] = float(loss.data), total_d
            rows.append(row)
            if writer is not None:
                writer.writerow([it] + [repr(float(row[k])) for k in LOG_COLUMNS[1:]])
            if checkpoint_dir and config.checkpoint_every and it % config.checkpoint_every == 0:
                path = os.path.join(checkpoint_dir, f"checkpoint_{it:06d}.ckpt")
                save_checkpoint(path, make_checkpoint(model, config, it, adam_g, adam_d, state()))
                saved.append(path)
            if it % 50 == 0:
                log.info("iteration %d total_g=%.4f total_d=%.4f", it, row["total_g"], total_d)
    finally:
        if fh is not None:
            fh.close()

    result = TrainResult(model, rows, d_updates, g_updates, saved, state())
    result.adam_g, result.adam_d = adam_g, adam_d
    return result


def sample_futures(model, data, k, seed=0, chunk=256, indices=None):
    """K latent draws from the prior per window: (K, W, N, T_f, 2) in normalized units."""
    if k < 1:
        raise ValueError("K must be at least 1")
    rng = np.random.default_rng([int(seed), 2])
    idx_all = np.arange(len(data)) if indices is None else np.asarray(indices)
    out = np.empty((k, len(idx_all), model.max_agents, model.t_fut, 2))
    noise = rng.standard_normal((k, len(idx_all), 2))  # drawn up front: chunking never changes it
    with ad.no_tape():
        for s in range(0, len(idx_all), chunk):
            idx = idx_all[s : s + chunk]
            batch = data.batch(idx)
            cond = model.condition(batch)
            for j in range(k):
                out[j, s : s + len(idx)] = model.generate(cond, noise[j, s : s + len(idx)], batch.obs).data
    return out


def to_world(samples, data, indices=None):
    """Map normalized samples (K, W, N, T, 2) back to world coordinates."""
    idx = np.arange(samples.shape[1]) if indices is None else np.asarray(indices)
    out = np.empty_like(samples)
    for j, i in enumerate(idx):
        out[:, j] = data.normalizer(i).invert(samples[:, j])
    return out


def predict(model, window, k, seed=0):
    """K world-frame futures (K, N, T_f, 2) for one normalized window."""
    obs = window.obs[None]
    imgs = None if window.images is None else window.images[None]
    batch = Batch(obs, window.fut[None], window.valid[None].astype(float), imgs, 0.0)
    rng = np.random.default_rng([int(seed), 2])
    with ad.no_tape():
        cond = model.condition(batch)
        noise = rng.standard_normal((k, 1, 2))
        outs = [model.generate(cond, noise[j], obs).data[0] for j in range(k)]
    norm = window.anchor or Normalizer(np.zeros(2))
    return np.stack([norm.invert(o) for o in outs])


def rollout(model, window, segments, seed=0, rotate=True):
    """Long-horizon prediction by re-feeding the last T_h predicted steps.

    Returns one world-frame sample of shape (N, segments * T_f, 2).  The
    context rasters of the original window are reused for later segments.
    """
    rng = np.random.default_rng([int(seed), 3])
    norm = window.anchor or Normalizer(np.zeros(2))
    world_hist = norm.invert(window.obs)
    valid = window.valid.astype(float)[None]
    imgs = None if window.images is None else window.images[None]
    pieces = []
    with ad.no_tape():
        for _ in range(segments):
            anchor = make_anchor(world_hist[0], rotate, norm.scale)
            obs = np.where(window.valid[:, None, None], anchor.apply(world_hist), 0.0)[None]
            batch = Batch(obs, np.zeros((1,) + window.fut.shape), valid, imgs, 0.0)
            cond = model.condition(batch)
            pred = model.generate(cond, rng.standard_normal((1, 2)), obs).data[0]
            world = anchor.invert(pred)
            pieces.append(world)
            world_hist = np.concatenate([world_hist, world], axis=1)[:, -window.t_hist :]
    return np.concatenate(pieces, axis=1)
