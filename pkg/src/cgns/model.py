"""Encoder, generator and discriminator plus every loss term of the objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .feasibility import KinematicLimits, feasibility_loss
from .features import FeatureExtractor
from .layers import Dense, DenseStack, GruCell, Module

LATENT_DIM = 2


@dataclass
class LossWeights:
    rc: float = 5.0
    kl: float = 1.0
    vdm: float = 1.0
    vdm_enc: float = 1.0
    feas: float = 1.0
    alpha1: float = 1000.0
    alpha2: float = 1000.0
    a_max: float = 4.0
    kappa_max: float = 0.2
    d_steps: int = 2
    # per-trajectory cap on the feasibility gradient w.r.t. world-unit waypoints; None is exact
    feas_grad_cap: float | None = 1e4

    def __post_init__(self):
        for name in ("rc", "kl", "vdm", "vdm_enc", "feas", "alpha1", "alpha2"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be nonnegative")
        if self.a_max <= 0 or self.kappa_max <= 0:
            raise ValueError("a_max and kappa_max must be positive")
        if int(self.d_steps) < 1:
            raise ValueError("d_steps must be a positive integer")
        if self.feas_grad_cap is not None and not self.feas_grad_cap > 0:
            raise ValueError("feas_grad_cap must be positive or None")


@dataclass
class LatentGaussian:
    mean: Tensor
    log_variance: Tensor

    @property
    def variance(self):
        return np.exp(self.log_variance.data)


class Encoder(Module):
    def __init__(self, cond_width, future_width, rng, widths=(256, 128, 64)):
        super().__init__()
        self.future_width = future_width
        self.body = DenseStack(cond_width + future_width, widths, rng, out_activation="relu")
        self.mean_head = Dense(widths[-1], LATENT_DIM, rng)
        self.logvar_head = Dense(widths[-1], LATENT_DIM, rng)

    def __call__(self, cond, future):
        future = ad.as_tensor(future)
        b = future.shape[0]
        flat = future.reshape(b, self.future_width)
        if not (np.all(np.isfinite(cond.data)) and np.all(np.isfinite(flat.data))):
            raise ValueError("encoder input is not finite")
        h = self.body(ad.concat([cond, flat], axis=1))
        return LatentGaussian(self.mean_head(h), self.logvar_head(h))


def reparameterize(latent, noise):
    noise = np.asarray(noise, dtype=float)
    return latent.mean + ad.exp(latent.log_variance * 0.5) * Tensor(noise)


class Generator(Module):
    """GRU decoder emitting per-agent displacements, accumulated from the last
    observed positions.  Each step sees the previous displacements and ``z``.

    A step's displacement is ``head(h) + carry * previous displacement``.  The
    carry gain starts at 1 and the head at 0, so an untrained generator
    extrapolates at constant velocity; with all parameters zero it still
    repeats the last position.
    """

    def __init__(self, cond_width, max_agents, t_fut, rng, hidden=128):
        super().__init__()
        self.max_agents = max_agents
        self.t_fut = t_fut
        self.init = Dense(cond_width + LATENT_DIM, hidden, rng, activation="tanh")
        self.gru = GruCell(2 * max_agents + LATENT_DIM, hidden, rng)
        self.head = Dense(hidden, 2 * max_agents, rng)
        # the head's output is the per-step velocity change; starting it at
        # zero keeps the untrained generator inside the kinematic limits
        self.head.weight.data[...] = 0.0
        self.head.bias.data[...] = 0.0
        self.param("carry", np.ones(2 * max_agents))

    def __call__(self, cond, z, last_obs, last_delta=None):
        """cond (B, C), z (B, 2), last_obs (B, N, 2) -> positions (B, N, T_f, 2).

        ``last_delta`` (B, N, 2), the last observed displacement, is the
        first step's input in place of a previous emission.
        """
        z = ad.as_tensor(z)
        b, n = cond.shape[0], self.max_agents
        h = self.init(ad.concat([cond, z], axis=1))
        pos = Tensor(np.asarray(last_obs, dtype=float).reshape(b, 2 * n))
        if last_delta is None:
            delta = Tensor(np.zeros((b, 2 * n)))
        else:
            delta = Tensor(np.asarray(last_delta, dtype=float).reshape(b, 2 * n))
        steps = []
        for _ in range(self.t_fut):
            h = self.gru.step(ad.concat([delta, z], axis=1), h)
            delta = self.head(h) + delta * self.carry
            pos = pos + delta
            steps.append(pos)
        out = ad.stack(steps, axis=1)  # b, T_f, 2N
        return out.reshape(b, self.t_fut, n, 2).transpose(0, 2, 1, 3)


class Discriminator(Module):
    """GRU over the trajectory steps (each concatenated with the condition),
    then three dense layers to an unbounded score."""

    def __init__(self, cond_width, max_agents, rng, hidden=128, fc=(128, 128)):
        super().__init__()
        self.max_agents = max_agents
        self.gru = GruCell(2 * max_agents + cond_width, hidden, rng)
        self.fc = DenseStack(hidden, list(fc) + [1], rng)

    def __call__(self, cond, traj, valid=None):
        traj = ad.as_tensor(traj)
        b, n, t, _ = traj.shape
        if valid is not None:
            traj = traj * Tensor(np.asarray(valid, dtype=float)[:, :, None, None])
        seq = traj.transpose(0, 2, 1, 3).reshape(b, t, 2 * n)
        _, h = self.gru.sequence([ad.concat([seq[:, i], cond], axis=1) for i in range(t)])
        return self.fc(h).reshape(b)


class CGNS(Module):
    def __init__(self, arch, max_agents, t_hist, t_fut, rng, context=True, raster_size=64):
        super().__init__()
        self.max_agents = max_agents
        self.t_hist = t_hist
        self.t_fut = t_fut
        hidden = arch["hidden"]
        self.features = FeatureExtractor(
            max_agents,
            rng,
            hidden=hidden,
            raster_size=raster_size,
            context=context,
            gauss_components=arch["gauss_components"],
            gauss_channels=tuple(arch["gauss_channels"]),
            gauss_fc=tuple(arch["gauss_fc"]),
            base_channels=tuple(arch["base_channels"]),
            diagonal_cov=arch["diagonal_cov"],
        )
        self.encoder = Encoder(hidden, max_agents * t_fut * 2, rng, tuple(arch["encoder"]))
        self.generator = Generator(hidden, max_agents, t_fut, rng, hidden)
        self.discriminator = Discriminator(hidden, max_agents, rng, hidden, tuple(arch["disc_fc"]))

    def generator_side_parameters(self):
        return self.features.parameters() + self.encoder.parameters() + self.generator.parameters()

    def discriminator_parameters(self):
        return self.discriminator.parameters()

    def condition(self, batch):
        return self.features(batch.obs, batch.valid, batch.images if self.features.context else None)

    def encode(self, cond, future):
        return self.encoder(cond.values, future)

    def generate(self, cond, z, obs):
        """Decode from the history block ``obs`` (B, N, T_h, 2)."""
        obs = np.asarray(obs, dtype=float)
        return self.generator(cond.values, z, obs[:, :, -1], obs[:, :, -1] - obs[:, :, -2])

    def discriminate(self, cond, traj, valid=None):
        return self.discriminator(cond.values, traj, valid)


# ------------------------------------------------------------------- losses


def loss_rc(pred, truth, valid=None):
    """Batch mean of the squared error summed over agents, steps and coordinates."""
    pred = ad.as_tensor(pred)
    truth = np.asarray(getattr(truth, "data", truth), dtype=float)
    if pred.shape != truth.shape:
        raise ad.ShapeError(f"loss_rc: prediction {pred.shape} != truth {truth.shape}")
    diff = pred - Tensor(truth)
    sq = diff * diff
    if valid is not None:
        w = np.asarray(valid, dtype=float).reshape(valid.shape + (1,) * (pred.ndim - np.ndim(valid)))
        sq = sq * Tensor(w)
    if pred.ndim <= 3:
        return sq.sum()
    return sq.sum(axis=tuple(range(1, pred.ndim))).mean()


def loss_kl(latent):
    """KL(N(mean, exp(log_variance)) || N(0, I)), averaged over any batch axis."""
    mu, lv = latent.mean, latent.log_variance
    per = (mu * mu + ad.exp(lv) - 1.0 - lv).sum(axis=-1) * 0.5
    return per.mean() if per.ndim else per


def loss_g_vdm(scores_fake):
    s = ad.as_tensor(scores_fake)
    return (s * s).mean() * 0.5


def loss_d_vdm(scores_real, scores_fake):
    r, f = ad.as_tensor(scores_real), ad.as_tensor(scores_fake)
    return ((r - 1.0) * (r - 1.0)).mean() * 0.5 + ((f + 1.0) * (f + 1.0)).mean() * 0.5


TERMS = ("loss_rc", "loss_kl", "loss_g_vdm", "loss_d_vdm", "loss_ge_vdm", "loss_de_vdm", "loss_f")


def total_loss(model, batch, weights, mode, noise_prior, noise_post, limits=None, scale=1.0):
    """One side of the full objective on a featurized batch.

    ``mode`` is ``"generator"`` (weights on G, E and the feature extractor) or
    ``"discriminator"``.  Disabled terms are skipped and reported as 0.
    Returns ``(scalar tensor, {term: float})``.
    """
    if mode not in ("generator", "discriminator"):
        raise ValueError(f"unknown mode {mode!r}")
    w = weights
    terms = dict.fromkeys(TERMS, 0.0)
    zero = Tensor(0.0)
    total = zero
    if limits is None:
        limits = KinematicLimits(w.a_max, w.kappa_max, batch.dt)

    need_post = w.rc > 0 or w.kl > 0 or w.vdm_enc > 0 or (w.feas > 0 and mode == "generator")
    need_prior = w.vdm > 0 or (w.feas > 0 and mode == "generator")
    if mode == "discriminator":
        need_post = w.vdm_enc > 0
        need_prior = w.vdm > 0
    if not (need_post or need_prior):
        return total, terms

    cond = model.condition(batch)
    last = batch.obs[:, :, -1, :]
    fake_post = fake_prior = latent = None
    if need_post:
        latent = model.encode(cond, batch.fut)
        fake_post = model.generate(cond, reparameterize(latent, noise_post), batch.obs)
    if need_prior:
        fake_prior = model.generate(cond, Tensor(noise_prior), batch.obs)

    if mode == "generator":
        if w.rc > 0:
            t = loss_rc(fake_post, batch.fut, batch.valid)
            terms["loss_rc"] = t
            total = total + t * w.rc
        if w.kl > 0:
            t = loss_kl(latent)
            terms["loss_kl"] = t
            total = total + t * w.kl
        if w.vdm > 0:
            t = loss_g_vdm(model.discriminate(cond, fake_prior, batch.valid))
            terms["loss_g_vdm"] = t
            total = total + t * w.vdm
        if w.vdm_enc > 0:
            t = loss_g_vdm(model.discriminate(cond, fake_post, batch.valid))
            terms["loss_ge_vdm"] = t
            total = total + t * w.vdm_enc
        if w.feas > 0:
            kw = dict(history=last, valid=batch.valid, scale=scale)
            prior_f, post_f = fake_prior, fake_post
            if w.feas_grad_cap:
                # a near-reversal sample has curvature ~ 1/speed and would own the whole update
                count = max(float(np.sum(batch.valid)), 1.0)
                cap = w.feas_grad_cap * w.feas * 0.5 / (count * scale)
                prior_f, post_f = ad.clip_grad(fake_prior, cap), ad.clip_grad(fake_post, cap)
            t = (
                feasibility_loss(prior_f, limits, w.alpha1, w.alpha2, **kw)
                + feasibility_loss(post_f, limits, w.alpha1, w.alpha2, **kw)
            ) * 0.5
            terms["loss_f"] = t
            total = total + t * w.feas
    else:
        real = model.discriminate(cond, batch.fut, batch.valid)
        if w.vdm > 0:
            t = loss_d_vdm(real, model.discriminate(cond, fake_prior, batch.valid))
            terms["loss_d_vdm"] = t
            total = total + t * w.vdm
        if w.vdm_enc > 0:
            t = loss_d_vdm(real, model.discriminate(cond, fake_post, batch.valid))
            terms["loss_de_vdm"] = t
            total = total + t * w.vdm_enc

    return total, {k: (float(v.data) if isinstance(v, Tensor) else v) for k, v in terms.items()}
