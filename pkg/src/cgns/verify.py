"""Self-checks against independent oracles.

Each check returns a :class:`CheckResult`; :func:`run_checks` runs them all.
The KL check takes the function under test as an argument so that a
deliberately broken implementation can be fed in to prove the check bites.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from . import autodiff as ad
from .autodiff import Tensor
from .data import Batch
from .feasibility import KinematicLimits, accelerations, curvatures, feasibility_loss, violation_mask
from .metrics import (
    cvm_predict,
    lr_predict,
    lsq_discriminator_objective,
    pearson_chi2,
    tabular_optimal_discriminator,
)
from .model import CGNS, LatentGaussian, LossWeights, loss_d_vdm, loss_g_vdm, loss_kl, loss_rc, total_loss

GRAD_TOL = 1e-4

MINI_ARCH = dict(
    hidden=8,
    encoder=[8, 8],
    disc_fc=[8, 8],
    gauss_components=1,
    gauss_channels=[2, 2, 2],
    gauss_fc=[8, 8],
    base_channels=[2, 2, 2],
    diagonal_cov=False,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    tolerance: float
    detail: str = ""
    seconds: float = 0.0

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: {self.value:.3g} (tol {self.tolerance:g}) {self.detail}".rstrip()


# ----------------------------------------------------------- gradient checks


def _point(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, shape))


def primitive_cases(rng):
    """(name, function of one tensor, starting point) for every differentiable op."""
    other = rng.normal(size=(3, 4))
    pos = Tensor(rng.uniform(0.5, 2.0, (3, 4)))
    w_img = rng.normal(size=(2, 2, 3, 3))
    w_mm = rng.normal(size=(4, 5))
    w_stack = rng.normal(size=(2, 3, 4))
    image = rng.normal(size=(1, 2, 5, 5))
    cases = [
        ("add", lambda x: (x + Tensor(other)).sum(), _point(rng, 3, 4)),
        ("add_broadcast", lambda x: (x + Tensor(other)).square().sum(), _point(rng, 1, 4)),
        ("sub", lambda x: (Tensor(other) - x).square().sum(), _point(rng, 3, 4)),
        ("mul", lambda x: (x * x * Tensor(other)).sum(), _point(rng, 3, 4)),
        ("div", lambda x: (Tensor(other) / x).sum(), pos),
        ("power", lambda x: ad.power(x, 2.5).sum(), Tensor(rng.uniform(0.5, 2.0, (3, 4)))),
        ("square", lambda x: ad.square(x).sum(), _point(rng, 3, 4)),
        ("sqrt", lambda x: ad.sqrt(x).sum(), Tensor(rng.uniform(0.5, 2.0, (3, 4)))),
        ("abs", lambda x: ad.abs_(x).sum(), Tensor(rng.choice([-1, 1], (3, 4)) * rng.uniform(0.2, 1, (3, 4)))),
        ("exp", lambda x: ad.exp(x).sum(), _point(rng, 3, 4)),
        ("log", lambda x: ad.log(x).sum(), Tensor(rng.uniform(0.5, 2.0, (3, 4)))),
        ("sigmoid", lambda x: (ad.sigmoid(x) * Tensor(other)).sum(), _point(rng, 3, 4, low=-3, high=3)),
        ("tanh", lambda x: (ad.tanh(x) * Tensor(other)).sum(), _point(rng, 3, 4, low=-2, high=2)),
        ("relu", lambda x: (ad.relu(x) * Tensor(other)).sum(),
         Tensor(rng.choice([-1, 1], (3, 4)) * rng.uniform(0.2, 1, (3, 4)))),
        ("sum_axis", lambda x: x.sum(axis=1).square().sum(), _point(rng, 3, 4)),
        ("mean_axis", lambda x: x.mean(axis=0).square().sum(), _point(rng, 3, 4)),
        ("max", lambda x: (ad.max_(x, axis=1) * Tensor(other[:, 0])).sum(), Tensor(rng.permutation(12).reshape(3, 4) * 0.3)),
        ("reshape", lambda x: (x.reshape(4, 3) * Tensor(other.reshape(4, 3))).sum(), _point(rng, 3, 4)),
        ("transpose", lambda x: (x.transpose(1, 0) * Tensor(other.T)).square().sum(), _point(rng, 3, 4)),
        ("slice", lambda x: x[1:, ::2].square().sum(), _point(rng, 3, 4)),
        ("fancy_index", lambda x: x[np.array([0, 2, 0])].square().sum(), _point(rng, 3, 4)),
        ("concat", lambda x: (ad.concat([x, x * 2.0], axis=1) ** 2).sum(), _point(rng, 3, 4)),
        ("stack", lambda x: (ad.stack([x, ad.tanh(x)], axis=0) * Tensor(w_stack)).sum(),
         _point(rng, 3, 4)),
        ("matmul", lambda x: ad.tanh(x @ Tensor(w_mm)).sum(), _point(rng, 3, 4)),
        ("dense", lambda x: ad.dense(Tensor(other), x, Tensor(np.ones(5))).square().sum(), _point(rng, 4, 5)),
        ("softmax", lambda x: (ad.softmax(x, axis=-1) * Tensor(other)).sum(), _point(rng, 3, 4)),
        ("conv2d", lambda x: ad.tanh(ad.conv2d(x, Tensor(w_img), Tensor(np.zeros(2)), padding=1)).sum(),
         _point(rng, 1, 2, 5, 5)),
        ("conv2d_weight", lambda w: ad.tanh(ad.conv2d(Tensor(image), w, None, padding=1)).sum(),
         _point(rng, 2, 2, 3, 3)),
        ("avg_pool2d", lambda x: ad.avg_pool2d(x, (2, 2)).square().sum(), _point(rng, 1, 2, 4, 6)),
    ]
    return cases


def check_primitives(seed=0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    worst, worst_name = 0.0, ""
    for name, fn, x in primitive_cases(rng):
        err = ad.grad_check(fn, x)
        if err > worst:
            worst, worst_name = err, name
    return CheckResult("grad_check primitives", worst <= GRAD_TOL, worst, GRAD_TOL,
                       f"worst op {worst_name}", time.perf_counter() - t0)


def loss_cases(rng):
    """(name, function, point) for every loss term taken alone."""
    truth = rng.normal(size=(3, 2, 4, 2))
    valid = np.array([[1.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    limits = KinematicLimits(a_max=1.0, kappa_max=0.3, dt=0.5)
    hist = rng.normal(size=(3, 2, 2))
    scores = rng.normal(size=6)

    def kl_of(x):
        return loss_kl(LatentGaussian(x[0], x[1]))

    def wiggly(shape):
        base = np.cumsum(rng.uniform(0.3, 0.8, shape), axis=-2)
        return Tensor(base + rng.normal(scale=0.2, size=shape))

    return [
        ("loss_rc", lambda x: loss_rc(x, truth, valid), Tensor(rng.normal(size=(3, 2, 4, 2)))),
        ("loss_kl", kl_of, Tensor(rng.normal(scale=0.5, size=(2, 5, 2)))),
        ("loss_g_vdm", loss_g_vdm, Tensor(rng.normal(size=6))),
        ("loss_d_vdm_real", lambda x: loss_d_vdm(x, Tensor(scores)), Tensor(rng.normal(size=6))),
        ("loss_d_vdm_fake", lambda x: loss_d_vdm(Tensor(scores), x), Tensor(rng.normal(size=6))),
        ("loss_f_hinge", lambda x: feasibility_loss(x, limits, 10.0, 10.0, "hinge", history=hist,
                                                    valid=valid), wiggly((3, 2, 5, 2))),
    ]


def check_losses(seed=0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 1)
    worst, worst_name = 0.0, ""
    for name, fn, x in loss_cases(rng):
        err = ad.grad_check(fn, x)
        if err > worst:
            worst, worst_name = err, name
    return CheckResult("grad_check loss terms", worst <= GRAD_TOL, worst, GRAD_TOL,
                       f"worst term {worst_name}", time.perf_counter() - t0)


def mini_problem(seed=0, context=True):
    """Miniature model (N=2, T_h=4, T_f=4, widths 8) with one random batch."""
    rng = np.random.default_rng(seed)
    model = CGNS(MINI_ARCH, 2, 4, 4, rng, context=context, raster_size=8)
    # the zero-initialised head would leave every generator GRU gradient at 0
    gen = model.generator
    for p in (gen.head.weight, gen.head.bias):
        p.data[...] = rng.uniform(-0.3, 0.3, p.shape)
    gen.carry.data[...] = rng.uniform(0.5, 1.0, gen.carry.shape)
    b = 3
    steps = np.arange(1, 9)[None, None, :, None] * np.array([0.3, 0.05])
    tracks = steps + rng.normal(scale=0.05, size=(b, 2, 8, 2)) + rng.normal(size=(b, 2, 1, 2))
    tracks -= tracks[:, :1, 3:4, :]
    obs, fut = tracks[:, :, :4], tracks[:, :, 4:]
    valid = np.array([[1.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
    images = rng.uniform(0, 1, (b, 4, 8, 8))
    batch = Batch(obs, fut, valid, images, 0.5, 1.0)
    noise = rng.standard_normal((b, 2)), rng.standard_normal((b, 2))
    return model, batch, noise


def objective_grad_error(seed=0, per_param=3, weights=None):
    """Worst relative error over a subsample of parameter coordinates, both sides."""
    model, batch, (n_prior, n_post) = mini_problem(seed)
    # loose limits push a fraction of the hinge terms on, tiny alphas keep them comparable
    w = weights or LossWeights(alpha1=0.5, alpha2=0.5, a_max=0.5, kappa_max=0.5, feas_grad_cap=None)
    limits = KinematicLimits(w.a_max, w.kappa_max, batch.dt)
    rng = np.random.default_rng(seed + 5)
    worst, where = 0.0, ""
    sides = (("generator", model.generator_side_parameters()),
             ("discriminator", model.discriminator_parameters()))
    named = {id(p): n for n, p in model.named_parameters()}
    for mode, params in sides:
        def fn(_):
            return total_loss(model, batch, w, mode, n_prior, n_post, limits, 1.0)[0]

        for p in params:
            k = min(per_param, p.size)
            idx = rng.choice(p.size, size=k, replace=False)
            err = ad.grad_check(fn, p, indices=idx)
            if err > worst:
                worst, where = err, f"{mode}:{named[id(p)]}"
    return worst, where


def check_objective(seed=0, per_param=3):
    t0 = time.perf_counter()
    worst, where = objective_grad_error(seed, per_param)
    return CheckResult("grad_check full objective", worst <= GRAD_TOL, worst, GRAD_TOL,
                       f"worst at {where}", time.perf_counter() - t0)


# ----------------------------------------------------------------- KL oracle


def kl_monte_carlo(mu, sigma, n, rng):
    """Estimate KL(N(mu, sigma^2) || N(0, 1)) per dimension sum; returns (mean, stderr)."""
    mu, sigma = np.asarray(mu, float), np.asarray(sigma, float)
    z = mu + sigma * rng.standard_normal((n,) + mu.shape)
    log_q = -0.5 * ((z - mu) / sigma) ** 2 - np.log(sigma)
    log_p = -0.5 * z**2
    terms = (log_q - log_p).sum(axis=-1)
    return float(terms.mean()), float(terms.std(ddof=1) / np.sqrt(n))


def _kl_value(kl_fn, mu, sigma):
    mu, sigma = np.atleast_1d(np.asarray(mu, float)), np.atleast_1d(np.asarray(sigma, float))
    latent = LatentGaussian(Tensor(mu), Tensor(2.0 * np.log(sigma)))
    with ad.no_tape():
        return float(kl_fn(latent).data)


def check_kl(kl_fn=loss_kl, seed=0, n=100_000, latents=20):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 2)
    worst = 0.0
    for _ in range(latents):
        mu = rng.normal(size=2)
        sigma = np.exp(rng.uniform(-0.7, 0.7, size=2))
        est, se = kl_monte_carlo(mu, sigma, n, rng)
        worst = max(worst, abs(_kl_value(kl_fn, mu, sigma) - est) / se)
    exact = max(abs(_kl_value(kl_fn, [0.0, 0.0], [1.0, 1.0])),
                abs(_kl_value(kl_fn, [1.0], [1.0]) - 0.5))
    ok = worst <= 3.0 and exact <= 1e-12
    return CheckResult("kl vs monte carlo", ok, worst, 3.0,
                       f"standard errors; closed-form points off by {exact:.1e}", time.perf_counter() - t0)


# ------------------------------------------------------- divergence oracle


def random_pair(rng, support=16, zero_bins=True):
    k = int(rng.integers(2, support + 1))
    p, q = rng.dirichlet(np.ones(k)), rng.dirichlet(np.ones(k))
    if zero_bins and k > 3:
        p[rng.integers(k)] = 0.0
        q[rng.integers(k)] = 0.0
        p, q = p / p.sum(), q / q.sum()
    return p, q


def golden_minimizer(p_y, q_y):
    """Per-bin numeric minimiser of 0.5 p (D - 1)^2 + 0.5 q (D + 1)^2 on [-1, 1]."""
    res = optimize.minimize_scalar(
        lambda d: lsq_discriminator_objective(d, p_y, q_y),
        bracket=(-1.0, 1.0), method="golden", tol=1e-10,
    )
    return res.x


def check_discriminator(seed=0, pairs=50):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 3)
    worst, chi_bad = 0.0, 0.0
    for _ in range(pairs):
        p, q = random_pair(rng)
        d = tabular_optimal_discriminator(p, q)
        for y in np.flatnonzero(p + q > 0):
            worst = max(worst, abs(golden_minimizer(p[y], q[y]) - d[y]))
        chi_bad = max(chi_bad, abs(pearson_chi2(p, p)))
        if pearson_chi2(p, q) <= 1e-12 and not np.allclose(p, q, atol=1e-12):
            chi_bad = max(chi_bad, 1.0)
    ok = worst <= 1e-6 and chi_bad <= 1e-12
    return CheckResult("tabular discriminator vs golden section", ok, worst, 1e-6,
                       f"chi2 identity error {chi_bad:.1e}", time.perf_counter() - t0)


# ---------------------------------------------------------- kinematic oracle


def circle_points(radius, n_per_rev=36, revolutions=1.0):
    theta = np.arange(int(n_per_rev * revolutions) + 1) * (2 * np.pi / n_per_rev)
    return radius * np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def check_curvature():
    t0 = time.perf_counter()
    worst = 0.0
    for r in (5.0, 10.0, 20.0):
        kappa, _ = curvatures(circle_points(r))
        worst = max(worst, float(np.max(np.abs(kappa * r - 1.0))))
    line = np.linspace([0.0, 0.0], [30.0, 12.0], 25)
    straight = float(np.max(np.abs(curvatures(line)[0])))
    ok = worst <= 0.02 and straight == 0.0
    return CheckResult("curvature circle oracle", ok, worst, 0.02,
                       f"relative; straight-line max {straight:g}", time.perf_counter() - t0)


# ----------------------------------------------------------- loss identities


def check_identities(seed=0):
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed + 4)
    problems = []
    with ad.no_tape():
        x = rng.normal(size=(4, 3, 5, 2))
        if float(loss_rc(x, x).data) != 0.0:
            problems.append("loss_rc(x, x) != 0")
        off = np.zeros_like(x) + 0.5
        if not np.isclose(float(loss_rc(x + off, x).data), 3 * 5 * 2 * 0.25, rtol=0, atol=1e-12):
            problems.append("loss_rc constant offset")
        if float(loss_d_vdm(np.ones(5), -np.ones(5)).data) != 0.0:
            problems.append("loss_d_vdm at its targets != 0")
        if float(loss_g_vdm(np.zeros(5)).data) != 0.0:
            problems.append("loss_g_vdm(0) != 0")
        if not np.isclose(float(loss_d_vdm(np.zeros(4), np.zeros(4)).data), 1.0, atol=1e-15):
            problems.append("loss_d_vdm(0, 0) != 1")
        limits = KinematicLimits(a_max=2.0, kappa_max=0.15, dt=0.5)
        pts = np.cumsum(rng.normal(1.0, 0.8, size=(6, 8, 2)), axis=1)
        ind = float(feasibility_loss(pts, limits, 7.0, 3.0, "indicator", reduction="sum").data)
        count_a = int(np.sum(accelerations(pts, 0.5) > 2.0))
        count_k = int(np.sum(curvatures(pts)[0] > 0.15))
        if ind != 7.0 * count_a + 3.0 * count_k:
            problems.append("indicator != alpha * count")
        if not violation_mask(pts, limits).any():
            problems.append("indicator fixture has no violations")
        obs = rng.normal(size=(5, 2, 4, 2))
        ls = lr_predict(obs, 3)
        t = np.arange(4.0)
        a = np.stack([np.ones(4), t], axis=1)
        coef = np.linalg.solve(a.T @ a, a.T @ obs.reshape(10, 4, 2).transpose(1, 0, 2).reshape(4, -1))
        oracle = (np.stack([np.ones(3), np.arange(4.0, 7.0)], axis=1) @ coef).reshape(3, 10, 2)
        if np.max(np.abs(ls.reshape(10, 3, 2).transpose(1, 0, 2) - oracle)) > 1e-9:
            problems.append("lr_predict vs normal equations")
        lin = np.arange(8.0)[None, None, :, None] * np.array([1.5, -0.5])
        if np.max(np.abs(cvm_predict(lin[:, :, :4], 4) - lin[:, :, 4:])) > 1e-12:
            problems.append("cvm on constant velocity")
    return CheckResult("loss identities", not problems, float(len(problems)), 0.0,
                       "; ".join(problems), time.perf_counter() - t0)


def run_checks(kl_fn=loss_kl, seed=0, quick=False):
    """Run every check in order; ``quick`` uses fewer Monte-Carlo samples."""
    n = 20_000 if quick else 100_000
    return [
        check_primitives(seed),
        check_losses(seed),
        check_objective(seed),
        check_kl(kl_fn, seed, n=n),
        check_discriminator(seed),
        check_curvature(),
        check_identities(seed),
    ]
