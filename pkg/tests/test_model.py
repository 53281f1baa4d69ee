import numpy as np
import pytest

from cgns import autodiff as ad
from cgns.autodiff import Tensor, grad_check
from cgns.data import Batch
from cgns.layers import zero_parameters
from cgns.model import (
    CGNS,
    Encoder,
    Generator,
    LatentGaussian,
    LossWeights,
    loss_d_vdm,
    loss_g_vdm,
    loss_kl,
    loss_rc,
    reparameterize,
    total_loss,
)
from cgns.feasibility import feasibility_loss
from cgns.verify import MINI_ARCH, mini_problem


def mini(seed):
    model, batch, (n_prior, n_post) = mini_problem(seed)
    weights = LossWeights(alpha1=0.5, alpha2=0.5, a_max=0.5, kappa_max=0.5)
    return model, batch, weights, n_prior, n_post


def test_zero_encoder_gives_unit_gaussian(rng):
    enc = Encoder(4, 6, rng, widths=(5, 3))
    zero_parameters(enc)
    lat = enc(Tensor(np.zeros((2, 4))), np.zeros((2, 3, 2)))
    assert np.all(lat.mean.data == 0) and np.all(lat.log_variance.data == 0)
    lat = Encoder(4, 6, rng, widths=(5, 3))(Tensor(rng.normal(size=(2, 4))), rng.normal(size=(2, 6)) * 50)
    assert np.all(lat.variance > 0)


def test_encoder_rejects_non_finite(rng):
    enc = Encoder(4, 6, rng, widths=(5,))
    with pytest.raises(ValueError):
        enc(Tensor(np.zeros((1, 4))), np.full((1, 6), np.nan))


def test_reparameterize_limits():
    eps = np.array([[0.3, -1.2]])
    lat = LatentGaussian(Tensor(np.zeros((1, 2))), Tensor(np.zeros((1, 2))))
    assert np.array_equal(reparameterize(lat, eps).data, eps)
    lat = LatentGaussian(Tensor([[1.0, 2.0]]), Tensor(np.full((1, 2), -30.0)))
    assert np.allclose(reparameterize(lat, eps).data, [[1.0, 2.0]], atol=1e-6)


def test_zero_generator_repeats_last_position(rng):
    gen = Generator(4, 2, 5, rng, hidden=6)
    zero_parameters(gen)
    last = rng.normal(size=(3, 2, 2))
    out = gen(Tensor(rng.normal(size=(3, 4))), rng.normal(size=(3, 2)), last, rng.normal(size=(3, 2, 2)))
    assert np.array_equal(out.data, np.repeat(last[:, :, None], 5, axis=2))


def test_fresh_generator_extrapolates_constant_velocity(rng):
    gen = Generator(4, 2, 5, rng, hidden=6)
    last, delta = rng.normal(size=(1, 2, 2)), rng.normal(size=(1, 2, 2))
    out = gen(Tensor(rng.normal(size=(1, 4))), rng.normal(size=(1, 2)), last, delta).data
    ref = last[:, :, None] + np.arange(1, 6)[None, None, :, None] * delta[:, :, None]
    assert np.allclose(out, ref, atol=1e-12)


def test_generator_unrolled_oracle_and_z_dependence(rng):
    gen = Generator(4, 2, 3, rng, hidden=6)
    gen.head.weight.data[...] = rng.normal(size=gen.head.weight.shape)
    cond = Tensor(rng.normal(size=(1, 4)))
    z1, z2 = rng.normal(size=(1, 2)), rng.normal(size=(1, 2))
    last = rng.normal(size=(1, 2, 2))
    out = gen(cond, z1, last).data
    h = gen.init(ad.concat([cond, Tensor(z1)], axis=1))
    pos, delta = last.reshape(1, 4), np.zeros((1, 4))
    for t in range(3):
        h = gen.gru.step(Tensor(np.concatenate([delta, z1], axis=1)), h)
        delta = gen.head(h).data + delta * gen.carry.data
        pos = pos + delta
        assert np.allclose(out[0, :, t].reshape(-1), pos[0], atol=1e-14)
    assert not np.allclose(out, gen(cond, z2, last).data)


def test_zero_discriminator_scores_zero(rng):
    model = CGNS(MINI_ARCH, 2, 4, 4, rng, context=False, raster_size=8)
    zero_parameters(model.discriminator)
    cond = model.features(rng.normal(size=(3, 2, 4, 2)), np.ones((3, 2)))
    traj = rng.normal(size=(3, 2, 4, 2))
    assert np.all(model.discriminate(cond, traj).data == 0)


def test_discriminator_deterministic(rng):
    model = CGNS(MINI_ARCH, 2, 4, 4, rng, context=False, raster_size=8)
    cond = model.features(rng.normal(size=(3, 2, 4, 2)), np.ones((3, 2)))
    traj = rng.normal(size=(3, 2, 4, 2))
    assert np.array_equal(model.discriminate(cond, traj).data, model.discriminate(cond, traj).data)


def test_loss_rc_examples(rng):
    truth = rng.normal(size=(2, 3, 4, 2))
    assert loss_rc(Tensor(truth), truth).data == 0
    pred = truth.copy()
    pred[0, 1, 2] += [3.0, 4.0]
    assert float(loss_rc(Tensor(pred[:1]), truth[:1]).data) == pytest.approx(25.0)
    pred = rng.normal(size=truth.shape)
    ref = sum(((pred[b] - truth[b]) ** 2).sum() for b in range(2)) / 2
    assert float(loss_rc(Tensor(pred), truth).data) == pytest.approx(ref, rel=1e-14)
    with pytest.raises(ValueError):
        loss_rc(Tensor(pred), truth[:, :2])


def test_loss_rc_valid_mask(rng):
    truth, pred = rng.normal(size=(2, 3, 4, 2)), rng.normal(size=(2, 3, 4, 2))
    valid = np.array([[1, 0, 1], [1, 1, 0]], dtype=float)
    ref = sum(((pred[b, n] - truth[b, n]) ** 2).sum() for b in range(2) for n in range(3) if valid[b, n]) / 2
    assert float(loss_rc(Tensor(pred), truth, valid).data) == pytest.approx(ref, rel=1e-14)


def test_loss_kl_exact_points():
    lat = LatentGaussian(Tensor(np.zeros(2)), Tensor(np.zeros(2)))
    assert float(loss_kl(lat).data) == 0.0
    lat = LatentGaussian(Tensor([1.0]), Tensor([0.0]))
    assert abs(float(loss_kl(lat).data) - 0.5) <= 1e-12


def test_loss_kl_grad(rng):
    mu = Tensor(rng.normal(size=(3, 2)))
    lv = rng.normal(size=(3, 2))
    assert grad_check(lambda m: loss_kl(LatentGaussian(m, Tensor(lv))), mu) <= 1e-4


def test_vdm_losses(rng):
    assert float(loss_g_vdm(np.zeros(4)).data) == 0
    assert float(loss_g_vdm(np.array([1.0, -1.0])).data) == 0.5
    assert float(loss_d_vdm(np.ones(3), -np.ones(3)).data) == 0
    assert float(loss_d_vdm(np.zeros(3), np.zeros(3)).data) == 1.0
    r, f = rng.normal(size=5), rng.normal(size=7)
    ref = 0.5 * np.mean((r - 1) ** 2) + 0.5 * np.mean((f + 1) ** 2)
    assert float(loss_d_vdm(r, f).data) == pytest.approx(ref, rel=1e-14)
    assert float(loss_g_vdm(f).data) == pytest.approx(0.5 * np.mean(f**2), rel=1e-14)


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(rc=-1)
    with pytest.raises(ValueError):
        LossWeights(a_max=0)
    with pytest.raises(ValueError):
        LossWeights(d_steps=0)


def test_total_loss_zero_weights_is_zero():
    model, batch, _, n1, n2 = mini(0)
    w = LossWeights(rc=0, kl=0, vdm=0, vdm_enc=0, feas=0)
    for mode in ("generator", "discriminator"):
        total, terms = total_loss(model, batch, w, mode, n1, n2)
        assert float(total.data) == 0 and all(v == 0 for v in terms.values())
    with pytest.raises(ValueError):
        total_loss(model, batch, w, "both", n1, n2)


def test_total_loss_rc_only_perfect_prediction(rng):
    model, batch, _, n1, n2 = mini(0)
    zero_parameters(model.generator)
    last = batch.obs[:, :, -1:, :]
    perfect = Batch(batch.obs, np.repeat(last, batch.fut.shape[2], axis=2), batch.valid, batch.images, batch.dt)
    w = LossWeights(rc=1, kl=0, vdm=0, vdm_enc=0, feas=0)
    total, terms = total_loss(model, perfect, w, "generator", n1, n2)
    assert float(total.data) == 0


def test_total_loss_is_weighted_sum_of_terms():
    model, batch, weights, n1, n2 = mini(3)
    total, terms = total_loss(model, batch, weights, "generator", n1, n2)
    with ad.no_tape():
        cond = model.condition(batch)
        lat = model.encode(cond, batch.fut)
        post = model.generate(cond, reparameterize(lat, n2), batch.obs)
        prior = model.generate(cond, Tensor(n1), batch.obs)
        kw = dict(history=batch.obs[:, :, -1], valid=batch.valid)
        limits = model_limits(weights, batch)
        ref = {
            "loss_rc": loss_rc(post, batch.fut, batch.valid),
            "loss_kl": loss_kl(lat),
            "loss_g_vdm": loss_g_vdm(model.discriminate(cond, prior, batch.valid)),
            "loss_ge_vdm": loss_g_vdm(model.discriminate(cond, post, batch.valid)),
            "loss_f": (feasibility_loss(prior, limits, weights.alpha1, weights.alpha2, **kw)
                       + feasibility_loss(post, limits, weights.alpha1, weights.alpha2, **kw)) * 0.5,
        }
    ref = {k: float(v.data) for k, v in ref.items()}
    for k, v in ref.items():
        assert terms[k] == pytest.approx(v, rel=1e-12, abs=1e-15)
    lam = dict(loss_rc=weights.rc, loss_kl=weights.kl, loss_g_vdm=weights.vdm,
               loss_ge_vdm=weights.vdm_enc, loss_f=weights.feas)
    assert float(total.data) == pytest.approx(sum(lam[k] * ref[k] for k in ref), rel=1e-12)


def model_limits(weights, batch):
    from cgns.feasibility import KinematicLimits

    return KinematicLimits(weights.a_max, weights.kappa_max, batch.dt)


def test_sides_touch_only_their_parameters():
    model, batch, weights, n1, n2 = mini(1)
    from cgns.layers import frozen

    for mode, own, other in (
        ("generator", model.generator_side_parameters(), model.discriminator_parameters()),
        ("discriminator", model.discriminator_parameters(), model.generator_side_parameters()),
    ):
        model.zero_grad()
        with frozen(other), ad.Tape():
            loss, _ = total_loss(model, batch, weights, mode, n1, n2)
        ad.backward(loss)
        assert all(p.grad is None or not np.any(p.grad) for p in other)
        assert any(p.grad is not None and np.any(p.grad) for p in own)


def _generator_grads(model, batch, weights, n1, n2):
    model.zero_grad()
    with ad.Tape():
        loss, terms = total_loss(model, batch, weights, "generator", n1, n2)
    ad.backward(loss)
    return float(loss.data), terms, [p.grad.copy() for p in model.generator_side_parameters()]


def test_feasibility_gradient_cap_limits():
    model, batch, base, n1, n2 = mini(2)
    exact = LossWeights(**{**base.__dict__, "feas_grad_cap": None})
    loose = LossWeights(**{**base.__dict__, "feas_grad_cap": 1e300})
    tight = LossWeights(**{**base.__dict__, "feas_grad_cap": 1e-300})
    no_feas = LossWeights(**{**base.__dict__, "feas": 0.0, "feas_grad_cap": None})
    v_exact, t_exact, g_exact = _generator_grads(model, batch, exact, n1, n2)
    v_loose, _, g_loose = _generator_grads(model, batch, loose, n1, n2)
    v_tight, t_tight, g_tight = _generator_grads(model, batch, tight, n1, n2)
    _, _, g_plain = _generator_grads(model, batch, no_feas, n1, n2)
    assert t_exact["loss_f"] > 0
    # the cap changes gradients only, never the logged value
    assert v_exact == v_loose == v_tight and t_tight["loss_f"] == t_exact["loss_f"]
    for a, b in zip(g_exact, g_loose):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(g_tight, g_plain):
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-200)
    assert any(not np.allclose(a, b) for a, b in zip(g_exact, g_plain))
    with pytest.raises(ValueError):
        LossWeights(feas_grad_cap=0.0)
