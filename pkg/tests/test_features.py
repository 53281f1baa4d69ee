import numpy as np
import pytest

from cgns import autodiff as ad
from cgns.autodiff import ShapeError, Tensor
from cgns.features import FeatureExtractor, trajectory_matrix
from cgns.layers import zero_parameters

SMALL = dict(hidden=8, raster_size=8, gauss_channels=(2,), gauss_fc=(4,), base_channels=(2,))


def extractor(rng, context=True):
    return FeatureExtractor(3, rng, context=context, **SMALL)


def test_trajectory_matrix_column_order(rng):
    obs = rng.normal(size=(2, 3, 4, 2))
    m = trajectory_matrix(obs)
    assert m.shape == (2, 4, 6)
    assert np.array_equal(m[1, 2, 2:4], obs[1, 1, 2])


def test_zero_params_decay_hidden_state(rng):
    fx = extractor(rng)
    zero_parameters(fx)
    h0 = rng.normal(size=(1, 8))
    h, _ = fx.extract_trajectory_features(Tensor(np.zeros((1, 4, 6))), h0=Tensor(h0))
    assert np.allclose(h.data, h0 / 2**4, rtol=0, atol=1e-15)


def test_trajectory_branch_matches_composed_oracle(rng):
    fx = extractor(rng)
    obs = np.zeros((1, 3, 4, 2))
    obs[0, 0, :, 0] = np.arange(4.0) * 1.5
    traj = trajectory_matrix(obs)
    h, compact = fx.extract_trajectory_features(Tensor(traj))
    masked = traj * np.repeat(compact.data, 2, axis=-1)
    _, ref = fx.gru_traj.sequence([Tensor(masked[:, t]) for t in range(4)])
    assert np.array_equal(h.data, ref.data)


def test_zero_images_give_bias_only_features(rng):
    fx = extractor(rng)
    h, mask = fx.extract_context_features(Tensor(np.zeros((1, 4, 8, 8))))
    feat = np.maximum(fx.conv_base.conv0.bias.data, 0)[None, :, None, None] * np.ones((1, 2, 4, 4))
    flat = Tensor(feat.reshape(1, -1))
    _, ref = fx.gru_ctx.sequence([flat] * 4)
    assert np.allclose(h.data, ref.data, rtol=0, atol=1e-15)


def test_context_requires_rasters_and_matching_size(rng):
    fx = extractor(rng)
    with pytest.raises(ValueError):
        fx(np.zeros((1, 3, 4, 2)), np.ones((1, 3)))
    with pytest.raises(ShapeError):
        fx.extract_context_features(Tensor(np.zeros((1, 4, 16, 16))))


def test_fuse_width_and_ablation(rng):
    fx = extractor(rng, context=False)
    t = Tensor(rng.normal(size=(2, 8)))
    out = fx.fuse(t)
    ref = fx.fc(t)
    assert out.shape == (2, 8) and np.array_equal(out.data, ref.data)
    with pytest.raises(ShapeError):
        fx.fuse(t, Tensor(rng.normal(size=(2, 8))))


def test_zero_params_zero_embedding(rng):
    fx = extractor(rng)
    zero_parameters(fx)
    emb = fx.fuse(Tensor(np.zeros((1, 8))), Tensor(np.zeros((1, 8))))
    assert np.all(emb.data == 0)


def test_context_off_leaves_image_grads_zero(rng):
    fx = extractor(rng, context=False)
    obs = rng.normal(size=(2, 3, 4, 2))
    with ad.Tape():
        emb = fx(obs, np.ones((2, 3)))
        loss = (emb.values * emb.values).sum()
    fx.zero_grad()
    ad.backward(loss)
    assert emb.image_mask is None and not emb.context_active
    for p in fx.image_parameters():
        assert p.grad is None or not np.any(p.grad)
    assert np.any(fx.gru_traj.w_input.grad)


def test_full_extractor_shapes(rng):
    fx = extractor(rng)
    emb = fx(rng.normal(size=(2, 3, 4, 2)), np.ones((2, 3)), rng.uniform(size=(2, 4, 8, 8)))
    assert emb.width == 8
    assert emb.block_mask.shape == (2, 4, 3)
    assert emb.image_mask.shape == (2, 8, 8)
