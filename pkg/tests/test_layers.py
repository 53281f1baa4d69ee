import numpy as np
import pytest
from scipy.special import expit

from cgns import autodiff as ad
from cgns.autodiff import ShapeError, Tensor, grad_check
from cgns.layers import Dense, DenseStack, GruCell, frozen, gru_sequence, gru_step, zero_parameters


def test_zero_gru_halves_state(rng):
    cell = GruCell(3, 4, rng)
    zero_parameters(cell)
    v = rng.normal(size=(2, 4))
    h = gru_step(cell, Tensor(rng.normal(size=(2, 3))), Tensor(v))
    assert np.array_equal(h.data, 0.5 * v)


def test_zero_gru_sequence_repeated_halving(rng):
    cell = GruCell(2, 3, rng)
    zero_parameters(cell)
    v = rng.normal(size=(1, 3))
    xs = [Tensor(rng.normal(size=(1, 2))) for _ in range(5)]
    _, h = gru_sequence(cell, xs, Tensor(v))
    assert np.allclose(h.data, v / 2**5, rtol=0, atol=1e-15)


def test_scalar_gru_by_hand(rng):
    cell = GruCell(1, 1, rng)
    wz, wr, wc = 0.3, -0.7, 1.1
    uz, ur, uc = 0.5, 0.2, -0.4
    bz, br, bc = 0.1, -0.2, 0.05
    cell.w_input.data[...] = [[wz, wr, wc]]
    cell.w_gates.data[...] = [[uz, ur]]
    cell.w_cand.data[...] = [[uc]]
    cell.bias.data[...] = [bz, br, bc]
    x, hp = 0.8, -0.6
    z = expit(wz * x + uz * hp + bz)
    r = expit(wr * x + ur * hp + br)
    cand = np.tanh(wc * x + bc + uc * r * hp)
    expected = (1 - z) * hp + z * cand
    h = cell.step(Tensor([[x]]), Tensor([[hp]]))
    assert h.data[0, 0] == pytest.approx(expected, abs=1e-15)


def test_sequence_matches_iterated_steps_bitwise(rng):
    cell = GruCell(4, 6, rng)
    xs = [Tensor(rng.normal(size=(3, 4))) for _ in range(8)]
    hs, h = cell.sequence(xs)
    ref = cell.initial_state(3)
    for x, got in zip(xs, hs):
        ref = cell.step(x, ref)
        assert np.array_equal(got.data, ref.data)
    assert np.array_equal(h.data, ref.data)
    one, _ = cell.sequence(xs[:1])
    assert np.array_equal(one[0].data, cell.step(xs[0], cell.initial_state(3)).data)


def test_gru_five_steps_grad_check(rng):
    cell = GruCell(2, 3, rng)
    xs = [Tensor(rng.normal(size=(2, 2))) for _ in range(5)]

    def f(w):
        cell.w_input = w
        cell._params["w_input"] = w
        return cell.sequence(xs)[1].sum()

    assert grad_check(f, Tensor(cell.w_input.data.copy())) <= 1e-4


def test_gru_shape_errors(rng):
    cell = GruCell(2, 3, rng)
    with pytest.raises(ShapeError):
        cell.step(Tensor(np.ones((1, 5))), cell.initial_state(1))
    with pytest.raises(ShapeError):
        cell.step(Tensor(np.ones((1, 2))), Tensor(np.ones((1, 4))))
    with pytest.raises(ValueError):
        cell.sequence([])


def test_dense_stack_matches_oracle(rng):
    stack = DenseStack(5, [7, 3], rng, out_activation="tanh")
    x = rng.normal(size=(4, 5))
    h = np.maximum(x @ stack.fc0.weight.data + stack.fc0.bias.data, 0)
    out = np.tanh(h @ stack.fc1.weight.data + stack.fc1.bias.data)
    assert np.allclose(stack(Tensor(x)).data, out, rtol=0, atol=1e-14)


def test_dense_rejects_unknown_activation(rng):
    with pytest.raises(ValueError):
        Dense(2, 2, rng, activation="gelu")


def test_state_dict_roundtrip_and_mismatch(rng):
    a, b = DenseStack(3, [4, 2], rng), DenseStack(3, [4, 2], rng)
    b.load_state_dict(a.state_dict())
    x = Tensor(rng.normal(size=(2, 3)))
    assert np.array_equal(a(x).data, b(x).data)
    state = a.state_dict()
    del state["fc0.bias"]
    with pytest.raises(KeyError):
        b.load_state_dict(state)
    state = a.state_dict()
    state["fc0.bias"] = np.zeros(9)
    with pytest.raises(ValueError):
        b.load_state_dict(state)


def test_frozen_blocks_gradients(rng):
    layer = Dense(2, 1, rng)
    x = Tensor(rng.normal(size=(3, 2)))
    with frozen(layer.parameters()), ad.Tape():
        y = layer(x).sum()
    assert not y.requires_grad
    assert all(p.requires_grad for p in layer.parameters())
