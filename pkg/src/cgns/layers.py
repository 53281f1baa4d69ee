"""Parameterized building blocks: dense and convolution stacks, GRU cells."""

from __future__ import annotations

import contextlib
import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = {
    None: lambda t: t,
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
}


def uniform_init(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """Container with an ordered registry of named parameters and submodules."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def param(self, name, values):
        t = Tensor(values, requires_grad=True, name=name)
        setattr(self, name, t)
        return t

    def named_parameters(self, prefix=""):
        for name, p in self._params.items():
            yield prefix + name, p
        for name, mod in self._modules.items():
            yield from mod.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self):
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state):
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ValueError(f"{name}: shape {value.shape} != {p.shape}")
            p.data[...] = value

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return sum(p.size for p in self.parameters())


def set_trainable(params, flag):
    for p in params:
        p.requires_grad = flag


@contextlib.contextmanager
def frozen(params):
    """Temporarily stop recording gradients for ``params``."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    set_trainable(params, False)
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


def zero_parameters(module):
    for p in module.parameters():
        p.data[...] = 0.0


class Dense(Module):
    def __init__(self, in_features, out_features, rng, activation=None):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.param("weight", uniform_init(rng, (in_features, out_features), in_features))
        self.param("bias", uniform_init(rng, (out_features,), in_features))

    def __call__(self, x):
        return ACTIVATIONS[self.activation](ad.dense(x, self.weight, self.bias))


class DenseStack(Module):
    """Affine layers with relu between them and ``out_activation`` at the end."""

    def __init__(self, in_features, widths, rng, hidden_activation="relu", out_activation=None):
        super().__init__()
        self.widths = list(widths)
        self.layers = []
        width = in_features
        for i, out in enumerate(self.widths):
            last = i == len(self.widths) - 1
            layer = Dense(width, out, rng, out_activation if last else hidden_activation)
            setattr(self, f"fc{i}", layer)
            self.layers.append(layer)
            width = out
        self.in_features = in_features
        self.out_features = width

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel, rng, padding=0):
        super().__init__()
        self.kernel = kernel
        self.padding = padding
        fan_in = in_channels * kernel * kernel
        self.param("weight", uniform_init(rng, (out_channels, in_channels, kernel, kernel), fan_in))
        self.param("bias", uniform_init(rng, (out_channels,), fan_in))

    def __call__(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.padding)

    def output_size(self, h, w):
        k, p = self.kernel, self.padding
        return h + 2 * p - k + 1, w + 2 * p - k + 1


class ConvStack(Module):
    """Convolutions with "same" padding, each followed by relu and optional pooling.

    ``channels`` lists output channels per layer; ``pool`` is the side of the
    non-overlapping average pool applied after each layer (1 disables it).
    """

    def __init__(self, in_channels, channels, kernel, rng, pool=1, relu=True):
        super().__init__()
        self.layers = []
        self.pool = pool
        self.relu = relu
        c = in_channels
        for i, out in enumerate(channels):
            layer = Conv2d(c, out, kernel, rng, padding=kernel // 2)
            setattr(self, f"conv{i}", layer)
            self.layers.append(layer)
            c = out
        self.out_channels = c

    def __call__(self, x):
        for layer in self.layers:
            x = layer(x)
            if self.relu:
                x = ad.relu(x)
            if self.pool > 1:
                x = ad.avg_pool2d(x, self.pool)
        return x

    def output_shape(self, h, w):
        for layer in self.layers:
            h, w = layer.output_size(h, w)
            h, w = h // self.pool, w // self.pool
        return self.out_channels, h, w


class GruCell(Module):
    """Gated recurrent unit.

    Input weights are stored column-blocked as [update | reset | candidate];
    the recurrent weights of the two gates share ``w_gates`` and the
    candidate's recurrent weights live in ``w_cand``.
    """

    def __init__(self, input_size, hidden_size, rng):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        h = hidden_size
        self.param("w_input", uniform_init(rng, (input_size, 3 * h), h))
        self.param("w_gates", uniform_init(rng, (h, 2 * h), h))
        self.param("w_cand", uniform_init(rng, (h, h), h))
        self.param("bias", uniform_init(rng, (3 * h,), h))

    def initial_state(self, batch):
        return Tensor(np.zeros((batch, self.hidden_size)))

    def step(self, x, h_prev):
        x, h_prev = ad.as_tensor(x), ad.as_tensor(h_prev)
        if x.ndim != 2 or x.shape[1] != self.input_size:
            raise ad.ShapeError(f"gru_step: input {x.shape} != (batch, {self.input_size})")
        if h_prev.shape != (x.shape[0], self.hidden_size):
            raise ad.ShapeError(
                f"gru_step: hidden state {h_prev.shape} != ({x.shape[0]}, {self.hidden_size})"
            )
        hs = self.hidden_size
        xp = ad.dense(x, self.w_input, self.bias)
        hp = ad.matmul(h_prev, self.w_gates)
        update = ad.sigmoid(xp[:, :hs] + hp[:, :hs])
        reset = ad.sigmoid(xp[:, hs : 2 * hs] + hp[:, hs:])
        cand = ad.tanh(xp[:, 2 * hs :] + ad.matmul(reset * h_prev, self.w_cand))
        return h_prev + update * (cand - h_prev)

    __call__ = step

    def sequence(self, xs, h0=None):
        xs = list(xs)
        if not xs:
            raise ValueError("gru_sequence: empty input sequence")
        h = self.initial_state(xs[0].shape[0]) if h0 is None else h0
        hs = []
        for x in xs:
            h = self.step(x, h)
            hs.append(h)
        return hs, h


def gru_step(cell, x, h_prev):
    return cell.step(x, h_prev)


def gru_sequence(cell, xs, h0):
    return cell.sequence(xs, h0)
