"""Soft attention over trajectory matrices and context rasters.

Two masks are produced here:

* a block mask with one weight per (time step, agent) that multiplies both
  coordinate columns of that agent in the history matrix;
* an image mask drawn from a Gaussian mixture over pixel coordinates and
  scaled so its peak is exactly 1.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Conv2d, ConvStack, Dense, DenseStack, Module

MAX_CONDITION = 1e8
RHO_BOUND = 0.9


def _check_even(traj):
    if traj.shape[-1] % 2:
        raise ValueError(
            f"trajectory matrix needs an even column count (x, y per agent), got {traj.shape[-1]}"
        )


def expand_block_mask(compact):
    """(…, T, N) -> (…, T, 2N), each agent column duplicated for x and y."""
    compact = ad.as_tensor(compact)
    pair = ad.Tensor(np.ones(compact.shape + (2,)))
    return (compact.reshape(compact.shape + (1,)) * pair).reshape(
        compact.shape[:-1] + (2 * compact.shape[-1],)
    )


def apply_block_mask(traj, compact):
    traj = ad.as_tensor(traj)
    _check_even(traj)
    compact = ad.as_tensor(compact)
    if compact.shape[-1] * 2 != traj.shape[-1] or compact.shape[-2] != traj.shape[-2]:
        raise ad.ShapeError(f"block mask {compact.shape} does not fit trajectory matrix {traj.shape}")
    return traj * expand_block_mask(compact)


class BlockMaskNet(Module):
    """One 5x5 same-padded convolution followed by pooling over each x/y pair."""

    def __init__(self, rng, kernel=5):
        super().__init__()
        self.conv = Conv2d(1, 1, kernel, rng, padding=kernel // 2)

    def __call__(self, traj):
        traj = ad.as_tensor(traj)
        _check_even(traj)
        b, t, cols = traj.shape
        feat = self.conv(traj.reshape(b, 1, t, cols))
        pooled = ad.avg_pool2d(feat, (1, 2))
        return ad.sigmoid(pooled).reshape(b, t, cols // 2)


def block_attention(traj, mask_net, valid=None):
    """Weight a batch of trajectory matrices (B, T_h, 2N).

    Returns ``(masked, compact_mask)``.  Padded agents (``valid`` false) get
    zero weight.
    """
    traj = ad.as_tensor(traj)
    if traj.ndim != 3:
        raise ad.ShapeError(f"block_attention expects (batch, T_h, 2N), got {traj.shape}")
    _check_even(traj)
    compact = mask_net(traj)
    if valid is not None:
        compact = compact * Tensor(np.asarray(valid, dtype=float)[:, None, :])
    return apply_block_mask(traj, compact), compact


@dataclass
class GaussianMaskParams:
    """Mixture over pixel coordinates (row, column)."""

    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, 2)
    covs: np.ndarray  # (M, 2, 2)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        self.means = np.asarray(self.means, dtype=float).reshape(-1, 2)
        self.covs = np.asarray(self.covs, dtype=float).reshape(-1, 2, 2)
        m = self.weights.size
        if self.means.shape[0] != m or self.covs.shape[0] != m:
            raise ValueError("weights, means and covariances disagree on component count")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        for k, cov in enumerate(self.covs):
            if not np.allclose(cov, cov.T):
                raise ValueError(f"covariance {k} is not symmetric")
            eig = np.linalg.eigvalsh(cov)
            if eig[0] <= 0 or eig[-1] / eig[0] > MAX_CONDITION:
                raise ValueError(f"covariance {k} is singular or ill-conditioned (eigenvalues {eig})")

    @classmethod
    def isotropic(cls, mean, sigma):
        return cls([1.0], [mean], [np.eye(2) * sigma**2])


def mixture_mask(weights, mu_u, mu_v, sig_u, sig_v, rho, height, width):
    """Peak-normalized mixture density on a pixel grid, differentiable in all params.

    All parameter tensors are (B, M); the result is (B, height, width).
    """
    u = Tensor(np.arange(height, dtype=float)[None, None, :, None])
    v = Tensor(np.arange(width, dtype=float)[None, None, None, :])

    def col(t):
        t = ad.as_tensor(t)
        return t.reshape(t.shape + (1, 1))

    su, sv, r = col(sig_u), col(sig_v), col(rho)
    du = (u - col(mu_u)) / su
    dv = (v - col(mu_v)) / sv
    one_m_r2 = 1.0 - r * r
    quad = (du * du + dv * dv - 2.0 * r * du * dv) / one_m_r2
    norm = 2.0 * np.pi * su * sv * ad.sqrt(one_m_r2)
    dens = col(weights) * ad.exp(-0.5 * quad) / norm
    raw = dens.sum(axis=1)
    peak = raw.max(axis=(1, 2), keepdims=True)
    return raw / peak


def gaussian_mask(params, height, width):
    """Peak-normalized Gaussian mixture mask of shape (height, width)."""
    if height < 1 or width < 1:
        raise ValueError("mask dimensions must be positive")
    if not isinstance(params, GaussianMaskParams):
        raise TypeError("params must be GaussianMaskParams")
    sig_u = np.sqrt(params.covs[:, 0, 0])
    sig_v = np.sqrt(params.covs[:, 1, 1])
    rho = params.covs[:, 0, 1] / (sig_u * sig_v)
    with ad.no_tape():
        out = mixture_mask(
            params.weights[None],
            params.means[None, :, 0],
            params.means[None, :, 1],
            sig_u[None],
            sig_v[None],
            rho[None],
            height,
            width,
        )
    return out.data[0]


def apply_image_mask(images, mask):
    """Multiply every frame and channel by the spatial mask.

    ``images`` is (..., H, W); ``mask`` is (H, W) or (B, H, W) matching the
    leading batch axis of ``images``.
    """
    images, mask = ad.as_tensor(images), ad.as_tensor(mask)
    if images.shape[-2:] != mask.shape[-2:]:
        raise ad.ShapeError(
            f"image mask {mask.shape[-2:]} does not match image size {images.shape[-2:]}"
        )
    if mask.ndim == 3:
        extra = images.ndim - 3
        mask = mask.reshape((mask.shape[0],) + (1,) * extra + mask.shape[1:])
    return images * mask


class GaussianParamHead(Module):
    """Convolutions and two 64-unit dense layers regressing mixture parameters.

    Means are squashed into the image, scales into [0.05, 1.05] of the image
    side, and the correlation into (-0.9, 0.9).  ``diagonal`` pins it to 0.
    """

    def __init__(self, size, rng, components=1, channels=(4, 8, 8), fc=(64, 64), diagonal=False):
        super().__init__()
        self.size = size
        self.components = components
        self.diagonal = diagonal
        self.convs = ConvStack(1, channels, 3, rng, pool=2)
        c, h, w = self.convs.output_shape(size, size)
        if h < 1 or w < 1:
            raise ValueError(f"raster size {size} too small for {len(channels)} pooled conv layers")
        self.flat = c * h * w
        self.fc = DenseStack(self.flat, fc, rng, out_activation="relu")
        self.out = Dense(fc[-1], 6 * components, rng)

    def __call__(self, frame):
        """frame: (B, H, W) -> dict of (B, M) parameter tensors."""
        b = frame.shape[0]
        feat = self.convs(ad.as_tensor(frame).reshape(b, 1, self.size, self.size))
        raw = self.out(self.fc(feat.reshape(b, self.flat)))
        m = self.components
        span = float(self.size - 1)
        params = {
            "weights": ad.softmax(raw[:, 0:m], axis=1),
            "mu_u": ad.sigmoid(raw[:, m : 2 * m]) * span,
            "mu_v": ad.sigmoid(raw[:, 2 * m : 3 * m]) * span,
            "sig_u": (ad.sigmoid(raw[:, 3 * m : 4 * m]) + 0.05) * float(self.size),
            "sig_v": (ad.sigmoid(raw[:, 4 * m : 5 * m]) + 0.05) * float(self.size),
        }
        if self.diagonal:
            params["rho"] = Tensor(np.zeros((b, m)))
        else:
            params["rho"] = ad.tanh(raw[:, 5 * m : 6 * m]) * RHO_BOUND
        return params

    def mask(self, frame):
        p = self(frame)
        return mixture_mask(
            p["weights"], p["mu_u"], p["mu_v"], p["sig_u"], p["sig_v"], p["rho"], self.size, self.size
        )


def export_block_mask_csv(path, compact):
    """One row per time step, one column per agent."""
    compact = np.asarray(getattr(compact, "data", compact))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step"] + [f"agent{i}" for i in range(compact.shape[1])])
        for t, row in enumerate(compact):
            writer.writerow([t] + [repr(float(v)) for v in row])


def export_image_mask_csv(path, mask):
    """Row-major grid, one raster row per CSV line."""
    mask = np.asarray(getattr(mask, "data", mask))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in mask:
            writer.writerow([repr(float(v)) for v in row])
