"""Condition embedding from history trajectories and context rasters."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import BlockMaskNet, GaussianParamHead, apply_image_mask, block_attention
from .autodiff import Tensor
from .layers import ConvStack, DenseStack, GruCell, Module


def trajectory_matrix(obs):
    """(B, N, T, 2) positions -> (B, T, 2N) with columns x0, y0, x1, y1, ..."""
    obs = np.asarray(obs, dtype=float)
    b, n, t, _ = obs.shape
    return obs.transpose(0, 2, 1, 3).reshape(b, t, 2 * n)


@dataclass
class ConditionEmbedding:
    values: Tensor  # (B, width)
    context_active: bool
    block_mask: Tensor | None = None
    image_mask: Tensor | None = None
    extras: dict = field(default_factory=dict)

    @property
    def width(self):
        return self.values.shape[-1]


class FeatureExtractor(Module):
    """Interaction branch (block attention + GRU) and context branch
    (Gaussian image attention + small conv base + GRU), fused by two dense layers.

    The context modules are always built so parameter names stay stable;
    with ``context=False`` they simply never enter the graph.
    """

    def __init__(
        self,
        max_agents,
        rng,
        hidden=128,
        raster_size=64,
        context=True,
        gauss_components=1,
        gauss_channels=(4, 8, 8),
        gauss_fc=(64, 64),
        base_channels=(8, 16, 16),
        diagonal_cov=False,
    ):
        super().__init__()
        self.max_agents = max_agents
        self.hidden = hidden
        self.raster_size = raster_size
        self.context = context
        self.mask_net = BlockMaskNet(rng)
        self.gru_traj = GruCell(2 * max_agents, hidden, rng)
        self.gauss_head = GaussianParamHead(
            raster_size, rng, gauss_components, gauss_channels, gauss_fc, diagonal_cov
        )
        self.conv_base = ConvStack(1, base_channels, 3, rng, pool=2)
        c, h, w = self.conv_base.output_shape(raster_size, raster_size)
        self.base_flat = c * h * w
        self.gru_ctx = GruCell(self.base_flat, hidden, rng)
        fuse_in = 2 * hidden if context else hidden
        self.fc = DenseStack(fuse_in, [hidden, hidden], rng)

    def image_parameters(self):
        mods = (self.gauss_head, self.conv_base, self.gru_ctx)
        return [p for m in mods for p in m.parameters()]

    def extract_trajectory_features(self, traj, valid=None, h0=None):
        """traj: (B, T_h, 2N) -> (final GRU state, compact block mask)."""
        masked, compact = block_attention(traj, self.mask_net, valid)
        steps = [masked[:, t, :] for t in range(masked.shape[1])]
        _, h = self.gru_traj.sequence(steps, h0)
        return h, compact

    def extract_context_features(self, images, h0=None):
        """images: (B, T, S, S) -> (final GRU state, image mask of the latest frame)."""
        images = ad.as_tensor(images)
        b, t, s, _ = images.shape
        if s != self.raster_size:
            raise ad.ShapeError(f"raster size {s} != configured {self.raster_size}")
        mask = self.gauss_head.mask(images[:, t - 1])
        masked = apply_image_mask(images, mask)
        feat = self.conv_base(masked.reshape(b * t, 1, s, s)).reshape(b, t, self.base_flat)
        _, h = self.gru_ctx.sequence([feat[:, i] for i in range(t)], h0)
        return h, mask

    def fuse(self, traj_features, context_features=None):
        parts = [traj_features] if context_features is None else [traj_features, context_features]
        x = parts[0] if len(parts) == 1 else ad.concat(parts, axis=1)
        if x.shape[1] != self.fc.in_features:
            raise ad.ShapeError(
                f"fuse: feature width {x.shape[1]} != expected {self.fc.in_features}"
            )
        return self.fc(x)

    def __call__(self, obs, valid=None, images=None):
        traj = trajectory_matrix(obs)
        tf, block = self.extract_trajectory_features(Tensor(traj), valid)
        if self.context:
            if images is None:
                raise ValueError("context branch is enabled but no rasters were given")
            cf, image_mask = self.extract_context_features(images)
        else:
            cf, image_mask = None, None
        return ConditionEmbedding(self.fuse(tf, cf), self.context, block, image_mask)
