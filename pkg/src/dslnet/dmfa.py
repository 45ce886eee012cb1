"""Dynamic multi-frame alignment: large-kernel offset estimation + deformable fusion."""

from __future__ import annotations

import numpy as np

from . import nn, ops
from .config import ModelConfig
from .tensor import Tensor


def offset_channels(kernel: int, deform_groups: int) -> int:
    return 2 * kernel * kernel * deform_groups


class LDOE(nn.Module):
    """Offset estimator over the channel-stacked frame window.

    conv3x3/2 -> ReLU -> DW17 -> dynamic 7x7 -> DW17 -> ReLU -> transposed conv x2
    -> ReLU -> zero-initialized 1x1 projection to the offset channels.
    With ``dynamic=False`` the dynamic convolution becomes a static depthwise 7x7.
    """

    def __init__(self, in_channels: int, width: int, rng: np.random.Generator, *, kernel: int = 3,
                 deform_groups: int = 1, large_kernel: int = 17, dyn_kernel: int = 7, dyn_k: int = 4,
                 dynamic: bool = True):
        self.dynamic = dynamic
        self.down = nn.conv(in_channels, width, 3, rng, stride=2)
        self.dw_a = nn.DepthwiseConv2d(width, large_kernel, rng)
        if dynamic:
            self.mid = nn.DynamicConv2d(width, dyn_kernel, dyn_k, rng)
        else:
            self.mid = nn.DepthwiseConv2d(width, dyn_kernel, rng)
        self.dw_b = nn.DepthwiseConv2d(width, large_kernel, rng)
        self.up = nn.TransposedConv2d(width, width, rng)
        self.proj = nn.conv(width, offset_channels(kernel, deform_groups), 1, rng, zero_init=True)

    def forward(self, x: Tensor) -> Tensor:
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"offset estimation needs even frame extents, got {h}x{w}")
        f = ops.relu(self.down(x))
        f = self.dw_b(self.mid(self.dw_a(f)))
        f = ops.relu(self.up(ops.relu(f)))
        return self.proj(f)


class DMFA(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        cin = 3 * cfg.n_frames
        self.deform_groups = cfg.deform_groups
        self.ldoe = LDOE(cin, cfg.offset_width, rng, deform_groups=cfg.deform_groups,
                         large_kernel=cfg.large_kernel, dyn_kernel=cfg.dyn_kernel, dyn_k=cfg.dyn_k,
                         dynamic=cfg.dynamic_offset)
        self.fuse = nn.conv(cin, cfg.c_feat, 3, rng)

    def offsets(self, x: Tensor) -> Tensor:
        return self.ldoe(x)

    def forward(self, x: Tensor) -> Tensor:
        off = self.ldoe(x)
        return ops.deformable_conv2d(x, off, self.fuse.weight, self.fuse.bias, deform_groups=self.deform_groups)


class EarlyFusion(nn.Module):
    """Plain 3x3 convolution over the stacked frames (no alignment)."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.fuse = nn.conv(3 * cfg.n_frames, cfg.c_feat, 3, rng)

    def forward(self, x: Tensor) -> Tensor:
        return self.fuse(x)
