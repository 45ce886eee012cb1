"""Spatial-temporal feature modulation.

A condition network turns the frame window into three (scale, shift) pairs:
temporal (from all frames), current (centre frame) and spatial (centre frame,
one pair per pixel). The modulation branch applies them to the aligned
features; a parallel large-kernel residual branch is added on top.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, ops
from .config import ModelConfig
from .tensor import Tensor, concat, reshape, split, take_slice


@dataclass
class ModulationVector:
    scale: Tensor
    shift: Tensor
    kind: str  # "temporal" | "current" | "spatial"


def _unpack(raw: Tensor, kind: str) -> ModulationVector:
    """Split a 2C-channel head output into (1 + scale, shift)."""
    c = raw.shape[1] // 2
    scale, shift = split(raw, [c, c], axis=1)
    return ModulationVector(scale + 1.0, shift, kind)


def apply_modulation(f: Tensor, v: ModulationVector) -> Tensor:
    return ops.affine(f, v.scale, v.shift)


class ColorBlock(nn.Module):
    """Conv1x1(AvgPool2x2(LeakyReLU(InstanceNorm(x))))."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator, slope: float = 0.1):
        self.slope = slope
        self.conv = nn.conv(cin, cout, 1, rng)

    def forward(self, x: Tensor) -> Tensor:
        if min(x.shape[2:]) < 2:
            raise ValueError(f"ColorBlock needs spatial extents >= 2, got {x.shape[2:]}")
        return self.conv(ops.pool_avg(ops.leaky_relu(ops.normalize(x), self.slope), 2, 2))


def replicate_pad(x: Tensor, multiple: int) -> Tensor:
    """Pad H and W at the bottom/right edge up to a multiple, repeating the last row/column."""
    h, w = x.shape[2:]
    ph, pw = -h % multiple, -w % multiple
    if ph:
        x = concat([x] + [take_slice(x, (slice(None), slice(None), slice(h - 1, h)))] * ph, axis=2)
    if pw:
        x = concat([x] + [take_slice(x, (Ellipsis, slice(w - 1, w)))] * pw, axis=3)
    return x


class ConditionNet(nn.Module):
    """Four serial ColorBlocks applied to each frame with shared weights.

    Frames are replicate-padded to a multiple of 16 so the four halvings stay exact.
    """

    def __init__(self, width: int, rng: np.random.Generator, slope: float = 0.1):
        self.width = width
        self.blocks = [ColorBlock(3 if i == 0 else width, width, rng, slope) for i in range(4)]

    def forward(self, x: Tensor, n_frames: int) -> list[Tensor]:
        n, c, h, w = x.shape
        if c != 3 * n_frames:
            raise ValueError(f"expected {n_frames} stacked RGB frames ({3 * n_frames} channels), got {c}")
        x = replicate_pad(x, 16)
        f = reshape(x, (n * n_frames, 3) + x.shape[2:])
        for block in self.blocks:
            f = block(f)
        f = reshape(f, (n, n_frames * self.width) + f.shape[2:])
        return split(f, [self.width] * n_frames, axis=1)


class TME(nn.Module):
    def __init__(self, width: int, n_frames: int, c_feat: int, rng):
        self.reduce = nn.conv(width * n_frames, width, 1, rng)
        self.head = nn.conv(width, 2 * c_feat, 1, rng, zero_init=True)

    def forward(self, feats: list[Tensor]) -> ModulationVector:
        return _unpack(self.head(ops.pool_global(self.reduce(concat(feats, axis=1)))), "temporal")


class CME(nn.Module):
    def __init__(self, width: int, c_feat: int, rng):
        self.reduce = nn.conv(width, width, 1, rng)
        self.head = nn.conv(width, 2 * c_feat, 1, rng, zero_init=True)

    def forward(self, f_i: Tensor) -> ModulationVector:
        return _unpack(self.head(ops.pool_global(self.reduce(f_i))), "current")


class SME(nn.Module):
    def __init__(self, width: int, c_feat: int, rng, slope: float = 0.1):
        self.slope = slope
        self.head = nn.conv(width, 2 * c_feat, 1, rng, zero_init=True)

    def forward(self, f_i: Tensor, size: tuple[int, int]) -> ModulationVector:
        raw = self.head(ops.pool_avg(ops.leaky_relu(f_i, self.slope), 3, 1, padding=1))
        return _unpack(ops.resize_bilinear(raw, size), "spatial")


class ModulationBranch(nn.Module):
    """Conv1x1 -> TFM -> 3 x [ReLU -> Conv1x1 -> CFM -> SFM]."""

    def __init__(self, c_feat: int, rng):
        self.entry = nn.conv(c_feat, c_feat, 1, rng)
        self.stages = [nn.conv(c_feat, c_feat, 1, rng) for _ in range(3)]

    def forward(self, f: Tensor, v_tm: ModulationVector | None = None, v_cm: ModulationVector | None = None,
                v_sm: ModulationVector | None = None) -> Tensor:
        f = self.entry(f)
        if v_tm is not None:
            f = apply_modulation(f, v_tm)
        for conv in self.stages:
            f = conv(ops.relu(f))
            if v_cm is not None:
                f = apply_modulation(f, v_cm)
            if v_sm is not None:
                f = apply_modulation(f, v_sm)
        return f


class ResidualBranch(nn.Module):
    """Two (Conv3x3, LeakyReLU) stages, n LKRBs, Conv3x3."""

    def __init__(self, c_feat: int, n_lkrb: int, rng, slope: float = 0.1, large_kernel: int = 17):
        self.slope = slope
        self.conv_a = nn.conv(c_feat, c_feat, 3, rng)
        self.conv_b = nn.conv(c_feat, c_feat, 3, rng)
        self.blocks = [nn.LKRB(c_feat, rng, large_kernel) for _ in range(n_lkrb)]
        self.out = nn.conv(c_feat, c_feat, 3, rng)

    def forward(self, f: Tensor) -> Tensor:
        f = ops.leaky_relu(self.conv_a(f), self.slope)
        f = ops.leaky_relu(self.conv_b(f), self.slope)
        for block in self.blocks:
            f = block(f)
        return self.out(f)


class STFM(nn.Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        width = cfg.cond_width
        self.condition = ConditionNet(width, rng, cfg.leaky_slope) if cfg.uses_condition_net else None
        self.tme = TME(width, cfg.n_frames, cfg.c_feat, rng) if cfg.tfm else None
        self.cme = CME(width, cfg.c_feat, rng) if cfg.cfm else None
        self.sme = SME(width, cfg.c_feat, rng, cfg.leaky_slope) if cfg.sfm else None
        self.modulation = ModulationBranch(cfg.c_feat, rng)
        self.residual = (ResidualBranch(cfg.c_feat, cfg.n_lkrb_stfm, rng, cfg.leaky_slope, cfg.large_kernel)
                         if cfg.lkrb_parallel else None)

    def vectors(self, frames: Tensor, size: tuple[int, int]):
        """(V_TM, V_CM, V_SM); entries are None for disabled modulations."""
        if self.condition is None:
            return None, None, None
        feats = self.condition(frames, self.cfg.n_frames)
        f_i = feats[self.cfg.T]
        v_tm = self.tme(feats) if self.tme is not None else None
        v_cm = self.cme(f_i) if self.cme is not None else None
        v_sm = self.sme(f_i, size) if self.sme is not None else None
        return v_tm, v_cm, v_sm

    def skip(self, f_aligned: Tensor) -> Tensor:
        return self.residual(f_aligned) if self.residual is not None else f_aligned

    def forward(self, f_aligned: Tensor, frames: Tensor) -> Tensor:
        v_tm, v_cm, v_sm = self.vectors(frames, f_aligned.shape[2:])
        return self.modulation(f_aligned, v_tm, v_cm, v_sm) + self.skip(f_aligned)


def center_frame(frames: Tensor, T: int) -> Tensor:
    return take_slice(frames, (slice(None), slice(3 * T, 3 * T + 3)))
