"""Full network assembly: alignment -> modulation -> quality enhancement."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import nn, ops
from .config import ModelConfig
from .dmfa import DMFA, EarlyFusion, offset_channels
from .stfm import STFM
from .tensor import Tensor, concat, no_grad


class LKQE(nn.Module):
    """Conv3x3 -> ReLU -> n LKRBs -> Conv3x3 head to RGB.

    Disabled (``enabled=False``) it reduces to the RGB head alone.
    """

    def __init__(self, c_feat: int, n_lkrb: int, rng, *, enabled: bool = True, large_kernel: int = 17):
        self.entry = nn.conv(c_feat, c_feat, 3, rng) if enabled else None
        self.blocks = [nn.LKRB(c_feat, rng, large_kernel) for _ in range(n_lkrb)] if enabled else []
        self.head = nn.conv(c_feat, 3, 3, rng)

    def forward(self, f: Tensor) -> Tensor:
        if self.entry is not None:
            f = ops.relu(self.entry(f))
            for block in self.blocks:
                f = block(f)
        return self.head(f)


class DSLNet(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.config = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.align = DMFA(cfg, rng) if cfg.align else EarlyFusion(cfg, rng)
        self.stfm = STFM(cfg, rng)
        self.lkqe = LKQE(cfg.c_feat, cfg.n_lkrb_lkqe, rng, enabled=cfg.lkqe, large_kernel=cfg.large_kernel)

    def stack_frames(self, frames) -> Tensor:
        """Accept a list of 2T+1 (N, 3, H, W) frames or an already stacked tensor."""
        n_frames = self.config.n_frames
        if isinstance(frames, (list, tuple)):
            if len(frames) != n_frames:
                raise ValueError(f"expected 2T+1 = {n_frames} frames, got {len(frames)}")
            ts = [f if isinstance(f, Tensor) else Tensor(np.asarray(f)) for f in frames]
            ts = [t if t.ndim == 4 else Tensor(t.data[None], dtype=t.data.dtype) for t in ts]
            return concat(ts, axis=1)
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames))
        if x.ndim != 4 or x.shape[1] != 3 * n_frames:
            raise ValueError(f"expected 2T+1 = {n_frames} stacked RGB frames ({3 * n_frames} channels), "
                             f"got shape {x.shape}")
        return x

    def forward(self, frames) -> Tensor:
        x = self.stack_frames(frames)
        h, w = x.shape[2:]
        if h % 2 or w % 2:
            raise ValueError(f"frame extents must be even, got {h}x{w}")
        f_aligned = self.align(x)
        f_modulated = self.stfm(f_aligned, x)
        return self.lkqe(f_modulated)

    def infer(self, frames) -> np.ndarray:
        """Inference output clamped to [0, 1]."""
        with no_grad():
            out = self.forward(frames)
        return np.clip(out.data, 0.0, 1.0)


def build_model(cfg: ModelConfig, seed: int = 0) -> DSLNet:
    cfg.validate()
    return DSLNet(cfg, seed)


dslnet_forward = DSLNet.forward


# -- closed-form parameter count ---------------------------------------------------------

def _conv_params(cin: int, cout: int, k: int) -> int:
    return cin * cout * k * k + cout


def _dw_params(c: int, k: int) -> int:
    return c * k * k + c


def param_count_formula(cfg: ModelConfig) -> int:
    """Parameter count from per-layer arithmetic, independent of the module tree."""
    C, cin = cfg.c_feat, 3 * cfg.n_frames
    lk = _dw_params(C, cfg.large_kernel) + _conv_params(C, C, 3)  # one LKRB
    total = _conv_params(cin, C, 3)  # fusion conv (deformable or plain)
    if cfg.align:
        w = cfg.offset_width
        total += _conv_params(cin, w, 3) + 2 * _dw_params(w, cfg.large_kernel)
        if cfg.dynamic_offset:
            hidden = max(w // 4, 4)
            total += cfg.dyn_k * w * cfg.dyn_kernel ** 2 + w
            total += _conv_params(w, hidden, 1) + _conv_params(hidden, cfg.dyn_k, 1)
        else:
            total += _dw_params(w, cfg.dyn_kernel)
        total += w * w * 16 + w  # transposed 4x4
        total += _conv_params(w, offset_channels(3, cfg.deform_groups), 1)
    if cfg.uses_condition_net:
        cc = cfg.cond_width
        total += _conv_params(3, cc, 1) + 3 * _conv_params(cc, cc, 1)
        if cfg.tfm:
            total += _conv_params(cc * cfg.n_frames, cc, 1) + _conv_params(cc, 2 * C, 1)
        if cfg.cfm:
            total += _conv_params(cc, cc, 1) + _conv_params(cc, 2 * C, 1)
        if cfg.sfm:
            total += _conv_params(cc, 2 * C, 1)
    total += 4 * _conv_params(C, C, 1)  # modulation branch
    if cfg.lkrb_parallel:
        total += 3 * _conv_params(C, C, 3) + cfg.n_lkrb_stfm * lk
    if cfg.lkqe:
        total += _conv_params(C, C, 3) + cfg.n_lkrb_lkqe * lk
    total += _conv_params(C, 3, 3)
    return total


def parameter_paths(model: nn.Module) -> Sequence[str]:
    return [p for p, _ in model.named_parameters()]
