"""Model configuration and the named presets (ablation rows M0-M7, baselines)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

TOGGLES = ("align", "dynamic_offset", "tfm", "cfm", "sfm", "lkrb_parallel", "lkqe")

# Components in the order the ablation adds them, M1..M7.
ABLATION_STEPS = (
    ("cfm",),  # M1 single-frame (current) feature modulation
    ("lkrb_parallel",),  # M2 parallel large-kernel depthwise residual branch
    ("tfm",),  # M3 temporal feature modulation (first multi-frame row)
    ("sfm",),  # M4 spatial feature modulation
    ("align",),  # M5 large-kernel alignment, static offset estimator
    ("lkqe",),  # M6 large-kernel quality enhancement
    ("dynamic_offset",),  # M7 dynamic alignment
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    T: int = 1
    c_feat: int = 64
    c_cond: int | None = None  # condition-net width, defaults to c_feat
    c_offset: int | None = None  # offset-estimator width, defaults to c_feat
    n_lkrb_stfm: int = 4
    n_lkrb_lkqe: int = 4
    deform_groups: int = 1
    dyn_k: int = 4
    large_kernel: int = 17
    dyn_kernel: int = 7
    leaky_slope: float = 0.1
    align: bool = True
    dynamic_offset: bool = True
    tfm: bool = True
    cfm: bool = True
    sfm: bool = True
    lkrb_parallel: bool = True
    lkqe: bool = True
    preset: str = "custom"

    def __post_init__(self):
        self.validate()

    @property
    def n_frames(self) -> int:
        return 2 * self.T + 1

    @property
    def cond_width(self) -> int:
        return self.c_cond or self.c_feat

    @property
    def offset_width(self) -> int:
        return self.c_offset or self.c_feat

    @property
    def uses_condition_net(self) -> bool:
        return self.tfm or self.cfm or self.sfm

    def validate(self) -> None:
        if self.T < 0:
            raise ConfigError(f"T must be >= 0, got {self.T}")
        for name in ("c_feat", "n_lkrb_stfm", "n_lkrb_lkqe", "deform_groups", "dyn_k"):
            if getattr(self, name) < (0 if name.startswith("n_lkrb") else 1):
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.dynamic_offset and not self.align:
            raise ConfigError("dynamic_offset requires align: the dynamic convolution lives in the offset estimator")
        if self.dynamic_offset and self.dyn_k < 2:
            raise ConfigError(f"dynamic convolution needs dyn_k >= 2 candidate kernels, got {self.dyn_k}")
        if self.large_kernel % 2 == 0 or self.dyn_kernel % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        if (3 * self.n_frames) % self.deform_groups:
            raise ConfigError(f"deform_groups={self.deform_groups} must divide the {3 * self.n_frames} input channels")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


def _all_off(**kw) -> ModelConfig:
    return ModelConfig(**{t: False for t in TOGGLES}, **kw)


def ablation_config(k: int, **overrides) -> ModelConfig:
    """Row M<k>: the baseline plus the first k components."""
    if not 0 <= k <= len(ABLATION_STEPS):
        raise ConfigError(f"ablation index must be 0..{len(ABLATION_STEPS)}, got {k}")
    on = {name for step in ABLATION_STEPS[:k] for name in step}
    # rows before temporal modulation see only the current frame
    T = 1 if "tfm" in on else 0
    fields = {t: (t in on) for t in TOGGLES}
    fields.update(T=T, preset=f"M{k}")
    fields.update(overrides)
    return ModelConfig(**fields)


# Widths of the full network, chosen so the parameter count lands near 0.93M.
FULL_WIDTHS = dict(c_feat=64, c_cond=64, c_offset=96)
TINY = dict(c_feat=8, c_cond=8, c_offset=8)

PRESET_NAMES = tuple(f"M{k}" for k in range(8)) + ("full", "tiny", "mresnet")


def preset(name: str, **overrides) -> ModelConfig:
    """Named configuration. ``overrides`` replace individual fields (e.g. width)."""
    if name.startswith("M") and name[1:].isdigit() and 0 <= int(name[1:]) <= 7:
        cfg = ablation_config(int(name[1:]), **FULL_WIDTHS)
    elif name == "full":
        cfg = ModelConfig(T=1, preset="full", **FULL_WIDTHS)
    elif name == "tiny":
        cfg = ModelConfig(T=1, preset="tiny", **TINY)
    elif name == "mresnet":
        cfg = _all_off(T=1, preset="mresnet", **FULL_WIDTHS)
    else:
        raise ConfigError(f"unknown preset {name!r}; valid names: {', '.join(PRESET_NAMES)}")
    return cfg.replace(**overrides) if overrides else cfg


ablation_preset = preset
