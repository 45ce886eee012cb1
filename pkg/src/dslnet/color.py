"""PQ (SMPTE ST 2084) transfer functions and BT.709 / BT.2020 / ICtCp transforms.

Frames are channel-first arrays ``(3, H, W)`` (or any ``(..., 3, H, W)``).
Linear light is absolute luminance in cd/m^2.
"""

from __future__ import annotations

import numpy as np

# ST 2084 constants
PQ_M1 = 2610 / 16384
PQ_M2 = 2523 / 4096 * 128
PQ_C1 = 3424 / 4096
PQ_C2 = 2413 / 4096 * 32
PQ_C3 = 2392 / 4096 * 32
PQ_PEAK = 10000.0

SDR_PEAK = 100.0
SDR_GAMMA = 2.4

# BT.2100 RGB -> LMS and L'M'S' -> ICtCp, exact integer forms over 4096
RGB2020_TO_LMS = np.array([[1688, 2146, 262], [683, 2951, 462], [99, 309, 3688]]) / 4096
LMS_TO_ICTCP = np.array([[2048, 2048, 0], [6610, -13613, 7003], [17933, -17390, -543]]) / 4096

_D65 = (0.3127, 0.3290)
_BT709 = ((0.640, 0.330), (0.300, 0.600), (0.150, 0.060))
_BT2020 = ((0.708, 0.292), (0.170, 0.797), (0.131, 0.046))


class ClampCounter:
    """Counts samples clamped into range by the transfer functions."""

    def __init__(self):
        self.count = 0

    def reset(self) -> None:
        self.count = 0


clamp_warnings = ClampCounter()


def _clamp(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    tol = 1e-9 * max(1.0, abs(hi))  # rounding slop is clipped silently
    bad = int(np.count_nonzero((x < lo - tol) | (x > hi + tol) | np.isnan(x)))
    clamp_warnings.count += bad
    if bad or x.min(initial=lo) < lo or x.max(initial=hi) > hi:
        x = np.clip(np.nan_to_num(x, nan=lo), lo, hi)
    return x


def pq_eotf(encoded) -> np.ndarray:
    """PQ code value in [0, 1] -> absolute luminance in cd/m^2."""
    e = _clamp(encoded, 0.0, 1.0)
    p = e ** (1.0 / PQ_M2)
    y = (np.maximum(p - PQ_C1, 0.0) / (PQ_C2 - PQ_C3 * p)) ** (1.0 / PQ_M1)
    return PQ_PEAK * y


def pq_oetf(linear) -> np.ndarray:
    """Absolute luminance in cd/m^2 -> PQ code value (inverse EOTF)."""
    y = _clamp(linear, 0.0, PQ_PEAK) / PQ_PEAK
    ym = y ** PQ_M1
    return ((PQ_C1 + PQ_C2 * ym) / (1.0 + PQ_C3 * ym)) ** PQ_M2


def _primaries_to_xyz(primaries, white=_D65) -> np.ndarray:
    def xyz(xy):
        x, y = xy
        return np.array([x / y, 1.0, (1 - x - y) / y])

    m = np.stack([xyz(p) for p in primaries], axis=1)
    s = np.linalg.solve(m, xyz(white))
    return m * s


BT709_TO_XYZ = _primaries_to_xyz(_BT709)
BT2020_TO_XYZ = _primaries_to_xyz(_BT2020)
BT709_TO_BT2020 = np.linalg.solve(BT2020_TO_XYZ, BT709_TO_XYZ)
BT2020_TO_BT709 = np.linalg.inv(BT709_TO_BT2020)


def _check_conditioning() -> None:
    for name, m in (("RGB2020_TO_LMS", RGB2020_TO_LMS), ("LMS_TO_ICTCP", LMS_TO_ICTCP),
                    ("BT709_TO_BT2020", BT709_TO_BT2020)):
        det = np.linalg.det(m)
        if abs(det) < 1e-9:
            raise RuntimeError(f"color matrix {name} is singular (det={det:.3g})")


_check_conditioning()


def apply_matrix(m: np.ndarray, frame) -> np.ndarray:
    """Apply a 3x3 matrix along the channel axis (third from last)."""
    f = np.asarray(frame, dtype=np.float64)
    if f.shape[-3] != 3:
        raise ValueError(f"expected 3 color channels on axis -3, got shape {f.shape}")
    return np.einsum("ij,...jhw->...ihw", m, f)


def sdr_gamma_decode(encoded) -> np.ndarray:
    """Gamma-2.4 SDR code value -> linear light with a 100 cd/m^2 peak."""
    return SDR_PEAK * _clamp(encoded, 0.0, 1.0) ** SDR_GAMMA


def sdr_gamma_encode(linear) -> np.ndarray:
    return (_clamp(linear, 0.0, SDR_PEAK) / SDR_PEAK) ** (1.0 / SDR_GAMMA)


def bt709_to_bt2020(linear) -> np.ndarray:
    return apply_matrix(BT709_TO_BT2020, linear)


def bt2020_to_bt709(linear) -> np.ndarray:
    return apply_matrix(BT2020_TO_BT709, linear)


def bt2020_rgb_to_ictcp(linear) -> np.ndarray:
    """Linear BT.2020 RGB (cd/m^2) -> ICtCp."""
    lms = apply_matrix(RGB2020_TO_LMS, linear)
    return apply_matrix(LMS_TO_ICTCP, pq_oetf(lms))


def pq_frame_to_ictcp(encoded) -> np.ndarray:
    """PQ-encoded BT.2020 frame in [0, 1] -> ICtCp."""
    return bt2020_rgb_to_ictcp(pq_eotf(encoded))
