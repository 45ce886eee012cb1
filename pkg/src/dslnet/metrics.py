"""Frame quality metrics: PSNR, SR-SIM and Delta E_ITP, plus report formatting.

PSNR and SR-SIM are computed on the encoded [0, 1] values; Delta E_ITP goes
through linear light and ICtCp.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage, signal

from . import color

PSNR_CAP = 100.0

# SR-SIM constants, as in Zhang & Li, "SR-SIM: a fast and high performance IQA
# index based on spectral residual" (ICIP 2012) and its reference MATLAB code.
SRSIM_C1 = 0.40  # saliency similarity stabilizer
SRSIM_C2 = 225.0  # gradient similarity stabilizer (8-bit code-value scale)
SRSIM_ALPHA = 0.50  # gradient term exponent
SRSIM_SCALE = 255.0  # [0, 1] frames are mapped to the 8-bit range the constants assume
SRSIM_SR_SCALE = 0.25  # saliency is computed at quarter resolution
SRSIM_SR_AVG = 3  # log-amplitude smoothing window
SRSIM_GAUSS_SIZE = 10
SRSIM_GAUSS_SIGMA = 3.8
SRSIM_LOG_FLOOR = 1e-12  # keeps log|FFT| finite for flat images
SRSIM_MIN_EXTENT = 32
SRSIM_SCHARR_X = np.array([[3, 0, -3], [10, 0, -10], [3, 0, -3]]) / 16.0
SRSIM_SCHARR_Y = SRSIM_SCHARR_X.T.copy()
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


def _pair_check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frame shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``inf`` for identical frames."""
    a, b = _pair_check(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


# -- SR-SIM --------------------------------------------------------------------------

def _cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return ((1.5 * ax3 - 2.5 * ax2 + 1) * (ax <= 1)
            + (-0.5 * ax3 + 2.5 * ax2 - 4 * ax + 2) * ((ax > 1) & (ax <= 2)))


def _resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Antialiased bicubic interpolation weights with symmetric boundary (imresize rules)."""
    scale = n_out / n_in
    width = 4.0
    if scale < 1:
        kernel = lambda x: scale * _cubic(scale * x)
        width /= scale
    else:
        kernel = _cubic
    x = np.arange(1, n_out + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kernel(u[:, None] - idx)
    w /= w.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(n_in), np.arange(n_in)[::-1]])
    src = mirror[(idx.astype(np.int64) - 1) % mirror.size]
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.repeat(np.arange(n_out), taps), src.ravel()), w.ravel())
    return m


def imresize(img: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return _resize_matrix(img.shape[0], shape[0]) @ img @ _resize_matrix(img.shape[1], shape[1]).T


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    r = (np.arange(size) - (size - 1) / 2.0)
    g = np.exp(-(r[:, None] ** 2 + r[None, :] ** 2) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_same_zero(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Zero-padded 'same' correlation with the anchor at floor((k+1)/2) (1-based)."""
    kh, kw = kernel.shape
    top, left = (kh + 1) // 2 - 1, (kw + 1) // 2 - 1
    padded = np.pad(img, ((top, kh - 1 - top), (left, kw - 1 - left)))
    return signal.correlate2d(padded, kernel, mode="valid")


def _mat2gray(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.ones_like(x)  # flat map: uniform saliency
    return (x - lo) / (hi - lo)


def spectral_residual_saliency(y: np.ndarray) -> np.ndarray:
    small_shape = (int(math.ceil(y.shape[0] * SRSIM_SR_SCALE)), int(math.ceil(y.shape[1] * SRSIM_SR_SCALE)))
    small = imresize(y, small_shape)
    spectrum = np.fft.fft2(small)
    log_amp = np.log(np.maximum(np.abs(spectrum), SRSIM_LOG_FLOOR))
    phase = np.angle(spectrum)
    residual = log_amp - ndimage.uniform_filter(log_amp, SRSIM_SR_AVG, mode="nearest")
    sal = np.abs(np.fft.ifft2(np.exp(residual + 1j * phase))) ** 2
    sal = _mat2gray(_filter_same_zero(sal, _gaussian_kernel(SRSIM_GAUSS_SIZE, SRSIM_GAUSS_SIGMA)))
    return imresize(sal, y.shape)


def _luma(frame: np.ndarray) -> np.ndarray:
    if frame.ndim == 2:
        return frame
    if frame.ndim == 3 and frame.shape[0] == 3:
        return sum(w * frame[i] for i, w in enumerate(LUMA_WEIGHTS))
    raise ValueError(f"expected (3, H, W) or (H, W) frame, got {frame.shape}")


def _srsim_prepare(frame: np.ndarray) -> np.ndarray:
    y = _luma(frame) * SRSIM_SCALE
    rows, cols = y.shape
    f = max(1, round(min(rows, cols) / 256))
    if f > 1:
        full = signal.convolve2d(y, np.full((f, f), 1.0 / (f * f)), mode="full")
        s = f // 2
        y = full[s:s + rows, s:s + cols][::f, ::f]
    return y


def srsim(a, b) -> float:
    """Spectral-residual-based similarity of two frames; 1.0 for identical frames.

    The index is symmetric in its arguments.
    """
    a, b = _pair_check(a, b)
    if min(a.shape[-2:]) < SRSIM_MIN_EXTENT:
        raise ValueError(f"SR-SIM needs frames of at least {SRSIM_MIN_EXTENT}x{SRSIM_MIN_EXTENT}, got {a.shape}")
    y1, y2 = _srsim_prepare(a), _srsim_prepare(b)
    vs1, vs2 = spectral_residual_saliency(y1), spectral_residual_saliency(y2)
    g1 = np.hypot(signal.convolve2d(y1, SRSIM_SCHARR_X, mode="same"), signal.convolve2d(y1, SRSIM_SCHARR_Y, mode="same"))
    g2 = np.hypot(signal.convolve2d(y2, SRSIM_SCHARR_X, mode="same"), signal.convolve2d(y2, SRSIM_SCHARR_Y, mode="same"))
    vs_sim = (2 * vs1 * vs2 + SRSIM_C1) / (vs1 * vs1 + vs2 * vs2 + SRSIM_C1)
    g_sim = (2 * g1 * g2 + SRSIM_C2) / (g1 * g1 + g2 * g2 + SRSIM_C2)
    weight = np.maximum(vs1, vs2)
    return float(np.sum(vs_sim * g_sim ** SRSIM_ALPHA * weight) / np.sum(weight))


# -- Delta E_ITP ------------------------------------------------------------------------

def delta_e_itp_map(a, b) -> np.ndarray:
    """Per-pixel 720 * ||(dI, dT, dP)|| with T = Ct / 2, for PQ/BT.2020 frames."""
    a, b = _pair_check(a, b)
    ia, ib = color.pq_frame_to_ictcp(a), color.pq_frame_to_ictcp(b)
    d = ia - ib
    d[..., 1, :, :] *= 0.5
    return 720.0 * np.sqrt(np.sum(d * d, axis=-3))


def delta_e_itp(a, b) -> float:
    return float(np.mean(delta_e_itp_map(a, b)))


# -- reports --------------------------------------------------------------------------------

@dataclass
class FrameScore:
    index: int
    psnr: float
    srsim: float
    delta_e_itp: float
    name: str = ""

    @property
    def psnr_report(self) -> float:
        return min(self.psnr, PSNR_CAP)


@dataclass
class MetricReport:
    per_frame: list[FrameScore] = field(default_factory=list)

    @property
    def psnr_db(self) -> float:
        return float(np.mean([f.psnr_report for f in self.per_frame])) if self.per_frame else math.nan

    @property
    def srsim(self) -> float:
        return float(np.mean([f.srsim for f in self.per_frame])) if self.per_frame else math.nan

    @property
    def delta_e_itp(self) -> float:
        return float(np.mean([f.delta_e_itp for f in self.per_frame])) if self.per_frame else math.nan

    def add(self, pred, ref, name: str = "") -> FrameScore:
        score = FrameScore(len(self.per_frame), psnr(pred, ref), srsim(pred, ref), delta_e_itp(pred, ref), name)
        self.per_frame.append(score)
        return score

    def lines(self) -> list[str]:
        """One JSON object per frame, then an aggregate footer."""
        out = [json.dumps({"index": f.index, "name": f.name, "psnr": round(f.psnr_report, 6),
                           "srsim": round(f.srsim, 8), "deitp": round(f.delta_e_itp, 6)})
               for f in self.per_frame]
        out.append(json.dumps({"aggregate": {"frames": len(self.per_frame), "psnr": round(self.psnr_db, 6),
                                             "srsim": round(self.srsim, 8), "deitp": round(self.delta_e_itp, 6)}}))
        return out

    def to_text(self) -> str:
        return "\n".join(self.lines()) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        report = cls()
        for line in text.splitlines():
            rec = json.loads(line)
            if "aggregate" in rec:
                continue
            report.per_frame.append(FrameScore(rec["index"], rec["psnr"], rec["srsim"], rec["deitp"], rec["name"]))
        return report


def score_frames(preds, refs, names=None) -> MetricReport:
    report = MetricReport()
    names = names or [""] * len(preds)
    for p, r, n in zip(preds, refs, names):
        report.add(p, r, n)
    return report
