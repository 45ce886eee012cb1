"""Differentiable operators over (N, C, H, W) tensors.

Each public op computes its forward pass in numpy and registers a closure
returning the input gradients. Private ``_conv_*`` helpers are shared by the
ordinary, transposed and deformable convolutions so their arithmetic agrees.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft

from .tensor import Tensor, _as_tensor, unbroadcast

FFT_MIN_KERNEL = 9  # depthwise kernels at least this wide go through the FFT path


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: tuple[int, int] = (3, 3)
    stride: int = 1
    padding: int | None = None
    groups: int = 1
    bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernel", _pair(self.kernel))
        if self.padding is None:
            kh, kw = self.kernel
            object.__setattr__(self, "padding", (kh - 1) // 2 if kh == kw else 0)
        if self.in_channels % self.groups:
            raise ValueError(f"in_channels={self.in_channels} not divisible by groups={self.groups}")
        if self.out_channels % self.groups:
            raise ValueError(f"out_channels={self.out_channels} not divisible by groups={self.groups}")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        return (self.out_channels, self.in_channels // self.groups, *self.kernel)

    def output_size(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        p, s = self.padding, self.stride
        return (h + 2 * p - kh) // s + 1, (w + 2 * p - kw) // s + 1


def _check_rank4(x: Tensor, name: str = "input") -> None:
    if x.ndim != 4:
        raise ValueError(f"{name} must be rank 4 (N, C, H, W), got shape {x.shape}")


# -- convolution kernels -------------------------------------------------------

def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Columns of shape (N, C, kh*kw, ho, wo) from a padded input."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh * kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i * kw + j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols


def _col2im(gcols: np.ndarray, padded_shape, kh: int, kw: int, stride: int) -> np.ndarray:
    n, c, _, ho, wo = gcols.shape
    gxp = np.zeros(padded_shape, dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, i * kw + j]
    return gxp


def _grouped_matmul(w: np.ndarray, cols: np.ndarray, groups: int) -> np.ndarray:
    """w (O, Cg, K), cols (N, C, K, HW) -> (N, O, HW)."""
    o, cg, k = w.shape
    n, c, _, hw = cols.shape
    wg = w.reshape(groups, o // groups, cg * k)
    cg_cols = cols.reshape(n, groups, cg * k, hw)
    return np.matmul(wg, cg_cols).reshape(n, o, hw)


def _grouped_matmul_t(w: np.ndarray, g: np.ndarray, groups: int) -> np.ndarray:
    """Adjoint of ``_grouped_matmul`` w.r.t. cols: -> (N, C, K, HW)."""
    o, cg, k = w.shape
    n, _, hw = g.shape
    wg = w.reshape(groups, o // groups, cg * k)
    gg = g.reshape(n, groups, o // groups, hw)
    return np.matmul(wg.transpose(0, 2, 1), gg).reshape(n, groups * cg, k, hw)


def _grouped_weight_grad(g: np.ndarray, cols: np.ndarray, groups: int, wshape) -> np.ndarray:
    o, cg, kh, kw = wshape
    n, _, hw = g.shape
    k = kh * kw
    gg = g.reshape(n, groups, o // groups, hw)
    cc = cols.reshape(n, groups, cg * k, hw)
    gw = np.matmul(gg, cc.transpose(0, 1, 3, 2)).sum(axis=0, dtype=np.float64)
    return gw.reshape(wshape)


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int, groups: int):
    n, c, h, wd = x.shape
    o, cg, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"kernel {kh}x{kw} with padding {padding} does not fit input {h}x{wd}")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    out = _grouped_matmul(w.reshape(o, cg, kh * kw), cols.reshape(n, c, kh * kw, ho * wo), groups)
    return out.reshape(n, o, ho, wo), cols, xp.shape


def _conv_input_grad(g: np.ndarray, w: np.ndarray, padded_shape, stride: int, padding: int, groups: int):
    n, o, ho, wo = g.shape
    _, cg, kh, kw = w.shape
    c = padded_shape[1]
    gcols = _grouped_matmul_t(w.reshape(o, cg, kh * kw), g.reshape(n, o, ho * wo), groups)
    gxp = _col2im(gcols.reshape(n, c, kh * kw, ho, wo), padded_shape, kh, kw, stride)
    if padding:
        gxp = gxp[:, :, padding:padded_shape[2] - padding, padding:padded_shape[3] - padding]
    return gxp


def _conv_weight_grad(g: np.ndarray, cols: np.ndarray, wshape, groups: int) -> np.ndarray:
    n, o, ho, wo = g.shape
    c = cols.shape[1]
    k = wshape[2] * wshape[3]
    return _grouped_weight_grad(g.reshape(n, o, ho * wo), cols.reshape(n, c, k, ho * wo), groups, wshape)


# -- public conv ops -------------------------------------------------------------

def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, spec: ConvSpec | None = None,
           *, stride: int = 1, padding: int | None = None, groups: int = 1) -> Tensor:
    """Cross-correlation, as in every deep-learning framework."""
    _check_rank4(x)
    if spec is not None:
        stride, padding, groups = spec.stride, spec.padding, spec.groups
        if tuple(weight.shape) != spec.weight_shape:
            raise ValueError(f"weight shape {weight.shape} does not match spec {spec.weight_shape}")
        if x.shape[1] != spec.in_channels:
            raise ValueError(f"input has {x.shape[1]} channels, spec expects in_channels={spec.in_channels}")
    if weight.ndim != 4:
        raise ValueError(f"weight must be (out, in/groups, kh, kw), got {weight.shape}")
    o, cg, kh, kw = weight.shape
    if padding is None:
        padding = (kh - 1) // 2
    if x.shape[1] != cg * groups:
        raise ValueError(f"input channels {x.shape[1]} != weight in-channels {cg} x groups {groups}")
    if o % groups:
        raise ValueError(f"out channels {o} not divisible by groups {groups}")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"bias shape {bias.shape} does not match out channels {o}")

    out, cols, padded_shape = _conv_forward(x.data, weight.data, stride, padding, groups)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gx = _conv_input_grad(g, weight.data, padded_shape, stride, padding, groups) if x.requires_grad else None
        gw = _conv_weight_grad(g, cols, weight.shape, groups).astype(weight.data.dtype) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.data.dtype))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


def transposed_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, stride: int = 2,
                      padding: int = 0, output_padding: int = 0, groups: int = 1,
                      output_size: tuple[int, int] | None = None) -> Tensor:
    """Gradient-of-convolution. ``weight`` is (in, out/groups, kh, kw).

    Output extent per axis is ``(in - 1) * stride - 2 * padding + k + output_padding``;
    if ``output_size`` is given it must agree with that formula.
    """
    _check_rank4(x)
    cin, og, kh, kw = weight.shape
    if x.shape[1] != cin:
        raise ValueError(f"input channels {x.shape[1]} != transposed-conv weight in-channels {cin}")
    if not 0 <= output_padding < stride:
        raise ValueError(f"output_padding={output_padding} must be in [0, stride={stride})")
    n, _, h, w = x.shape
    ho = (h - 1) * stride - 2 * padding + kh + output_padding
    wo = (w - 1) * stride - 2 * padding + kw + output_padding
    if output_size is not None and tuple(output_size) != (ho, wo):
        raise ValueError(f"transposed conv yields {ho}x{wo}, caller expected {tuple(output_size)}")
    if ho < 1 or wo < 1:
        raise ValueError(f"transposed conv output {ho}x{wo} is empty")
    # as a convolution: weight (cin, og, ...) maps og*groups channels -> cin channels
    padded_shape = (n, og * groups, ho + 2 * padding, wo + 2 * padding)
    out = _conv_input_grad(x.data, weight.data, padded_shape, stride, padding, groups)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gp = np.pad(g, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else g
        cols = _im2col(gp, kh, kw, stride, h, w)
        gx = None
        if x.requires_grad:
            gx = _grouped_matmul(weight.data.reshape(cin, og, kh * kw),
                                 cols.reshape(n, og * groups, kh * kw, h * w), groups).reshape(x.shape)
        gw = None
        if weight.requires_grad:
            gw = _conv_weight_grad(x.data, cols, weight.shape, groups).astype(weight.data.dtype)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.data.dtype))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "transposed_conv2d")


def _dw_direct(xp: np.ndarray, w: np.ndarray, h: int, wd: int) -> np.ndarray:
    k = w.shape[-1]
    out = np.zeros(xp.shape[:2] + (h, wd), dtype=xp.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + h, j:j + wd] * w[..., i, j][..., None, None]
    return out


def _dw_fft_shape(h: int, wd: int, k: int) -> tuple[int, int]:
    return sfft.next_fast_len(h + k - 1, real=True), sfft.next_fast_len(wd + k - 1, real=True)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel k x k convolution with padding (k-1)/2.

    ``weight`` is (C, k, k) shared over the batch, or (N, C, k, k) with one
    kernel set per sample (used by dynamic convolution).
    """
    _check_rank4(x)
    k = weight.shape[-1]
    if weight.shape[-2] != k:
        raise ValueError(f"depthwise kernel must be square, got {weight.shape[-2:]}")
    if k % 2 == 0:
        raise ValueError(f"depthwise kernel size must be odd for symmetric padding, got {k}")
    n, c, h, wd = x.shape
    per_sample = weight.ndim == 4
    expected = (n, c, k, k) if per_sample else (c, k, k)
    if tuple(weight.shape) != expected:
        raise ValueError(f"depthwise weight shape {weight.shape}, expected {expected} for input {x.shape}")
    p = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    use_fft = k >= FFT_MIN_KERNEL
    if use_fft:
        fs = _dw_fft_shape(h, wd, k)
        xf = sfft.rfft2(xp, s=fs)
        wf = sfft.rfft2(weight.data[..., ::-1, ::-1], s=fs)
        out = sfft.irfft2(xf * wf, s=fs)[..., k - 1:k - 1 + h, k - 1:k - 1 + wd].astype(x.data.dtype)
    else:
        out = _dw_direct(xp, weight.data, h, wd)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gx = gw = None
        if use_fft:
            gf = sfft.rfft2(g, s=fs)
            if x.requires_grad:
                full = sfft.irfft2(gf * sfft.rfft2(weight.data, s=fs), s=fs)
                gx = full[..., p:p + h, p:p + wd].astype(x.data.dtype)
            if weight.requires_grad:
                corr = sfft.irfft2(xf * np.conj(gf), s=fs)[..., :k, :k]
                gw = corr if per_sample else corr.sum(axis=0)
                gw = gw.astype(weight.data.dtype)
        else:
            if x.requires_grad:
                gxp = np.zeros_like(xp)
                for i in range(k):
                    for j in range(k):
                        gxp[:, :, i:i + h, j:j + wd] += g * weight.data[..., i, j][..., None, None]
                gx = gxp[:, :, p:p + h, p:p + wd]
            if weight.requires_grad:
                gw = np.empty((n, c, k, k), dtype=np.float64)
                for i in range(k):
                    for j in range(k):
                        gw[:, :, i, j] = np.einsum("nchw,nchw->nc", g, xp[:, :, i:i + h, j:j + wd],
                                                   dtype=np.float64)
                gw = (gw if per_sample else gw.sum(axis=0)).astype(weight.data.dtype)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.data.dtype))
        return tuple(grads)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, f"depthwise{k}x{k}")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return Tensor._make(s, (x,), backward, "softmax")


def mix_kernels(attention: Tensor, kernels: Tensor) -> Tensor:
    """attention (N, K) x kernels (K, C, k, k) -> per-sample kernels (N, C, k, k)."""
    a, w = attention.data, kernels.data
    kk = w.shape[0]
    flat = w.reshape(kk, -1)
    out = (a @ flat).reshape((a.shape[0],) + w.shape[1:])

    def backward(g):
        gflat = g.reshape(g.shape[0], -1)
        ga = gflat @ flat.T if attention.requires_grad else None
        gk = (a.T @ gflat).reshape(w.shape) if kernels.requires_grad else None
        return ga, gk

    return Tensor._make(out, (attention, kernels), backward, "mix_kernels")


def dynamic_conv2d(x: Tensor, candidate_kernels: Tensor, attention_logits: Tensor,
                   bias: Tensor | None = None) -> Tensor:
    """Depthwise conv whose kernel is a softmax-weighted mix of K candidates, per sample.

    ``candidate_kernels`` is (K, C, k, k); ``attention_logits`` is (N, K).
    """
    if candidate_kernels.ndim != 4 or candidate_kernels.shape[0] == 0:
        raise ValueError(f"dynamic conv needs K >= 1 candidate kernels shaped (K, C, k, k), got {candidate_kernels.shape}")
    if attention_logits.shape != (x.shape[0], candidate_kernels.shape[0]):
        raise ValueError(f"attention logits {attention_logits.shape} != (batch, K)="
                         f"{(x.shape[0], candidate_kernels.shape[0])}")
    attn = softmax(attention_logits, axis=1)
    return depthwise_conv2d(x, mix_kernels(attn, candidate_kernels), bias)


# -- deformable convolution -----------------------------------------------------------

def _bilinear_taps(offsets: np.ndarray, h: int, w: int, kh: int, kw: int, stride: int, padding: int,
                   deform_groups: int, ho: int, wo: int):
    """Sampling corners for every (group, tap, output position)."""
    n = offsets.shape[0]
    k = kh * kw
    off = offsets.reshape(n, deform_groups, k, 2, ho, wo).astype(np.float64)
    ti, tj = np.divmod(np.arange(k), kw)
    base_y = (np.arange(ho) * stride - padding)[None, :, None] + ti[:, None, None]
    base_x = (np.arange(wo) * stride - padding)[None, None, :] + tj[:, None, None]
    py = base_y[None, None] + off[:, :, :, 0]
    px = base_x[None, None] + off[:, :, :, 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    corners = []
    for dy, dx, wgt, dwy, dwx in (
        (0, 0, (1 - ly) * (1 - lx), -(1 - lx), -(1 - ly)),
        (0, 1, (1 - ly) * lx, -lx, (1 - ly)),
        (1, 0, ly * (1 - lx), (1 - lx), -ly),
        (1, 1, ly * lx, lx, ly),
    ):
        yy = y0 + dy
        xx = x0 + dx
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        idx = np.where(valid, yy * w + xx, 0)
        corners.append((idx, valid, wgt * valid, dwy * valid, dwx * valid))
    return corners


def deformable_conv2d(x: Tensor, offsets: Tensor, weight: Tensor, bias: Tensor | None = None, *,
                      stride: int = 1, padding: int | None = None, deform_groups: int = 1) -> Tensor:
    """Convolution whose taps sample ``x`` bilinearly at base grid + offset.

    ``offsets`` has 2*kh*kw*deform_groups channels laid out as
    (group, tap, [dy, dx]); samples outside the image read 0.
    """
    _check_rank4(x)
    _check_rank4(offsets, "offsets")
    o, c, kh, kw = weight.shape
    n, cx, h, w = x.shape
    if cx != c:
        raise ValueError(f"input channels {cx} != weight in-channels {c}")
    if padding is None:
        padding = (kh - 1) // 2
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    k = kh * kw
    need = 2 * k * deform_groups
    if offsets.shape[1] != need:
        raise ValueError(f"offset field has {offsets.shape[1]} channels, expected 2*{kh}*{kw}*{deform_groups}={need}")
    if offsets.shape[2:] != (ho, wo) or offsets.shape[0] != n:
        raise ValueError(f"offset field extents {offsets.shape} do not match output (N={n}, {ho}x{wo})")
    if c % deform_groups:
        raise ValueError(f"channels {c} not divisible by deform_groups {deform_groups}")
    cg = c // deform_groups

    corners = _bilinear_taps(offsets.data, h, w, kh, kw, stride, padding, deform_groups, ho, wo)
    xg = x.data.reshape(n, deform_groups, cg, h * w)
    gathered = []
    cols = np.zeros((n, deform_groups, cg, k * ho * wo), dtype=np.float64)
    for idx, valid, wgt, _, _ in corners:
        flat_idx = np.broadcast_to(idx.reshape(n, deform_groups, 1, -1), cols.shape)
        vals = np.take_along_axis(xg, flat_idx, axis=3)
        gathered.append(vals)
        cols += vals * wgt.reshape(n, deform_groups, 1, -1)
    cols = cols.astype(x.data.dtype).reshape(n, c, k, ho * wo)
    out = _grouped_matmul(weight.data.reshape(o, c, k), cols, 1).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        g2 = g.reshape(n, o, ho * wo)
        gcols = _grouped_matmul_t(weight.data.reshape(o, c, k), g2, 1).reshape(n, deform_groups, cg, -1)
        gx = goff = gw = None
        if x.requires_grad:
            base = ((np.arange(n)[:, None, None] * deform_groups + np.arange(deform_groups)[None, :, None])
                    * cg + np.arange(cg)[None, None, :]) * (h * w)
            acc = np.zeros(n * c * h * w, dtype=np.float64)
            for idx, _, wgt, _, _ in corners:
                flat = base[..., None] + idx.reshape(n, deform_groups, 1, -1)
                contrib = gcols * wgt.reshape(n, deform_groups, 1, -1)
                acc += np.bincount(flat.ravel(), weights=contrib.ravel(), minlength=acc.size)
            gx = acc.reshape(x.shape).astype(x.data.dtype)
        if offsets.requires_grad:
            gy = np.zeros((n, deform_groups, k * ho * wo))
            gxo = np.zeros_like(gy)
            for (idx, _, _, dwy, dwx), vals in zip(corners, gathered):
                s = (gcols * vals).sum(axis=2, dtype=np.float64)
                gy += s * dwy.reshape(n, deform_groups, -1)
                gxo += s * dwx.reshape(n, deform_groups, -1)
            goff = np.stack([gy.reshape(n, deform_groups, k, ho, wo), gxo.reshape(n, deform_groups, k, ho, wo)],
                            axis=3).reshape(offsets.shape).astype(offsets.data.dtype)
        if weight.requires_grad:
            gw = _grouped_weight_grad(g2, cols, 1, weight.shape).astype(weight.data.dtype)
        grads = [gx, goff, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3), dtype=np.float64).astype(bias.data.dtype))
        return tuple(grads)

    parents = (x, offsets, weight) if bias is None else (x, offsets, weight, bias)
    return Tensor._make(out, parents, backward, "deformable_conv2d")


# -- pooling ---------------------------------------------------------------------------

def pool_avg(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Average pooling; zero padding counts toward the divisor."""
    _check_rank4(x)
    stride = window if stride is None else stride
    n, c, h, w = x.shape
    if window > h + 2 * padding or window > w + 2 * padding:
        raise ValueError(f"pool window {window} larger than padded extents {h + 2 * padding}x{w + 2 * padding}")
    ho = (h + 2 * padding - window) // stride + 1
    wo = (w + 2 * padding - window) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    acc = np.zeros((n, c, ho, wo), dtype=np.float64)
    for i in range(window):
        for j in range(window):
            acc += xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    area = window * window
    out = (acc / area).astype(x.data.dtype)

    def backward(g):
        gxp = np.zeros(xp.shape, dtype=np.float64)
        ga = g / area
        for i in range(window):
            for j in range(window):
                gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += ga
        if padding:
            gxp = gxp[:, :, padding:padding + h, padding:padding + w]
        return (gxp.astype(x.data.dtype),)

    return Tensor._make(out, (x,), backward, "pool_avg")


def pool_global(x: Tensor) -> Tensor:
    _check_rank4(x)
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3), keepdims=True, dtype=np.float64).astype(x.data.dtype)

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.data.dtype),)

    return Tensor._make(out, (x,), backward, "pool_global")


# -- activations / resampling / normalization -------------------------------------------------

def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor._make(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope).astype(x.data.dtype)
    return Tensor._make(x.data * factor, (x,), lambda g: (g * factor,), "leaky_relu")


def _linear_resize_matrix(n_in: int, n_out: int, dtype) -> np.ndarray:
    """Half-pixel-centred linear interpolation (align_corners=False)."""
    m = np.zeros((n_out, n_in), dtype=np.float64)
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = pos - lo
    m[np.arange(n_out), lo] += 1 - frac
    m[np.arange(n_out), hi] += frac
    return m.astype(dtype)


def resize_bilinear(x: Tensor, size: tuple[int, int]) -> Tensor:
    _check_rank4(x)
    ah = _linear_resize_matrix(x.shape[2], size[0], x.data.dtype)
    aw = _linear_resize_matrix(x.shape[3], size[1], x.data.dtype)
    out = ah @ x.data @ aw.T
    return Tensor._make(out, (x,), lambda g: (ah.T @ g @ aw,), "resize_bilinear")


def upsample(x: Tensor, factor: int, mode: str = "nearest") -> Tensor:
    if factor <= 0:
        raise ValueError(f"upsample factor must be positive, got {factor}")
    _check_rank4(x)
    n, c, h, w = x.shape
    if mode == "bilinear":
        return resize_bilinear(x, (h * factor, w * factor))
    if mode != "nearest":
        raise ValueError(f"unknown upsample mode {mode!r}; use 'nearest' or 'bilinear'")
    out = x.data.repeat(factor, axis=2).repeat(factor, axis=3)

    def backward(g):
        return (g.reshape(n, c, h, factor, w, factor).sum(axis=(3, 5)),)

    return Tensor._make(out, (x,), backward, "upsample_nearest")


def normalize(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Instance normalization: zero mean, unit variance per (sample, channel)."""
    _check_rank4(x)
    d = x.data.astype(np.float64)
    mu = d.mean(axis=(2, 3), keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    def backward(g):
        g64 = g.astype(np.float64)
        gm = g64.mean(axis=(2, 3), keepdims=True)
        gxm = (g64 * xhat).mean(axis=(2, 3), keepdims=True)
        return ((inv * (g64 - gm - xhat * gxm)).astype(x.data.dtype),)

    return Tensor._make(xhat.astype(x.data.dtype), (x,), backward, "normalize")


def affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """x * scale + shift with broadcasting; one node so graphs can be inspected."""
    x_, s_, b_ = x, _as_tensor(scale, x), _as_tensor(shift, x)
    try:
        out = x_.data * s_.data + b_.data
    except ValueError as exc:
        raise ValueError(f"modulation extents incompatible: features {x.shape}, scale {s_.shape}, "
                         f"shift {b_.shape}") from exc
    if out.shape != x.shape:
        raise ValueError(f"modulation would change feature extents {x.shape} -> {out.shape}")

    def backward(g):
        gx = unbroadcast(g * s_.data, x_.shape).astype(x_.data.dtype)
        gs = unbroadcast(g * x_.data, s_.shape).astype(s_.data.dtype) if s_.requires_grad else None
        gb = unbroadcast(g, b_.shape).astype(b_.data.dtype) if b_.requires_grad else None
        return gx, gs, gb

    return Tensor._make(out, (x_, s_, b_), backward, "apply_modulation")


def l1_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean absolute error; the subgradient at exact ties is 0."""
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss shape mismatch: pred {pred.shape} vs target {target.shape}")
    diff = pred.data.astype(np.float64) - target.data.astype(np.float64)
    n = diff.size
    out = np.asarray(np.abs(diff).mean(), dtype=pred.data.dtype).reshape(())
    sign = np.sign(diff)

    def backward(g):
        gp = (g * sign / n).astype(pred.data.dtype)
        return gp, (-gp if target.requires_grad else None)

    return Tensor._make(out, (pred, target), backward, "l1_loss")
