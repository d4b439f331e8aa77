"""Numpy kernels for the network primitives.

Every primitive comes as a pure forward function plus a ``*_backward``
companion that maps the output gradient to input gradients. All arrays use
the (N, C, H, W) layout. The autodiff graph in :mod:`hullsight.autodiff`
dispatches to these; they are also usable on their own.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Raised when operand extents are incompatible."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel: Tuple[int, int] = (3, 3)
    stride: int = 1
    padding: Optional[int] = None
    bias: bool = True

    def __post_init__(self):
        if isinstance(self.kernel, int):
            object.__setattr__(self, "kernel", (self.kernel, self.kernel))
        if self.in_channels < 1 or self.out_channels < 1:
            raise ValueError("channel counts must be positive")
        if min(self.kernel) < 1 or self.stride < 1:
            raise ValueError("kernel and stride must be positive")
        if self.padding is not None and self.padding < 0:
            raise ValueError("padding must be non-negative")

    @property
    def pads(self) -> Tuple[int, int]:
        if self.padding is None:
            return self.kernel[0] // 2, self.kernel[1] // 2
        return self.padding, self.padding

    def output_hw(self, h: int, w: int) -> Tuple[int, int]:
        kh, kw = self.kernel
        ph, pw = self.pads
        if h + 2 * ph < kh or w + 2 * pw < kw:
            raise ShapeError(
                f"kernel {kh}x{kw} larger than padded input {h + 2 * ph}x{w + 2 * pw}")
        return (h + 2 * ph - kh) // self.stride + 1, (w + 2 * pw - kw) // self.stride + 1


def _check4(name: str, a: np.ndarray) -> None:
    if a.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {a.shape}")


def _pad(x: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def _windows(x: np.ndarray, spec: ConvSpec) -> np.ndarray:
    """Strided view of shape (N, C, Ho, Wo, kh, kw) over the padded input."""
    ph, pw = spec.pads
    s = spec.stride
    win = sliding_window_view(_pad(x, ph, pw), spec.kernel, axis=(2, 3))
    return win[:, :, ::s, ::s]


# ---------------------------------------------------------------------------
# standard convolution


def conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], spec: ConvSpec) -> np.ndarray:
    """Cross-correlation with zero padding (no kernel flip)."""
    _check4("x", x)
    if w.shape != (spec.out_channels, spec.in_channels) + tuple(spec.kernel):
        raise ShapeError(f"weight shape {w.shape} does not match {spec}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {spec.in_channels}")
    spec.output_hw(x.shape[2], x.shape[3])
    win = _windows(x, spec)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec,
                    has_bias: bool = True):
    """Return (grad_x, grad_w, grad_b) for :func:`conv2d`."""
    kh, kw = spec.kernel
    ph, pw = spec.pads
    s = spec.stride
    n, _, ho, wo = grad.shape
    win = _windows(x, spec)
    gw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
    gxp = np.zeros((x.shape[0], x.shape[1], x.shape[2] + 2 * ph, x.shape[3] + 2 * pw),
                   dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            contrib = np.tensordot(w[:, :, i, j], grad, axes=([0], [1]))  # (C, N, Ho, Wo)
            gxp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] += contrib.transpose(1, 0, 2, 3)
    gx = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
    gb = grad.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(gx), gw, gb


# ---------------------------------------------------------------------------
# depthwise convolution


def _check_depthwise(x, w, spec):
    _check4("x", x)
    c = x.shape[1]
    if w.shape != (c, 1) + tuple(spec.kernel):
        raise ShapeError(f"depthwise weight shape {w.shape} does not match input channels {c}")
    spec.output_hw(x.shape[2], x.shape[3])


def depthwise_conv2d(x: np.ndarray, w: np.ndarray, b: Optional[np.ndarray], spec: ConvSpec) -> np.ndarray:
    """Per-channel cross-correlation; ``w`` has shape (C, 1, kh, kw)."""
    _check_depthwise(x, w, spec)
    kh, kw = spec.kernel
    ph, pw = spec.pads
    s = spec.stride
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    xp = _pad(x, ph, pw)
    out = np.zeros((x.shape[0], x.shape[1], ho, wo), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            out += xp[:, :, i:i + s * (ho - 1) + 1:s, j:j + s * (wo - 1) + 1:s] * w[None, :, 0, i, j, None, None]
    if b is not None:
        out += b.reshape(1, -1, 1, 1)
    return out


def depthwise_conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, spec: ConvSpec,
                              has_bias: bool = True):
    kh, kw = spec.kernel
    ph, pw = spec.pads
    s = spec.stride
    _, _, ho, wo = grad.shape
    xp = _pad(x, ph, pw)
    gxp = np.zeros(xp.shape, dtype=grad.dtype)
    gw = np.zeros(w.shape, dtype=grad.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = (slice(None), slice(None), slice(i, i + s * (ho - 1) + 1, s), slice(j, j + s * (wo - 1) + 1, s))
            gw[:, 0, i, j] = (grad * xp[sl]).sum(axis=(0, 2, 3))
            gxp[sl] += grad * w[None, :, 0, i, j, None, None]
    gx = gxp[:, :, ph:ph + x.shape[2], pw:pw + x.shape[3]]
    gb = grad.sum(axis=(0, 2, 3)) if has_bias else None
    return np.ascontiguousarray(gx), gw, gb


# ---------------------------------------------------------------------------
# deformable convolution (offsets only, no modulation)


@dataclass
class _DeformCache:
    cols: np.ndarray          # (N, C, K, Ho, Wo) bilinear samples
    idx: list                 # 4 corner flat indices, each (N, K, Ho, Wo)
    cw: list                  # 4 corner weights incl. validity mask
    vals: list                # 4 corner values, each (N, C, K, Ho, Wo)
    ly: np.ndarray
    lx: np.ndarray
    masks: list


def _deform_sample(x: np.ndarray, offsets: np.ndarray, spec: ConvSpec) -> _DeformCache:
    n, c, h, w_ = x.shape
    kh, kw = spec.kernel
    ph, pw = spec.pads
    s = spec.stride
    ho, wo = spec.output_hw(h, w_)
    k = kh * kw
    off = offsets.reshape(n, k, 2, ho, wo)
    ti, tj = np.divmod(np.arange(k), kw)
    base_y = (np.arange(ho) * s - ph)[None, None, :, None] + ti[None, :, None, None]
    base_x = (np.arange(wo) * s - pw)[None, None, None, :] + tj[None, :, None, None]
    py = base_y + off[:, :, 0]
    px = base_x + off[:, :, 1]
    y0 = np.floor(py)
    x0 = np.floor(px)
    ly = py - y0
    lx = px - x0
    y0 = y0.astype(np.int64)
    x0 = x0.astype(np.int64)
    xf = x.reshape(n, c, h * w_)
    corners = ((0, 0, (1 - ly) * (1 - lx)), (0, 1, (1 - ly) * lx),
               (1, 0, ly * (1 - lx)), (1, 1, ly * lx))
    cols = np.zeros((n, c, k, ho, wo), dtype=np.result_type(x, offsets))
    idxs, cws, vals, masks = [], [], [], []
    for dy, dx, wt in corners:
        yy = y0 + dy
        xx = x0 + dx
        mask = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w_)
        flat = np.where(mask, yy * w_ + xx, 0)
        v = np.take_along_axis(xf, flat.reshape(n, 1, -1), axis=2).reshape(n, c, k, ho, wo)
        v = v * mask[:, None]
        cw = wt * mask
        cols += v * cw[:, None]
        idxs.append(flat)
        cws.append(cw)
        vals.append(v)
        masks.append(mask)
    return _DeformCache(cols, idxs, cws, vals, ly, lx, masks)


def _check_deform(x, w, offsets, spec):
    _check4("x", x)
    _check4("offsets", offsets)
    kh, kw = spec.kernel
    if offsets.shape[1] != 2 * kh * kw:
        raise ShapeError(f"offsets need {2 * kh * kw} channels, got {offsets.shape[1]}")
    if w.shape != (spec.out_channels, spec.in_channels, kh, kw):
        raise ShapeError(f"weight shape {w.shape} does not match {spec}")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"input has {x.shape[1]} channels, conv expects {spec.in_channels}")
    ho, wo = spec.output_hw(x.shape[2], x.shape[3])
    if offsets.shape != (x.shape[0], 2 * kh * kw, ho, wo):
        raise ShapeError(f"offsets shape {offsets.shape} != {(x.shape[0], 2 * kh * kw, ho, wo)}")


def deform_conv2d(x: np.ndarray, w: np.ndarray, offsets: np.ndarray, b: Optional[np.ndarray],
                  spec: ConvSpec, return_cache: bool = False):
    """Deformable convolution with bilinear sampling.

    ``offsets`` has shape (N, 2*kh*kw, Ho, Wo) and stores, for kernel tap
    ``k = i*kw + j``, the row displacement in channel ``2k`` and the column
    displacement in channel ``2k + 1``. Samples falling outside the input
    read zero.
    """
    _check_deform(x, w, offsets, spec)
    cache = _deform_sample(x, offsets, spec)
    o = spec.out_channels
    wk = w.reshape(o, spec.in_channels, -1)
    out = np.tensordot(cache.cols, wk, axes=([1, 2], [1, 2])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    out = np.ascontiguousarray(out)
    return (out, cache) if return_cache else out


def deform_conv2d_backward(grad: np.ndarray, x: np.ndarray, w: np.ndarray, offsets: np.ndarray,
                           spec: ConvSpec, has_bias: bool = True, cache: Optional[_DeformCache] = None):
    """Return (grad_x, grad_w, grad_offsets, grad_b)."""
    if cache is None:
        cache = _deform_sample(x, offsets, spec)
    n, c, h, w_ = x.shape
    o = spec.out_channels
    k = spec.kernel[0] * spec.kernel[1]
    wk = w.reshape(o, c, k)
    gw = np.tensordot(grad, cache.cols, axes=([0, 2, 3], [0, 3, 4])).reshape(w.shape)
    gcols = np.tensordot(wk, grad, axes=([0], [1])).transpose(2, 0, 1, 3, 4)  # (N, C, K, Ho, Wo)

    base = (np.arange(n)[:, None] * c + np.arange(c)[None, :]) * (h * w_)  # (N, C)
    flat_all, wt_all = [], []
    for flat, cw in zip(cache.idx, cache.cw):
        flat_all.append((base[:, :, None, None, None] + flat[:, None]).ravel())
        wt_all.append((gcols * cw[:, None]).ravel())
    gx = np.bincount(np.concatenate(flat_all), weights=np.concatenate(wt_all),
                     minlength=n * c * h * w_).reshape(x.shape).astype(grad.dtype, copy=False)

    ly, lx = cache.ly, cache.lx
    v00, v01, v10, v11 = cache.vals
    dval_dy = (v10 - v00) * (1 - lx)[:, None] + (v11 - v01) * lx[:, None]
    dval_dx = (v01 - v00) * (1 - ly)[:, None] + (v11 - v10) * ly[:, None]
    goy = (gcols * dval_dy).sum(axis=1)
    gox = (gcols * dval_dx).sum(axis=1)
    goff = np.stack([goy, gox], axis=2).reshape(offsets.shape)
    gb = grad.sum(axis=(0, 2, 3)) if has_bias else None
    return gx, gw, goff, gb


# ---------------------------------------------------------------------------
# rearrangements and elementwise helpers


def pixel_shuffle(x: np.ndarray, r: int) -> np.ndarray:
    """(N, C*r*r, H, W) -> (N, C, H*r, W*r)."""
    _check4("x", x)
    if r < 1:
        raise ValueError("upscale factor must be positive")
    n, c, h, w = x.shape
    if c % (r * r):
        raise ShapeError(f"channels {c} not divisible by r^2 = {r * r}")
    co = c // (r * r)
    return np.ascontiguousarray(
        x.reshape(n, co, r, r, h, w).transpose(0, 1, 4, 2, 5, 3).reshape(n, co, h * r, w * r))


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """(N, C, H*r, W*r) -> (N, C*r*r, H, W); exact inverse of :func:`pixel_shuffle`."""
    _check4("x", x)
    if r < 1:
        raise ValueError("downscale factor must be positive")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by {r}")
    return np.ascontiguousarray(
        x.reshape(n, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4).reshape(n, c * r * r, h // r, w // r))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def concat(xs: Sequence[np.ndarray]) -> np.ndarray:
    """Stack along the channel axis in argument order."""
    ref = xs[0].shape
    for a in xs[1:]:
        if a.ndim != 4 or a.shape[0] != ref[0] or a.shape[2:] != ref[2:]:
            raise ShapeError(f"cannot concatenate {a.shape} with {ref} along channels")
    return np.concatenate(xs, axis=1)


def add(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    if x.shape != y.shape:
        raise ShapeError(f"add extents differ: {x.shape} vs {y.shape}")
    return x + y


def box_downscale(x: np.ndarray, factor: int) -> np.ndarray:
    """Average non-overlapping ``factor`` x ``factor`` blocks."""
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ShapeError(f"spatial extent {h}x{w} not divisible by {factor}")
    return x.reshape(n, c, h // factor, factor, w // factor, factor).mean(axis=(3, 5))
