"""Full-reference image quality: PSNR, SSIM, the composite distance and loss weighting."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Graph, Ref
from .image import Image
from .ops import ConvSpec, ShapeError

PSNR_SATURATION_DB = 100.0
# floor applied inside the 100/PSNR term of the composite distance
PSNR_FLOOR_DB = 0.1

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_C1 = SSIM_K1 ** 2
SSIM_C2 = SSIM_K2 ** 2


@dataclass(frozen=True)
class LossWeights:
    lam: float
    beta: float

    def __post_init__(self):
        for name, v in (("lambda", self.lam), ("beta", self.beta)):
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")


@dataclass(frozen=True)
class MetricReport:
    psnr_db: float
    ssim: float

    def to_dict(self) -> dict:
        return {"psnr_db": self.psnr_db, "ssim": self.ssim}


def _as_hwc(img) -> np.ndarray:
    """Normalized float64 array of shape (H, W, C)."""
    if isinstance(img, Image):
        return img.normalized()
    a = np.asarray(img)
    if a.dtype == np.uint8:
        a = a.astype(np.float64) / 255.0
    else:
        a = a.astype(np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ShapeError(f"expected a 2-D or (H, W, C) image, got shape {a.shape}")
    return a


def _pair(ref, test):
    a, b = _as_hwc(ref), _as_hwc(test)
    if a.shape != b.shape:
        raise ShapeError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(ref, test) -> float:
    """10*log10(1/MSE) on [0, 1]-normalized values; 100 dB when MSE is 0."""
    a, b = _pair(ref, test)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SATURATION_DB
    return min(PSNR_SATURATION_DB, 10.0 * math.log10(1.0 / mse))


def gaussian_window_1d(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(a: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation of a (H, W) plane."""
    k = g.size
    rows = sliding_window_view(a, k, axis=0) @ g       # (H-k+1, W)
    return sliding_window_view(rows, k, axis=1) @ g   # (H-k+1, W-k+1)


def ssim_map(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Local SSIM over valid window positions of two single-channel planes."""
    g = gaussian_window_1d()
    mu1 = _filter_valid(a, g)
    mu2 = _filter_valid(b, g)
    s11 = _filter_valid(a * a, g) - mu1 * mu1
    s22 = _filter_valid(b * b, g) - mu2 * mu2
    s12 = _filter_valid(a * b, g) - mu1 * mu2
    num = (2 * mu1 * mu2 + SSIM_C1) * (2 * s12 + SSIM_C2)
    den = (mu1 * mu1 + mu2 * mu2 + SSIM_C1) * (s11 + s22 + SSIM_C2)
    return num / den


def ssim(ref, test) -> float:
    """Mean SSIM (11x11 Gaussian window, sigma 1.5), averaged over channels."""
    a, b = _pair(ref, test)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ShapeError(f"image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    return float(np.mean([ssim_map(a[:, :, c], b[:, :, c]).mean() for c in range(a.shape[2])]))


def metric_report(ref, test) -> MetricReport:
    return MetricReport(psnr(ref, test), ssim(ref, test))


def distance_d(ref, out) -> float:
    """Composite distance: mean |ref - out| + 10*(1 - SSIM) + 100/PSNR."""
    a, b = _pair(ref, out)
    mae = float(np.mean(np.abs(a - b)))
    p = max(psnr(a, b), PSNR_FLOOR_DB)
    return mae + 10.0 * (1.0 - ssim(a, b)) + 100.0 / p


def joint_loss(d_denoise: float, d_sr: float, w: LossWeights) -> float:
    return w.lam * d_denoise + w.beta * d_sr


def schedule_weights(epoch: int) -> LossWeights:
    """Denoise weight starts at 1 and drops by 0.1 every 10 epochs down to 0.5."""
    if epoch < 1:
        raise ValueError(f"epoch must be >= 1, got {epoch}")
    steps = min(5, epoch // 10)
    return LossWeights((10 - steps) / 10, steps / 10)


# ---------------------------------------------------------------------------
# differentiable counterparts, built on an autodiff Graph


def _gauss_blur(g: Graph, x: Ref, kv: Ref, kh: Ref) -> Ref:
    c = x.shape[1]
    vert = g.depthwise_conv2d(x, kv, None, ConvSpec(c, c, (SSIM_WINDOW, 1), padding=0, bias=False))
    return g.depthwise_conv2d(vert, kh, None, ConvSpec(c, c, (1, SSIM_WINDOW), padding=0, bias=False))


def ssim_graph(g: Graph, ref: Ref, out: Ref) -> Ref:
    """Per-sample mean SSIM, shape (N, 1, 1, 1)."""
    c = ref.shape[1]
    if min(ref.shape[2:]) < SSIM_WINDOW:
        raise ShapeError(f"image {ref.shape[2:]} smaller than the SSIM window")
    w1 = gaussian_window_1d()
    kv = g.const(np.tile(w1.reshape(1, 1, SSIM_WINDOW, 1), (c, 1, 1, 1)), "ssim.kv")
    kh = g.const(np.tile(w1.reshape(1, 1, 1, SSIM_WINDOW), (c, 1, 1, 1)), "ssim.kh")
    mu1 = _gauss_blur(g, ref, kv, kh)
    mu2 = _gauss_blur(g, out, kv, kh)
    e11 = _gauss_blur(g, g.square(ref), kv, kh)
    e22 = _gauss_blur(g, g.square(out), kv, kh)
    e12 = _gauss_blur(g, g.mul(ref, out), kv, kh)
    mu1sq, mu2sq, mu12 = g.square(mu1), g.square(mu2), g.mul(mu1, mu2)
    s11 = g.sub(e11, mu1sq)
    s22 = g.sub(e22, mu2sq)
    s12 = g.sub(e12, mu12)
    num = g.mul(g.shift(g.scale(mu12, 2.0), SSIM_C1), g.shift(g.scale(s12, 2.0), SSIM_C2))
    den = g.mul(g.shift(g.add(mu1sq, mu2sq), SSIM_C1), g.shift(g.add(s11, s22), SSIM_C2))
    return g.mean(g.div(num, den), per_sample=True)


def psnr_graph(g: Graph, ref: Ref, out: Ref, floor_db: float = PSNR_FLOOR_DB) -> Ref:
    """Per-sample PSNR clamped to [floor_db, 100] dB via clamping the MSE."""
    mse = g.mean(g.square(g.sub(ref, out)), per_sample=True)
    lo = 10.0 ** (-PSNR_SATURATION_DB / 10.0)
    hi = 10.0 ** (-floor_db / 10.0)
    return g.scale(g.log(g.clip(mse, lo, hi)), -10.0 / math.log(10.0))


def distance_graph(g: Graph, ref: Ref, out: Ref) -> Ref:
    """Per-sample composite distance, shape (N, 1, 1, 1)."""
    mae = g.mean(g.abs(g.sub(ref, out)), per_sample=True)
    ssim_term = g.scale(g.shift(g.scale(ssim_graph(g, ref, out), -1.0), 1.0), 10.0)
    hundred = g.const(np.full((1, 1, 1, 1), 100.0), "hundred")
    psnr_term = g.div(hundred, psnr_graph(g, ref, out))
    return g.add(g.add(mae, ssim_term), psnr_term)
