"""Radiation noise models: Poisson shot noise and salt-and-pepper dead pixels.

Randomness is counter-based: every uniform variate is a hash of
``(seed, stream, pixel index)``, so results do not depend on traversal order
or on how rows are split across worker threads.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .image import Image

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1

# stream ids
_S_DECIDE = 1
_S_POIS_A = 2
_S_POIS_B = 3
_S_SP = 4
_S_SEV = 16

POISSON_NORMAL_CUTOFF = 10
_CDF_TERMS = 48


def _splitmix(z: np.ndarray) -> np.ndarray:
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def counter_uniform(seed: int, stream: int, index) -> np.ndarray:
    """Uniform doubles in [0, 1) keyed by (seed, stream, index)."""
    key = (int(seed) * 0x9E3779B97F4A7C15 + int(stream) * 0xD1B54A32D192ED03 + 0x632BE59BD9B4E019) & _MASK64
    k = _splitmix(np.array([key], dtype=np.uint64))[0]
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = _splitmix(k + (idx + np.uint64(1)) * _GOLDEN)
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class NoiseParams:
    kind: str
    P: float = 0.0
    p_s: float = 0.0
    p_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("shot", "salt_pepper"):
            raise ValueError(f"unknown noise kind {self.kind!r}")
        for name in ("P", "p_s", "p_p"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.p_s + self.p_p > 1.0:
            raise ValueError(f"p_s + p_p = {self.p_s + self.p_p} exceeds 1")
        if not 0 <= self.seed < 2 ** 64:
            raise ValueError("seed must be a 64-bit unsigned integer")


def _poisson_cdf_table(max_mean: int = POISSON_NORMAL_CUTOFF, terms: int = _CDF_TERMS) -> np.ndarray:
    tab = np.empty((max_mean, terms))
    for lam in range(max_mean):
        p = math.exp(-lam)
        acc = 0.0
        for k in range(terms):
            acc += p
            tab[lam, k] = acc
            p *= lam / (k + 1)
    return tab


_CDF = _poisson_cdf_table()


def poisson_from_uniforms(mean: np.ndarray, u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    """Poisson draws for integer means given two independent uniform arrays.

    Means below 10 use exact inversion (smallest k with CDF(k) >= u1);
    larger means use a rounded normal approximation clamped at zero.
    """
    mean = np.asarray(mean, dtype=np.int64)
    out = np.zeros(mean.shape, dtype=np.int64)
    small = mean < POISSON_NORMAL_CUTOFF
    if np.any(small):
        cdf = _CDF[mean[small]]
        out[small] = (u1[small][:, None] > cdf).sum(axis=1)
    big = ~small
    if np.any(big):
        lam = mean[big].astype(np.float64)
        z = np.sqrt(-2.0 * np.log1p(-u1[big])) * np.cos(2.0 * np.pi * u2[big])
        out[big] = np.maximum(np.rint(lam + np.sqrt(lam) * z), 0).astype(np.int64)
    return out


def _row_chunks(h: int, workers: int):
    workers = max(1, min(int(workers), h)) if h else 1
    bounds = np.linspace(0, h, workers + 1).astype(int)
    return [(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _run_rows(fn, h: int, workers: int):
    chunks = _row_chunks(h, workers)
    if len(chunks) <= 1:
        for a, b in chunks:
            fn(a, b)
        return
    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        list(pool.map(lambda ab: fn(*ab), chunks))


def apply_shot_noise(img: Image, P: float, seed: int, workers: int = 1) -> Image:
    """Replace each sample, with probability ``P``, by Poisson(value) clamped to [0, 255]."""
    if not 0.0 <= P <= 1.0:
        raise ValueError(f"P={P} outside [0, 1]")
    src = img.pixels
    if P == 0.0:
        return Image(src.copy())
    h, w, c = src.shape
    out = src.copy()

    def rows(a, b):
        idx = np.arange(a * w * c, b * w * c, dtype=np.uint64)
        block = src[a:b].reshape(-1)
        hit = counter_uniform(seed, _S_DECIDE, idx) < P
        if not np.any(hit):
            return
        u1 = counter_uniform(seed, _S_POIS_A, idx[hit])
        u2 = counter_uniform(seed, _S_POIS_B, idx[hit])
        vals = block.astype(np.int64)
        vals[hit] = np.clip(poisson_from_uniforms(vals[hit], u1, u2), 0, 255)
        out[a:b] = vals.reshape(b - a, w, c).astype(np.uint8)

    _run_rows(rows, h, workers)
    return Image(out)


def apply_sp_noise(img: Image, p_s: float, p_p: float, seed: int, workers: int = 1,
                   per_channel: bool = False) -> Image:
    """Set whole pixels to 255 with probability ``p_s`` and to 0 with probability ``p_p``.

    With ``per_channel`` each channel sample is corrupted independently.
    """
    NoiseParams("salt_pepper", p_s=p_s, p_p=p_p, seed=seed)
    src = img.pixels
    if p_s == 0.0 and p_p == 0.0:
        return Image(src.copy())
    h, w, c = src.shape
    out = src.copy()
    unit = c if per_channel else 1

    def rows(a, b):
        idx = np.arange(a * w * unit, b * w * unit, dtype=np.uint64)
        u = counter_uniform(seed, _S_SP, idx).reshape(b - a, w, unit)
        salt = u < p_s
        pepper = (u >= p_s) & (u < p_s + p_p)
        blk = out[a:b]
        blk[np.broadcast_to(salt, blk.shape)] = 255
        blk[np.broadcast_to(pepper, blk.shape)] = 0

    _run_rows(rows, h, workers)
    return Image(out)


def apply_noise(img: Image, params: NoiseParams, workers: int = 1) -> Image:
    if params.kind == "shot":
        return apply_shot_noise(img, params.P, params.seed, workers)
    return apply_sp_noise(img, params.p_s, params.p_p, params.seed, workers)


# severity ranges used during training
SP_MAX = 0.1
SHOT_MAX = 0.2


def sample_training_severity(kind: str, seed: int, noise_seed: Optional[int] = None) -> NoiseParams:
    """Draw a training severity: p_s, p_p ~ U[0, 0.1] for salt-and-pepper, P ~ U[0, 0.2] for shot."""
    u = counter_uniform(seed, _S_SEV, np.arange(3, dtype=np.uint64))
    ns = seed if noise_seed is None else noise_seed
    if kind in ("sp", "salt_pepper"):
        return NoiseParams("salt_pepper", p_s=float(u[0] * SP_MAX), p_p=float(u[1] * SP_MAX), seed=ns)
    if kind == "shot":
        return NoiseParams("shot", P=float(u[2] * SHOT_MAX), seed=ns)
    raise ValueError(f"unknown noise kind {kind!r}")


def derive_seed(*parts: int) -> int:
    """Deterministically combine integers into a 64-bit seed."""
    z = np.uint64(0x243F6A8885A308D3)
    with np.errstate(over="ignore"):
        for p in parts:
            z = _splitmix(np.array([z ^ np.uint64(int(p) & _MASK64)], dtype=np.uint64))[0] + _GOLDEN
    return int(z)
