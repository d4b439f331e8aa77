"""Procedural clean scenes: elongated bright hulls scattered on a shaded table."""
from __future__ import annotations

from pathlib import Path
from typing import List

import numpy as np

from .image import Image, save_image


def hull_scene(size: int = 128, seed: int = 0, n_hulls: int = 6, channels: int = 1) -> Image:
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) / size
    gy, gx = rng.uniform(-0.25, 0.25, size=2)
    canvas = 0.3 + rng.uniform(0, 0.15) + gy * (yy - 0.5) + gx * (xx - 0.5)
    for _ in range(n_hulls):
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        length = rng.uniform(0.15, 0.45)
        width = rng.uniform(0.03, 0.08)
        theta = rng.uniform(0, np.pi)
        level = rng.uniform(0.55, 0.95)
        # rotated coordinates relative to the hull centre
        u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
        v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
        body = (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)
        shade = level - 0.15 * (v / width) ** 2
        canvas = np.where(body, shade, canvas)
    canvas = np.clip(canvas, 0.0, 1.0)
    px = np.rint(canvas * 255).astype(np.uint8)[:, :, None]
    if channels == 3:
        tint = rng.uniform(0.85, 1.0, size=3)
        px = np.rint(np.clip(px * tint, 0, 255)).astype(np.uint8)
    return Image(px)


def hull_scenes(count: int, size: int = 128, seed: int = 0, channels: int = 1) -> List[Image]:
    return [hull_scene(size, seed * 1_000_003 + k, channels=channels) for k in range(count)]


def write_dataset(out_dir, count: int, size: int = 128, seed: int = 0, channels: int = 1) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for k, img in enumerate(hull_scenes(count, size, seed, channels)):
        p = out / f"scene_{k:04d}.png"
        save_image(img, p)
        paths.append(p)
    return paths
