"""8-bit raster images and their file I/O."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from PIL import Image as PILImage

SUPPORTED_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")


class ImageFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Image:
    """Decoded raster of shape (H, W, C), uint8, C in {1, 3}."""

    pixels: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ImageFormatError(f"expected (H, W, 1|3) pixels, got shape {px.shape}")
        if self.bit_depth != 8:
            raise ImageFormatError(f"unsupported bit depth {self.bit_depth}")
        if px.dtype != np.uint8:
            if np.any(px < 0) or np.any(px > 255):
                raise ImageFormatError("pixel values outside [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @property
    def shape(self):
        return self.pixels.shape

    def to_tensor(self, dtype=np.float64) -> np.ndarray:
        """Normalized (1, C, H, W) array in [0, 1]."""
        return (self.pixels.astype(dtype) / 255.0).transpose(2, 0, 1)[None]

    def normalized(self) -> np.ndarray:
        return self.pixels.astype(np.float64) / 255.0

    @classmethod
    def from_tensor(cls, t: np.ndarray) -> "Image":
        """Clamp to [0, 1] and quantize a (1, C, H, W) or (C, H, W) array."""
        t = np.asarray(t)
        if t.ndim == 4:
            if t.shape[0] != 1:
                raise ImageFormatError("from_tensor expects a single image")
            t = t[0]
        q = np.rint(np.clip(t, 0.0, 1.0) * 255.0).astype(np.uint8)
        return cls(q.transpose(1, 2, 0))


def load_image(path) -> Image:
    """Read an 8-bit gray/RGB PNG or binary PGM/PPM."""
    path = os.fspath(path)
    if not path.lower().endswith(SUPPORTED_SUFFIXES):
        raise ImageFormatError(f"{path}: unsupported format")
    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I", "I;16", "I;16B", "I;16L", "I;16N", "F"):
                raise ImageFormatError(f"{path}: unsupported bit depth (mode {mode}); only 8-bit is accepted")
            if mode == "L":
                arr = np.asarray(im)
            elif mode == "RGB":
                arr = np.asarray(im)
            elif mode in ("P", "1"):
                arr = np.asarray(im.convert("L"))
            elif mode in ("RGBA", "LA"):
                raise ImageFormatError(f"{path}: alpha channel not supported")
            else:
                raise ImageFormatError(f"{path}: unsupported image mode {mode}")
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as e:
        raise ImageFormatError(f"{path}: cannot decode image ({e})") from e
    return Image(np.array(arr))


def save_image(img: Image, path) -> None:
    path = os.fspath(path)
    if not path.lower().endswith(SUPPORTED_SUFFIXES):
        raise ImageFormatError(f"{path}: unsupported format")
    px = img.pixels
    im = PILImage.fromarray(px[:, :, 0] if img.channels == 1 else px)
    if path.lower().endswith((".pgm", ".ppm", ".pnm")):
        im.save(path, format="PPM")
    else:
        im.save(path, format="PNG")
