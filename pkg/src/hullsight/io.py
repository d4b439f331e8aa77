"""YOLO-style annotation files and TOML run configuration."""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Hashable, List, Optional, Sequence, Tuple, Union

import tomli

from .detection import BBox, Detection, GroundTruth
from .model import ConfigError, ModelConfig, TrainConfig

SEED_ENV = "HULLSIGHT_SEED"


class AnnotationError(ValueError):
    def __init__(self, path, line: int, msg: str):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {msg}")


def parse_size(text: str) -> Tuple[int, int]:
    """'640x480' -> (640, 480)."""
    try:
        w, h = text.lower().split("x")
        size = int(w), int(h)
    except ValueError:
        raise ValueError(f"image size must look like WxH, got {text!r}") from None
    if min(size) < 1:
        raise ValueError(f"image size must be positive, got {text!r}")
    return size


def yolo_to_box(cx: float, cy: float, w: float, h: float, image_size: Tuple[int, int]) -> BBox:
    iw, ih = image_size
    x0 = min(max((cx - w / 2) * iw, 0.0), iw)
    x1 = min(max((cx + w / 2) * iw, 0.0), iw)
    y0 = min(max((cy - h / 2) * ih, 0.0), ih)
    y1 = min(max((cy + h / 2) * ih, 0.0), ih)
    return BBox(x0, y0, x1, y1)


def box_to_yolo(box: BBox, image_size: Tuple[int, int]) -> Tuple[float, float, float, float]:
    iw, ih = image_size
    return ((box.x_min + box.x_max) / 2 / iw, (box.y_min + box.y_max) / 2 / ih,
            (box.x_max - box.x_min) / iw, (box.y_max - box.y_min) / ih)


def parse_annotations(path, image_size: Tuple[int, int], image_id: Optional[Hashable] = None
                      ) -> Union[List[GroundTruth], List[Detection]]:
    """Read ``class cx cy w h`` (ground truth) or ``class cx cy w h conf`` (prediction) lines.

    Returns pixel-space records; ``image_id`` defaults to the file stem.
    Blank lines are skipped; mixing 5- and 6-field lines is an error.
    """
    path = Path(path)
    if image_id is None:
        image_id = path.stem
    out = []
    kind = None
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        parts = raw.split()
        if not parts:
            continue
        if len(parts) not in (5, 6):
            raise AnnotationError(path, lineno, f"expected 5 or 6 fields, got {len(parts)}")
        if kind is None:
            kind = len(parts)
        elif kind != len(parts):
            raise AnnotationError(path, lineno, "mixed ground-truth and prediction records")
        try:
            cls = int(parts[0])
            vals = [float(v) for v in parts[1:]]
        except ValueError:
            raise AnnotationError(path, lineno, "non-numeric field") from None
        if cls < 0:
            raise AnnotationError(path, lineno, f"negative class id {cls}")
        for v in vals:
            if not 0.0 <= v <= 1.0:
                raise AnnotationError(path, lineno, f"value {v} outside [0, 1]")
        box = yolo_to_box(*vals[:4], image_size)
        if kind == 6:
            out.append(Detection(box, cls, vals[4], image_id))
        else:
            out.append(GroundTruth(box, cls, image_id))
    return out


def format_annotations(records: Sequence[Union[GroundTruth, Detection]], image_size: Tuple[int, int]) -> str:
    lines = []
    for r in records:
        vals = box_to_yolo(r.box, image_size)
        fields_ = [str(r.class_id)] + [f"{v:.8f}" for v in vals]
        if isinstance(r, Detection):
            fields_.append(f"{r.confidence:.8f}")
        lines.append(" ".join(fields_))
    return "\n".join(lines) + ("\n" if lines else "")


def load_annotation_dir(directory, image_size: Tuple[int, int]) -> list:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"{d} is not a directory")
    records = []
    for p in sorted(d.glob("*.txt")):
        records.extend(parse_annotations(p, image_size))
    return records


# ---------------------------------------------------------------------------
# run configuration


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0


_NOISE_KEYS = {"kind": "noise", "p_s": "p_s", "p_p": "p_p", "P": "P"}


def _check_keys(section: str, data: dict, allowed) -> None:
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def run_config_from_dict(data: dict, env=None) -> RunConfig:
    env = os.environ if env is None else env
    _check_keys("top level", data, {"seed", "model", "train", "noise"})
    model_kw = dict(data.get("model", {}))
    _check_keys("model", model_kw, {f.name for f in fields(ModelConfig)})
    train_kw = dict(data.get("train", {}))
    _check_keys("train", train_kw, {f.name for f in fields(TrainConfig)} - set(_NOISE_KEYS.values()) - {"seed"})
    noise_kw = dict(data.get("noise", {}))
    _check_keys("noise", noise_kw, _NOISE_KEYS)
    for k, v in noise_kw.items():
        train_kw[_NOISE_KEYS[k]] = v
    seed = data.get("seed", 0)
    if SEED_ENV in env:
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    if not isinstance(seed, int) or seed < 0:
        raise ConfigError("seed must be a non-negative integer")
    for section, kw, cls in (("model", model_kw, ModelConfig), ("train", train_kw, TrainConfig)):
        for f in fields(cls):
            if f.name in kw and f.type in ("int", int) and not isinstance(kw[f.name], int):
                raise ConfigError(f"[{section}] {f.name} must be an integer")
    train_kw["seed"] = seed
    try:
        return RunConfig(ModelConfig(**model_kw), TrainConfig(**train_kw), seed)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_run_config(path, env=None) -> RunConfig:
    with open(path, "rb") as fh:
        try:
            data = tomli.load(fh)
        except tomli.TOMLDecodeError as e:
            raise ConfigError(f"{path}: {e}") from e
    return run_config_from_dict(data, env)
