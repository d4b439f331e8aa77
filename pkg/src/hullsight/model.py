"""A shallow network that denoises and super-resolves (4x) in one pass.

Topology (c = base channels, i = image channels)::

    off = conv 3x3(x)                                 -> (18, H, W)
    f = relu(deform conv 3x3(x, off))                 -> (c, H, W)
    f = f + relu(pointwise 1x1(depthwise 3x3(f)))     x r1
    u = pixel_unshuffle(f, 2)                         -> (4c, H/2, W/2)
    u = u + relu(conv 3x3(u))                         x r2
    j = concat(pixel_shuffle(u, 2), f)                -> (2c, H, W)
    denoised = conv 1x1(j)                            -> (i, H, W)
    sr = conv 1x1(shuffle^k(conv 3x3(j)))             -> (i, sH, sW)
"""
from __future__ import annotations

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import noise as noise_mod
from . import quality
from .autodiff import Graph, clip_grad_norm, sgd_step
from .image import Image, load_image, SUPPORTED_SUFFIXES
from .ops import ConvSpec, ShapeError, box_downscale

log = logging.getLogger(__name__)

MAGIC = b"DDSR"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    base_channels: int = 8
    r1: int = 2
    r2: int = 2
    sr_scale: int = 4
    in_channels: int = 1

    def __post_init__(self):
        if self.base_channels < 1:
            raise ConfigError("base_channels must be positive")
        if self.r1 < 1 or self.r2 < 1:
            raise ConfigError("r1 and r2 must be >= 1")
        s = self.sr_scale
        if s < 2 or s & (s - 1):
            raise ConfigError(f"sr_scale must be a power of 2 (>= 2), got {s}")
        if self.in_channels not in (1, 3):
            raise ConfigError("in_channels must be 1 or 3")

    @property
    def shuffle_stages(self) -> int:
        return int(math.log2(self.sr_scale))

    @classmethod
    def wide_preset(cls, in_channels: int = 3) -> "ModelConfig":
        """A wide configuration with roughly 3M parameters, for large datasets."""
        return cls(base_channels=72, in_channels=in_channels)


def param_shapes(cfg: ModelConfig) -> List[Tuple[str, tuple]]:
    """Ordered parameter manifest (name, shape)."""
    c, i, s = cfg.base_channels, cfg.in_channels, cfg.sr_scale
    out = [("deform.offset.w", (18, i, 3, 3)), ("deform.offset.b", (18,)),
           ("deform.w", (c, i, 3, 3)), ("deform.b", (c,))]
    for k in range(cfg.r1):
        out += [(f"depth{k}.dw.w", (c, 1, 3, 3)), (f"depth{k}.dw.b", (c,)),
                (f"depth{k}.pw.w", (c, c, 1, 1)), (f"depth{k}.pw.b", (c,))]
    for k in range(cfg.r2):
        out += [(f"conv{k}.w", (4 * c, 4 * c, 3, 3)), (f"conv{k}.b", (4 * c,))]
    out += [("denoise.w", (i, 2 * c, 1, 1)), ("denoise.b", (i,)),
            ("sr.expand.w", (c * s * s, 2 * c, 3, 3)), ("sr.expand.b", (c * s * s,)),
            ("sr.out.w", (i, c, 1, 1)), ("sr.out.b", (i,))]
    return out


def parameter_count(cfg: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_shapes(cfg))


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> Dict[str, np.ndarray]:
    """Uniform(+-sqrt(1/fan_in)) per layer; the offset predictor starts at zero."""
    rng = np.random.default_rng(seed)
    shapes = dict(param_shapes(cfg))
    params: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        layer = name.rsplit(".", 1)[0]
        wshape = shapes[layer + ".w"]
        fan_in = int(np.prod(wshape[1:]))
        bound = math.sqrt(1.0 / fan_in)
        if layer == "deform.offset":
            v = np.zeros(shape)
        else:
            v = rng.uniform(-bound, bound, size=shape)
        params[name] = v.astype(dtype)
    return params


def _as4(params, name):
    v = params[name]
    return v if v.ndim == 4 else v.reshape((1,) * (4 - v.ndim) + v.shape)


def build(cfg: ModelConfig, input_shape=None, params: Optional[Dict[str, np.ndarray]] = None,
          dtype=np.float32, seed: int = 0, with_loss: bool = False) -> Graph:
    """Assemble the network graph for a fixed input shape.

    Inputs: ``x``; with ``with_loss`` also ``target_lr``, ``target_hr``,
    ``lambda`` and ``beta``. Outputs: ``denoised``, ``sr`` and, with
    ``with_loss``, ``loss``, ``d_denoise``, ``d_sr`` (batch means).
    """
    if input_shape is None:
        input_shape = (1, cfg.in_channels, 32, 32)
    n, ch, h, w = input_shape
    if ch != cfg.in_channels:
        raise ConfigError(f"input has {ch} channels, model expects {cfg.in_channels}")
    if h % 2 or w % 2:
        raise ConfigError(f"input extent {h}x{w} must be divisible by 2")
    if params is None:
        params = init_params(cfg, seed, dtype)
    for name, shape in param_shapes(cfg):
        if name not in params:
            raise ConfigError(f"missing parameter '{name}'")
        if tuple(params[name].shape) != shape and params[name].size != int(np.prod(shape)):
            raise ConfigError(f"parameter '{name}' has shape {params[name].shape}, expected {shape}")
    for name, _ in param_shapes(cfg):
        params[name] = _as4(params, name)

    g = Graph(dtype=dtype, params=params)
    P = {name: g.param(name) for name, _ in param_shapes(cfg)}
    c, i, s = cfg.base_channels, cfg.in_channels, cfg.sr_scale

    x = g.input("x", input_shape)
    off = g.conv2d(x, P["deform.offset.w"], P["deform.offset.b"], ConvSpec(i, 18), name="deform.offset")
    f = g.relu(g.deform_conv2d(x, P["deform.w"], off, P["deform.b"], ConvSpec(i, c), name="deform"))
    for k in range(cfg.r1):
        d = g.depthwise_conv2d(f, P[f"depth{k}.dw.w"], P[f"depth{k}.dw.b"], ConvSpec(c, c), name=f"depth{k}.dw")
        d = g.conv2d(d, P[f"depth{k}.pw.w"], P[f"depth{k}.pw.b"], ConvSpec(c, c, (1, 1)), name=f"depth{k}.pw")
        f = g.add(f, g.relu(d))
    u = g.pixel_unshuffle(f, 2)
    for k in range(cfg.r2):
        v = g.conv2d(u, P[f"conv{k}.w"], P[f"conv{k}.b"], ConvSpec(4 * c, 4 * c), name=f"conv{k}")
        u = g.add(u, g.relu(v))
    j = g.concat([g.pixel_shuffle(u, 2), f], name="join")
    den = g.conv2d(j, P["denoise.w"], P["denoise.b"], ConvSpec(2 * c, i, (1, 1)), name="denoise")
    e = g.conv2d(j, P["sr.expand.w"], P["sr.expand.b"], ConvSpec(2 * c, c * s * s), name="sr.expand")
    for _ in range(cfg.shuffle_stages):
        e = g.pixel_shuffle(e, 2)
    sr = g.conv2d(e, P["sr.out.w"], P["sr.out.b"], ConvSpec(c, i, (1, 1)), name="sr.out")
    g.output("denoised", den)
    g.output("sr", sr)

    if with_loss:
        t_lr = g.input("target_lr", input_shape)
        t_hr = g.input("target_hr", (n, ch, h * s, w * s))
        lam = g.input("lambda", (1, 1, 1, 1))
        beta = g.input("beta", (1, 1, 1, 1))
        d_dn = quality.distance_graph(g, t_lr, den)
        d_sr = quality.distance_graph(g, t_hr, sr)
        total = g.add(g.mul(lam, d_dn), g.mul(beta, d_sr))
        g.output("loss", g.mean(total))
        g.output("d_denoise", g.mean(d_dn))
        g.output("d_sr", g.mean(d_sr))
    return g


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: ModelConfig
    params: Dict[str, np.ndarray]
    seed: int = 0
    epoch: int = 0

    def header(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "model_config": asdict(self.config),
            "manifest": [{"name": n, "shape": list(s)} for n, s in param_shapes(self.config)],
            "seed": int(self.seed),
            "epoch": int(self.epoch),
        }

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
        chunks = []
        for name, shape in param_shapes(self.config):
            arr = np.asarray(self.params[name], dtype="<f4").reshape(shape)
            chunks.append(arr.tobytes(order="C"))
        return MAGIC + struct.pack("<II", FORMAT_VERSION, len(head)) + head + b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if len(blob) < 12 or blob[:4] != MAGIC:
            raise CheckpointFormatError("bad magic: not a DDSR checkpoint")
        version, hlen = struct.unpack("<II", blob[4:12])
        if version != FORMAT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        if len(blob) < 12 + hlen:
            raise CheckpointFormatError("truncated header")
        try:
            head = json.loads(blob[12:12 + hlen].decode("utf-8"))
        except ValueError as e:
            raise CheckpointFormatError(f"corrupt header: {e}") from e
        if head.get("format_version") != FORMAT_VERSION:
            raise CheckpointFormatError("header version mismatch")
        try:
            cfg = ModelConfig(**head["model_config"])
        except (TypeError, ConfigError) as e:
            raise CheckpointFormatError(f"invalid model config: {e}") from e
        manifest = [(m["name"], tuple(m["shape"])) for m in head["manifest"]]
        if manifest != param_shapes(cfg):
            raise CheckpointFormatError("manifest does not match model config")
        payload = blob[12 + hlen:]
        want = sum(int(np.prod(s)) for _, s in manifest) * 4
        if len(payload) != want:
            raise CheckpointFormatError(f"payload has {len(payload)} bytes, manifest requires {want}")
        params, pos = {}, 0
        for name, shape in manifest:
            k = int(np.prod(shape))
            params[name] = np.frombuffer(payload, dtype="<f4", count=k, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * k
        return cls(cfg, params, seed=head.get("seed", 0), epoch=head.get("epoch", 0))


def save(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# inference


def run(ckpt: Checkpoint, x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Raw network outputs for a (N, C, H, W) batch in [0, 1]."""
    params = {k: v.astype(np.float32) for k, v in ckpt.params.items()}
    g = build(ckpt.config, x.shape, params=params, dtype=np.float32)
    out = g.forward({"x": x})
    return out["denoised"], out["sr"]


def infer(ckpt: Checkpoint, img: Image) -> Tuple[Image, Image]:
    """Denoised image (same size) and super-resolved image (sr_scale x larger)."""
    if img.channels != ckpt.config.in_channels:
        raise ConfigError(f"image has {img.channels} channels, checkpoint expects {ckpt.config.in_channels}")
    if img.height % 2 or img.width % 2:
        raise ShapeError(f"image extent {img.height}x{img.width} must be divisible by 2")
    den, sr = run(ckpt, img.to_tensor(np.float32))
    return Image.from_tensor(den), Image.from_tensor(sr)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lr: float = 1e-5
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 128
    epochs: int = 50
    noise: str = "sp"
    patch: int = 32
    seed: int = 0
    train_fraction: float = 0.8
    # fixed severities; None draws a fresh severity per sample and epoch
    p_s: Optional[float] = None
    p_p: Optional[float] = None
    P: Optional[float] = None
    eval_every: int = 1
    # cap on the joint gradient L2 norm; None disables clipping
    grad_clip: Optional[float] = None

    def __post_init__(self):
        if self.noise == "salt_pepper":
            self.noise = "sp"
        if self.noise not in ("sp", "shot"):
            raise ConfigError(f"noise must be 'sp' or 'shot', got {self.noise!r}")
        for name in ("lr", "batch", "epochs", "patch", "eval_every"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if not 0 < self.train_fraction < 1:
            raise ConfigError("train_fraction must lie in (0, 1)")
        if self.patch % 2:
            raise ConfigError("patch must be even")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError("grad_clip must be positive")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Small-batch settings that converge within a few hundred epochs on a CPU."""
        base = dict(lr=2e-3, batch=8, epochs=200, grad_clip=10.0)
        base.update(kw)
        return cls(**base)

    def severity(self, sample_seed: int, noise_seed: int) -> noise_mod.NoiseParams:
        if self.noise == "sp":
            if self.p_s is not None or self.p_p is not None:
                return noise_mod.NoiseParams("salt_pepper", p_s=self.p_s or 0.0, p_p=self.p_p or 0.0,
                                             seed=noise_seed)
            return noise_mod.sample_training_severity("sp", sample_seed, noise_seed)
        if self.P is not None:
            return noise_mod.NoiseParams("shot", P=self.P, seed=noise_seed)
        return noise_mod.sample_training_severity("shot", sample_seed, noise_seed)


@dataclass
class EpochLog:
    epoch: int
    lam: float
    beta: float
    loss: float
    val_denoise_psnr: float = float("nan")
    val_denoise_ssim: float = float("nan")
    val_sr_psnr: float = float("nan")
    val_sr_ssim: float = float("nan")
    val_noisy_psnr: float = float("nan")
    val_noisy_ssim: float = float("nan")

    FIELDS = ("epoch", "lam", "beta", "loss", "val_denoise_psnr", "val_denoise_ssim",
              "val_sr_psnr", "val_sr_ssim", "val_noisy_psnr", "val_noisy_ssim")

    def row(self) -> list:
        return [getattr(self, k) for k in self.FIELDS]


def center_crop(img: Image, size: int) -> Image:
    if img.height < size or img.width < size:
        raise ShapeError(f"image {img.height}x{img.width} smaller than crop {size}")
    y = (img.height - size) // 2
    x = (img.width - size) // 2
    return Image(img.pixels[y:y + size, x:x + size])


def downscale(img: Image, factor: int) -> Image:
    """Box-average downscale, rounded back to 8 bits."""
    t = box_downscale(img.to_tensor(), factor)
    return Image.from_tensor(t)


@dataclass
class _Sample:
    hr: Image
    lr: Image


def prepare_samples(images: List[Image], patch: int, scale: int) -> List[_Sample]:
    out = []
    for im in images:
        hr = center_crop(im, patch * scale)
        out.append(_Sample(hr, downscale(hr, scale)))
    return out


def list_images(data_dir) -> List[Path]:
    d = Path(data_dir)
    if not d.is_dir():
        raise TrainingError(f"data directory {d} does not exist")
    files = sorted(p for p in d.iterdir() if p.suffix.lower() in SUPPORTED_SUFFIXES)
    if not files:
        raise TrainingError(f"no training images in {d}")
    return files


def split_samples(n: int, train_fraction: float) -> Tuple[range, range]:
    n_train = int(round(n * train_fraction))
    n_train = min(max(n_train, 1), n)
    return range(0, n_train), range(n_train, n)


def _stack(images: List[Image], dtype) -> np.ndarray:
    return np.concatenate([im.to_tensor(dtype) for im in images], axis=0)


_VAL_STREAM = 0x5EED_0FF


def _noisy_val(cfg: TrainConfig, samples: List[_Sample]) -> List[Image]:
    out = []
    for k, smp in enumerate(samples):
        params = cfg.severity(noise_mod.derive_seed(cfg.seed, _VAL_STREAM, k, 1),
                              noise_mod.derive_seed(cfg.seed, _VAL_STREAM, k))
        out.append(noise_mod.apply_noise(smp.lr, params))
    return out


def evaluate_samples(ckpt: Checkpoint, samples: List[_Sample], noisy: List[Image]) -> Dict[str, float]:
    """Mean PSNR/SSIM of both heads (and of the noisy input) on held-out samples."""
    if not samples:
        return {}
    x = _stack(noisy, np.float32)
    den, sr = run(ckpt, x)
    acc = {k: [] for k in ("dn_p", "dn_s", "sr_p", "sr_s", "nz_p", "nz_s")}
    for k, smp in enumerate(samples):
        d_img = Image.from_tensor(den[k:k + 1])
        s_img = Image.from_tensor(sr[k:k + 1])
        acc["dn_p"].append(quality.psnr(smp.lr, d_img))
        acc["dn_s"].append(quality.ssim(smp.lr, d_img))
        acc["sr_p"].append(quality.psnr(smp.hr, s_img))
        acc["sr_s"].append(quality.ssim(smp.hr, s_img))
        acc["nz_p"].append(quality.psnr(smp.lr, noisy[k]))
        acc["nz_s"].append(quality.ssim(smp.lr, noisy[k]))
    m = {k: float(np.mean(v)) for k, v in acc.items()}
    return {"val_denoise_psnr": m["dn_p"], "val_denoise_ssim": m["dn_s"],
            "val_sr_psnr": m["sr_p"], "val_sr_ssim": m["sr_s"],
            "val_noisy_psnr": m["nz_p"], "val_noisy_ssim": m["nz_s"]}


def train_on_images(images: List[Image], train_cfg: TrainConfig, model_cfg: ModelConfig,
                    init: Optional[Checkpoint] = None, callback=None) -> Tuple[Checkpoint, List[EpochLog]]:
    """Train on in-memory clean reference images (split into train/held-out)."""
    if not images:
        raise TrainingError("no training images")
    for im in images:
        if im.channels != model_cfg.in_channels:
            raise ConfigError(f"image has {im.channels} channels, model expects {model_cfg.in_channels}")
    s = model_cfg.sr_scale
    samples = prepare_samples(images, train_cfg.patch, s)
    tr_idx, va_idx = split_samples(len(samples), train_cfg.train_fraction)
    train_s = [samples[k] for k in tr_idx]
    val_s = [samples[k] for k in va_idx]
    val_noisy = _noisy_val(train_cfg, val_s)

    dtype = np.float32
    if init is not None:
        if init.config != model_cfg:
            raise ConfigError("initial checkpoint does not match model config")
        params = {k: v.astype(dtype) for k, v in init.params.items()}
    else:
        params = init_params(model_cfg, train_cfg.seed, dtype)
    graphs: Dict[int, Graph] = {}
    state: Dict[str, np.ndarray] = {}
    logs: List[EpochLog] = []
    ckpt = Checkpoint(model_cfg, params, seed=train_cfg.seed, epoch=0)
    p = train_cfg.patch

    for epoch in range(1, train_cfg.epochs + 1):
        w = quality.schedule_weights(epoch)
        order = np.random.default_rng(noise_mod.derive_seed(train_cfg.seed, epoch)).permutation(len(train_s))
        losses = []
        for b0 in range(0, len(order), train_cfg.batch):
            batch = [int(k) for k in order[b0:b0 + train_cfg.batch]]
            noisy = []
            for k in batch:
                sp = train_cfg.severity(noise_mod.derive_seed(train_cfg.seed, epoch, k, 1),
                                        noise_mod.derive_seed(train_cfg.seed, epoch, k))
                noisy.append(noise_mod.apply_noise(train_s[k].lr, sp))
            nb = len(batch)
            if nb not in graphs:
                graphs[nb] = build(model_cfg, (nb, model_cfg.in_channels, p, p), params=params,
                                   dtype=dtype, with_loss=True)
            g = graphs[nb]
            out = g.forward({
                "x": _stack(noisy, dtype),
                "target_lr": _stack([train_s[k].lr for k in batch], dtype),
                "target_hr": _stack([train_s[k].hr for k in batch], dtype),
                "lambda": np.full((1, 1, 1, 1), w.lam),
                "beta": np.full((1, 1, 1, 1), w.beta),
            })
            loss = float(out["loss"].item())
            if not math.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b0 // train_cfg.batch}")
            grads = g.backward()
            if train_cfg.grad_clip is not None:
                grads, _ = clip_grad_norm(grads, train_cfg.grad_clip)
            sgd_step(params, grads, state, train_cfg.lr, train_cfg.momentum, train_cfg.weight_decay)
            losses.append(loss * nb)
        entry = EpochLog(epoch, w.lam, w.beta, float(np.sum(losses) / len(train_s)))
        ckpt = Checkpoint(model_cfg, dict(params), seed=train_cfg.seed, epoch=epoch)
        if val_s and (epoch % train_cfg.eval_every == 0 or epoch == train_cfg.epochs):
            for k, v in evaluate_samples(ckpt, val_s, val_noisy).items():
                setattr(entry, k, v)
        logs.append(entry)
        log.info("epoch %d lambda=%.1f beta=%.1f loss=%.5f val_psnr=%.3f",
                 epoch, w.lam, w.beta, entry.loss, entry.val_denoise_psnr)
        if callback is not None:
            callback(entry)
    ckpt = Checkpoint(model_cfg, {k: v.reshape(dict(param_shapes(model_cfg))[k]).astype(np.float32)
                                  for k, v in params.items()}, seed=train_cfg.seed, epoch=train_cfg.epochs)
    return ckpt, logs


def train(data_dir, train_cfg: TrainConfig, model_cfg: ModelConfig, **kw) -> Tuple[Checkpoint, List[EpochLog]]:
    """Train from a directory of clean reference images; noise is injected on the fly."""
    images = [load_image(p) for p in list_images(data_dir)]
    return train_on_images(images, train_cfg, model_cfg, **kw)
