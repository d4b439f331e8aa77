import numpy as np
import pytest

from hullsight import model, synthetic
from hullsight.autodiff import clip_grad_norm, numeric_gradient, relative_error
from hullsight.image import Image
from hullsight.model import Checkpoint, CheckpointFormatError, ConfigError, ModelConfig, TrainConfig
from hullsight.ops import ShapeError

TINY = ModelConfig(base_channels=2, r1=1, r2=1)


def test_output_shapes_default_config():
    g = model.build(ModelConfig(base_channels=8, in_channels=1, sr_scale=4), (1, 1, 32, 32))
    out = g.forward({"x": np.random.default_rng(0).random((1, 1, 32, 32))})
    assert out["denoised"].shape == (1, 1, 32, 32)
    assert out["sr"].shape == (1, 1, 128, 128)


@pytest.mark.parametrize("scale,ch", [(2, 3), (8, 1)])
def test_output_shape_law(scale, ch):
    cfg = ModelConfig(base_channels=2, r1=1, r2=1, sr_scale=scale, in_channels=ch)
    out = model.build(cfg, (2, ch, 6, 10)).forward({"x": np.zeros((2, ch, 6, 10))})
    assert out["denoised"].shape == (2, ch, 6, 10)
    assert out["sr"].shape == (2, ch, 6 * scale, 10 * scale)


def test_parameter_count_closed_form():
    shapes = dict(model.param_shapes(ModelConfig(base_channels=8)))
    assert int(np.prod(shapes["deform.w"])) + int(np.prod(shapes["deform.b"])) == 1 * 8 * 9 + 8 == 80
    for cfg in (ModelConfig(), TINY, ModelConfig.wide_preset()):
        total = sum(int(np.prod(s)) for _, s in model.param_shapes(cfg))
        assert model.parameter_count(cfg) == total
        assert sum(v.size for v in model.init_params(cfg).values()) == total


def test_init_deterministic():
    a = model.init_params(ModelConfig(), seed=3)
    b = model.init_params(ModelConfig(), seed=3)
    c = model.init_params(ModelConfig(), seed=4)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_init_bounds():
    p = model.init_params(ModelConfig(base_channels=4), seed=0, dtype=np.float64)
    assert np.abs(p["conv0.w"]).max() <= np.sqrt(1 / (16 * 9))
    assert not p["deform.offset.w"].any()


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(sr_scale=3)
    with pytest.raises(ConfigError):
        ModelConfig(r1=0)
    with pytest.raises(ConfigError):
        model.build(ModelConfig(), (1, 1, 31, 32))
    with pytest.raises(ConfigError):
        model.build(ModelConfig(), (1, 3, 32, 32))
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)
    with pytest.raises(ConfigError):
        TrainConfig(noise="gaussian")
    with pytest.raises(ConfigError):
        TrainConfig(grad_clip=-1.0)


def _loss_graph(params, lam=0.5, beta=0.5, seed=0):
    rng = np.random.default_rng(seed)
    shape = (2, 1, 12, 12)
    g = model.build(TINY, shape, params=params, dtype=np.float64, with_loss=True)
    feed = {"x": rng.random(shape), "target_lr": rng.random(shape),
            "target_hr": rng.random((2, 1, 48, 48)),
            "lambda": np.full((1, 1, 1, 1), lam), "beta": np.full((1, 1, 1, 1), beta)}
    return g, feed


def _random_params(seed):
    rng = np.random.default_rng(seed)
    p = model.init_params(TINY, seed=seed, dtype=np.float64)
    # nonzero offsets move the deformable taps off the integer grid, where bilinear sampling is smooth
    p["deform.offset.w"] = rng.uniform(-0.3, 0.3, size=p["deform.offset.w"].shape)
    p["deform.offset.b"] = rng.uniform(-0.4, 0.4, size=p["deform.offset.b"].shape)
    return p


@pytest.mark.parametrize("seed", range(3))
def test_end_to_end_gradient(seed):
    g, feed = _loss_graph(_random_params(seed), seed=seed)
    g.forward(feed)
    grads = g.backward()
    rng = np.random.default_rng(100 + seed)
    names = [n for n, _ in model.param_shapes(TINY)]
    analytic, numeric = [], []
    for _ in range(10):
        name = names[rng.integers(len(names))]
        idx = tuple(int(rng.integers(s)) for s in g.params[name].shape)
        orig = g.params[name][idx]

        def f(v, name=name, idx=idx):
            g.params[name][idx] = v.item()
            return g.forward(feed)["loss"].item()

        numeric.append(numeric_gradient(f, np.array(orig), 1e-6).item())
        g.params[name][idx] = orig
        analytic.append(grads[name][idx])
    assert relative_error(np.array(analytic), np.array(numeric)) <= 1e-3


def test_beta_zero_gives_zero_sr_gradients():
    g, feed = _loss_graph(_random_params(1), lam=1.0, beta=0.0)
    g.forward(feed)
    grads = g.backward()
    for name in ("sr.expand.w", "sr.expand.b", "sr.out.w", "sr.out.b"):
        assert not grads[name].any(), name
    assert grads["denoise.w"].any()


def test_build_shares_param_dict():
    p = model.init_params(TINY)
    g = model.build(TINY, (1, 1, 8, 8), params=p)
    assert g.params is p


# -- checkpoints ---------------------------------------------------------


@pytest.fixture
def ckpt():
    return Checkpoint(ModelConfig(base_channels=4), model.init_params(ModelConfig(base_channels=4), seed=9),
                      seed=9, epoch=3)


def test_checkpoint_round_trip_bytes(ckpt, tmp_path):
    path = tmp_path / "a.ddsr"
    model.save(ckpt, path)
    back = model.load(path)
    model.save(back, tmp_path / "b.ddsr")
    assert path.read_bytes() == (tmp_path / "b.ddsr").read_bytes()
    assert back.config == ckpt.config and back.seed == 9 and back.epoch == 3
    for k, v in ckpt.params.items():
        np.testing.assert_array_equal(back.params[k], v)


def test_checkpoint_layout(ckpt):
    blob = ckpt.to_bytes()
    assert blob[:4] == b"DDSR"
    version, hlen = np.frombuffer(blob[4:12], dtype="<u4")
    assert version == 1
    assert len(blob) == 12 + hlen + 4 * model.parameter_count(ckpt.config)


def test_checkpoint_bad_magic(ckpt):
    blob = bytearray(ckpt.to_bytes())
    blob[0:4] = b"XXXX"
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(bytes(blob))


def test_checkpoint_bad_version(ckpt):
    blob = bytearray(ckpt.to_bytes())
    blob[4] = 7
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(bytes(blob))


@pytest.mark.parametrize("delta", [-4, -1, 4])
def test_checkpoint_payload_length_mismatch(ckpt, delta):
    blob = ckpt.to_bytes()
    bad = blob[:delta] if delta < 0 else blob + b"\0" * delta
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(bad)


def test_checkpoint_manifest_mismatch(ckpt):
    other = Checkpoint(ModelConfig(base_channels=2), model.init_params(ModelConfig(base_channels=2)))
    blob = ckpt.to_bytes()
    hlen = int(np.frombuffer(blob[8:12], dtype="<u4")[0])
    other_blob = other.to_bytes()
    other_hlen = int(np.frombuffer(other_blob[8:12], dtype="<u4")[0])
    franken = other_blob[:12 + other_hlen] + blob[12 + hlen:]
    with pytest.raises(CheckpointFormatError):
        Checkpoint.from_bytes(franken)


# -- inference -----------------------------------------------------------


def test_infer_shapes_purity_and_sanity(ckpt):
    img = synthetic.hull_scene(32, seed=1)
    den1, sr1 = model.infer(ckpt, img)
    den2, sr2 = model.infer(ckpt, img)
    assert den1.pixels.shape == (32, 32, 1)
    assert sr1.pixels.shape == (128, 128, 1)
    assert np.array_equal(den1.pixels, den2.pixels) and np.array_equal(sr1.pixels, sr2.pixels)
    from hullsight import quality
    p = quality.psnr(img, den1)
    assert np.isfinite(p) and p > 0


def test_infer_rejects_bad_input(ckpt):
    with pytest.raises(ShapeError):
        model.infer(ckpt, Image(np.zeros((31, 32, 1), dtype=np.uint8)))
    with pytest.raises(ConfigError):
        model.infer(ckpt, Image(np.zeros((32, 32, 3), dtype=np.uint8)))


# -- training ------------------------------------------------------------


def test_prepare_samples_crop_and_downscale():
    img = synthetic.hull_scene(80, seed=2)
    (s,) = model.prepare_samples([img], patch=16, scale=4)
    assert s.hr.pixels.shape == (64, 64, 1)
    assert s.lr.pixels.shape == (16, 16, 1)
    np.testing.assert_array_equal(s.hr.pixels, img.pixels[8:72, 8:72])
    block = s.hr.pixels[:4, :4, 0].astype(float).mean()
    assert s.lr.pixels[0, 0, 0] == np.rint(block)


def test_split_is_80_20():
    tr, va = model.split_samples(80, 0.8)
    assert (len(tr), len(va)) == (64, 16)
    assert set(tr).isdisjoint(va)


def _short_run(epochs=3, seed=5):
    imgs = synthetic.hull_scenes(6, 48, seed=1)
    cfg = TrainConfig.desk(patch=12, epochs=epochs, batch=2, seed=seed, train_fraction=4 / 6)
    return model.train_on_images(imgs, cfg, TINY)


def test_training_is_deterministic():
    ck1, log1 = _short_run()
    ck2, log2 = _short_run()
    assert [e.loss for e in log1] == [e.loss for e in log2]
    assert ck1.to_bytes() == ck2.to_bytes()
    _, log3 = _short_run(seed=6)
    assert [e.loss for e in log1] != [e.loss for e in log3]


def test_training_log_schedule():
    _, logs = _short_run(epochs=12)
    assert [(e.lam, e.beta) for e in logs[:2]] == [(1.0, 0.0), (1.0, 0.0)]
    assert (logs[10].lam, logs[10].beta) == pytest.approx((0.9, 0.1))
    assert all(np.isfinite(e.val_denoise_psnr) for e in logs)


def test_training_rejects_empty_and_mismatched(tmp_path):
    with pytest.raises(model.TrainingError):
        model.train_on_images([], TrainConfig(), TINY)
    with pytest.raises(model.TrainingError):
        model.train(tmp_path, TrainConfig(), TINY)
    with pytest.raises(ConfigError):
        model.train_on_images([synthetic.hull_scene(32, channels=3)], TrainConfig.desk(patch=8), TINY)


def test_overfit_eight_patches():
    imgs = synthetic.hull_scenes(9, 64, seed=3)
    cfg = TrainConfig.desk(patch=16, epochs=200, seed=1, train_fraction=8 / 9, eval_every=1000,
                           p_s=0.05, p_p=0.05)
    _, logs = model.train_on_images(imgs, cfg, ModelConfig())
    assert logs[-1].loss < 0.5 * logs[0].loss


def test_clip_grad_norm():
    g = {"a": np.array([3.0]), "b": np.array([[4.0]])}
    out, norm = clip_grad_norm(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose(out["a"], [0.6])
    np.testing.assert_allclose(out["b"], [[0.8]])
    same, _ = clip_grad_norm(g, 10.0)
    assert same["a"] is g["a"]
