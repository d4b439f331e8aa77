import math

import numpy as np
import pytest

from hullsight import quality
from hullsight.autodiff import Graph
from hullsight.image import Image
from hullsight.ops import ShapeError
from hullsight.quality import LossWeights

from gradcheck import check_primitive
from oracles import naive_ssim


def test_psnr_constant_offset_closed_form():
    a = np.full((32, 32), 100, dtype=np.uint8)
    b = a + np.uint8(16)
    assert quality.psnr(Image(a[:, :, None]), Image(b[:, :, None])) == pytest.approx(24.0484, abs=1e-3)
    assert quality.psnr(a, b) == pytest.approx(20 * math.log10(255 / 16), abs=1e-9)


def test_psnr_saturation_and_zero():
    a = np.random.default_rng(0).random((16, 16))
    assert quality.psnr(a, a) == 100.0
    assert quality.psnr(np.zeros((8, 8)), np.ones((8, 8))) == 0.0


def test_psnr_symmetric_and_shape_checked():
    rng = np.random.default_rng(1)
    a, b = rng.random((20, 20, 3)), rng.random((20, 20, 3))
    assert quality.psnr(a, b) == quality.psnr(b, a)
    with pytest.raises(ShapeError):
        quality.psnr(a, b[:10])


def test_ssim_identical_is_one():
    rng = np.random.default_rng(2)
    for _ in range(5):
        a = rng.random((24, 31))
        assert quality.ssim(a, a) == pytest.approx(1.0, abs=1e-9)


def test_ssim_constant_images_closed_form():
    a, b = np.full((16, 16), 0.25), np.full((16, 16), 0.5)
    assert quality.ssim(a, b) == pytest.approx(0.80007, abs=1e-4)
    c1 = 1e-4
    assert quality.ssim(a, b) == pytest.approx((2 * 0.25 * 0.5 + c1) / (0.25 ** 2 + 0.5 ** 2 + c1), abs=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_ssim_matches_naive_windows(seed):
    rng = np.random.default_rng(seed)
    h, w = rng.integers(11, 22, size=2)
    a = rng.random((h, w))
    b = np.clip(a + rng.normal(0, 0.2, size=(h, w)), 0, 1)
    assert abs(quality.ssim(a, b) - naive_ssim(a, b)) <= 1e-6


def test_ssim_multichannel_averages_channels():
    rng = np.random.default_rng(3)
    a, b = rng.random((15, 15, 3)), rng.random((15, 15, 3))
    per = [quality.ssim(a[:, :, c], b[:, :, c]) for c in range(3)]
    assert quality.ssim(a, b) == pytest.approx(np.mean(per), abs=1e-12)


def test_ssim_symmetric_and_bounded():
    rng = np.random.default_rng(4)
    for _ in range(10):
        a, b = rng.random((14, 14)), rng.random((14, 14))
        assert quality.ssim(a, b) == pytest.approx(quality.ssim(b, a), abs=1e-12)
        assert quality.ssim(a, b) <= 1.0


def test_ssim_rejects_small_images():
    with pytest.raises(ShapeError):
        quality.ssim(np.zeros((10, 40)), np.zeros((10, 40)))


def test_distance_identical_is_one():
    a = np.random.default_rng(5).random((16, 16))
    assert quality.distance_d(a, a) == pytest.approx(1.0, abs=1e-6)


def test_distance_uses_psnr_floor():
    z, o = np.zeros((16, 16)), np.ones((16, 16))
    d = quality.distance_d(z, o)
    expected = 1.0 + 10 * (1 - quality.ssim(z, o)) + 100 / 0.1
    assert d == pytest.approx(expected, abs=1e-9)
    assert d > 1000


def test_distance_monotone_in_error_amplitude():
    rng = np.random.default_rng(6)
    ref = rng.uniform(0.3, 0.7, size=(24, 24))
    pattern = np.where(rng.random((24, 24)) < 0.5, -1.0, 1.0)
    ds = [quality.distance_d(ref, ref + amp * 0.2 * pattern) for amp in (1, 0.5, 0.25)]
    assert ds[0] > ds[1] > ds[2]


def test_joint_loss_examples():
    assert quality.joint_loss(3.7, 9.1, LossWeights(1.0, 0.0)) == 3.7
    assert quality.joint_loss(2.0, 4.0, LossWeights(0.5, 0.5)) == 3.0
    assert quality.joint_loss(1.0, 1.0, LossWeights(0.9, 0.1)) == pytest.approx(1.0, abs=1e-12)


def test_joint_loss_linear():
    w = LossWeights(0.7, 0.3)
    base = quality.joint_loss(1.0, 2.0, w)
    assert quality.joint_loss(3.0, 2.0, w) - base == pytest.approx(0.7 * 2.0)
    assert quality.joint_loss(1.0, 5.0, w) - base == pytest.approx(0.3 * 3.0)


def test_schedule_examples():
    w = quality.schedule_weights(1)
    assert (w.lam, w.beta) == (1.0, 0.0)
    w = quality.schedule_weights(25)
    assert (w.lam, w.beta) == pytest.approx((0.8, 0.2))
    w = quality.schedule_weights(50)
    assert (w.lam, w.beta) == (0.5, 0.5)


def test_schedule_properties():
    prev = 1.0
    for e in range(1, 201):
        w = quality.schedule_weights(e)
        assert w.lam + w.beta == 1.0
        assert 0.5 <= w.lam <= 1.0
        assert w.lam <= prev
        prev = w.lam
    with pytest.raises(ValueError):
        quality.schedule_weights(0)


def _graph_metrics(a, b):
    g = Graph()
    ra = g.input("a", a.shape)
    rb = g.input("b", b.shape)
    g.output("ssim", quality.ssim_graph(g, ra, rb))
    g.output("psnr", quality.psnr_graph(g, ra, rb))
    g.output("d", quality.distance_graph(g, ra, rb))
    return g.forward({"a": a, "b": b})


def test_graph_metrics_agree_with_numpy():
    rng = np.random.default_rng(7)
    a = rng.random((3, 2, 16, 18))
    b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)
    out = _graph_metrics(a, b)
    for n in range(3):
        ia, ib = a[n].transpose(1, 2, 0), b[n].transpose(1, 2, 0)
        assert out["ssim"][n].item() == pytest.approx(quality.ssim(ia, ib), abs=1e-10)
        assert out["psnr"][n].item() == pytest.approx(quality.psnr(ia, ib), abs=1e-9)
        assert out["d"][n].item() == pytest.approx(quality.distance_d(ia, ib), abs=1e-9)


def test_graph_distance_saturation_and_floor():
    a = np.random.default_rng(8).random((1, 1, 12, 12))
    assert _graph_metrics(a, a)["d"].item() == pytest.approx(1.0, abs=1e-6)
    z, o = np.zeros((1, 1, 12, 12)), np.ones((1, 1, 12, 12))
    assert _graph_metrics(z, o)["d"].item() == pytest.approx(quality.distance_d(z[0, 0], o[0, 0]), abs=1e-6)


@pytest.mark.parametrize("seed", range(3))
def test_graph_ssim_gradient(seed):
    rng = np.random.default_rng(seed)
    vals = {"a": rng.random((1, 1, 12, 13)), "b": rng.random((1, 1, 12, 13))}
    err = check_primitive(lambda g, r: quality.ssim_graph(g, r["a"], r["b"]), {}, rng, values=vals)
    assert err <= 1e-4


def test_graph_distance_gradient():
    rng = np.random.default_rng(11)
    a = rng.random((2, 1, 12, 12))
    # keep every residual away from zero so |.| is differentiable at the probe point
    b = np.clip(a + rng.choice([-1, 1], size=a.shape) * rng.uniform(0.05, 0.2, size=a.shape), 0, 1)
    err = check_primitive(lambda g, r: quality.distance_graph(g, r["a"], r["b"]), {}, rng,
                          values={"a": a, "b": b})
    assert err <= 1e-4


def test_metric_report_dict():
    a = np.random.default_rng(9).random((12, 12))
    rep = quality.metric_report(a, a).to_dict()
    assert rep == {"psnr_db": 100.0, "ssim": pytest.approx(1.0)}
