import numpy as np
import pytest
from conftest import random_pair
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import reference_dists, reference_lpips, reference_ssim

from aerodetect.data_io import ImageTensor
from aerodetect.distances import REGISTRY, UnknownMetricError, distance, get_metric, list_metrics
from aerodetect.distances import backbones
from aerodetect.distances.base import MetricSpec
from aerodetect.distances.pixel import MS_MIN_SIDE, gaussian_window

SEEDED = all(backbones.provenance(b) == "seeded-random" for b in ("vgg16", "alexnet", "squeezenet"))
needs_seeded = pytest.mark.skipif(not SEEDED, reason="golden values were frozen with the seeded offline backbone")


class TestRegistry:
    def test_ids(self):
        ids = list_metrics()
        for m in ("mse", "ssim", "ms-ssim", "dists", "lpips-vgg16-all", "lpips-vgg16-l2", "lpips-alexnet-l5", "lpips-squeezenet-l7"):
            assert m in ids
        assert "lpips-vgg16-l6" not in ids

    def test_unknown_metric_lists_registered(self):
        with pytest.raises(UnknownMetricError, match="lpips-vgg16-l2"):
            get_metric("lpips-vgg99")

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            MetricSpec("x", "lpips", "vgg16", (6,))
        with pytest.raises(ValueError):
            MetricSpec("x", "mse", "vgg16")
        with pytest.raises(ValueError):
            MetricSpec("x", "nope")

    def test_maps_only_where_supported(self):
        a, b = random_pair(64, 0)
        for mid in ("dists",):
            with pytest.raises(ValueError, match="map"):
                distance(mid, a, b, want_map=True)
        a, b = random_pair(MS_MIN_SIDE, 0)
        with pytest.raises(ValueError, match="map"):
            distance("ms-ssim", a, b, want_map=True)

    def test_dimension_mismatch(self):
        a = ImageTensor(np.zeros((64, 64, 3), np.float32))
        b = ImageTensor(np.zeros((64, 72, 3), np.float32))
        for mid in ("mse", "ssim", "lpips-vgg16-l2", "dists"):
            with pytest.raises(ValueError, match="mismatch"):
                distance(mid, a, b)

    def test_too_small(self):
        a, b = random_pair(16, 0)
        with pytest.raises(ValueError):
            distance("lpips-vgg16-l2", a, b)
        a, b = random_pair(160, 0)
        with pytest.raises(ValueError, match="161"):
            distance("ms-ssim", a, b)


@needs_seeded
class TestGolden:
    @pytest.mark.parametrize("bb", ["vgg16", "alexnet", "squeezenet"])
    def test_lpips_frozen(self, golden, bb):
        g = golden[f"lpips-{bb}"]
        a, b = random_pair(g["size"], g["seed"])
        assert distance(f"lpips-{bb}-all", a, b).value == pytest.approx(g["total"], abs=1e-6)
        for i, v in enumerate(g["layers"], start=1):
            assert distance(f"lpips-{bb}-l{i}", a, b).value == pytest.approx(v, abs=1e-7)

    def test_pixel_and_dists_frozen(self, golden):
        a, b = random_pair(64, 0)
        assert distance("dists", a, b).value == pytest.approx(golden["dists"]["value"], abs=1e-6)
        assert distance("ssim", a, b).value == pytest.approx(golden["ssim"]["value"], abs=1e-6)
        a, b = random_pair(192, 1)
        assert distance("ms-ssim", a, b).value == pytest.approx(golden["ms-ssim"]["value"], abs=1e-5)


class TestLiveReference:
    """Same weights, upstream arithmetic; runs whenever the reference packages import."""

    @pytest.mark.parametrize("bb", ["vgg16", "alexnet", "squeezenet"])
    @pytest.mark.parametrize("seed", [3, 4])
    def test_lpips(self, bb, seed):
        pytest.importorskip("lpips")
        a, b = random_pair(64, seed)
        total, layers = reference_lpips(bb, a, b)
        assert distance(f"lpips-{bb}-all", a, b).value == pytest.approx(total, abs=1e-6)
        assert distance(f"lpips-{bb}-l2", a, b).value == pytest.approx(layers[1], abs=1e-6)

    def test_lpips_non_square(self):
        pytest.importorskip("lpips")
        rng = np.random.default_rng(9)
        a = ImageTensor(rng.random((72, 104, 3)).astype(np.float32))
        b = ImageTensor(rng.random((72, 104, 3)).astype(np.float32))
        assert distance("lpips-vgg16-all", a, b).value == pytest.approx(reference_lpips("vgg16", a, b)[0], abs=1e-6)

    def test_dists(self):
        pytest.importorskip("DISTS_pytorch")
        a, b = random_pair(96, 5)
        assert distance("dists", a, b).value == pytest.approx(reference_dists(a, b), abs=1e-6)

    def test_ssim(self):
        pytest.importorskip("pytorch_msssim")
        a, b = random_pair(80, 6)
        assert distance("ssim", a, b).value == pytest.approx(reference_ssim(a, b), abs=1e-6)
        a, b = random_pair(200, 7)
        assert distance("ms-ssim", a, b).value == pytest.approx(reference_ssim(a, b, ms=True), abs=1e-5)


class TestPixel:
    def test_mse_by_hand(self):
        a = ImageTensor(np.zeros((4, 4, 3), np.float32))
        px = np.zeros((4, 4, 3), np.float32)
        px[0, 0, 0] = 0.5
        r = distance("mse", a, ImageTensor(px), want_map=True)
        assert r.value == pytest.approx(0.25 / 48)
        assert r.map[0, 0] == pytest.approx(0.25 / 3) and r.map.sum() == pytest.approx(0.25 / 3)

    def test_gaussian_window(self):
        w = gaussian_window().numpy()
        assert w.shape == (11,) and w.sum() == pytest.approx(1.0)
        x = np.arange(11) - 5
        ref = np.exp(-(x**2) / (2 * 1.5**2))
        np.testing.assert_allclose(w, ref / ref.sum())

    def test_ssim_map_is_valid_region(self):
        a, b = random_pair(40, 1)
        r = distance("ssim", a, b, want_map=True)
        assert r.map.shape == (30, 30)
        assert float(r.map.mean()) == pytest.approx(r.value, abs=1e-12)

    def test_ssim_constant_offset(self):
        a, _ = random_pair(32, 2)
        shifted = ImageTensor(np.clip(a.pixels * 0.5 + 0.25, 0, 1))
        assert distance("ssim", a, shifted).value > 0


class TestLpipsMap:
    @pytest.mark.parametrize("hw", [(64, 64), (72, 104), (100, 60)])
    def test_map_mean_equals_value(self, hw):
        rng = np.random.default_rng(sum(hw))
        a = ImageTensor(rng.random((*hw, 3)).astype(np.float32))
        b = ImageTensor(rng.random((*hw, 3)).astype(np.float32))
        for mid in ("lpips-vgg16-all", "lpips-vgg16-l2", "lpips-alexnet-all", "lpips-squeezenet-l3"):
            r = distance(mid, a, b, want_map=True)
            assert r.map.shape == hw
            assert (r.map >= 0).all()
            assert float(r.map.mean()) == pytest.approx(r.value, abs=1e-5)

    def test_identity_zero_map(self):
        a, _ = random_pair(64, 3)
        r = distance("lpips-vgg16-l2", a, a, want_map=True)
        assert r.value == 0.0 and not r.map.any()


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["mse", "ssim", "lpips-vgg16-l2", "lpips-alexnet-all", "dists"]))
def test_metric_axioms_property(seed, mid):
    a, b = random_pair(48, seed)
    ab, ba = distance(mid, a, b).value, distance(mid, b, a).value
    assert ab >= 0 and abs(ab - ba) <= 1e-6
    assert distance(mid, a, a).value <= 1e-6


def test_device_env(monkeypatch):
    from aerodetect.distances.base import default_device

    monkeypatch.setenv("AERODETECT_DEVICE", "cpu")
    assert default_device() == "cpu"
    monkeypatch.setenv("AERODETECT_DEVICE", "auto")
    assert default_device() in ("cpu", "cuda")


def test_offline_backbone_is_deterministic():
    import torch

    from aerodetect.distances.backbones import _architecture, seeded_init

    x, y = _architecture("alexnet").features, _architecture("alexnet").features
    seeded_init(x)
    seeded_init(y)
    for p, q in zip(x.parameters(), y.parameters()):
        assert torch.equal(p, q)


def test_require_pretrained(monkeypatch):
    from aerodetect.distances import backbones as bbm

    if bbm.provenance("squeezenet") == "imagenet":
        pytest.skip("ImageNet checkpoint present")
    monkeypatch.setenv("AERODETECT_REQUIRE_PRETRAINED", "1")
    monkeypatch.setattr(bbm, "_cache", {})
    with pytest.raises(bbm.WeightsUnavailableError):
        bbm.load_features("squeezenet", "cpu")


def test_registry_covers_every_stage():
    for bb, n in (("vgg16", 5), ("alexnet", 5), ("squeezenet", 7)):
        assert sum(1 for m in REGISTRY if m.startswith(f"lpips-{bb}-l")) == n
