import io
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from PIL import Image

from aerodetect.data_io import (
    ImageTensor,
    ImageTooSmallError,
    Label,
    ManifestError,
    ManifestRecord,
    ScoreFileError,
    ScoreRecord,
    decode_image,
    load_image,
    load_manifest,
    load_scores,
    persist_scores,
    prepare_for_ae,
    recon_cache_path,
    save_image,
    score_cache_path,
    write_manifest,
)


def _png(arr, mode="RGB"):
    buf = io.BytesIO()
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


class TestImageTensor:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError):
            ImageTensor(np.full((8, 8, 3), 1.5, np.float32))
        with pytest.raises(ValueError):
            ImageTensor(np.full((8, 8, 3), np.nan, np.float32))

    def test_rejects_wrong_channels(self):
        with pytest.raises(ValueError):
            ImageTensor(np.zeros((8, 8, 4), np.float32))

    def test_pixels_read_only(self):
        img = ImageTensor(np.zeros((8, 8, 3), np.float32))
        with pytest.raises(ValueError):
            img.pixels[0, 0, 0] = 1.0

    def test_hash_depends_on_pixels_and_shape(self):
        a = ImageTensor(np.zeros((8, 16, 3), np.float32))
        b = ImageTensor(np.zeros((16, 8, 3), np.float32))
        assert a.content_hash != b.content_hash
        assert a.content_hash == ImageTensor(np.zeros((8, 16, 3), np.float32), "elsewhere.png").content_hash

    def test_from_array_clamps(self):
        img = ImageTensor.from_array(np.full((4, 4, 3), 2.0), clamp=True)
        assert img.pixels.max() == 1.0


class TestLoadImage:
    def test_rgb_png(self, tmp_path):
        arr = np.random.default_rng(0).integers(0, 256, (512, 512, 3), dtype=np.uint8)
        p = tmp_path / "a.png"
        p.write_bytes(_png(arr))
        img = load_image(p)
        assert img.pixels.shape == (512, 512, 3)
        np.testing.assert_array_equal(img.to_uint8(), arr)

    def test_255_maps_to_one(self):
        img = decode_image(_png(np.full((4, 4, 3), 255, np.uint8)))
        assert img.pixels.max() == 1.0 and img.pixels.min() == 1.0

    def test_grayscale_and_alpha(self):
        g = decode_image(_png(np.arange(16, dtype=np.uint8).reshape(4, 4), "L"))
        assert g.pixels.shape == (4, 4, 3)
        np.testing.assert_array_equal(g.pixels[..., 0], g.pixels[..., 2])
        rgba = np.zeros((4, 4, 4), np.uint8)
        rgba[..., 3] = 7
        assert decode_image(_png(rgba, "RGBA")).pixels.shape == (4, 4, 3)

    def test_jpeg_matches_reference_decoder(self, tmp_path):
        cv2 = pytest.importorskip("cv2")

        arr = np.random.default_rng(1).integers(0, 256, (480, 640, 3), dtype=np.uint8)
        p = tmp_path / "a.jpg"
        Image.fromarray(arr).save(p, quality=90)
        img = load_image(p)
        assert img.pixels.shape == (480, 640, 3)
        ref = cv2.cvtColor(cv2.imread(str(p), cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)
        assert np.abs(img.to_uint8().astype(int) - ref.astype(int)).max() <= 1

    def test_undecodable(self, tmp_path):
        p = tmp_path / "bad.png"
        p.write_bytes(b"not an image")
        with pytest.raises(ValueError, match="cannot decode"):
            load_image(p)

    def test_deterministic_hash(self, tmp_path):
        arr = np.random.default_rng(2).integers(0, 256, (32, 32, 3), dtype=np.uint8)
        data = _png(arr)
        assert decode_image(data).content_hash == decode_image(data).content_hash

    def test_hash_ignores_container(self):
        arr = np.random.default_rng(3).integers(0, 256, (32, 32, 3), dtype=np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr).save(buf, format="WEBP", lossless=True)
        assert decode_image(buf.getvalue()).content_hash == decode_image(_png(arr)).content_hash


class TestPrepare:
    @pytest.mark.parametrize("hw,out", [((512, 512), (512, 512)), ((515, 517), (512, 512)), ((1024, 1024), (1024, 1024))])
    def test_sizes(self, hw, out):
        img = ImageTensor(np.zeros((*hw, 3), np.float32))
        assert prepare_for_ae(img).shape == out

    def test_center_crop_no_resample(self):
        arr = np.random.default_rng(0).random((515, 517, 3)).astype(np.float32)
        out = prepare_for_ae(ImageTensor(arr))
        np.testing.assert_array_equal(out.pixels, arr[1:513, 2:514])

    def test_too_small(self):
        with pytest.raises(ImageTooSmallError, match="image too small"):
            prepare_for_ae(ImageTensor(np.zeros((127, 300, 3), np.float32)))

    @given(st.integers(128, 300), st.integers(128, 300))
    def test_idempotent_and_aligned(self, h, w):
        img = ImageTensor(np.zeros((h, w, 3), np.float32))
        once = prepare_for_ae(img)
        assert once.height % 8 == 0 and once.width % 8 == 0
        assert h - once.height < 8 and w - once.width < 8
        assert prepare_for_ae(once) == once


class TestManifest:
    def test_two_lines(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text(
            '{"path": "a.png", "label": "real", "dataset": "laion"}\n'
            '{"path": "/abs/b.png", "label": "generated", "dataset": "SD2.1", "generator_id": "sd2"}\n'
        )
        recs = load_manifest(p)
        assert len(recs) == 2
        assert recs[0].path == str(tmp_path / "a.png")
        assert recs[1] == ManifestRecord("/abs/b.png", Label.GENERATED, "SD2.1", "sd2")

    def test_empty(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text("")
        assert load_manifest(p) == []

    def test_unknown_label(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"path": "a.png", "label": "real", "dataset": "x"}\n{"path": "b.png", "label": "fake", "dataset": "x"}\n')
        with pytest.raises(ManifestError, match="unknown label 'fake' at line 2"):
            load_manifest(p)

    def test_malformed_line(self, tmp_path):
        p = tmp_path / "m.jsonl"
        p.write_text('{"path": "a.png", "label": "real", "dataset": "x"}\n{"path": \n')
        with pytest.raises(ManifestError, match="line 2"):
            load_manifest(p)
        p.write_text('{"path": "a.png", "label": "real"}\n')
        with pytest.raises(ManifestError, match="line 1.*dataset"):
            load_manifest(p)

    def test_duplicates_kept_and_roundtrip(self, tmp_path):
        recs = [ManifestRecord(str(tmp_path / "a.png"), Label.REAL, "x")] * 2
        write_manifest(recs, tmp_path / "m.jsonl")
        assert load_manifest(tmp_path / "m.jsonl") == recs


def _records(values):
    return [
        ScoreRecord(f"h{i}", f"p{i}.png", "sd1", "lpips-vgg16-l2", v, "ds", Label.REAL if i % 2 else Label.GENERATED)
        for i, v in enumerate(values)
    ]


class TestScores:
    def test_roundtrip_three(self, tmp_path):
        recs = _records([0.1, 1 / 3, 2.0**-40])
        persist_scores(recs, tmp_path / "s.jsonl")
        assert load_scores(tmp_path / "s.jsonl") == recs

    @given(st.lists(st.floats(0, 1e6, allow_nan=False, allow_subnormal=True), max_size=20))
    def test_roundtrip_bit_exact(self, tmp_path_factory, values):
        path = tmp_path_factory.mktemp("s") / "s.jsonl"
        recs = _records(values)
        persist_scores(recs, path)
        back = load_scores(path)
        assert back == recs
        assert [r.value.hex() for r in back] == [v.hex() for v in values]

    def test_empty(self, tmp_path):
        persist_scores([], tmp_path / "s.jsonl")
        assert (tmp_path / "s.jsonl").read_bytes() == b""
        assert load_scores(tmp_path / "s.jsonl") == []

    def test_truncated(self, tmp_path):
        persist_scores(_records([0.5, 0.25]), tmp_path / "s.jsonl")
        data = (tmp_path / "s.jsonl").read_bytes()
        (tmp_path / "s.jsonl").write_bytes(data[:-20])
        first = data.index(b"\n") + 1
        with pytest.raises(ScoreFileError, match=f"line 2 \\(byte offset {first}\\)"):
            load_scores(tmp_path / "s.jsonl")

    def test_missing_file(self, tmp_path):
        with pytest.raises(OSError, match="nope.jsonl"):
            load_scores(tmp_path / "nope.jsonl")

    def test_schema_keys(self, tmp_path):
        persist_scores(_records([0.5]), tmp_path / "s.jsonl")
        obj = json.loads((tmp_path / "s.jsonl").read_text())
        assert set(obj) == {"content_hash", "path", "ae_id", "metric_id", "value", "dataset", "label"}


def test_save_image_roundtrip(tmp_path):
    arr = np.random.default_rng(0).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    img = ImageTensor(arr.astype(np.float32) / 255.0)
    save_image(img, tmp_path / "x.png")
    assert load_image(tmp_path / "x.png") == img
    assert [p.name for p in tmp_path.iterdir()] == ["x.png"]  # no temp files left


def test_cache_layout(tmp_path):
    assert recon_cache_path(tmp_path, "sd1", "abc") == tmp_path / "recon" / "sd1" / "abc.npy"
    assert score_cache_path(tmp_path, "sd1", "mse", "abc") == tmp_path / "scores" / "sd1" / "mse" / "abc.json"
