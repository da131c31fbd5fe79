"""PNG round-trips, manifests, splits, and the synthetic generator."""

import os

import numpy as np
import pytest
from PIL import Image

from ulite.data import (FG_FRACTION_RANGE, ManifestEntry, SamplePair,
                        load_dataset, load_image, load_pair, make_splits,
                        read_manifest, save_dataset, save_mask_png, save_pair,
                        scan_directory, synth_dataset, write_manifest)
from ulite.errors import DataError, InvalidInputError, ShapeError
from ulite.tensor import Tensor


def _write_png(path, array_hw_or_hwc, mode):
    Image.fromarray(array_hw_or_hwc, mode=mode).save(path)


class TestLoadPair:
    def test_pixel_values_are_exact_over_255(self, tmp_path):
        rgb = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3) * 9
        mask = np.array([[0, 127, 128], [255, 60, 200]], np.uint8)
        _write_png(tmp_path / "a.png", rgb, "RGB")
        _write_png(tmp_path / "m.png", mask, "L")
        pair = load_pair(str(tmp_path / "a.png"), str(tmp_path / "m.png"))
        assert pair.sample_id == "a"
        assert pair.image.data.shape == (1, 3, 2, 3)
        assert np.array_equal(pair.image.data[0],
                              rgb.transpose(2, 0, 1).astype(np.float32) / 255.0)
        # mask threshold sits at 128: 127 reads as background, 128 as mask
        assert pair.mask.data[0, 0].tolist() == [[0.0, 0.0, 1.0], [1.0, 0.0, 1.0]]

    def test_grayscale_image_promotes_to_rgb(self, tmp_path):
        gray = np.full((4, 4), 100, np.uint8)
        _write_png(tmp_path / "g.png", gray, "L")
        _write_png(tmp_path / "gm.png", np.zeros((4, 4), np.uint8), "L")
        pair = load_pair(str(tmp_path / "g.png"), str(tmp_path / "gm.png"))
        assert pair.image.data.shape == (1, 3, 4, 4)
        assert np.all(pair.image.data == np.float32(100 / 255))

    def test_resize_keeps_mask_binary(self, tmp_path):
        rng = np.random.default_rng(0)
        rgb = rng.integers(0, 256, (30, 30, 3), dtype=np.uint8)
        mask = (rng.random((30, 30)) < 0.4).astype(np.uint8) * 255
        _write_png(tmp_path / "i.png", rgb, "RGB")
        _write_png(tmp_path / "m.png", mask, "L")
        pair = load_pair(str(tmp_path / "i.png"), str(tmp_path / "m.png"), size=64)
        assert pair.image.data.shape == (1, 3, 64, 64)
        assert pair.mask.data.shape == (1, 1, 64, 64)
        md = pair.mask.data
        assert np.all((md == 0.0) | (md == 1.0))

    def test_size_mismatch_without_resize(self, tmp_path):
        _write_png(tmp_path / "i.png", np.zeros((4, 4, 3), np.uint8), "RGB")
        _write_png(tmp_path / "m.png", np.zeros((5, 4), np.uint8), "L")
        with pytest.raises(DataError, match="size mismatch"):
            load_pair(str(tmp_path / "i.png"), str(tmp_path / "m.png"))

    def test_missing_and_undecodable_files(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            load_pair(str(tmp_path / "no.png"), str(tmp_path / "no.png"))
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"this is not a png")
        _write_png(tmp_path / "m.png", np.zeros((2, 2), np.uint8), "L")
        with pytest.raises(DataError, match="cannot decode"):
            load_pair(str(bad), str(tmp_path / "m.png"))

    def test_load_image_alone(self, tmp_path):
        _write_png(tmp_path / "solo.png", np.full((4, 4, 3), 51, np.uint8), "RGB")
        stem, image = load_image(str(tmp_path / "solo.png"))
        assert stem == "solo"
        assert image.data.shape == (1, 3, 4, 4)
        assert np.all(image.data == np.float32(0.2))


class TestSaveRoundTrip:
    def test_save_then_load_is_lossless_after_quantization(self, tmp_path):
        pair = synth_dataset(1, seed=4, size=32)[0]
        save_pair(pair, str(tmp_path / "images"), str(tmp_path / "masks"))
        back = load_pair(str(tmp_path / "images" / f"{pair.sample_id}.png"),
                         str(tmp_path / "masks" / f"{pair.sample_id}.png"))
        quantized = np.rint(pair.image.data * 255.0) / 255.0
        assert np.allclose(back.image.data, quantized.astype(np.float32), atol=0)
        assert np.array_equal(back.mask.data, pair.mask.data)

    def test_save_mask_png_writes_0_255(self, tmp_path):
        mask = np.array([[0.0, 1.0], [1.0, 0.0]], np.float32)
        save_mask_png(mask, str(tmp_path / "m.png"))
        stored = np.asarray(Image.open(tmp_path / "m.png"))
        assert stored.tolist() == [[0, 255], [255, 0]]


class TestSamplePairValidation:
    def test_rejects_wrong_shapes_and_ranges(self):
        good_img = np.zeros((1, 3, 4, 4), np.float32)
        good_mask = np.zeros((1, 1, 4, 4), np.float32)
        with pytest.raises(ShapeError):
            SamplePair("x", Tensor(np.zeros((1, 1, 4, 4), np.float32)),
                       Tensor(good_mask))
        with pytest.raises(ShapeError):
            SamplePair("x", Tensor(good_img),
                       Tensor(np.zeros((1, 1, 4, 5), np.float32)))
        with pytest.raises(InvalidInputError, match="outside"):
            SamplePair("x", Tensor(good_img + 2.0), Tensor(good_mask))
        with pytest.raises(InvalidInputError, match="binary"):
            SamplePair("x", Tensor(good_img), Tensor(good_mask + 0.5))


class TestManifest:
    def test_round_trip_resolves_relative_paths(self, tmp_path):
        entries = [ManifestEntry("s0", "images/s0.png", "masks/s0.png", "train"),
                   ManifestEntry("s1", "images/s1.png", "masks/s1.png", "test")]
        path = tmp_path / "manifest.csv"
        write_manifest(entries, str(path))
        back = read_manifest(str(path))
        assert [e.sample_id for e in back] == ["s0", "s1"]
        assert back[0].image_path == str(tmp_path / "images" / "s0.png")
        assert back[1].split == "test"

    def test_bad_header_and_bad_row(self, tmp_path):
        p = tmp_path / "manifest.csv"
        p.write_text("name,img,msk,split\n")
        with pytest.raises(DataError, match="header"):
            read_manifest(str(p))
        p.write_text("id,image,mask,split\nonly,three,columns\n")
        with pytest.raises(DataError, match="line 2"):
            read_manifest(str(p))

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            read_manifest(str(tmp_path / "manifest.csv"))


class TestScanAndLoadDataset:
    def _dataset_on_disk(self, tmp_path, count=3):
        pairs = synth_dataset(count, seed=1, size=32)
        return save_dataset(pairs, str(tmp_path / "ds")), pairs

    def test_scan_requires_masks(self, tmp_path):
        self._dataset_on_disk(tmp_path)
        root = tmp_path / "ds"
        entries = scan_directory(str(root))
        assert len(entries) == 3
        os.unlink(os.path.join(root, "masks", entries[0].sample_id + ".png"))
        with pytest.raises(DataError, match="missing mask"):
            scan_directory(str(root))

    def test_scan_missing_images_dir(self, tmp_path):
        with pytest.raises(DataError, match="images/"):
            scan_directory(str(tmp_path))

    def test_load_dataset_split_filter(self, tmp_path):
        pairs = synth_dataset(4, seed=2, size=32)
        save_dataset(pairs, str(tmp_path / "ds"),
                     splits=["train", "train", "val", "test"])
        assert len(load_dataset(str(tmp_path / "ds"), split="train")) == 2
        assert len(load_dataset(str(tmp_path / "ds"), split="val")) == 1
        assert len(load_dataset(str(tmp_path / "ds"), split="all")) == 4
        with pytest.raises(DataError, match="no samples"):
            load_dataset(str(tmp_path / "ds"), split="holdout")

    def test_load_dataset_without_manifest_scans(self, tmp_path):
        manifest, _ = self._dataset_on_disk(tmp_path)
        os.unlink(manifest)
        assert len(load_dataset(str(tmp_path / "ds"))) == 3


class TestMakeSplits:
    def _entries(self, n):
        return [ManifestEntry(f"s{i}", f"i{i}.png", f"m{i}.png") for i in range(n)]

    def test_617_at_80_20_gives_494_123(self):
        labeled = make_splits(self._entries(617), (0.8, 0.0, 0.2), seed=0)
        counts = {split: sum(e.split == split for e in labeled)
                  for split in ("train", "val", "test")}
        assert counts == {"train": 494, "val": 0, "test": 123}
        assert [e.sample_id for e in labeled] == [f"s{i}" for i in range(617)]

    def test_non_train_floors_train_takes_remainder(self):
        labeled = make_splits(self._entries(10), (0.7, 0.15, 0.15), seed=1)
        counts = [sum(e.split == s for e in labeled)
                  for s in ("train", "val", "test")]
        assert counts == [8, 1, 1]   # floor(1.5) = 1 each, train absorbs the rest

    def test_seed_controls_assignment(self):
        a = make_splits(self._entries(50), (0.5, 0.25, 0.25), seed=3)
        b = make_splits(self._entries(50), (0.5, 0.25, 0.25), seed=3)
        c = make_splits(self._entries(50), (0.5, 0.25, 0.25), seed=4)
        assert [e.split for e in a] == [e.split for e in b]
        assert [e.split for e in a] != [e.split for e in c]

    def test_bad_ratios(self):
        with pytest.raises(ValueError):
            make_splits(self._entries(4), (0.5, 0.2, 0.2), seed=0)
        with pytest.raises(ValueError):
            make_splits(self._entries(4), (1.2, -0.1, -0.1), seed=0)


class TestSynthetic:
    def test_deterministic_per_seed(self):
        a = synth_dataset(3, seed=9, size=32)
        b = synth_dataset(3, seed=9, size=32)
        c = synth_dataset(3, seed=10, size=32)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.image.data, pb.image.data)
            assert np.array_equal(pa.mask.data, pb.mask.data)
        assert any(not np.array_equal(pa.mask.data, pc.mask.data)
                   for pa, pc in zip(a, c))

    def test_foreground_fraction_and_binarity(self):
        lo, hi = FG_FRACTION_RANGE
        for pair in synth_dataset(10, seed=5, size=48):
            md = pair.mask.data
            assert np.all((md == 0.0) | (md == 1.0))
            assert lo <= md.mean() <= hi
            assert pair.image.data.min() >= 0.0
            assert pair.image.data.max() <= 1.0

    def test_ids_are_stable(self):
        pairs = synth_dataset(2, seed=0, size=32)
        assert [p.sample_id for p in pairs] == ["synth0000", "synth0001"]

    def test_count_validation(self):
        with pytest.raises(ValueError):
            synth_dataset(0, seed=0)

    def test_save_dataset_manifest_contents(self, tmp_path):
        pairs = synth_dataset(2, seed=6, size=32)
        manifest = save_dataset(pairs, str(tmp_path / "out"), splits=["train", "val"])
        entries = read_manifest(manifest)
        assert [e.split for e in entries] == ["train", "val"]
        for e in entries:
            assert os.path.isfile(e.image_path) and os.path.isfile(e.mask_path)
