"""Synthetic pair generation, PNG round trips, and tiling arithmetic."""

import numpy as np
import pytest
from PIL import Image

from changescan import data as D, tensor as T
from changescan.viz import IoError


class TestSynthConfig:
    @pytest.mark.parametrize("bad", [
        dict(count=0), dict(height=63), dict(width=40),
        dict(min_shapes=3, max_shapes=1), dict(min_shapes=-1),
        dict(kinds=("triangle",)),
    ])
    def test_rejects(self, bad):
        with pytest.raises(ValueError):
            D.SynthConfig(**bad)


class TestGenerate:
    def test_shapes_and_ranges(self):
        pairs = D.generate_synthetic(D.SynthConfig(count=3, seed=1))
        assert len(pairs) == 3
        for p in pairs:
            assert p.img_t1.shape == (3, 64, 64)
            assert p.img_t1.dtype == np.float32
            assert p.label.shape == (64, 64)
            assert set(np.unique(p.label)) <= {0, 1}
            for img in (p.img_t1, p.img_t2):
                assert img.min() >= 0.0 and img.max() <= 1.0
        assert [p.id for p in pairs] == ["synth0000", "synth0001", "synth0002"]

    def test_same_seed_bit_identical(self):
        cfg = D.SynthConfig(count=4, seed=9)
        a = D.generate_synthetic(cfg)
        b = D.generate_synthetic(cfg)
        for pa, pb in zip(a, b):
            np.testing.assert_array_equal(pa.img_t1, pb.img_t1)
            np.testing.assert_array_equal(pa.img_t2, pb.img_t2)
            np.testing.assert_array_equal(pa.label, pb.label)

    def test_different_seeds_differ(self):
        a = D.generate_synthetic(D.SynthConfig(count=1, seed=0))[0]
        b = D.generate_synthetic(D.SynthConfig(count=1, seed=1))[0]
        assert np.abs(a.img_t1 - b.img_t1).max() > 1e-3

    def test_zero_changed_shapes_means_empty_label(self):
        cfg = D.SynthConfig(count=5, min_shapes=0, max_shapes=0, seed=2)
        for p in D.generate_synthetic(cfg):
            assert p.label.sum() == 0

    def test_single_rectangle_label_is_solid(self):
        # exactly one inserted/removed rectangle: the label must be a
        # filled axis-aligned box, so positives == bounding-box area
        cfg = D.SynthConfig(count=8, min_shapes=1, max_shapes=1,
                            static_shapes=0, kinds=("rect",), seed=3)
        for p in D.generate_synthetic(cfg):
            ys, xs = np.nonzero(p.label)
            area = (ys.max() - ys.min() + 1) * (xs.max() - xs.min() + 1)
            assert p.label.sum() == area > 0

    def test_change_region_has_contrast(self):
        pairs = D.generate_synthetic(D.SynthConfig(count=10, seed=4))
        inside, outside = [], []
        for p in pairs:
            diff = np.abs(p.img_t1 - p.img_t2).mean(axis=0)
            m = p.label.astype(bool)
            if m.any() and (~m).any():
                inside.append(diff[m].mean())
                outside.append(diff[~m].mean())
        assert np.mean(inside) > np.mean(outside) + 0.1


class TestIo:
    def test_round_trip(self, tmp_path):
        pairs = D.generate_synthetic(D.SynthConfig(count=3, seed=5))
        D.write_dataset(tmp_path, pairs)
        back = D.load_dataset(tmp_path)
        assert [p.id for p in back] == [p.id for p in pairs]
        for orig, got in zip(pairs, back):
            np.testing.assert_array_equal(orig.label, got.label)
            assert np.abs(orig.img_t1 - got.img_t1).max() <= 1.0 / 255.0
            assert np.abs(orig.img_t2 - got.img_t2).max() <= 1.0 / 255.0

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(IoError):
            D.load_pair(tmp_path / "a.png", tmp_path / "b.png")

    def test_missing_dataset_dir(self, tmp_path):
        with pytest.raises(IoError):
            D.load_dataset(tmp_path / "nope")

    def test_extent_mismatch(self, tmp_path):
        Image.new("RGB", (8, 8)).save(tmp_path / "a.png")
        Image.new("RGB", (8, 16)).save(tmp_path / "b.png")
        with pytest.raises(T.ShapeError):
            D.load_pair(tmp_path / "a.png", tmp_path / "b.png")

    def test_label_thresholding_and_default(self, tmp_path):
        Image.new("RGB", (4, 4)).save(tmp_path / "a.png")
        Image.new("RGB", (4, 4)).save(tmp_path / "b.png")
        faint = np.zeros((4, 4), dtype=np.uint8)
        faint[1, 2] = 7                      # any nonzero counts as change
        Image.fromarray(faint, mode="L").save(tmp_path / "m.png")
        pair = D.load_pair(tmp_path / "a.png", tmp_path / "b.png",
                           tmp_path / "m.png")
        assert pair.label.sum() == 1 and pair.label[1, 2] == 1
        bare = D.load_pair(tmp_path / "a.png", tmp_path / "b.png")
        assert bare.label.sum() == 0


def make_sample(rng, side=96):
    return D.SamplePair(
        rng.random((3, side, side)).astype(np.float32),
        rng.random((3, side, side)).astype(np.float32),
        (rng.random((side, side)) < 0.3).astype(np.uint8), "big")


class TestTile:
    def test_exact_cover_single_tile(self, rng):
        s = make_sample(rng, side=64)
        tiles = D.tile(s, 64, 64)
        assert len(tiles) == 1
        np.testing.assert_array_equal(tiles[0].img_t1, s.img_t1)
        assert tiles[0].id == "big_y0x0"

    def test_96_with_stride_32_gives_four(self, rng):
        tiles = D.tile(make_sample(rng), 64, 32)
        assert len(tiles) == 4
        assert {t.id for t in tiles} == {
            "big_y0x0", "big_y0x32", "big_y32x0", "big_y32x32"}

    def test_remainder_anchors_to_border(self, rng):
        tiles = D.tile(make_sample(rng), 64, 64)
        assert {t.id for t in tiles} == {
            "big_y0x0", "big_y0x32", "big_y32x0", "big_y32x32"}

    def test_tiles_match_crops(self, rng):
        s = make_sample(rng)
        for t in D.tile(s, 64, 32):
            ay, ax = (int(v) for v in
                      t.id.split("_y")[1].split("x"))
            np.testing.assert_array_equal(
                t.label, s.label[ay:ay + 64, ax:ax + 64])
            np.testing.assert_array_equal(
                t.img_t2, s.img_t2[:, ay:ay + 64, ax:ax + 64])

    def test_full_coverage(self, rng):
        s = make_sample(rng)
        hit = np.zeros((96, 96), dtype=int)
        for t in D.tile(s, 64, 32):
            ay, ax = (int(v) for v in t.id.split("_y")[1].split("x"))
            hit[ay:ay + 64, ax:ax + 64] += 1
        assert hit.min() >= 1

    def test_rejections(self, rng):
        s = make_sample(rng, side=64)
        with pytest.raises(T.ShapeError):
            D.tile(s, 128, 64)
        with pytest.raises(ValueError):
            D.tile(s, 48, 48)
        with pytest.raises(ValueError):
            D.tile(s, 64, 0)
