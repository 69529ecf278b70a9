"""Flow prediction, bilinear warping, CFG merging, and the decode head."""

import numpy as np
import pytest

from changescan import decoder as D, tensor as T, viz
from conftest import check_grads


def reference_upsample2x(x: np.ndarray) -> np.ndarray:
    """Independent bilinear doubling with sample points at p/2."""
    c, h, w = x.shape
    out = np.zeros((c, 2 * h, 2 * w), dtype=np.float64)
    for i in range(2 * h):
        for j in range(2 * w):
            sy, sx = i / 2.0, j / 2.0
            y0, x0 = int(np.floor(sy)), int(np.floor(sx))
            wy, wx = sy - y0, sx - x0
            y1 = min(y0 + 1, h - 1)
            x1 = min(x0 + 1, w - 1)
            out[:, i, j] = ((1 - wy) * (1 - wx) * x[:, y0, x0]
                            + (1 - wy) * wx * x[:, y0, x1]
                            + wy * (1 - wx) * x[:, y1, x0]
                            + wy * wx * x[:, y1, x1])
    return out


class TestFlowWarp:
    def test_zero_flow_is_bilinear_upsampling(self, rng):
        x = rng.standard_normal((3, 4, 5))
        got = D.upsample2x(T.Tensor(x)).data
        np.testing.assert_allclose(got, reference_upsample2x(x), atol=1e-6)

    def test_constant_map_invariant_to_flow(self, rng):
        x = np.full((2, 4, 4), 3.25)
        flow = T.Tensor(rng.uniform(-3, 3, size=(8, 8, 2)))
        out = D.flow_warp(T.Tensor(x), flow).data
        np.testing.assert_allclose(out, 3.25, rtol=1e-6)

    def test_two_pixel_flow_shifts_ramp_one_column(self):
        h, w = 4, 6
        coarse = np.tile(np.arange(w, dtype=np.float64), (h, 1))[None]
        flow = np.zeros((2 * h, 2 * w, 2))
        flow[..., 0] = 2.0
        out = D.flow_warp(T.Tensor(coarse), T.Tensor(flow)).data
        base = D.upsample2x(T.Tensor(coarse)).data
        # sampling at (j + 2)/2 = j/2 + 1: one full coarse column right,
        # saturating at the clamped border
        np.testing.assert_allclose(out[:, :, :-2],
                                   np.minimum(base + 1.0, w - 1)[:, :, :-2],
                                   rtol=1e-12)
        np.testing.assert_allclose(out[:, :, -2:], w - 1, rtol=1e-12)

    def test_weights_sum_to_one_everywhere(self, rng):
        # ones stay ones under any displacement, including far out of range
        ones = np.ones((1, 3, 3))
        flow = rng.uniform(-50, 50, size=(6, 6, 2))
        out = D.flow_warp(T.Tensor(ones), T.Tensor(flow)).data
        np.testing.assert_allclose(out, 1.0, rtol=1e-12)

    def test_linear_in_coarse_map(self, rng):
        a = rng.standard_normal((2, 3, 4))
        b = rng.standard_normal((2, 3, 4))
        flow = T.Tensor(rng.uniform(-2, 2, size=(6, 8, 2)))
        mixed = D.flow_warp(T.Tensor(1.5 * a - 0.5 * b), flow).data
        want = (1.5 * D.flow_warp(T.Tensor(a), flow).data
                - 0.5 * D.flow_warp(T.Tensor(b), flow).data)
        np.testing.assert_allclose(mixed, want, rtol=1e-5, atol=1e-6)

    def test_shape_contract(self, rng):
        with pytest.raises(T.ShapeError):
            D.flow_warp(T.Tensor(np.zeros((1, 4, 4))),
                        T.Tensor(np.zeros((4, 4, 2))))

    def test_gradients_match_finite_differences(self, rng):
        x = rng.standard_normal((2, 3, 3))
        # keep sample points off the lattice: floor() kinks break FD there
        flow = rng.uniform(0.1, 0.9, size=(6, 6, 2))
        m = rng.standard_normal((2, 6, 6))
        check_grads(
            lambda tx, tf: (D.flow_warp(tx, tf) * T.Tensor(m)).sum(),
            [x, flow], rel_tol=1e-6)

    def test_gradient_with_border_clamping(self, rng):
        x = rng.standard_normal((1, 3, 3))
        flow = rng.uniform(3.3, 7.7, size=(6, 6, 2))  # mostly out of range
        check_grads(
            lambda tx, tf: (D.flow_warp(tx, tf) ** 2).sum(),
            [x, flow], rel_tol=1e-6)


class TestFlowMake:
    def test_zero_initialized_head_gives_zero_flow(self, rng):
        fm = D.FlowMake(3, 3, 8, rng)
        coarse = T.Tensor(rng.standard_normal((3, 4, 4)))
        fine = T.Tensor(rng.standard_normal((3, 8, 8)))
        np.testing.assert_array_equal(fm(coarse, fine).data, 0.0)

    def test_output_extents(self, rng):
        fm = D.FlowMake(5, 7, 8, rng)
        fm.w2.data[:] = rng.standard_normal(fm.w2.shape) * 0.01
        flow = fm(T.Tensor(rng.standard_normal((5, 8, 8))),
                  T.Tensor(rng.standard_normal((7, 16, 16))))
        assert flow.shape == (16, 16, 2)
        # learned displacements stay within sane range on random inputs
        assert np.abs(flow.data).max() < 16 + 16

    def test_extent_mismatch_rejected(self, rng):
        fm = D.FlowMake(2, 2, 4, rng)
        with pytest.raises(T.ShapeError):
            fm(T.Tensor(np.zeros((2, 4, 4))), T.Tensor(np.zeros((2, 6, 6))))

    def test_gradient(self, rng):
        with T.precision(np.float64):
            fm = D.FlowMake(2, 2, 4, rng)
        fm.w2.data[:] = rng.standard_normal(fm.w2.shape) * 0.1
        coarse = rng.standard_normal((2, 3, 3))
        fine = rng.standard_normal((2, 6, 6))
        named = fm.named_tensors("")
        names = [n for n, _ in named]

        def build(tc, tf, *params):
            m = D.FlowMake.__new__(D.FlowMake)
            for name, p in zip(names, params):
                setattr(m, name, p)
            return (m(tc, tf) ** 2).sum()

        check_grads(build, [coarse, fine] + [t.data for _, t in named],
                    rel_tol=1e-5)


class TestCfgLevel:
    def test_zero_fine_zero_flow_reduces_to_conv_of_upsample(self, rng):
        level = D.CfgLevel(4, rng)
        coarse = T.Tensor(rng.standard_normal((4, 4, 4)))
        fine = T.Tensor(np.zeros((4, 8, 8)))
        merged, flow = level(coarse, fine)
        np.testing.assert_array_equal(flow.data, 0.0)
        up = D.upsample2x(coarse)
        want = D._conv3x3(up, level.w_post, level.b_post).data
        np.testing.assert_allclose(merged.data, want, rtol=1e-6)

    def test_shapes(self, rng):
        level = D.CfgLevel(4, rng)
        merged, _ = level(T.Tensor(np.zeros((4, 8, 8))),
                          T.Tensor(np.zeros((4, 16, 16))))
        assert merged.shape == (4, 16, 16)

    def test_no_flow_mode_skips_flow_entirely(self, rng):
        level = D.CfgLevel(4, rng, use_flow=False)
        merged, flow = level(T.Tensor(rng.standard_normal((4, 4, 4))),
                             T.Tensor(rng.standard_normal((4, 8, 8))))
        assert flow is None
        assert level.flow_make is None
        assert merged.shape == (4, 8, 8)
        names = [n for n, _ in level.named_tensors("lvl.")]
        assert not any("flow" in n for n in names)

    def test_gradient(self, rng):
        with T.precision(np.float64):
            level = D.CfgLevel(2, rng)
        level.flow_make.w2.data[:] = rng.standard_normal(
            level.flow_make.w2.shape) * 0.1
        coarse = rng.standard_normal((2, 2, 2))
        fine = rng.standard_normal((2, 4, 4))
        check_grads(
            lambda tc, tf: (level(tc, tf)[0] ** 2).mean(),
            [coarse, fine], rel_tol=1e-5)


class TestDecoder:
    def _feats(self, rng, base=4):
        chans = [base, 2 * base, 4 * base, 8 * base]
        sizes = [16, 8, 4, 2]
        change = [T.Tensor(rng.standard_normal((c, s, s)))
                  for c, s in zip(chans, sizes)]
        lats = [T.Tensor(rng.standard_normal((2 * c, s, s)))
                for c, s in zip(chans, sizes)]
        pair = (T.Tensor(rng.random((3, 64, 64))),
                T.Tensor(rng.random((3, 64, 64))))
        return chans, change, lats, pair

    def test_probability_simplex(self, rng):
        chans, change, lats, pair = self._feats(rng)
        dec = D.Decoder(chans, width=8, rng=rng)
        probs, flows = dec(change, lats, pair)
        assert probs.shape == (2, 64, 64)
        assert np.all(probs.data >= 0.0)
        np.testing.assert_allclose(probs.data.sum(axis=0), 1.0, atol=1e-6)
        assert len(flows) == 3

    def test_deterministic(self, rng):
        with T.precision(np.float64):
            chans, change, lats, pair = self._feats(rng)
            dec = D.Decoder(chans, width=8, rng=np.random.default_rng(5))
            a, _ = dec(change, lats, pair)
            b, _ = dec(change, lats, pair)
        np.testing.assert_array_equal(a.data, b.data)

    def test_requires_four_stages(self, rng):
        chans, change, lats, pair = self._feats(rng)
        dec = D.Decoder(chans, width=8, rng=rng)
        with pytest.raises(T.ShapeError):
            dec(change[:3], lats[:3], pair)

    def test_detail_branch_reads_the_difference(self, rng):
        # identical inputs cancel in the [V,-V] detail convolution, so
        # swapping in a different second image must move the output
        chans, change, lats, pair = self._feats(rng)
        dec = D.Decoder(chans, width=8, rng=rng)
        same, _ = dec(change, lats, (pair[0], pair[0]))
        mixed, _ = dec(change, lats, pair)
        assert np.abs(mixed.data - same.data).max() > 1e-6

    def test_no_flow_mode(self, rng):
        chans, change, lats, pair = self._feats(rng)
        dec = D.Decoder(chans, width=8, rng=rng, use_flow=False)
        probs, flows = dec(change, lats, pair)
        assert flows == [None, None, None]
        np.testing.assert_allclose(probs.data.sum(axis=0), 1.0, atol=1e-6)
        names = [n for n, _ in dec.named_tensors()]
        assert not any(".flow." in n for n in names)

    def test_argmax_labels(self):
        probs = np.zeros((2, 2, 2))
        probs[1] = [[0.6, 0.4], [0.2, 0.9]]
        probs[0] = 1.0 - probs[1]
        labels = D.predict_labels(probs)
        np.testing.assert_array_equal(labels, [[1, 0], [0, 1]])
        assert labels.dtype == np.uint8


class TestFlowVisualization:
    def test_zero_flow_uniform_black(self, tmp_path):
        path = tmp_path / "flow.png"
        viz.emit_flow_visualization(np.zeros((5, 7, 2)), path)
        from PIL import Image
        img = np.asarray(Image.open(path))
        assert img.shape == (5, 7, 3)
        np.testing.assert_array_equal(img, 0)

    def test_constant_flow_uniform_color(self, tmp_path):
        path = tmp_path / "flow.png"
        flow = np.zeros((4, 4, 2))
        flow[..., 0] = 1.0
        viz.emit_flow_visualization(flow, path)
        from PIL import Image
        img = np.asarray(Image.open(path))
        assert (img == img[0, 0]).all()
        assert img[0, 0].max() > 0

    def test_random_flow_extents(self, tmp_path, rng):
        path = tmp_path / "flow.png"
        viz.emit_flow_visualization(rng.standard_normal((9, 13, 2)), path)
        from PIL import Image
        assert Image.open(path).size == (13, 9)

    def test_bad_shape_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            viz.emit_flow_visualization(np.zeros((4, 4, 3)), tmp_path / "x.png")

    def test_unwritable_path_raises(self):
        with pytest.raises(viz.IoError):
            viz.emit_flow_visualization(np.zeros((4, 4, 2)),
                                        "/no/such/dir/flow.png")


class TestMaskAndOverlay:
    def test_mask_values(self, tmp_path):
        labels = np.array([[0, 1], [1, 0]], dtype=np.uint8)
        path = tmp_path / "mask.png"
        viz.save_mask(labels, path)
        from PIL import Image
        img = np.asarray(Image.open(path))
        np.testing.assert_array_equal(img, labels * 255)

    def test_overlay_colors(self, tmp_path):
        pred = np.array([[1, 1], [0, 0]], dtype=np.uint8)
        truth = np.array([[1, 0], [1, 0]], dtype=np.uint8)
        path = tmp_path / "overlay.png"
        viz.save_overlay(pred, truth, path)
        from PIL import Image
        img = np.asarray(Image.open(path))
        np.testing.assert_array_equal(img[0, 0], (255, 255, 255))  # hit
        np.testing.assert_array_equal(img[0, 1], (255, 0, 0))      # false alarm
        np.testing.assert_array_equal(img[1, 0], (0, 0, 255))      # miss
        np.testing.assert_array_equal(img[1, 1], (0, 0, 0))        # rejection
