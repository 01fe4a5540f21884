import json
import math

import numpy as np
import pytest
from PIL import Image

from fixtures import (
    GRID,
    IMAGE,
    blob_pixel_box,
    blob_stacks,
    box_contains,
    cancellation_stacks,
    test_image as make_image,
)
from oracles import bfs_components
from promptcd.attention import (
    AttentionStack,
    FusionSpec,
    RefineSpec,
    carve,
    connected_components,
    contrast_attention,
    fuse_layers,
    load_image,
    percentile_threshold,
    refine_image,
    save_image,
    select_regions,
    upscale_mask,
    value_threshold,
)
from promptcd.distribution import InvalidInputError


class TestAttentionStack:
    def test_rejects_negative(self):
        with pytest.raises(InvalidInputError):
            AttentionStack(np.array([[[-1.0, 0.0]]]))

    def test_json_round_trip(self, rng):
        a = AttentionStack(rng.uniform(size=(2, 3, 4)))
        b = AttentionStack.from_json(json.loads(json.dumps(a.to_json())))
        np.testing.assert_array_equal(a.data, b.data)

    def test_json_length_checked(self):
        with pytest.raises(InvalidInputError):
            AttentionStack.from_json({"layers": 2, "height": 2, "width": 2, "data": [0.0] * 7})

    def test_layer_major_order(self):
        doc = {"layers": 2, "height": 1, "width": 2, "data": [1, 2, 3, 4]}
        a = AttentionStack.from_json(doc)
        assert a.data[1, 0, 0] == 3 and a.data[0, 0, 1] == 2

    def test_raw_round_trip(self, rng, tmp_path):
        a = AttentionStack(rng.uniform(size=(3, 5, 2)).astype(np.float32))
        blob = a.to_raw()
        assert blob[:4] == b"ATTN" and len(blob) == 16 + 4 * 30
        path = tmp_path / "a.attn"
        a.save(path, raw=True)
        np.testing.assert_array_equal(AttentionStack.load(path).data, a.data)

    def test_raw_bad_magic(self):
        with pytest.raises(InvalidInputError):
            AttentionStack.from_raw(b"XXXX" + bytes(12))


class TestContrast:
    def test_uniform_negative_keeps_argmax(self, rng):
        pos = AttentionStack(rng.uniform(size=(4, 6, 6)))
        neg = AttentionStack(np.full((4, 6, 6), 0.3))
        out = contrast_attention(pos, neg, 1e-6)
        for l in range(4):
            assert np.argmax(out.data[l]) == np.argmax(pos.data[l])

    def test_self_contrast_preserves_order(self, rng):
        a = AttentionStack(rng.uniform(size=(2, 5, 5)))
        out = contrast_attention(a, a, 0.01)
        np.testing.assert_allclose(out.data, a.data / (a.data + 0.01))
        for l in range(2):
            assert (np.argsort(out.data[l], axis=None) == np.argsort(a.data[l], axis=None)).all()

    @pytest.mark.parametrize("r, bound", [(100, 0.02), (10, 1 / 11), (1000, 1 / 1001)])
    def test_cancellation(self, rng, r, bound):
        eps = 1e-3
        pos, neg, specific = cancellation_stacks(rng, r, eps)
        out = contrast_attention(AttentionStack(pos), AttentionStack(neg), eps).data
        # oracle: the exact residual factor generic / (generic + eps) applied to the specific signal
        exact = specific * (neg / (neg + eps))
        np.testing.assert_allclose(out, exact, rtol=1e-12)
        norm = lambda x: x / x.sum(axis=(1, 2), keepdims=True)
        dev = np.abs(norm(out) - norm(specific)) / norm(specific)
        assert dev.max() <= bound + 1e-6

    def test_shape_mismatch(self):
        with pytest.raises(InvalidInputError):
            contrast_attention(AttentionStack(np.ones((1, 2, 2))), AttentionStack(np.ones((1, 2, 3))))

    def test_epsilon_positive(self):
        a = AttentionStack(np.ones((1, 2, 2)))
        with pytest.raises(InvalidInputError):
            contrast_attention(a, a, 0.0)


class TestFusion:
    def test_single_layer(self, rng):
        a = AttentionStack(rng.uniform(size=(5, 4, 4)))
        np.testing.assert_array_equal(fuse_layers(a, FusionSpec(2, 2, (1.0,))), a.data[2])

    def test_identical_layers(self, rng):
        layer = rng.uniform(size=(4, 4))
        a = AttentionStack(np.stack([layer] * 3))
        np.testing.assert_allclose(fuse_layers(a, FusionSpec(0, 2, (0.1, 0.3, 0.6))), layer, atol=1e-15)

    def test_default_ramp(self):
        f = FusionSpec.ramp()
        assert (f.lo, f.hi) == (20, 25)
        # w_l proportional to l - 19 over 20..25: 1..6 / 21
        np.testing.assert_allclose(f.weights, np.arange(1, 7) / 21, atol=1e-15)
        assert math.fsum(f.weights) == pytest.approx(1.0, abs=1e-12)
        assert f.weights[-1] / f.weights[0] == pytest.approx(6.0, abs=1e-12)

    def test_out_of_range(self):
        with pytest.raises(InvalidInputError):
            fuse_layers(AttentionStack(np.ones((10, 2, 2))), FusionSpec.ramp())

    def test_weights_must_increase(self):
        with pytest.raises(InvalidInputError):
            FusionSpec(0, 1, (0.7, 0.3))


class TestPercentile:
    def test_full(self, rng):
        s = rng.uniform(size=(6, 6))
        tau, m = percentile_threshold(s, 1.0)
        assert m.all() and tau == s.min()

    def test_single_max(self, rng):
        s = rng.permutation(100).reshape(10, 10).astype(float)
        _, m = percentile_threshold(s, 1 / 100)
        assert m.sum() == 1 and m[np.unravel_index(np.argmax(s), s.shape)]

    def test_exact_fraction_no_float_creep(self):
        s = np.arange(100, dtype=float).reshape(10, 10)
        assert percentile_threshold(s, 0.3)[1].sum() == 30

    def test_against_sort_oracle(self, rng):
        for _ in range(300):
            s = rng.integers(0, 8, size=(int(rng.integers(1, 12)), int(rng.integers(1, 12)))).astype(float)
            p = float(rng.uniform(0.01, 1.0))
            n = s.size
            need = math.ceil(round(p * n, 9))
            tau, m = percentile_threshold(s, p)
            ranked = sorted(s.ravel().tolist(), reverse=True)
            assert tau == ranked[need - 1]
            ties = sum(1 for x in ranked if x == tau)
            assert need <= m.sum() <= need + ties

    def test_value_mode(self):
        s = np.array([[0.0, 5.0], [10.0, 2.0]])
        tau, m = value_threshold(s, 0.5)
        assert tau == 5.0 and m.tolist() == [[False, True], [True, False]]

    def test_bad_p(self):
        with pytest.raises(InvalidInputError):
            percentile_threshold(np.ones((2, 2)), 0.0)


class TestComponents:
    def test_empty(self):
        assert len(connected_components(np.zeros((5, 5), bool))) == 0

    def test_full(self):
        rs = connected_components(np.ones((4, 7), bool))
        assert len(rs) == 1 and rs.components[0].box == (0, 0, 7, 4)

    def test_diagonal_is_connected(self):
        m = np.eye(5, dtype=bool)
        assert len(connected_components(m)) == 1

    def test_sorted_by_score(self):
        m = np.zeros((5, 9), bool)
        m[0:2, 0:2] = True  # left blob, 4 cells
        m[3:5, 6:9] = True  # right blob, 6 cells
        s = np.ones((5, 9))
        s[0:2, 0:2] = 5.0
        rs = connected_components(m, s)
        assert [r.score for r in rs.components] == [20.0, 6.0]
        assert rs.components[0].box == (0, 0, 2, 2)
        assert rs.components[1].box == (6, 3, 9, 5)

    def test_ties_in_raster_order(self):
        m = np.zeros((3, 5), bool)
        m[2, 0] = m[0, 4] = True
        rs = connected_components(m)
        assert rs.components[0].box == (4, 0, 5, 1)

    def test_against_bfs(self, rng):
        for _ in range(100):
            m = rng.uniform(size=(12, 12)) < rng.uniform(0.2, 0.7)
            rs = connected_components(m)
            ours = {frozenset(map(tuple, r.pixels.tolist())) for r in rs.components}
            assert ours == set(bfs_components(m.tolist()))

    def test_tight_boxes(self, rng):
        m = rng.uniform(size=(20, 20)) < 0.3
        for r in connected_components(m).components:
            ys, xs = r.pixels[:, 0], r.pixels[:, 1]
            assert r.box == (xs.min(), ys.min(), xs.max() + 1, ys.max() + 1)


class TestSelect:
    def test_k_large_is_mask(self, rng):
        m = rng.uniform(size=(10, 10)) < 0.4
        rs = connected_components(m)
        np.testing.assert_array_equal(select_regions(rs, 1000), m)

    def test_two_blobs(self):
        m = np.zeros((6, 6), bool)
        m[0, 0:2] = True
        m[4:6, 4:6] = True
        s = np.zeros((6, 6))
        s[0, 0:2] = [3.0, 4.0]  # 7
        s[4:6, 4:6] = 1.5  # 6
        rs = connected_components(m, s)
        expected = sorted(rs.components, key=lambda r: -r.score)[0]
        top = select_regions(rs, 1)
        assert top.sum() == len(expected.pixels) == 2 and top[0, 0] and top[0, 1]

    def test_k_positive(self):
        with pytest.raises(InvalidInputError):
            select_regions(connected_components(np.ones((2, 2), bool)), 0)


class TestRefine:
    def test_full_mask_is_resize(self, rng):
        img = make_image(rng)
        spec = RefineSpec(target_w=32, target_h=48)
        out, info = refine_image(img, np.ones((4, 4), bool), spec)
        expected = np.asarray(Image.fromarray(img).resize((32, 48), Image.BILINEAR))
        np.testing.assert_array_equal(out, expected)
        assert info["crop_box"] == [0, 0, 64, 64]

    def test_single_quadrant(self, rng):
        img = make_image(rng)
        m = np.zeros((2, 2), bool)
        m[1, 0] = True
        _, info = refine_image(img, m, RefineSpec(target_w=16, target_h=16))
        assert info["crop_box"] == [0, 32, 32, 64]
        _, info = refine_image(img, m, RefineSpec(target_w=16, target_h=16, pad=5))
        assert info["crop_box"] == [0, 27, 37, 64]

    def test_remainder_goes_to_last_cell(self):
        m = np.array([[False, False, True]])
        up = upscale_mask(m, 10, 3)
        assert up.shape == (3, 10) and up[0].tolist() == [False] * 6 + [True] * 4

    def test_outside_mask_blacked(self):
        img = np.full((8, 8, 3), 200, np.uint8)
        m = np.array([[True, False], [False, True]])
        out, info = refine_image(img, m, RefineSpec(target_w=8, target_h=8))
        assert info["crop_box"] == [0, 0, 8, 8]
        assert out[1, 6].tolist() == [0, 0, 0] and out[1, 1].tolist() == [200, 200, 200]

    def test_empty_mask_passthrough(self, rng):
        img = make_image(rng)
        out, info = refine_image(img, np.zeros((4, 4), bool), RefineSpec(target_w=20, target_h=10))
        assert info["empty_mask"] and out.shape == (10, 20, 3)

    def test_image_smaller_than_grid(self):
        with pytest.raises(InvalidInputError):
            refine_image(np.zeros((2, 2, 3), np.uint8), np.ones((4, 4), bool), RefineSpec())

    def test_dims_and_bounds(self, rng):
        for _ in range(50):
            h, w = int(rng.integers(8, 40)), int(rng.integers(8, 40))
            img = rng.integers(0, 255, size=(h, w, 3)).astype(np.uint8)
            m = rng.uniform(size=(4, 4)) < 0.3
            spec = RefineSpec(target_w=int(rng.integers(1, 30)), target_h=int(rng.integers(1, 30)),
                              pad=int(rng.integers(0, 10)))
            out, info = refine_image(img, m, spec)
            assert out.shape == (spec.target_h, spec.target_w, 3)
            x0, y0, x1, y1 = info["crop_box"]
            assert 0 <= x0 < x1 <= w and 0 <= y0 < y1 <= h

    def test_png_round_trip(self, rng, tmp_path):
        img = make_image(rng)
        save_image(img, tmp_path / "x.png")
        np.testing.assert_array_equal(load_image(tmp_path / "x.png"), img)


class TestCarve:
    def test_crop_contains_blob(self, rng):
        pos, neg = blob_stacks(rng)
        img = make_image(rng)
        out, diag = carve(AttentionStack(pos), AttentionStack(neg), img, spec=RefineSpec(target_w=32, target_h=32))
        assert out.shape == (32, 32, 3)
        assert box_contains(diag["crop_box"], blob_pixel_box())
        assert diag["components"] >= 1 and 0.3 <= diag["retained_frac"] < 0.4

    def test_crop_centered_on_peak(self, rng):
        pos, neg = blob_stacks(rng)
        _, diag = carve(AttentionStack(pos), AttentionStack(neg), make_image(rng), spec=RefineSpec(top_p=0.05))
        x0, y0, x1, y1 = diag["crop_box"]
        block = IMAGE // GRID
        cy, cx = 5.5 * block, 10.5 * block  # centre of the peak cell
        assert abs((x0 + x1) / 2 - cx) <= block and abs((y0 + y1) / 2 - cy) <= block

    def test_degenerate_whole_image(self, rng):
        pos, neg = blob_stacks(rng)
        img = make_image(rng)
        out, diag = carve(AttentionStack(pos), AttentionStack(neg), img,
                          spec=RefineSpec(top_p=1.0, k_regions=99, pad=1000, target_w=40, target_h=40))
        assert diag["crop_box"] == [0, 0, IMAGE, IMAGE]
        expected = np.asarray(Image.fromarray(img).resize((40, 40), Image.BILINEAR))
        np.testing.assert_array_equal(out, expected)

    def test_sweep_monotone(self, rng):
        pos, neg = blob_stacks(rng)
        img = make_image(rng)
        areas = []
        for p in (0.6, 0.3, 0.1):
            _, diag = carve(AttentionStack(pos), AttentionStack(neg), img, spec=RefineSpec(top_p=p))
            areas.append(diag["crop_area"])
        assert areas == sorted(areas, reverse=True)
        assert areas[0] > areas[-1]

    def test_diagnostics_json(self, rng):
        pos, neg = blob_stacks(rng)
        _, diag = carve(AttentionStack(pos), AttentionStack(neg), make_image(rng))
        assert set(diag) >= {"tau", "retained_frac", "components", "boxes"}
        assert json.loads(json.dumps(diag)) == diag
