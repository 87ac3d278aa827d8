import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from camaudit.experiments import random_fixture
from camaudit.model import build_unet_micro, forward
from camaudit.saliency import (METHODS, RoI, aggregate_roi, attribute, grad_cam, lrp_relevance, relevance_cam,
                               score_cam, score_masks, seg_grad_cam, seg_grad_cam_spatial, seg_xres_cam)

TAP = "dec_penultimate"


@pytest.fixture(scope="module")
def net():
    model, x = random_fixture(3, size=8, tap=TAP)
    return model, x


class TestRoI:
    def test_constructors(self):
        mask = np.zeros((4, 4), dtype=bool)
        mask[1, 2] = mask[3, 0] = True
        assert RoI.from_mask(2, mask).pixels == ((1, 2), (3, 0))
        assert len(RoI.full(0, 4, 4)) == 16
        np.testing.assert_array_equal(RoI.from_mask(2, mask).mask(4, 4), mask)

    def test_rejects_empty_and_duplicates(self):
        with pytest.raises(ValueError, match="empty"):
            RoI(0, ())
        with pytest.raises(ValueError, match="duplicate"):
            RoI(0, ((1, 1), (1, 1)))

    def test_out_of_range(self, net):
        model, x = net
        with pytest.raises(ValueError, match="outside"):
            seg_grad_cam(model, x, TAP, RoI.single(0, 8, 0))
        with pytest.raises(ValueError, match="class"):
            seg_grad_cam(model, x, TAP, RoI.single(5, 0, 0))

    def test_unknown_tap_and_method(self, net):
        model, x = net
        with pytest.raises(ValueError, match="unknown tap"):
            seg_grad_cam(model, x, "conv9", RoI.single(0, 0, 0))
        with pytest.raises(ValueError, match="unknown method"):
            attribute("lime", model, x, TAP, RoI.single(0, 0, 0))


class TestGradFamily:
    def test_single_pixel_collapses_to_gradcam(self, net):
        model, x = net
        a = seg_grad_cam(model, x, TAP, RoI.single(1, 3, 5)).class_map
        b = grad_cam(model, x, TAP, 1, pixel=(3, 5)).class_map
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_full_roi_spatial_equals_seggradcam(self, net):
        # constant gradient through the 1x1 head
        model, x = net
        roi = RoI.full(2, 8, 8)
        a = seg_grad_cam_spatial(model, x, TAP, roi).class_map
        b = seg_grad_cam(model, x, TAP, roi).class_map
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_spatial_is_local_under_1x1_head(self, net):
        model, x = net
        m = seg_grad_cam_spatial(model, x, TAP, RoI.single(0, 2, 6)).class_map
        assert np.count_nonzero(m) <= 1 and np.all(np.delete(m.ravel(), 2 * 8 + 6) == 0)

    @settings(max_examples=10, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_spatial_is_additive_over_rois(self, seed):
        model, x = random_fixture(seed, tap=TAP)
        split = np.random.default_rng(seed).uniform(size=(8, 8)) < 0.5
        split[0, 0], split[0, 1] = True, False
        whole = seg_grad_cam_spatial(model, x, TAP, RoI.full(3, 8, 8)).class_map
        parts = sum(seg_grad_cam_spatial(model, x, TAP, RoI.from_mask(3, m)).class_map for m in (split, ~split))
        np.testing.assert_allclose(whole, parts, rtol=0, atol=1e-9)

    def test_seggradcam_scales_with_input(self, net):
        model, x = net
        roi = RoI.full(1, 8, 8)
        base = seg_grad_cam(model, x, TAP, roi).class_map
        # bias-free ReLU net: activations scale by 2, gradients do not change
        doubled = seg_grad_cam(model, 2.0 * x, TAP, roi).class_map
        np.testing.assert_allclose(doubled, 2.0 * base, rtol=1e-12, atol=1e-12)

    @pytest.mark.parametrize("method", METHODS)
    def test_per_pixel_matches_batched(self, net, method):
        model, x = net
        roi = RoI.from_mask(4, np.eye(8, dtype=bool))
        a = attribute(method, model, x, TAP, roi, relu_clipped=False)
        b = attribute(method, model, x, TAP, roi, per_pixel=True, relu_clipped=False)
        assert b.pixel_maps.shape == (8, 8, 8)
        # unclipped maps are linear in the RoI seed
        scale = max(1.0, np.abs(a.class_map).max())
        np.testing.assert_allclose(b.class_map, a.class_map, rtol=0, atol=1e-9 * scale)


class TestXres:
    def test_window_one_equals_spatial(self, net):
        model, x = net
        roi = RoI.from_mask(0, np.arange(64).reshape(8, 8) % 3 == 0)
        a = seg_xres_cam(model, x, TAP, roi, pool_window=1, relu_clipped=False).class_map
        b = seg_grad_cam_spatial(model, x, TAP, roi).class_map
        np.testing.assert_array_equal(a, b)

    def test_full_window_equals_seggradcam(self, net):
        model, x = net
        roi = RoI.single(0, 1, 1)
        a = seg_xres_cam(model, x, TAP, roi, pool_window=8, relu_clipped=False).class_map
        b = seg_grad_cam(model, x, TAP, roi).class_map
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-15)

    def test_bad_window(self, net):
        model, x = net
        with pytest.raises(ValueError, match="divisible"):
            seg_xres_cam(model, x, TAP, RoI.single(0, 0, 0), pool_window=3)
        with pytest.raises(ValueError):
            seg_xres_cam(model, x, TAP, RoI.single(0, 0, 0), pool_window=0)


class TestScoreCam:
    def test_masks_are_min_max_normalized(self, rng):
        A = rng.uniform(size=(4, 4, 3))
        A[:, :, 2] = 0.7
        m = score_masks(A, (8, 8, 5))
        assert m.shape == (3, 8, 8)
        assert m[:2].min() == 0.0 and m[:2].max() == 1.0 and not m[2].any()
        np.testing.assert_array_equal(m[0, ::2, ::2], (A[:, :, 0] - A[:, :, 0].min()) / np.ptp(A[:, :, 0]))

    def test_baseline_equal_to_input_gives_zero_map(self, net):
        model, x = net
        a = score_cam(model, x, TAP, RoI.full(0, 8, 8), baseline=x, relu_clipped=False)
        assert not a.class_map.any()

    def test_weights_are_logit_gains(self):
        # tap at the logits, checked against a direct recomputation of every gain
        model = build_unet_micro(3, 5, 8, seed=2)
        x = np.random.default_rng(0).uniform(size=(8, 8, 3))
        roi = RoI.single(1, 4, 4)
        a = score_cam(model, x, "head_1x1", roi, relu_clipped=False)
        logits, taps, _ = forward(model, x, taps=("head_1x1",))
        masks = score_masks(taps["head_1x1"].data, x.shape)
        w = [forward(model, m[:, :, None] * x)[0].data[4, 4, 1] - forward(model, np.zeros_like(x))[0].data[4, 4, 1]
             for m in masks]
        np.testing.assert_allclose(a.class_map, logits.data @ np.array(w), rtol=1e-12)

    def test_baseline_shape_checked(self, net):
        model, x = net
        with pytest.raises(ValueError, match="baseline"):
            score_cam(model, x, TAP, RoI.single(0, 0, 0), baseline=np.zeros((4, 4, 3)))


class TestRelevanceCam:
    def test_weights_are_tap_relevance_totals(self, net):
        model, x = net
        roi = RoI.full(2, 8, 8)
        rel = lrp_relevance(model, x, roi, until=TAP).maps[model.taps[TAP]]
        A = forward(model, x, taps=(TAP,))[1][TAP].data
        got = relevance_cam(model, x, TAP, roi).class_map
        np.testing.assert_allclose(got, A @ rel.sum(axis=(0, 1)), rtol=1e-12, atol=1e-15)


class TestClipAndAggregate:
    @pytest.mark.parametrize("method", METHODS)
    def test_clipping_is_relu_of_unclipped(self, net, method):
        model, x = net
        roi = RoI.full(3, 8, 8)
        raw = attribute(method, model, x, TAP, roi, relu_clipped=False).class_map
        clipped = attribute(method, model, x, TAP, roi, relu_clipped=True)
        np.testing.assert_array_equal(clipped.class_map, np.maximum(raw, 0.0))
        assert clipped.relu_clipped

    def test_aggregate_single_pixel_maps(self, net):
        model, x = net
        pixels = [(0, 0), (3, 4), (7, 7)]
        singles = [seg_grad_cam_spatial(model, x, TAP, RoI.single(1, *p)) for p in pixels]
        agg = aggregate_roi(singles)
        direct = seg_grad_cam_spatial(model, x, TAP, RoI(1, tuple(pixels)), per_pixel=True)
        np.testing.assert_array_equal(agg.pixel_maps, direct.pixel_maps)
        np.testing.assert_allclose(agg.class_map, direct.class_map, rtol=0, atol=1e-15)

    def test_aggregate_errors(self, net):
        model, x = net
        a = seg_grad_cam_spatial(model, x, TAP, RoI.single(1, 0, 0))
        with pytest.raises(ValueError, match="nothing"):
            aggregate_roi([])
        with pytest.raises(ValueError, match="classes"):
            aggregate_roi([a, seg_grad_cam_spatial(model, x, TAP, RoI.single(2, 0, 1))])
        with pytest.raises(ValueError, match="pixel-level"):
            aggregate_roi([seg_grad_cam_spatial(model, x, TAP, RoI.full(1, 8, 8))])
