import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from proxydepth.eval import (
    DESK_RIG,
    MetricsReport,
    aggregate,
    depth_metrics,
    depth_to_disparity,
    disparity_metrics,
    disparity_to_depth,
    evaluate_pair,
)
from proxydepth.imgproc import CameraRig

TOL = 1e-12


def test_disparity_to_depth_examples():
    rig = CameraRig(0.5, 100.0)
    assert disparity_to_depth(np.array([10.0]), rig)[0] == 5.0
    z = disparity_to_depth(np.array([0.0, 1e-4, 2.0]), rig)
    assert z[0] == 80.0 and z[1] == 80.0 and np.all(np.isfinite(z))
    assert disparity_to_depth(np.array([0.0]), rig, cap=50.0)[0] == 50.0


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 3), elements=st.floats(0.01, 200)))
def test_depth_disparity_round_trip(d):
    back = depth_to_disparity(disparity_to_depth(d, DESK_RIG), DESK_RIG)
    np.testing.assert_allclose(back, d, rtol=1e-9, atol=0)


def test_depth_to_disparity_rejects_non_positive():
    with pytest.raises(ValueError):
        depth_to_disparity(np.array([0.0]), DESK_RIG)


def test_identity_depth_metrics():
    gt = np.array([[2.0, 5.0], [10.0, 40.0]])
    r = depth_metrics(gt, gt)
    assert (r.abs_rel, r.sq_rel, r.rms, r.log_rms) == (0.0, 0.0, 0.0, 0.0)
    assert (r.delta1, r.delta2, r.delta3) == (1.0, 1.0, 1.0)


def test_single_pixel_hand_values():
    r = depth_metrics(np.array([[1.3]]), np.array([[1.0]]))
    assert abs(r.abs_rel - 0.3) < TOL
    assert abs(r.sq_rel - 0.09) < TOL
    assert abs(r.rms - 0.3) < TOL
    assert abs(r.log_rms - math.log(1.3)) < TOL
    assert round(r.log_rms, 4) == 0.2624
    assert (r.delta1, r.delta2, r.delta3) == (0.0, 1.0, 1.0)


def test_delta_uses_symmetric_ratio():
    # under-prediction by the same factor fails delta1 the same way
    r = depth_metrics(np.array([[1.0]]), np.array([[1.3]]))
    assert (r.delta1, r.delta2, r.delta3) == (0.0, 1.0, 1.0)


def test_cap_excludes_far_ground_truth():
    pred = np.array([[12.0, 3.0]])
    gt = np.array([[10.0, 100.0]])
    r50 = depth_metrics(pred, gt, cap=50.0)
    assert r50.valid_pixels == 1
    assert abs(r50.abs_rel - 0.2) < TOL
    r80 = depth_metrics(pred, gt, cap=80.0)
    assert r80.valid_pixels == 1
    r200 = depth_metrics(pred, gt, cap=200.0)
    assert r200.valid_pixels == 2


def test_predictions_are_clamped_into_the_cap():
    r = depth_metrics(np.array([[500.0]]), np.array([[40.0]]), cap=50.0)
    assert abs(r.abs_rel - 10.0 / 40.0) < TOL


def test_depth_metric_errors():
    with pytest.raises(ValueError):
        depth_metrics(np.ones((2, 2)), np.ones((2, 3)))
    with pytest.raises(ValueError):
        depth_metrics(np.ones((1, 1)), np.array([[90.0]]), cap=80.0)


def test_disparity_metric_examples():
    gt = np.zeros((1, 4))
    assert (disparity_metrics(gt, gt).mae_px, disparity_metrics(gt, gt).bad1_frac) == (0.0, 0.0)
    pred = np.array([[0.5, 1.5, 2.0, 4.0]])
    r = disparity_metrics(pred, gt)
    assert abs(r.mae_px - 2.0) < TOL
    assert abs(r.bad1_frac - 0.75) < TOL
    assert abs(r.bad3_frac - 0.25) < TOL
    r10 = disparity_metrics(pred + 10, gt + 10)
    assert (r10.mae_px, r10.bad1_frac, r10.bad3_frac) == (r.mae_px, r.bad1_frac, r.bad3_frac)


def test_evaluate_pair_and_aggregate():
    gt = np.full((4, 4), 10.0)
    a = evaluate_pair(gt, gt)
    assert a.mae_px == 0.0 and a.abs_rel == 0.0 and a.valid_pixels == 16
    b = evaluate_pair(gt + 2.0, gt)
    mean = aggregate([a, b])
    assert mean.mae_px == 1.0
    assert mean.valid_pixels == 32
    with pytest.raises(ValueError):
        aggregate([])
    assert set(MetricsReport.keys()) >= {"abs_rel", "delta3", "bad3_frac"}


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

depths = hnp.arrays(np.float64, (4, 5), elements=st.floats(0.5, 60))


@settings(max_examples=60, deadline=None)
@given(depths, depths)
def test_delta_ordering_and_ranges(p, g):
    r = depth_metrics(p, g)
    assert r.delta1 <= r.delta2 <= r.delta3
    for v in (r.delta1, r.delta2, r.delta3):
        assert 0.0 <= v <= 1.0
    assert all(math.isfinite(getattr(r, k)) for k in ("abs_rel", "sq_rel", "rms", "log_rms"))


@settings(max_examples=60, deadline=None)
@given(depths, depths)
def test_traversal_order_invariance(p, g):
    a = depth_metrics(p, g)
    b = depth_metrics(np.asfortranarray(p.T), np.asfortranarray(g.T))
    for k in ("abs_rel", "sq_rel", "rms", "log_rms", "delta1", "delta2", "delta3"):
        assert abs(getattr(a, k) - getattr(b, k)) < TOL


@settings(max_examples=60, deadline=None)
@given(depths, depths, st.floats(0.2, 0.9))
def test_scale_invariance(p, g, s):
    a = depth_metrics(p, g, cap=1e6)
    b = depth_metrics(p * s, g * s, cap=1e6)
    assert a.delta1 == b.delta1 and a.delta2 == b.delta2 and a.delta3 == b.delta3
    assert abs(a.abs_rel - b.abs_rel) < 1e-9
    if a.rms > 1e-6:
        assert abs(a.rms - b.rms) > 1e-9


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=st.floats(0.5, 150)), st.floats(1, 100), st.floats(1, 100))
def test_larger_cap_keeps_at_least_as_many_pixels(g, c1, c2):
    lo, hi = sorted((c1, c2))
    if not np.any(g <= lo):
        return
    assert depth_metrics(g, g, cap=hi).valid_pixels >= depth_metrics(g, g, cap=lo).valid_pixels
