import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from proxydepth import losses, scenegen
from proxydepth.diffnet.autodiff import ShapeError, Tensor
from proxydepth.losses import (
    BCE_EPS,
    LossWeights,
    absolute_reg,
    disparity_l1,
    distill_loss,
    occlusion_bce,
    photometric_masked,
    relative_reg,
    stereo_sup_loss,
    unsup_ft_loss,
)


def test_default_weights():
    w = LossWeights()
    assert (w.gamma1, w.gamma2, w.gamma3) == (0.05, 0.1, 0.1)
    assert w.scale_weights == (1.0, 0.5, 0.25, 0.125)
    with pytest.raises(ValueError):
        LossWeights(gamma1=-1)


# ---------------------------------------------------------------------------
# hand-derived values
# ---------------------------------------------------------------------------

def test_disparity_l1_examples():
    assert float(disparity_l1(np.ones((3, 4)), np.ones((3, 4)))) == 0.0
    assert float(disparity_l1(np.array([[3.0, 5.0]]), np.array([[1.0, 5.0]]), np.ones((1, 2)))) == 1.0
    assert float(disparity_l1(np.array([[3.0, 9.0]]), np.zeros((1, 2)), np.zeros((1, 2)))) == 0.0
    with pytest.raises(ShapeError):
        disparity_l1(np.zeros((2, 2)), np.zeros((2, 3)))


def test_occlusion_bce_examples():
    assert math.isclose(float(occlusion_bce(np.full((2, 2), 0.5), np.array([[1.0, 0.0], [0.0, 1.0]]))),
                        math.log(2), rel_tol=1e-12)
    t = np.array([[1.0, 0.0]])
    assert math.isclose(float(occlusion_bce(t, t)), -math.log(1 - BCE_EPS), rel_tol=1e-9)
    v = float(occlusion_bce(np.array([[0.9, 0.2]]), t))
    assert math.isclose(v, (-math.log(0.9) - math.log(0.8)) / 2, rel_tol=1e-12)
    assert round(v, 4) == 0.1643


def test_photometric_examples():
    left = np.array([[0.5, 0.8]])
    right = np.array([[0.5, 0.8]])
    v = float(photometric_masked(left, right, np.ones((1, 2)), np.array([[0.0, 1.0]])))
    assert math.isclose(v, 0.15, rel_tol=1e-12)
    assert float(photometric_masked(left, right, np.ones((1, 2)), np.zeros((1, 2)))) == 0.0


def test_photometric_gt_is_exactly_zero():
    s = scenegen.generate_scene(scenegen.domain_preset("A", seed=4))
    assert float(photometric_masked(s.left, s.right, s.disp_left, s.occ_left)) == 0.0


def test_absolute_reg_examples():
    d = np.array([[5.0]])
    assert float(absolute_reg(d, d, np.zeros((1, 1)))) == 0.0
    assert math.isclose(float(absolute_reg(np.array([[3.0]]), np.array([[1.0]]), np.zeros((1, 1)), 0.1)), 2.2)
    assert math.isclose(float(absolute_reg(np.array([[3.0]]), np.array([[1.0]]), np.ones((1, 1)), 0.1)), 0.2)
    with pytest.raises(ValueError):
        absolute_reg(d, d, d, gamma3=-0.1)


def test_relative_reg_examples():
    base = np.random.default_rng(0).random((4, 5))
    assert float(relative_reg(base + 3.0, base)) == 0.0
    v = float(relative_reg(np.array([[0.0, 1.0, 2.0]]), np.array([[0.0, 2.0, 4.0]])))
    assert math.isclose(v, 2 / 3, rel_tol=1e-12)
    # one step of height h on a single row: one x-difference, no y-differences
    h, n = 2.5, 6
    step = np.zeros((1, n))
    step[0, 3:] = h
    assert math.isclose(float(relative_reg(step, np.zeros((1, n)))), h / n)


def test_unsup_ft_loss_examples():
    s = scenegen.generate_scene(scenegen.domain_preset("A", seed=2))
    assert float(unsup_ft_loss(s.left, s.right, s.disp_left, s.disp_left, s.occ_left)) == 0.0

    rng = np.random.default_rng(3)
    left, right = rng.random((4, 6, 3)), rng.random((4, 6, 3))
    disp, d_un = rng.uniform(0, 3, (4, 6)), rng.uniform(0, 3, (4, 6))
    mask = (rng.random((4, 6)) > 0.3).astype(float)
    w0 = LossWeights(gamma1=0.0, gamma2=0.0)
    assert float(unsup_ft_loss(left, right, disp, d_un, mask, w0)) == float(photometric_masked(left, right, disp, mask))

    # weighted sum of the three hand examples: 0.15 + 0.05 * 2.2 + 0.1 * (2/3)
    total = 0.15 + 0.05 * 2.2 + 0.1 * (2 / 3)
    assert round(total, 4) == 0.3267
    w = LossWeights()
    parts = (float(photometric_masked(left, right, disp, mask)),
             float(absolute_reg(disp, d_un, mask, w.gamma3)),
             float(relative_reg(disp, d_un)))
    expect = parts[0] + w.gamma1 * parts[1] + w.gamma2 * parts[2]
    assert math.isclose(float(unsup_ft_loss(left, right, disp, d_un, mask, w)), expect, rel_tol=1e-12)


def _pyr(values, shape=(1, 1, 8, 8)):
    return [Tensor(np.full((shape[0], 1, shape[2] >> m, shape[3] >> m), v)) for m, v in enumerate(values)]


def test_stereo_sup_loss_scale_weighting():
    # per-scale totals of 1.0: L1 of 1 with a perfect mask (BCE at the clamp floor)
    d_pred, d_gt = _pyr([2.0, 2.0]), _pyr([1.0, 1.0])
    o = _pyr([1.0, 1.0])
    w = LossWeights.for_scales(2)
    v = float(stereo_sup_loss(list(zip(d_pred, o)), list(zip(d_gt, o)), w))
    floor = -math.log(1 - BCE_EPS)
    assert math.isclose(v, 1.5 + 1.5 * floor, rel_tol=1e-12)
    assert abs(v - 1.5) < 1e-6


def test_stereo_sup_loss_perfect_and_single_scale():
    d, o = _pyr([3.0, 1.5, 0.75, 0.375]), _pyr([1.0, 0.0, 1.0, 0.0])
    pyr = list(zip(d, o))
    assert float(stereo_sup_loss(pyr, pyr)) < 2e-7
    one = LossWeights.for_scales(1)
    pred = (Tensor(np.full((1, 1, 2, 2), 2.0)), Tensor(np.full((1, 1, 2, 2), 0.5)))
    gt = (Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 2, 2))))
    expect = float(disparity_l1(pred[0], gt[0])) + float(occlusion_bce(pred[1], gt[1]))
    assert float(stereo_sup_loss([pred], [gt], one)) == expect
    with pytest.raises(ValueError):
        stereo_sup_loss([pred], [gt, gt], LossWeights.for_scales(2))


def test_distill_loss_examples():
    one = LossWeights.for_scales(1)
    assert float(distill_loss([Tensor(np.array([[[[4.0, 4.0]]]]))], [Tensor(np.array([[[[2.0, 6.0]]]]))], one)) == 2.0
    teacher = _pyr([5.0, 5.0, 5.0, 5.0])
    assert float(distill_loss(teacher, teacher)) == 0.0
    assert float(distill_loss(_pyr([6.0] * 4), teacher)) == sum(LossWeights().scale_weights)


def test_downsampling_helpers():
    d = np.arange(16, dtype=float).reshape(4, 4)
    half = losses.downsample_disparity(d, 2)
    assert half[0, 0] == np.mean([0, 1, 4, 5]) / 2
    m = np.array([[1, 0, 1, 0], [0, 0, 0, 0], [0, 1, 1, 1], [1, 1, 1, 1]], dtype=float)
    np.testing.assert_array_equal(losses.downsample_mask(m, 2), [[1, 1], [0, 1]])
    with pytest.raises(ValueError):
        losses.downsample_disparity(np.zeros((3, 4)), 2)
    pyr = losses.gt_pyramid(np.full((8, 8), 8.0), np.ones((8, 8)), 4)
    assert [p[0][0, 0] for p in pyr] == [8.0, 4.0, 2.0, 1.0]


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

maps = hnp.arrays(np.float64, (3, 4), elements=st.floats(0, 10))
unit = hnp.arrays(np.float64, (3, 4), elements=st.floats(0, 1))
binary = hnp.arrays(np.float64, (3, 4), elements=st.sampled_from([0.0, 1.0]))


@settings(max_examples=50, deadline=None)
@given(maps, maps, binary, binary)
def test_losses_are_non_negative(a, b, m, t):
    assert float(disparity_l1(a, b, m)) >= 0
    assert float(absolute_reg(a, b, m)) >= 0
    assert float(relative_reg(a, b)) >= 0
    assert float(occlusion_bce(np.clip(a / 10, 0, 1), t)) >= 0


@settings(max_examples=50, deadline=None)
@given(maps, maps, st.integers(0, 11), st.floats(-5, 5))
def test_l1_one_pixel_lipschitz(a, b, k, delta):
    p = a.copy()
    p.flat[k] += delta
    change = abs(float(disparity_l1(p, b)) - float(disparity_l1(a, b)))
    assert change <= abs(delta) / a.size + 1e-12


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (3, 4, 3), elements=st.floats(0, 1)),
       hnp.arrays(np.float64, (3, 4, 3), elements=st.floats(0, 1)),
       hnp.arrays(np.float64, (3, 4), elements=st.floats(0, 3)), unit)
def test_photometric_mask_monotone(left, right, disp, mask):
    full = float(photometric_masked(left, right, disp, np.ones_like(mask)))
    assert full >= float(photometric_masked(left, right, disp, mask)) - 1e-15


@settings(max_examples=40, deadline=None)
@given(maps, st.floats(-3, 3))
def test_relative_reg_ignores_offsets(a, c):
    assert float(relative_reg(a + c, a)) < 1e-12


@settings(max_examples=40, deadline=None)
@given(maps)
def test_zero_iff_residual_zero(a):
    assert float(disparity_l1(a, a)) == 0.0
    assert float(absolute_reg(a, a, np.zeros_like(a))) == 0.0
    b = a.copy()
    b[1, 2] += 0.5
    assert float(disparity_l1(b, a)) > 0
    assert float(absolute_reg(b, a, np.ones_like(a))) > 0
