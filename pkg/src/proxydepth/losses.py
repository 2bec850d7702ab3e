"""Training objectives for the proxy stereo network and the monocular student.

Every loss accepts numpy arrays or :class:`~proxydepth.diffnet.autodiff.Tensor`
objects and returns a scalar ``Tensor`` (use ``float(loss)`` for the value).
Accepted layouts:

* images: ``(H, W, C)`` arrays or ``(N, C, H, W)`` tensors,
* disparity maps and masks: ``(H, W)`` arrays or ``(N, 1, H, W)`` tensors.

All per-pixel sums are normalised by the *total* pixel count ``N`` even when
a mask zeroes part of the image.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .diffnet import autodiff as ad
from .diffnet.autodiff import Tensor

__all__ = [
    "BCE_EPS",
    "LossWeights",
    "disparity_l1",
    "occlusion_bce",
    "photometric_masked",
    "absolute_reg",
    "relative_reg",
    "unsup_ft_loss",
    "stereo_sup_loss",
    "supervised_ft_loss",
    "distill_loss",
    "downsample_disparity",
    "downsample_mask",
    "gt_pyramid",
]

BCE_EPS = 1e-7


def _default_scale_weights():
    return [2.0 ** -m for m in range(4)]


@dataclass(frozen=True)
class LossWeights:
    gamma1: float = 0.05
    gamma2: float = 0.1
    gamma3: float = 0.1
    scale_weights: tuple[float, ...] = field(default_factory=lambda: tuple(_default_scale_weights()))

    def __post_init__(self):
        if min(self.gamma1, self.gamma2, self.gamma3) < 0 or any(w < 0 for w in self.scale_weights):
            raise ValueError("loss weights must be non-negative")

    @classmethod
    def for_scales(cls, m: int, **kw) -> "LossWeights":
        return cls(scale_weights=tuple(2.0 ** -i for i in range(m)), **kw)


def _map(x) -> Tensor:
    """Lift a 2-D map or 4-D tensor to a ``(N, 1, H, W)`` tensor."""
    if isinstance(x, Tensor):
        if x.ndim == 2:
            return ad.getitem(x, (None, None))
        return x
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    return Tensor(a)


def _img(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 2:
        a = a[None, None]
    elif a.ndim == 3:
        a = np.moveaxis(a, -1, 0)[None]
    return Tensor(a)


def _same(op: str, *ts: Tensor):
    ref = ts[0].shape
    for t in ts[1:]:
        if t.shape != ref:
            raise ad.ShapeError(op, *[t.shape for t in ts])


def _n_pixels(t: Tensor) -> int:
    n, _, h, w = t.shape
    return n * h * w


def disparity_l1(pred, target, valid=None) -> Tensor:
    """Masked L1 disparity regression, normalised by the total pixel count."""
    pred, target = _map(pred), _map(target)
    _same("disparity_l1", pred, target)
    r = ad.abs_(pred - target)
    if valid is not None:
        valid = _map(valid)
        _same("disparity_l1", pred, valid)
        r = r * valid
    return ad.scale(ad.sum_(r), 1.0 / _n_pixels(pred))


def occlusion_bce(pred, target, eps: float = BCE_EPS) -> Tensor:
    """Binary cross-entropy of a predicted visibility mask; ``pred`` clamped to [eps, 1-eps]."""
    pred, target = _map(pred), _map(target)
    _same("occlusion_bce", pred, target)
    p = ad.clip(pred, eps, 1.0 - eps)
    t = target.data
    ll = target * ad.log(p) + Tensor(1.0 - t) * ad.log(1.0 - p)
    return ad.scale(ad.sum_(ll), -1.0 / _n_pixels(pred))


def photometric_masked(left, right, disp_left, mask) -> Tensor:
    """Masked L1 between the left image and the right image warped by ``disp_left``.

    The per-pixel residual is averaged over colour channels.
    """
    left, right = _img(left), _img(right)
    disp, mask = _map(disp_left), _map(mask)
    _same("photometric_masked", left, right)
    if disp.shape != (left.shape[0], 1) + left.shape[2:]:
        raise ad.ShapeError("photometric_masked", left.shape, disp.shape)
    _same("photometric_masked", disp, mask)
    warped = ad.warp(right, disp)
    resid = ad.mean(ad.abs_(left - warped), axis=1)
    resid = ad.getitem(resid, (slice(None), None))
    return ad.scale(ad.sum_(resid * mask), 1.0 / _n_pixels(disp))


def absolute_reg(disp, disp_un, mask_un, gamma3: float = 0.1) -> Tensor:
    """Pull towards the frozen teacher disparity, strongest in occluded pixels."""
    if gamma3 < 0:
        raise ValueError(f"gamma3 must be non-negative, got {gamma3}")
    disp, disp_un, mask_un = _map(disp), _map(disp_un), _map(mask_un)
    _same("absolute_reg", disp, disp_un, mask_un)
    weight = Tensor(1.0 - mask_un.data + gamma3)
    return ad.scale(ad.sum_(weight * ad.abs_(disp - disp_un)), 1.0 / _n_pixels(disp))


def relative_reg(disp, disp_un) -> Tensor:
    """L1 between forward-difference gradients of ``disp`` and ``disp_un``.

    Differences that would need a pixel beyond the last row/column are omitted.
    """
    disp, disp_un = _map(disp), _map(disp_un)
    _same("relative_reg", disp, disp_un)
    diff = disp - disp_un
    dx = diff[..., :, 1:] - diff[..., :, :-1]
    dy = diff[..., 1:, :] - diff[..., :-1, :]
    total = ad.sum_(ad.abs_(dx)) + ad.sum_(ad.abs_(dy))
    return ad.scale(total, 1.0 / _n_pixels(disp))


def unsup_ft_loss(left, right, disp_pred, disp_un, mask_un, weights: LossWeights | None = None) -> Tensor:
    """Photometric term plus absolute and relative regularisation at one scale."""
    w = weights or LossWeights()
    photo = photometric_masked(left, right, disp_pred, mask_un)
    total = photo
    if w.gamma1:
        total = total + ad.scale(absolute_reg(disp_pred, disp_un, mask_un, w.gamma3), w.gamma1)
    if w.gamma2:
        total = total + ad.scale(relative_reg(disp_pred, disp_un), w.gamma2)
    return total


def _check_scales(op, a, b, weights):
    if len(a) != len(b):
        raise ValueError(f"{op}: scale count mismatch ({len(a)} vs {len(b)})")
    if len(weights.scale_weights) < len(a):
        raise ValueError(f"{op}: {len(a)} scales but only {len(weights.scale_weights)} weights")


def stereo_sup_loss(pyr_pred, pyr_gt, weights: LossWeights | None = None) -> Tensor:
    """Multiscale disparity L1 + occlusion BCE, equal weight per term.

    Both pyramids are sequences of ``(disparity, mask)`` pairs, finest first.
    """
    w = weights or LossWeights()
    _check_scales("stereo_sup_loss", pyr_pred, pyr_gt, w)
    total = None
    for m, ((d, o), (gd, go)) in enumerate(zip(pyr_pred, pyr_gt)):
        term = ad.scale(disparity_l1(d, gd) + occlusion_bce(o, go), w.scale_weights[m])
        total = term if total is None else total + term
    return total


def supervised_ft_loss(pyr_disp, pyr_gt_disp, weights: LossWeights | None = None, valid=None) -> Tensor:
    """Multiscale L1 disparity regression only (no occlusion term)."""
    w = weights or LossWeights()
    _check_scales("supervised_ft_loss", pyr_disp, pyr_gt_disp, w)
    total = None
    for m, (d, g) in enumerate(zip(pyr_disp, pyr_gt_disp)):
        v = None if valid is None else valid[m]
        term = ad.scale(disparity_l1(d, g, v), w.scale_weights[m])
        total = term if total is None else total + term
    return total


def distill_loss(pyr_mono, pyr_teacher, weights: LossWeights | None = None) -> Tensor:
    """Unmasked multiscale L1 between student and teacher disparities."""
    w = weights or LossWeights()
    _check_scales("distill_loss", pyr_mono, pyr_teacher, w)
    total = None
    for m, (s, t) in enumerate(zip(pyr_mono, pyr_teacher)):
        term = ad.scale(disparity_l1(s, t), w.scale_weights[m])
        total = term if total is None else total + term
    return total


# ---------------------------------------------------------------------------
# ground-truth pyramids
# ---------------------------------------------------------------------------

def downsample_disparity(disp: np.ndarray, factor: int) -> np.ndarray:
    """Average-pool by ``factor`` over the last two axes and rescale values."""
    if factor == 1:
        return np.asarray(disp, dtype=np.float64)
    d = np.asarray(disp, dtype=np.float64)
    h, w = d.shape[-2:]
    if h % factor or w % factor:
        raise ValueError(f"{h}x{w} is not divisible by {factor}")
    pooled = d.reshape(d.shape[:-2] + (h // factor, factor, w // factor, factor)).mean(axis=(-1, -3))
    return pooled / factor


def downsample_mask(mask: np.ndarray, factor: int) -> np.ndarray:
    """Nearest-neighbour subsampling (keeps the {0, 1} alphabet)."""
    m = np.asarray(mask, dtype=np.float64)
    return m[..., ::factor, ::factor].copy()


def gt_pyramid(disp: np.ndarray, mask: np.ndarray | None, scales: int):
    """``[(disp_m, mask_m)]`` for ``m = 0 .. scales - 1`` at ``1 / 2**m`` resolution."""
    out = []
    for m in range(scales):
        f = 2 ** m
        out.append((downsample_disparity(disp, f), None if mask is None else downsample_mask(mask, f)))
    return out
