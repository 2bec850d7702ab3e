"""Disparity-guided view synthesis and left-right occlusion deduction.

All sampling is horizontal only (rectified pairs); the row index is never
resampled. Coordinates falling outside ``[0, W - 1]`` are clamped to the
edge for warping and flagged as occluded for the consistency check.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "sample_coords",
    "sample_rows",
    "sample_rows_backward",
    "warp_right_to_left",
    "occlusion_mask_lr_check",
]


def sample_coords(disp: np.ndarray):
    """Bilinear sampling taps for ``x = j - disp`` along the last axis.

    Returns ``(i0, i1, frac, inside, raw_x)`` where ``inside`` marks samples
    whose unclamped coordinate lies in ``[0, W - 1]``.
    """
    disp = np.asarray(disp, dtype=np.float64)
    w = disp.shape[-1]
    x = np.arange(w, dtype=np.float64) - disp
    inside = (x >= 0.0) & (x <= w - 1)
    xc = np.clip(x, 0.0, w - 1)
    i0 = np.floor(xc).astype(np.intp)
    i1 = np.minimum(i0 + 1, w - 1)
    return i0, i1, xc - i0, inside, x


def sample_rows(src: np.ndarray, disp: np.ndarray) -> np.ndarray:
    """Sample ``src[..., H, W]`` at ``(i, j - disp[i, j])``.

    ``disp`` has shape ``(..., H, W)`` broadcastable against ``src`` over the
    leading axes (e.g. one disparity map shared by every channel).
    """
    src = np.asarray(src, dtype=np.float64)
    i0, i1, f, _, _ = sample_coords(disp)
    shape = np.broadcast_shapes(src.shape, f.shape)
    src = np.broadcast_to(src, shape)
    i0 = np.broadcast_to(i0, shape)
    i1 = np.broadcast_to(i1, shape)
    v0 = np.take_along_axis(src, i0, axis=-1)
    v1 = np.take_along_axis(src, i1, axis=-1)
    return v0 + np.broadcast_to(f, shape) * (v1 - v0)


def sample_rows_backward(grad_out, src, disp):
    """Gradients of :func:`sample_rows` w.r.t. ``src`` and ``disp``.

    The disparity gradient is the negated finite slope of the sampled segment;
    it is zero where the coordinate was clamped to the border.
    """
    src = np.asarray(src, dtype=np.float64)
    disp = np.asarray(disp, dtype=np.float64)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    i0, i1, f, inside, x = sample_coords(disp)
    shape = grad_out.shape
    w = shape[-1]
    i0b = np.broadcast_to(i0, shape)
    i1b = np.broadcast_to(i1, shape)
    fb = np.broadcast_to(f, shape)

    # scatter-add along the last axis via a flat bincount
    rows = int(np.prod(shape[:-1]))
    base = (np.arange(rows) * w)[:, None]
    flat0 = (i0b.reshape(rows, w) + base).ravel()
    flat1 = (i1b.reshape(rows, w) + base).ravel()
    g = grad_out.reshape(rows, w)
    fr = fb.reshape(rows, w)
    acc = np.bincount(flat0, weights=(g * (1.0 - fr)).ravel(), minlength=rows * w)
    acc += np.bincount(flat1, weights=(g * fr).ravel(), minlength=rows * w)
    grad_src = acc.reshape(shape)
    if grad_src.shape != src.shape:
        grad_src = _sum_to(grad_src, src.shape)

    srcb = np.broadcast_to(src, shape)
    v0 = np.take_along_axis(srcb, i0b, axis=-1)
    v1 = np.take_along_axis(srcb, i1b, axis=-1)
    # strictly-outside samples are clamped constants
    live = (x >= 0.0) & (x < w - 1)
    gd = np.where(np.broadcast_to(live, shape), -(v1 - v0) * grad_out, 0.0)
    grad_disp = _sum_to(gd, disp.shape)
    return grad_src, grad_disp


def _sum_to(a: np.ndarray, shape) -> np.ndarray:
    """Reduce a broadcast result back to ``shape``."""
    if a.shape == tuple(shape):
        return a
    extra = a.ndim - len(shape)
    a = a.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and a.shape[i] != 1)
    if axes:
        a = a.sum(axis=axes, keepdims=True)
    return a


def warp_right_to_left(right, disp_left) -> np.ndarray:
    """Synthesise the left view by sampling ``right`` at ``(i, j - d(i, j))``.

    ``right`` is an ``(H, W, C)`` image or an ``(H, W)`` raster; channels are
    sampled independently.
    """
    right = np.asarray(right, dtype=np.float64)
    disp_left = np.asarray(disp_left, dtype=np.float64)
    if right.shape[:2] != disp_left.shape:
        raise ValueError(
            f"warp: image {right.shape[:2]} and disparity {disp_left.shape} differ"
        )
    if right.ndim == 2:
        return sample_rows(right, disp_left)
    chw = np.moveaxis(right, -1, 0)
    return np.moveaxis(sample_rows(chw, disp_left[None]), 0, -1)


def occlusion_mask_lr_check(disp_left, disp_right, threshold: float = 1.0) -> np.ndarray:
    """Left-view occlusion mask from a left/right disparity pair.

    The right disparity map is warped to the left view with the left
    disparities; a pixel is visible (1) when the two agree within
    ``threshold`` pixels and its correspondence lies inside the frame.
    """
    disp_left = np.asarray(disp_left, dtype=np.float64)
    disp_right = np.asarray(disp_right, dtype=np.float64)
    if disp_left.shape != disp_right.shape:
        raise ValueError(
            f"lr check: left {disp_left.shape} and right {disp_right.shape} differ"
        )
    if threshold < 0:
        raise ValueError(f"threshold must be non-negative, got {threshold}")
    warped = sample_rows(disp_right, disp_left)
    _, _, _, inside, _ = sample_coords(disp_left)
    consistent = np.abs(disp_left - warped) <= threshold
    return (consistent & inside).astype(np.float64)
