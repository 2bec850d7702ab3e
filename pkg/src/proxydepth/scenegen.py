"""Procedural rectified stereo scenes with exact disparity and occlusion.

A scene is a stack of textured planar layers seen by two rectified cameras.
Every layer owns a texture parametrised in *left-view* coordinates and a
disparity field that is affine in ``(row, column)``. The left view shows, at
each pixel, the covering layer with the largest disparity (nearest); the
right view is obtained by inverting ``x_r = x_l - d(x_l)`` per layer, which is
exact for affine disparities, and again keeping the nearest layer.

Two presets stand in for the pretraining and target domains:

* ``"A"``: noise-patch textures, fronto-parallel layers with integer
  disparities drawn uniformly.
* ``"B"``: smooth-gradient and striped textures over a ground-plane ramp,
  with slanted (fractional-disparity) objects standing on it.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "TEXTURE_FAMILIES",
    "SceneSpec",
    "StereoSample",
    "Layer",
    "domain_preset",
    "render_layers",
    "generate_scene",
    "generate_dataset",
    "scene_rng",
]

TEXTURE_FAMILIES = ("noise-patch", "smooth-gradient", "striped")


@dataclass(frozen=True)
class SceneSpec:
    width: int = 128
    height: int = 64
    layer_count: int = 6
    disparity_range: tuple[float, float] = (2.0, 24.0)
    # one family, or several joined with "+" (each layer draws one of them)
    texture_family: str = "noise-patch"
    slant_enabled: bool = False
    rng_seed: int = 0
    scene_index: int = 0
    ground_ramp: bool = False

    def __post_init__(self):
        d_min, d_max = self.disparity_range
        if self.width < 8 or self.height < 8:
            raise ValueError(f"scene too small: {self.width}x{self.height}")
        if self.layer_count < 1:
            raise ValueError("layer_count must be at least 1")
        if not (0 <= d_min <= d_max):
            raise ValueError(f"invalid disparity range {self.disparity_range}")
        if not d_max < self.width / 4:
            raise ValueError(
                f"d_max={d_max} must be below width/4={self.width / 4}"
            )
        for fam in self.families:
            if fam not in TEXTURE_FAMILIES:
                raise ValueError(f"unknown texture family {fam!r}")
        if self.rng_seed < 0 or self.scene_index < 0:
            raise ValueError("seed and scene index must be non-negative")

    @property
    def families(self) -> tuple[str, ...]:
        return tuple(self.texture_family.split("+"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disparity_range"] = list(self.disparity_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["disparity_range"] = tuple(d["disparity_range"])
        return cls(**d)


@dataclass(frozen=True)
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    disp_left: np.ndarray
    disp_right: np.ndarray
    occ_left: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.disp_left.shape


Texture = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass
class Layer:
    """A planar layer: rectangle in left-view coordinates plus disparity plane.

    ``rect`` is ``(y0, y1, x0, x1)`` (half-open); ``None`` means the layer
    covers the whole plane (background). Disparity at ``(i, x)`` is
    ``d0 + sx * (x - cx) + sy * (i - cy)`` with ``(cy, cx)`` the rectangle
    centre (0, 0 for the background). ``row_disp`` overrides the background
    disparity with an arbitrary per-row profile.
    """

    texture: Texture
    d0: float
    rect: tuple[int, int, int, int] | None = None
    sx: float = 0.0
    sy: float = 0.0
    row_disp: np.ndarray | None = field(default=None, repr=False)

    @property
    def centre(self) -> tuple[float, float]:
        if self.rect is None:
            return 0.0, 0.0
        y0, y1, x0, x1 = self.rect
        return (y0 + y1 - 1) / 2.0, (x0 + x1 - 1) / 2.0

    def disparity(self, rows: np.ndarray, xl: np.ndarray) -> np.ndarray:
        if self.row_disp is not None:
            return np.broadcast_to(self.row_disp[rows], np.broadcast(rows, xl).shape)
        cy, cx = self.centre
        return self.d0 + self.sx * (xl - cx) + self.sy * (rows - cy)

    def covers(self, rows: np.ndarray, xl: np.ndarray) -> np.ndarray:
        if self.rect is None:
            return np.ones(np.broadcast(rows, xl).shape, dtype=bool)
        y0, y1, x0, x1 = self.rect
        return (rows >= y0) & (rows < y1) & (xl >= x0) & (xl < x1)

    def left_coord(self, rows: np.ndarray, xr: np.ndarray) -> np.ndarray:
        """Invert ``xr = xl - d(rows, xl)`` for this layer."""
        if self.row_disp is not None:
            return xr + self.row_disp[rows]
        cy, cx = self.centre
        offset = self.d0 - self.sx * cx + self.sy * (rows - cy)
        return (xr + offset) / (1.0 - self.sx)


def _nearest(layers, rows, xs, to_left: bool):
    """Index, left coordinate and disparity of the nearest covering layer."""
    best_d = np.full(xs.shape, -np.inf)
    best_k = np.zeros(xs.shape, dtype=np.intp)
    best_x = np.zeros(xs.shape)
    for k, layer in enumerate(layers):
        xl = layer.left_coord(rows, xs) if to_left else np.broadcast_to(xs, best_d.shape)
        d = layer.disparity(rows, xl)
        hit = layer.covers(rows, xl) & (d > best_d)
        best_d = np.where(hit, d, best_d)
        best_k = np.where(hit, k, best_k)
        best_x = np.where(hit, xl, best_x)
    return best_k, best_x, best_d


def _shade(layers, rows, xl, which) -> np.ndarray:
    out = np.zeros(xl.shape + (3,))
    for k, layer in enumerate(layers):
        sel = which == k
        if np.any(sel):
            out[sel] = layer.texture(rows[sel], xl[sel])
    return out


def render_layers(width: int, height: int, layers: list[Layer]) -> StereoSample:
    """Render a stereo pair, both disparity maps and the left occlusion mask.

    ``layers[0]`` must be a background covering the whole plane. A left pixel
    is occluded when its right-view correspondence falls outside the frame or
    is covered by a nearer layer.
    """
    if not layers or layers[0].rect is not None:
        raise ValueError("first layer must be a full-plane background")
    rows = np.arange(height)[:, None] * np.ones((1, width), dtype=np.intp)
    cols = np.broadcast_to(np.arange(width, dtype=np.float64), (height, width))

    k_left, xl_left, d_left = _nearest(layers, rows, cols, to_left=False)
    left = _shade(layers, rows, xl_left, k_left)

    k_right, xl_right, d_right = _nearest(layers, rows, cols, to_left=True)
    right = _shade(layers, rows, xl_right, k_right)

    xr = cols - d_left
    k_corr, _, _ = _nearest(layers, rows, xr, to_left=True)
    in_frame = (xr >= 0) & (xr <= width - 1)
    occ = (in_frame & (k_corr == k_left)).astype(np.float64)

    return StereoSample(
        left=np.clip(left, 0.0, 1.0),
        right=np.clip(right, 0.0, 1.0),
        disp_left=d_left,
        disp_right=d_right,
        occ_left=occ,
    )


# ---------------------------------------------------------------------------
# textures
# ---------------------------------------------------------------------------

def _noise_patch(rng: np.random.Generator, height: int, span: int) -> Texture:
    """Blocky multi-scale noise stored as a raster over columns [0, span)."""
    base = rng.uniform(0.25, 0.75, size=3)
    raster = np.zeros((height, span, 3))
    for cell, amp in ((1, 0.25), (2, 0.2), (4, 0.15)):
        gh = -(-height // cell)
        gw = -(-span // cell)
        grid = rng.uniform(-1.0, 1.0, size=(gh, gw, 1)) * amp
        tint = rng.uniform(0.7, 1.0, size=(1, 1, 3))
        up = np.repeat(np.repeat(grid, cell, axis=0), cell, axis=1)[:height, :span]
        raster += up * tint
    raster = np.clip(raster + base, 0.0, 1.0)

    def tex(rows, xl):
        x = np.clip(np.rint(xl).astype(np.intp), 0, span - 1)
        return raster[rows, x]

    return tex


def _smooth_gradient(rng: np.random.Generator) -> Texture:
    base = rng.uniform(0.3, 0.7, size=3)
    gy, gx = rng.uniform(-0.006, 0.006, size=2)
    waves = []
    for _ in range(3):
        theta = rng.uniform(0, math.pi)
        period = rng.uniform(7.0, 24.0)
        amp = rng.uniform(0.06, 0.14)
        phase = rng.uniform(0, 2 * math.pi)
        tint = rng.uniform(0.6, 1.0, size=3)
        waves.append((math.cos(theta), math.sin(theta), 2 * math.pi / period, amp, phase, tint))

    def tex(rows, xl):
        rows = rows.astype(np.float64)
        v = np.broadcast_to(base, xl.shape + (3,)).copy()
        v += ((gy * rows + gx * xl)[..., None])
        for cy, cx, k, amp, ph, tint in waves:
            v += (amp * np.sin(k * (cy * rows + cx * xl) + ph))[..., None] * tint
        return v

    return tex


def _striped(rng: np.random.Generator) -> Texture:
    lo = rng.uniform(0.15, 0.4, size=3)
    hi = rng.uniform(0.6, 0.85, size=3)
    theta = rng.uniform(-math.pi / 3, math.pi / 3)  # never exactly horizontal
    period = rng.uniform(6.0, 14.0)
    phase = rng.uniform(0, 2 * math.pi)
    sharp = rng.uniform(1.5, 3.0)
    k = 2 * math.pi / period
    cy, cx = math.sin(theta), math.cos(theta)

    def tex(rows, xl):
        s = np.tanh(sharp * np.sin(k * (cy * rows + cx * xl) + phase))
        t = (0.5 + 0.5 * s)[..., None]
        return lo + t * (hi - lo)

    return tex


def _make_texture(rng, family: str, height: int, span: int) -> Texture:
    if family == "noise-patch":
        return _noise_patch(rng, height, span)
    if family == "smooth-gradient":
        return _smooth_gradient(rng)
    return _striped(rng)


# ---------------------------------------------------------------------------
# scene sampling
# ---------------------------------------------------------------------------

def _horizon_split(sky: Texture, ground: Texture, horizon: int) -> Texture:
    """Separate textures above and below the horizon row, so the ground line is visible."""

    def tex(rows, xl):
        above = (np.asarray(rows) < horizon)[..., None]
        return np.where(above, sky(rows, xl), ground(rows, xl))

    return tex


def scene_rng(seed: int, index: int) -> np.random.Generator:
    """Counter-based generator keyed by ``(seed, index)``: random access."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, index])))


def domain_preset(domain: str, width: int = 128, height: int = 64, seed: int = 0) -> SceneSpec:
    """Scene parameters for the pretraining (``"A"``) or target (``"B"``) domain."""
    if domain == "A":
        return SceneSpec(
            width=width, height=height, layer_count=6,
            disparity_range=(2.0, 24.0), texture_family="noise-patch",
            slant_enabled=False, ground_ramp=False, rng_seed=seed,
        )
    if domain == "B":
        return SceneSpec(
            width=width, height=height, layer_count=4,
            disparity_range=(2.0, 24.0), texture_family="smooth-gradient+striped",
            slant_enabled=True, ground_ramp=True, rng_seed=seed,
        )
    raise ValueError(f"unknown domain {domain!r} (expected 'A' or 'B')")


def _sample_layers(spec: SceneSpec, rng: np.random.Generator) -> list[Layer]:
    w, h = spec.width, spec.height
    d_min, d_max = spec.disparity_range
    fams = spec.families
    span = w + int(math.ceil(d_max)) + 2

    def texture():
        return _make_texture(rng, fams[rng.integers(len(fams))], h, span)

    if spec.ground_ramp:
        horizon = int(rng.integers(int(0.2 * h), int(0.4 * h)))
        far = float(rng.uniform(d_min, d_min + 2.0))
        near = float(rng.uniform(0.85 * d_max, 0.95 * d_max))
        rows = np.arange(h, dtype=np.float64)
        ramp = far + (near - far) * np.clip((rows - horizon) / (h - 1 - horizon), 0, 1)
        layers = [Layer(_horizon_split(texture(), texture(), horizon), d0=far, row_disp=ramp)]
    else:
        d_bg = float(rng.integers(int(d_min), int(d_max) + 1))
        layers = [Layer(texture(), d0=d_bg)]
        ramp = None

    for _ in range(spec.layer_count - 1):
        lh = int(rng.integers(h // 6, h // 2))
        lw = int(rng.integers(w // 10, w // 3))
        y0 = int(rng.integers(0, h - lh + 1))
        x0 = int(rng.integers(0, w - lw + 1))
        rect = (y0, y0 + lh, x0, x0 + lw)
        if ramp is not None:
            # stands on the ground: nearer than the ramp at its bottom row
            foot = float(ramp[y0 + lh - 1])
            d0 = float(min(d_max, foot + rng.uniform(1.0, 4.0)))
        else:
            d0 = float(rng.integers(int(d_min), int(d_max) + 1))
        sx = sy = 0.0
        if spec.slant_enabled:
            sx = float(rng.uniform(-0.04, 0.04))
            sy = float(rng.uniform(-0.02, 0.02))
            # keep the whole plane inside the disparity range
            half = abs(sx) * lw / 2 + abs(sy) * lh / 2
            d0 = float(np.clip(d0, d_min + half, d_max - half))
        layers.append(Layer(texture(), d0=d0, rect=rect, sx=sx, sy=sy))
    return layers


def generate_scene(spec: SceneSpec) -> StereoSample:
    """Render the scene identified by ``(spec.rng_seed, spec.scene_index)``."""
    rng = scene_rng(spec.rng_seed, spec.scene_index)
    layers = _sample_layers(spec, rng)
    return render_layers(spec.width, spec.height, layers)


def generate_dataset(spec: SceneSpec, count: int, start: int = 0) -> list[StereoSample]:
    """Scenes ``start .. start + count - 1`` of the family described by ``spec``."""
    from dataclasses import replace

    return [generate_scene(replace(spec, scene_index=start + i)) for i in range(count)]
