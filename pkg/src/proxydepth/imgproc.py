"""Raster types, file IO and resampling shared by the rest of the package.

Rasters are plain float64 numpy arrays:

* Image: ``(H, W, C)`` with ``C`` in {1, 3} and values in [0, 1].
* DisparityMap: ``(H, W)``, non-negative horizontal offsets in pixels,
  left-view convention.
* OcclusionMask: ``(H, W)`` with 0 = occluded and 1 = visible.

The ``as_*`` helpers validate those invariants and return read-only copies,
which is what the rest of the package relies on when it says a value is
immutable after construction.
"""

from __future__ import annotations

import re
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

__all__ = [
    "RasterIOError",
    "CameraRig",
    "as_image",
    "as_disparity",
    "as_mask",
    "load_image",
    "save_image",
    "save_mask_png",
    "read_pfm",
    "write_pfm",
    "pfm_io",
    "resize_bilinear",
]


class RasterIOError(ValueError):
    """A raster file could not be read or written."""

    def __init__(self, path, reason: str):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


@dataclass(frozen=True)
class CameraRig:
    """Stereo rig parameters used to turn disparity into metric depth."""

    baseline_m: float
    focal_px: float

    def __post_init__(self):
        if not (self.baseline_m > 0 and self.focal_px > 0):
            raise ValueError(
                f"baseline and focal length must be positive, got "
                f"{self.baseline_m}, {self.focal_px}"
            )


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


def as_image(data) -> np.ndarray:
    """Validate and return an ``(H, W, C)`` float64 image in [0, 1]."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3 or a.shape[2] not in (1, 3):
        raise ValueError(f"image must be HxWx1 or HxWx3, got shape {a.shape}")
    if a.shape[0] < 1 or a.shape[1] < 1:
        raise ValueError(f"empty image {a.shape}")
    if not np.all(np.isfinite(a)) or a.min() < 0.0 or a.max() > 1.0:
        raise ValueError("image values must be finite and within [0, 1]")
    return _frozen(a)


def as_disparity(data) -> np.ndarray:
    """Validate and return an ``(H, W)`` float64 disparity map."""
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"disparity map must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("disparity map contains non-finite values")
    if a.size and (a.min() < 0 or a.max() >= a.shape[1]):
        raise ValueError(
            f"disparities must lie in [0, width={a.shape[1]}), "
            f"got [{a.min()}, {a.max()}]"
        )
    return _frozen(a)


def as_mask(data, binary: bool = False) -> np.ndarray:
    """Validate and return an ``(H, W)`` occlusion mask.

    ``binary=True`` enforces the ground-truth alphabet {0, 1}.
    """
    a = np.asarray(data, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)) or a.min() < 0 or a.max() > 1:
        raise ValueError("mask values must lie in [0, 1]")
    if binary and not np.all((a == 0) | (a == 1)):
        raise ValueError("ground-truth mask must only contain 0 and 1")
    return _frozen(a)


# ---------------------------------------------------------------------------
# 8-bit images (PPM / PNG)
# ---------------------------------------------------------------------------

_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _read_pnm(path: Path, raw: bytes) -> np.ndarray:
    pos = 0
    tokens = []
    for _ in range(4):
        m = _PNM_TOKEN.match(raw, pos)
        if m is None:
            raise RasterIOError(path, "malformed PNM header")
        tokens.append(m.group(1))
        pos = m.end()
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise RasterIOError(path, f"unsupported PNM magic {magic!r}")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise RasterIOError(path, "malformed PNM header") from None
    if width < 1 or height < 1:
        raise RasterIOError(path, f"invalid dimensions {width}x{height}")
    if maxval != 255:
        raise RasterIOError(path, f"unsupported bit depth (maxval {maxval})")
    # exactly one whitespace byte separates the header from the payload
    pos += 1
    channels = 3 if magic == b"P6" else 1
    n = width * height * channels
    payload = raw[pos:pos + n]
    if len(payload) != n:
        raise RasterIOError(
            path, f"truncated payload: expected {n} bytes, found {len(payload)}"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)


def _read_png(path: Path) -> np.ndarray:
    from PIL import Image as PILImage

    try:
        with PILImage.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("L", "RGB"):
                arr = np.asarray(im, dtype=np.uint8)
            elif mode == "RGBA":
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            elif mode == "1":
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
            else:
                raise RasterIOError(path, f"unsupported bit depth / mode {mode}")
    except RasterIOError:
        raise
    except Exception as exc:  # PIL raises a zoo of exception types
        raise RasterIOError(path, f"PNG decode failed: {exc}") from exc
    if arr.ndim == 2:
        arr = arr[:, :, None]
    return arr


def load_image(path) -> np.ndarray:
    """Load an 8-bit PPM (P5/P6) or PNG file as a float image in [0, 1]."""
    path = Path(path)
    if not path.is_file():
        raise RasterIOError(path, "no such file")
    raw = path.read_bytes()
    if raw[:2] in (b"P5", b"P6"):
        arr = _read_pnm(path, raw)
    elif raw[:8] == b"\x89PNG\r\n\x1a\n":
        arr = _read_png(path)
    else:
        raise RasterIOError(path, "unrecognized file signature (expected PPM or PNG)")
    return as_image(arr.astype(np.float64) / 255.0)


def _quantize(img) -> np.ndarray:
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 2:
        a = a[:, :, None]
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def save_image(img, path) -> None:
    """Write an image as 8-bit PPM (``.ppm``/``.pgm``) or PNG (anything else)."""
    path = Path(path)
    q = _quantize(img)
    h, w, c = q.shape
    if path.suffix.lower() in (".ppm", ".pgm", ".pnm"):
        magic = b"P6" if c == 3 else b"P5"
        with open(path, "wb") as f:
            f.write(b"%s\n%d %d\n255\n" % (magic, w, h))
            f.write(q.tobytes())
    else:
        from PIL import Image as PILImage

        PILImage.fromarray(q[:, :, 0] if c == 1 else q).save(path, format="PNG")


def save_mask_png(mask, path) -> None:
    """Write a mask as an 8-bit grayscale PNG (0 -> 0, 1 -> 255)."""
    save_image(np.asarray(mask, dtype=np.float64)[:, :, None], path)


# ---------------------------------------------------------------------------
# PFM
# ---------------------------------------------------------------------------

def read_pfm(path) -> np.ndarray:
    """Read a single-channel ``Pf`` file into an ``(H, W)`` float64 array."""
    path = Path(path)
    if not path.is_file():
        raise RasterIOError(path, "no such file")
    with open(path, "rb") as f:
        header = f.readline().rstrip()
        if header == b"PF":
            raise RasterIOError(path, "color PFM ('PF') is not a disparity map")
        if header != b"Pf":
            raise RasterIOError(path, f"not a PFM file (header {header[:16]!r})")
        dims = f.readline().split()
        scale_line = f.readline().strip()
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(scale_line)
        except (ValueError, IndexError):
            raise RasterIOError(path, "malformed PFM header") from None
        if width < 1 or height < 1 or scale == 0:
            raise RasterIOError(path, "malformed PFM header")
        dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
        payload = f.read()
    n = width * height
    if len(payload) < n * 4:
        raise RasterIOError(path, f"truncated payload: expected {n * 4} bytes")
    data = np.frombuffer(payload[: n * 4], dtype=dtype).reshape(height, width)
    return np.flipud(data).astype(np.float64)


def write_pfm(disp, path, byteorder: str = "<") -> None:
    """Write an ``(H, W)`` map as a ``Pf`` file (rows bottom-up).

    ``byteorder`` is ``"<"`` (little-endian, scale -1.0) or ``">"``
    (big-endian, scale 1.0).
    """
    a = np.asarray(disp, dtype=np.float64)
    if a.ndim != 2:
        raise RasterIOError(path, f"PFM payload must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise RasterIOError(path, "refusing to write non-finite values")
    if byteorder == "=":
        byteorder = "<" if sys.byteorder == "little" else ">"
    if byteorder not in ("<", ">"):
        raise ValueError(f"byteorder must be '<' or '>', got {byteorder!r}")
    h, w = a.shape
    scale = -1.0 if byteorder == "<" else 1.0
    body = np.flipud(a).astype(byteorder + "f4").tobytes()
    with open(path, "wb") as f:
        f.write(b"Pf\n%d %d\n%s\n" % (w, h, repr(scale).encode()))
        f.write(body)


def pfm_io(disp, path, direction: str):
    """Single entry point for PFM IO: ``direction`` is ``"read"`` or ``"write"``.

    Writing returns the map that was written; reading ignores ``disp``.
    """
    if direction == "read":
        return read_pfm(path)
    if direction == "write":
        write_pfm(disp, path)
        return np.asarray(disp, dtype=np.float64)
    raise ValueError(f"direction must be 'read' or 'write', got {direction!r}")


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def _sample_axis(n_in: int, n_out: int):
    """Half-pixel-centred source coordinates, edge-clamped."""
    ratio = n_in / n_out
    src = (np.arange(n_out) + 0.5) * ratio - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_to(a, out_h: int, out_w: int, is_disparity: bool = False) -> np.ndarray:
    """Bilinear resize of a 2-D or 3-D raster to an explicit output size."""
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[:2]
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be at least 1x1, got {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return a.copy()
    y0, y1, fy = _sample_axis(h, out_h)
    x0, x1, fx = _sample_axis(w, out_w)
    if a.ndim == 3:
        fy = fy[:, None, None]
        fx = fx[None, :, None]
    else:
        fy = fy[:, None]
        fx = fx[None, :]
    top = a[y0]
    bot = a[y1]
    rows = top + fy * (bot - top)
    left = rows[:, x0]
    right = rows[:, x1]
    out = left + fx * (right - left)
    if is_disparity:
        out = out * (out_w / w)
    return out


def resize_bilinear(a, scale: float, is_disparity: bool = False) -> np.ndarray:
    """Resize by ``scale`` with bilinear, edge-clamped sampling.

    Disparity rasters are additionally multiplied by the realised horizontal
    scale factor so that stereo correspondences stay valid.
    """
    if not scale > 0:
        raise ValueError(f"scale must be positive, got {scale}")
    a = np.asarray(a, dtype=np.float64)
    h, w = a.shape[:2]
    out_h = int(round(h * scale))
    out_w = int(round(w * scale))
    return resize_to(a, out_h, out_w, is_disparity=is_disparity)
