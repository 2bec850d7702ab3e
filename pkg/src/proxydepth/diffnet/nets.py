"""Desk-scale stereo and monocular encoder-decoder networks.

Both networks share the decoder layout: at every scale a 4x4 stride-2
transposed convolution with leaky ReLU, concatenation with the encoder
shortcut (and the upsampled coarser disparity), a 3x3 convolution with leaky
ReLU, and a 3x3 prediction head. Scale ``m`` is emitted at ``1 / 2**m`` of the
input resolution, expressed in pixels of that scale.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = [
    "CHECKPOINT_VERSION",
    "NetParams",
    "stereo_arch",
    "mono_arch",
    "init_params",
    "stereo_forward",
    "mono_forward",
    "forward",
    "to_batch",
    "save_params",
    "load_params",
]

CHECKPOINT_VERSION = 1
# initial inverse temperature of the soft-argmax over the correlation volume
MATCH_BETA_INIT = 1.0
# maps [0, 1] intensities to roughly unit spread around zero
INPUT_SHIFT = -0.5
INPUT_SCALE = 4.0
# disparity priors enter the decoder features in units of this many full-resolution pixels
PRIOR_FEATURE_PX = 4.0
HEAD_INIT_GAIN = 0.3
_MAGIC = b"PXDCKPT\x01"


def stereo_arch(channels=(8, 16, 32, 32), decoder=(4, 8, 16, 16), scales: int = 4,
                max_disp: int = 16) -> dict:
    """Descriptor of the correlation stereo network.

    ``decoder[m]`` is the feature width of the decoder stage emitting scale ``m``.
    """
    return {"kind": "stereo", "channels": list(channels), "decoder": list(decoder),
            "scales": scales, "max_disp": max_disp, "in_channels": 3}


def mono_arch(channels=(8, 16, 32, 32), decoder=(4, 8, 16, 16), scales: int = 4,
              max_ratio: float = 0.3, coord_channel: bool = True) -> dict:
    """Descriptor of the monocular network.

    ``coord_channel`` appends the normalised row index to the input, so the
    network can tie disparity to image height (ground-plane cue) away from
    the borders.
    """
    return {"kind": "mono", "channels": list(channels), "decoder": list(decoder),
            "scales": scales, "max_ratio": max_ratio, "in_channels": 3,
            "coord_channel": coord_channel}


@dataclass
class NetParams:
    arch: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    def copy(self) -> "NetParams":
        return NetParams(json.loads(json.dumps(self.arch)),
                         {k: v.copy() for k, v in self.tensors.items()})

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.arch, sort_keys=True).encode())
        for k, v in self.tensors.items():
            h.update(k.encode())
            h.update(np.ascontiguousarray(v, dtype="<f8").tobytes())
        return h.hexdigest()

    @property
    def size(self) -> int:
        return sum(v.size for v in self.tensors.values())


def _layer_shapes(arch: dict) -> dict[str, tuple]:
    c1, c2, c3, c4 = arch["channels"]
    cin = arch["in_channels"] + int(arch.get("coord_channel", False))
    m = arch["scales"]
    if m != 4:
        raise ValueError("the desk-scale networks are built for exactly 4 scales")
    stereo = arch["kind"] == "stereo"
    head = 2 if stereo else 1
    enc2_out = c2
    enc3_in = (arch["max_disp"] + 1 + c2) if stereo else c2
    shapes = {
        "enc1": (c1, cin, 3, 3),
        "enc2": (enc2_out, c1, 3, 3),
        "enc3": (c3, enc3_in, 3, 3),
        "enc4": (c4, c3, 3, 3),
    }
    dw = arch["decoder"]
    # stereo: the quarter-resolution shortcut is the correlation volume plus left features
    skips = {3: c3, 2: enc3_in, 1: c1, 0: cin}
    for s in reversed(range(m)):
        d_in = c4 if s == m - 1 else dw[s + 1]
        d_out, skip = dw[s], skips[s]
        extra = 0 if s == m - 1 else 1
        shapes[f"up{s}"] = (d_in, d_out, 4, 4)
        shapes[f"iconv{s}"] = (d_out, d_out + skip + extra, 3, 3)
        shapes[f"head{s}"] = (head, d_out, 3, 3)
    return shapes


def init_params(arch: dict, seed: int) -> NetParams:
    """He-style fan-in normal initialisation, deterministic per seed."""
    if arch.get("kind") not in ("stereo", "mono"):
        raise ValueError(f"unknown architecture kind {arch.get('kind')!r}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, 0x5EED])))
    tensors = {}
    for name, shape in _layer_shapes(arch).items():
        if name.startswith("up"):
            fan_in = shape[0] * shape[2] * shape[3] / 4  # stride 2: each output sees k*k/4 taps
            out_ch = shape[1]
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            out_ch = shape[0]
        std = np.sqrt(2.0 / fan_in)
        if name.startswith("head"):
            std *= HEAD_INIT_GAIN
        tensors[f"{name}.w"] = rng.normal(0.0, std, size=shape)
        tensors[f"{name}.b"] = np.zeros(out_ch)
    if arch["kind"] == "stereo":
        tensors["match.beta"] = np.array([MATCH_BETA_INIT])
    return NetParams(dict(arch), tensors)


def to_batch(images) -> np.ndarray:
    """Stack ``(H, W, C)`` images (or one image) into an ``(N, C, H, W)`` array."""
    if isinstance(images, np.ndarray) and images.ndim == 3:
        images = [images]
    arr = np.stack([np.asarray(im, dtype=np.float64) for im in images])
    if arr.ndim == 3:
        arr = arr[..., None]
    return np.ascontiguousarray(np.moveaxis(arr, -1, 1))


def _tensors(params: NetParams, tensors):
    if tensors is not None:
        return tensors
    return {k: Tensor(v) for k, v in params.tensors.items()}


def _check_input(x: Tensor, scales: int, op: str):
    if x.ndim != 4:
        raise ad.ShapeError(op, x.shape, detail="expected (N, C, H, W)")
    div = 2 ** (scales + 1)
    if x.shape[2] % div or x.shape[3] % div:
        raise ad.ShapeError(op, x.shape, detail=f"height and width must be divisible by {div}")


def _conv(P, name, x, stride=1):
    return ad.conv2d(x, P[f"{name}.w"], P[f"{name}.b"], stride=stride, padding=1)


def _decode(P, arch, bottleneck, skips, head_fn, priors=None):
    m_count = arch["scales"]
    priors = priors or {}
    prev = bottleneck
    coarse = None
    pyramid = [None] * m_count
    for m in reversed(range(m_count)):
        up = ad.leaky_relu(ad.conv_transpose2d(prev, P[f"up{m}.w"], P[f"up{m}.b"], stride=2, padding=1))
        parts = [up, skips[m]]
        prior = priors.get(m)
        if prior is None and coarse is not None:
            prior = ad.scale(ad.upsample2x(coarse), 2.0)
        if coarse is not None:
            parts.append(ad.scale(prior, 2 ** m / PRIOR_FEATURE_PX))
        feat = ad.leaky_relu(_conv(P, f"iconv{m}", ad.concat(parts, axis=1)))
        head = _conv(P, f"head{m}", feat)
        pyramid[m] = head_fn(head, m, prior)
        coarse = pyramid[m][0]
        prev = feat
    return pyramid


def _centre(x: Tensor) -> Tensor:
    return ad.scale(ad.add(x, Tensor(np.array(INPUT_SHIFT))), INPUT_SCALE)


def stereo_forward(params: NetParams, left, right, tensors=None):
    """Run the correlation stereo network.

    ``left``/``right`` are ``(N, 3, H, W)`` arrays or tensors. Returns a list of
    ``(disparity, visibility)`` tensor pairs, finest scale first. Each finer
    disparity head refines the upsampled coarser estimate:
    ``softplus(prior + head)``.
    """
    arch = params.arch
    if arch["kind"] != "stereo":
        raise ValueError("stereo_forward needs stereo parameters")
    P = _tensors(params, tensors)
    left, right = ad.as_tensor(left), ad.as_tensor(right)
    _check_input(left, arch["scales"], "stereo_forward")
    if left.shape != right.shape:
        raise ad.ShapeError("stereo_forward", left.shape, right.shape)

    # siamese: one pass over the stacked pair
    n = left.shape[0]
    both = _centre(ad.concat([left, right], axis=0))
    f1 = ad.relu(_conv(P, "enc1", both, stride=2))
    z2 = _conv(P, "enc2", f1, stride=2)
    f2 = ad.relu(z2)
    l1, l2 = f1[:n], f2[:n]
    # matching on the linear features: signed responses discriminate better than rectified ones
    corr = ad.corr1d(z2[:n], z2[n:], arch["max_disp"])
    cost = ad.concat([corr, l2], axis=1)
    e3 = ad.relu(_conv(P, "enc3", cost, stride=2))
    # soft-argmax over the volume: a quarter-resolution disparity the decoder refines
    beta = ad.getitem(P["match.beta"], (None, slice(None), None, None))
    prob = ad.softmax(ad.mul(corr, beta), axis=1)
    levels = Tensor(np.arange(arch["max_disp"] + 1, dtype=np.float64).reshape(1, -1, 1, 1))
    soft = ad.getitem(ad.sum_(ad.mul(prob, levels), axis=1), (slice(None), None))
    e4 = ad.relu(_conv(P, "enc4", e3, stride=2))

    def head(h, m, prior):
        pre = h[:, 0:1] if prior is None else ad.add(h[:, 0:1], prior)
        return ad.softplus(pre), ad.sigmoid(h[:, 1:2])

    return _decode(P, arch, e4, {3: e3, 2: cost, 1: l1, 0: both[:n]}, head, priors={2: soft})


def mono_forward(params: NetParams, img, tensors=None):
    """Run the monocular network; returns a list of disparity tensors, finest first."""
    arch = params.arch
    if arch["kind"] != "mono":
        raise ValueError("mono_forward needs mono parameters")
    P = _tensors(params, tensors)
    img = ad.as_tensor(img)
    _check_input(img, arch["scales"], "mono_forward")
    x = _centre(img)
    if arch.get("coord_channel", False):
        n, _, h, w = img.shape
        rows = np.broadcast_to(np.linspace(-1.0, 1.0, h)[:, None], (n, 1, h, w))
        x = ad.concat([x, Tensor(np.ascontiguousarray(rows))], axis=1)
    e1 = ad.relu(_conv(P, "enc1", x, stride=2))
    e2 = ad.relu(_conv(P, "enc2", e1, stride=2))
    e3 = ad.relu(_conv(P, "enc3", e2, stride=2))
    e4 = ad.relu(_conv(P, "enc4", e3, stride=2))
    ratio = arch["max_ratio"]

    def head(h, m, prior):
        bound = ratio * img.shape[3] / 2 ** m
        return (ad.scale(ad.sigmoid(h), bound),)

    return [p[0] for p in _decode(P, arch, e4, {3: e3, 2: e2, 1: e1, 0: x}, head)]


def forward(params: NetParams, *inputs, tensors=None):
    if params.arch["kind"] == "stereo":
        return stereo_forward(params, *inputs, tensors=tensors)
    return mono_forward(params, *inputs, tensors=tensors)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_params(params: NetParams, path) -> None:
    """Binary container: magic, JSON header length, JSON header, raw <f8 payload."""
    entries = []
    offset = 0
    for name, arr in params.tensors.items():
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = json.dumps(
        {"version": CHECKPOINT_VERSION, "arch": params.arch, "tensors": entries},
        sort_keys=True,
    ).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for arr in params.tensors.values():
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path) -> NetParams:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    meta = json.loads(raw[16:16 + hlen])
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    body = raw[16 + hlen:]
    tensors = {}
    for e in meta["tensors"]:
        n = int(np.prod(e["shape"])) if e["shape"] else 1
        start = e["offset"]
        chunk = body[start:start + n * 8]
        if len(chunk) != n * 8:
            raise ValueError(f"{path}: truncated tensor {e['name']}")
        tensors[e["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return NetParams(meta["arch"], tensors)
