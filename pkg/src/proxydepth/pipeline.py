"""The three training stages: stereo pretraining, target-domain fine-tuning, distillation.

Every stage is a pure function of its :class:`TrainConfig`, its seed and the
samples it is handed. Randomness (shuffling, augmentation draws) comes from
counter-based generators keyed by ``(seed, stage, epoch[, sample])`` so a
rerun reproduces the parameters bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from . import imgproc
from .diffnet import autodiff as ad
from .diffnet import nets
from .diffnet.autodiff import Tensor
from .eval import MetricsReport, aggregate, evaluate_pair
from .geometry import occlusion_mask_lr_check
from .losses import (
    LossWeights,
    absolute_reg,
    distill_loss,
    downsample_disparity,
    downsample_mask,
    photometric_masked,
    relative_reg,
    stereo_sup_loss,
    supervised_ft_loss,
    unsup_ft_loss,
)
from .scenegen import StereoSample

__all__ = [
    "STAGES",
    "POLICIES",
    "DivergenceError",
    "TrainConfig",
    "Adam",
    "lr_for_epoch",
    "AugmentDraw",
    "draw_augment",
    "apply_augment",
    "augment_stereo",
    "flip_swap",
    "TrainResult",
    "TeacherCache",
    "pretrain_stereo",
    "precompute_teacher",
    "finetune_supervised",
    "finetune_unsupervised",
    "distill_mono",
    "predict_stereo",
    "predict_mono",
    "evaluate_stereo",
    "evaluate_mono",
    "write_dataset",
    "read_dataset",
]

log = logging.getLogger(__name__)

STAGES = ("pretrain", "ft-supervised", "ft-unsupervised", "distill")
POLICIES = ("stereo-full", "mono-photometric-only", "none")
_STAGE_CODE = {s: i + 1 for i, s in enumerate(STAGES)}


class DivergenceError(RuntimeError):
    """A loss or gradient became non-finite during training."""

    def __init__(self, stage: str, epoch: int, step: int, detail: str):
        super().__init__(f"{stage}: training diverged at epoch {epoch}, step {step}: {detail}")
        self.stage, self.epoch, self.step = stage, epoch, step


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_SCHEDULES = {
    "pretrain": dict(epochs=15, lr=1e-3, lr_halve_epochs=(8, 12)),
    "ft-supervised": dict(epochs=5, lr=1e-3, lr_halve_epochs=()),
    "ft-unsupervised": dict(epochs=5, lr=1e-3, lr_halve_epochs=()),
    "distill": dict(epochs=15, lr=1e-3, lr_halve_epochs=(8, 12)),
}


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters and data references of one training stage.

    Epochs are counted from 0; the learning rate is halved once for every
    entry of ``lr_halve_epochs`` that is ``<=`` the current epoch.
    ``train_data``/``val_data``/``init_checkpoint``/``teacher_cache`` are paths
    used by the command line front end; the in-process API takes samples and
    parameters directly.
    """

    stage: str = "pretrain"
    epochs: int = 15
    batch_size: int = 4
    lr: float = 1e-3
    lr_halve_epochs: tuple[int, ...] = (8, 12)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    gamma1: float = 0.05
    gamma2: float = 0.1
    gamma3: float = 0.1
    seed: int = 0
    supervised_sample_count: int = 10
    use_mask: bool = True
    two_rounds: bool = False
    augment: bool = True
    crop_height: int = 64
    crop_width: int = 128
    train_data: str = ""
    val_data: str = ""
    init_checkpoint: str = ""
    teacher_cache: str = ""

    def __post_init__(self):
        object.__setattr__(self, "lr_halve_epochs", tuple(int(e) for e in self.lr_halve_epochs))
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}; expected one of {', '.join(STAGES)}")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.lr <= 0 or self.adam_eps <= 0:
            raise ValueError("lr and adam_eps must be positive")
        if self.supervised_sample_count < 1:
            raise ValueError("supervised_sample_count must be positive")
        LossWeights(self.gamma1, self.gamma2, self.gamma3)

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainConfig":
        """Desk-scale defaults of ``stage``, with keyword overrides."""
        if stage not in _SCHEDULES:
            raise ValueError(f"unknown stage {stage!r}")
        return cls(stage=stage, **{**_SCHEDULES[stage], **overrides})

    @classmethod
    def from_mapping(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        stage = data.get("stage", "pretrain")
        rest = {k: v for k, v in data.items() if k != "stage"}
        return cls.for_stage(stage, **rest)

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a key-value mapping")
        return cls.from_mapping(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_halve_epochs"] = list(self.lr_halve_epochs)
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.gamma1, self.gamma2, self.gamma3)


def lr_for_epoch(config: TrainConfig, epoch: int) -> float:
    halvings = sum(1 for e in config.lr_halve_epochs if epoch >= e)
    return config.lr * 0.5 ** halvings


# ---------------------------------------------------------------------------
# optimiser
# ---------------------------------------------------------------------------

class Adam:
    """Adam with bias-corrected first and second moments, one pair per parameter.

    ``step`` updates the arrays in ``params`` in place.
    """

    def __init__(self, params: dict[str, np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, grads: dict[str, np.ndarray], lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads.get(k)
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentDraw:
    flip: bool = False
    scale: float = 1.0
    crop_y: int = 0
    crop_x: int = 0
    gamma: float = 1.0
    brightness: float = 1.0
    color: tuple[float, float, float] = (1.0, 1.0, 1.0)


def flip_swap(sample: StereoSample) -> StereoSample:
    """Mirror both views and exchange them; the pair stays a valid left/right pair.

    The occlusion mask of the new left view is the left-right check of the
    mirrored disparities (the generator only emits the left-view mask).
    """
    dl = np.ascontiguousarray(sample.disp_right[:, ::-1])
    dr = np.ascontiguousarray(sample.disp_left[:, ::-1])
    return StereoSample(
        left=np.ascontiguousarray(sample.right[:, ::-1]),
        right=np.ascontiguousarray(sample.left[:, ::-1]),
        disp_left=dl,
        disp_right=dr,
        occ_left=occlusion_mask_lr_check(dl, dr),
    )


def _resized_shape(shape, scale):
    h, w = shape
    return max(1, int(round(h * scale))), max(1, int(round(w * scale)))


def draw_augment(rng: np.random.Generator, policy: str, shape: tuple[int, int],
                 crop: tuple[int, int] | None = None) -> AugmentDraw:
    """Sample one augmentation for an ``shape = (H, W)`` sample.

    Raises:
        ValueError: unknown policy, or a crop larger than the (resized) image.
    """
    if policy not in POLICIES:
        raise ValueError(f"unknown augmentation policy {policy!r}")
    if policy == "none":
        return AugmentDraw()
    flip = bool(rng.random() < 0.5)
    scale, cy, cx = 1.0, 0, 0
    if policy == "stereo-full":
        crop = crop or shape
        scale = float(rng.uniform(0.8, 1.2))
        rh, rw = _resized_shape(shape, scale)
        if crop[0] > rh or crop[1] > rw:
            raise ValueError(f"crop {crop} larger than resized image {(rh, rw)} (scale {scale:.3f})")
        cy = int(rng.integers(0, rh - crop[0] + 1))
        cx = int(rng.integers(0, rw - crop[1] + 1))
    gamma = float(rng.uniform(0.8, 1.2))
    brightness = float(rng.uniform(0.8, 1.2))
    color = tuple(float(c) for c in rng.uniform(0.95, 1.05, size=3))
    return AugmentDraw(flip, scale, cy, cx, gamma, brightness, color)


def _photometric(img: np.ndarray, d: AugmentDraw) -> np.ndarray:
    out = img ** d.gamma * d.brightness
    if img.shape[-1] == 3:
        out = out * np.asarray(d.color)
    else:
        out = out * float(np.mean(d.color))
    return np.clip(out, 0.0, 1.0)


def apply_augment(sample: StereoSample, draw: AugmentDraw, crop: tuple[int, int] | None = None) -> StereoSample:
    """Apply ``draw``: flip-swap, resize, crop, then the same photometric jitter on both views.

    When only photometric factors differ from identity the geometry (and the
    occlusion mask) is passed through untouched; any geometric change
    recomputes the mask from the transformed disparities.
    """
    s = flip_swap(sample) if draw.flip else sample
    h, w = s.shape
    crop = crop or (h, w)
    geometric = draw.scale != 1.0 or crop != (h, w)
    left, right, dl, dr, occ = s.left, s.right, s.disp_left, s.disp_right, s.occ_left
    if geometric:
        rh, rw = _resized_shape((h, w), draw.scale)
        if crop[0] > rh or crop[1] > rw:
            raise ValueError(f"crop {crop} larger than resized image {(rh, rw)}")
        if draw.scale != 1.0:
            left = imgproc.resize_to(left, rh, rw)
            right = imgproc.resize_to(right, rh, rw)
            dl = imgproc.resize_to(dl, rh, rw, is_disparity=True)
            dr = imgproc.resize_to(dr, rh, rw, is_disparity=True)
        ys = slice(draw.crop_y, draw.crop_y + crop[0])
        xs = slice(draw.crop_x, draw.crop_x + crop[1])
        left, right = left[ys, xs], right[ys, xs]
        dl, dr = np.ascontiguousarray(dl[ys, xs]), np.ascontiguousarray(dr[ys, xs])
        # crop edges move correspondences out of frame, so the mask is rebuilt
        occ = occlusion_mask_lr_check(dl, dr)
    identity_photo = draw.gamma == 1.0 and draw.brightness == 1.0 and all(c == 1.0 for c in draw.color)
    if not identity_photo:
        left, right = _photometric(left, draw), _photometric(right, draw)
    return StereoSample(np.ascontiguousarray(left), np.ascontiguousarray(right), dl, dr, occ)


def augment_stereo(sample: StereoSample, rng: np.random.Generator, policy: str,
                   crop: tuple[int, int] | None = None) -> StereoSample:
    """Random augmentation under ``policy`` (``stereo-full`` or ``mono-photometric-only``)."""
    return apply_augment(sample, draw_augment(rng, policy, sample.shape, crop), crop if policy == "stereo-full" else None)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    params: nets.NetParams
    steps: list[dict] = field(default_factory=list)
    epoch_loss: list[float] = field(default_factory=list)

    def log_dict(self) -> dict:
        return {"steps": self.steps, "epoch_loss": self.epoch_loss}


def _rng(config: TrainConfig, *keys: int) -> np.random.Generator:
    words = [config.seed, _STAGE_CODE[config.stage], *keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def _train(params: nets.NetParams, n_items: int, make_loss, config: TrainConfig, round_index: int = 0) -> TrainResult:
    """Generic mini-batch Adam loop.

    ``make_loss(tensors, indices, epoch)`` builds the scalar loss tensor of one
    batch given leaf tensors for every parameter.
    """
    params = params.copy()
    opt = Adam(params.tensors, config.beta1, config.beta2, config.adam_eps)
    result = TrainResult(params)
    step = 0
    for epoch in range(config.epochs):
        lr = lr_for_epoch(config, epoch)
        order = _rng(config, round_index, epoch).permutation(n_items)
        losses = []
        for start in range(0, n_items, config.batch_size):
            idx = order[start:start + config.batch_size]
            leaves = {k: Tensor(v, requires_grad=True) for k, v in params.tensors.items()}
            loss = make_loss(leaves, idx, epoch)
            value = float(loss.data)
            if not math.isfinite(value):
                raise DivergenceError(config.stage, epoch, step, f"loss is {value}")
            loss.backward()
            grads = {k: t.grad for k, t in leaves.items() if t.grad is not None}
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if bad:
                raise DivergenceError(config.stage, epoch, step, f"non-finite gradient in {', '.join(bad)}")
            opt.step(grads, lr)
            result.steps.append({"round": round_index, "epoch": epoch, "step": step, "lr": lr, "loss": value})
            losses.append(value)
            step += 1
        result.epoch_loss.append(float(np.mean(losses)) if losses else math.nan)
        log.info("%s epoch %d lr %.3g loss %.5f", config.stage, epoch, lr, result.epoch_loss[-1])
    return result


def _run_rounds(params, n_items, make_loss, config) -> TrainResult:
    result = _train(params, n_items, make_loss, config, 0)
    if config.two_rounds:
        # second round restarts the schedule (and optimiser state) from the trained weights
        second = _train(result.params, n_items, make_loss, config, 1)
        second.steps = result.steps + second.steps
        second.epoch_loss = result.epoch_loss + second.epoch_loss
        result = second
    return result


def _stack(samples, attr) -> np.ndarray:
    return np.stack([getattr(s, attr) for s in samples])


def _images(samples, attr) -> Tensor:
    return Tensor(nets.to_batch([getattr(s, attr) for s in samples]))


def _map_pyramid(maps: np.ndarray, scales: int, kind: str) -> list[Tensor]:
    """``(N, H, W)`` maps to a list of ``(N, 1, H/2^m, W/2^m)`` tensors."""
    out = []
    for m in range(scales):
        f = 2 ** m
        a = downsample_disparity(maps, f) if kind == "disp" else downsample_mask(maps, f)
        out.append(Tensor(a[:, None]))
    return out


def _avg_pool_images(x: np.ndarray, f: int) -> np.ndarray:
    if f == 1:
        return x
    n, c, h, w = x.shape
    return x.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))


def _check_samples(op: str, samples):
    if not samples:
        raise ValueError(f"{op}: empty sample list")


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def pretrain_stereo(samples: list[StereoSample], config: TrainConfig,
                    arch: dict | None = None, init: nets.NetParams | None = None) -> TrainResult:
    """Supervised stereo training (disparity L1 + occlusion BCE at every scale).

    With ``config.augment`` each sample is augmented under ``stereo-full``
    and cropped to ``(crop_height, crop_width)``.
    """
    _check_samples("pretrain_stereo", samples)
    arch = arch or nets.stereo_arch()
    params = init.copy() if init is not None else nets.init_params(arch, config.seed)
    crop = (config.crop_height, config.crop_width)
    policy = "stereo-full" if config.augment else "none"
    scales = params.arch["scales"]
    weights = LossWeights.for_scales(scales, gamma1=config.gamma1, gamma2=config.gamma2, gamma3=config.gamma3)

    def make_loss(P, idx, epoch):
        batch = []
        for i in idx:
            rng = _rng(config, 100 + epoch, int(i))
            s = samples[i]
            if policy == "none" and s.shape != crop:
                raise ValueError(f"sample {i} is {s.shape}, expected {crop} without augmentation")
            batch.append(augment_stereo(s, rng, policy, crop))
        preds = nets.stereo_forward(params, _images(batch, "left"), _images(batch, "right"), tensors=P)
        gd = _map_pyramid(_stack(batch, "disp_left"), scales, "disp")
        go = _map_pyramid(_stack(batch, "occ_left"), scales, "mask")
        return stereo_sup_loss(preds, list(zip(gd, go)), weights)

    return _run_rounds(params, len(samples), make_loss, config)


def predict_stereo(params: nets.NetParams, samples, batch_size: int = 8):
    """Scale-0 disparity and visibility maps for each sample, ``(H, W)`` arrays."""
    disps, masks = [], []
    for start in range(0, len(samples), batch_size):
        chunk = samples[start:start + batch_size]
        pyr = nets.stereo_forward(params, _images(chunk, "left"), _images(chunk, "right"))
        d, o = pyr[0]
        disps.extend(d.data[:, 0])
        masks.extend(o.data[:, 0])
    return disps, masks


def predict_mono(params: nets.NetParams, images, batch_size: int = 8):
    """Scale-0 disparity for each ``(H, W, C)`` image."""
    out = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        out.extend(nets.mono_forward(params, nets.to_batch(chunk))[0].data[:, 0])
    return out


def evaluate_stereo(params: nets.NetParams, samples) -> MetricsReport:
    """Disparity and depth metrics of the scale-0 stereo prediction, mean over samples."""
    disps, _ = predict_stereo(params, samples)
    return aggregate([evaluate_pair(d, s.disp_left) for d, s in zip(disps, samples)])


def evaluate_mono(params: nets.NetParams, samples) -> MetricsReport:
    disps = predict_mono(params, [s.left for s in samples])
    return aggregate([evaluate_pair(d, s.disp_left) for d, s in zip(disps, samples)])


@dataclass(frozen=True)
class TeacherCache:
    """Frozen scale-0 disparities and binarised visibility masks of a teacher network."""

    disp: tuple[np.ndarray, ...]
    mask: tuple[np.ndarray, ...]
    checkpoint_digest: str

    def __post_init__(self):
        if len(self.disp) != len(self.mask):
            raise ValueError("disparity and mask counts differ")
        for a in (*self.disp, *self.mask):
            a.setflags(write=False)

    def __len__(self) -> int:
        return len(self.disp)

    def checksum(self) -> str:
        h = hashlib.sha256(self.checkpoint_digest.encode())
        for d, m in zip(self.disp, self.mask):
            h.update(np.ascontiguousarray(d, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(m, dtype="<f8").tobytes())
        return h.hexdigest()

    def save(self, path) -> None:
        np.savez(path, disp=np.stack(self.disp), mask=np.stack(self.mask),
                 checkpoint_digest=np.array(self.checkpoint_digest))

    @classmethod
    def load(cls, path) -> "TeacherCache":
        with np.load(path, allow_pickle=False) as z:
            return cls(tuple(np.array(z["disp"])), tuple(np.array(z["mask"])), str(z["checkpoint_digest"]))


def precompute_teacher(params: nets.NetParams | None, samples) -> TeacherCache:
    """Run the un-finetuned stereo network once over ``samples`` and freeze the result.

    The visibility mask is binarised at 0.5 (``>= 0.5`` is visible).
    """
    if params is None:
        raise ValueError("precompute_teacher: missing teacher checkpoint")
    disps, masks = predict_stereo(params, samples)
    return TeacherCache(
        tuple(np.array(d) for d in disps),
        tuple((m >= 0.5).astype(np.float64) for m in masks),
        params.digest(),
    )


def finetune_supervised(params: nets.NetParams, labeled: list[StereoSample], config: TrainConfig) -> TrainResult:
    """Multiscale L1 disparity regression on the first ``supervised_sample_count`` samples."""
    subset = list(labeled[: config.supervised_sample_count])
    _check_samples("finetune_supervised", subset)
    scales = params.arch["scales"]
    weights = LossWeights.for_scales(scales)
    gts = [_map_pyramid(_stack([s], "disp_left"), scales, "disp") for s in subset]

    def make_loss(P, idx, epoch):
        batch = [subset[i] for i in idx]
        preds = nets.stereo_forward(params, _images(batch, "left"), _images(batch, "right"), tensors=P)
        gt = [Tensor(np.concatenate([gts[i][m].data for i in idx])) for m in range(scales)]
        return supervised_ft_loss([p[0] for p in preds], gt, weights)

    return _run_rounds(params, len(subset), make_loss, config)


def finetune_unsupervised(params: nets.NetParams, samples: list[StereoSample], cache: TeacherCache,
                          config: TrainConfig) -> TrainResult:
    """Occlusion-masked photometric loss with absolute and relative regularisation.

    Only the images of ``samples`` are used. Every scale is supervised; the
    images and ``D_un`` are average-pooled (``D_un`` also divided by the
    factor) and ``M_un`` is subsampled. ``config.use_mask = False`` replaces
    the mask of the photometric term by ones (ablation).
    """
    _check_samples("finetune_unsupervised", samples)
    if len(cache) < len(samples):
        raise KeyError(f"teacher cache covers {len(cache)} samples, {len(samples)} requested")
    scales = params.arch["scales"]
    weights = LossWeights.for_scales(scales, gamma1=config.gamma1, gamma2=config.gamma2, gamma3=config.gamma3)
    before = cache.checksum()

    def make_loss(P, idx, epoch):
        batch = [samples[i] for i in idx]
        left = nets.to_batch([s.left for s in batch])
        right = nets.to_batch([s.right for s in batch])
        preds = nets.stereo_forward(params, left, right, tensors=P)
        d_un = np.stack([cache.disp[i] for i in idx])
        m_un = np.stack([cache.mask[i] for i in idx])
        total = None
        for m in range(scales):
            f = 2 ** m
            dm = downsample_disparity(d_un, f)[:, None]
            mm = downsample_mask(m_un, f)[:, None]
            photo_mask = mm if config.use_mask else np.ones_like(mm)
            term = _unsup_term(_avg_pool_images(left, f), _avg_pool_images(right, f), preds[m][0],
                               dm, mm, photo_mask, weights)
            term = ad.scale(term, weights.scale_weights[m])
            total = term if total is None else total + term
        return total

    result = _run_rounds(params, len(samples), make_loss, config)
    if cache.checksum() != before:
        raise RuntimeError("teacher cache changed during fine-tuning")
    return result


def _unsup_term(left, right, disp, d_un, m_un, photo_mask, weights):
    if photo_mask is m_un:
        return unsup_ft_loss(Tensor(left), Tensor(right), disp, d_un, m_un, weights)
    # ablation: only the photometric term loses its mask
    total = photometric_masked(Tensor(left), Tensor(right), disp, photo_mask)
    if weights.gamma1:
        total = total + ad.scale(absolute_reg(disp, d_un, m_un, weights.gamma3), weights.gamma1)
    if weights.gamma2:
        total = total + ad.scale(relative_reg(disp, d_un), weights.gamma2)
    return total


def distill_mono(teacher: nets.NetParams, samples: list[StereoSample], config: TrainConfig,
                 arch: dict | None = None) -> TrainResult:
    """Train the monocular network to regress the teacher's disparity pyramid.

    Each epoch re-augments the pairs under ``mono-photometric-only`` and runs
    the teacher on the augmented pair; the student sees the augmented left view.
    """
    _check_samples("distill_mono", samples)
    if teacher is None:
        raise ValueError("distill_mono: missing teacher checkpoint")
    arch = arch or nets.mono_arch()
    student = nets.init_params(arch, config.seed)
    scales = arch["scales"]
    if teacher.arch["scales"] != scales:
        raise ValueError("teacher and student scale counts differ")
    weights = LossWeights.for_scales(scales)
    policy = "mono-photometric-only" if config.augment else "none"

    def make_loss(P, idx, epoch):
        batch = [augment_stereo(samples[i], _rng(config, 100 + epoch, int(i)), policy) for i in idx]
        left = nets.to_batch([s.left for s in batch])
        right = nets.to_batch([s.right for s in batch])
        target = [Tensor(d.data) for d, _ in nets.stereo_forward(teacher, left, right)]
        preds = nets.mono_forward(student, left, tensors=P)
        return distill_loss(preds, target, weights)

    return _run_rounds(student, len(samples), make_loss, config)


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

def write_dataset(directory, samples: list[StereoSample], manifest: dict | None = None) -> list[dict]:
    """Write numbered ``NNNNN_left.ppm``, ``_right.ppm``, ``_disp_left.pfm``,
    ``_disp_right.pfm`` and ``_occ.png`` files plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        stem = f"{i:05d}"
        files = {
            "left": f"{stem}_left.ppm",
            "right": f"{stem}_right.ppm",
            "disp_left": f"{stem}_disp_left.pfm",
            "disp_right": f"{stem}_disp_right.pfm",
            "occ_left": f"{stem}_occ.png",
        }
        imgproc.save_image(s.left, d / files["left"])
        imgproc.save_image(s.right, d / files["right"])
        imgproc.write_pfm(s.disp_left, d / files["disp_left"])
        imgproc.write_pfm(s.disp_right, d / files["disp_right"])
        imgproc.save_mask_png(s.occ_left, d / files["occ_left"])
        entries.append({"index": i, **files})
    body = dict(manifest or {})
    body["samples"] = entries
    (d / "manifest.json").write_text(json.dumps(body, indent=2, sort_keys=True))
    return entries


def read_dataset(directory) -> list[StereoSample]:
    """Load a directory written by :func:`write_dataset`.

    Raises:
        FileNotFoundError: no ``manifest.json``.
        imgproc.RasterIOError: unreadable sample file.
    """
    d = Path(directory)
    manifest_path = d / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"{manifest_path}: dataset manifest not found")
    entries = json.loads(manifest_path.read_text())["samples"]
    out = []
    for e in entries:
        occ = imgproc.load_image(d / e["occ_left"])[..., 0]
        out.append(StereoSample(
            left=imgproc.load_image(d / e["left"]),
            right=imgproc.load_image(d / e["right"]),
            disp_left=imgproc.read_pfm(d / e["disp_left"]),
            disp_right=imgproc.read_pfm(d / e["disp_right"]),
            occ_left=(occ >= 0.5).astype(np.float64),
        ))
    return out
