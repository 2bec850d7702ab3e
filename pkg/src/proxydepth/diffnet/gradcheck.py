"""Central finite-difference verification of the engine's analytic gradients.

The error measure is the max-norm relative error
``max|g_analytic - g_numeric| / max(max|g_analytic|, max|g_numeric|, tiny)``
computed per input tensor.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

__all__ = ["relative_error", "numeric_grad", "check_gradients", "CheckResult", "run_suite", "SUITE"]

TINY = 1e-12


def relative_error(a: np.ndarray, n: np.ndarray) -> float:
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), TINY)
    return float(np.abs(a - n).max(initial=0.0) / scale)


class _KinkRecorder:
    """Collect the sign patterns of every piecewise op evaluated inside the block."""

    def __enter__(self):
        self.prev = ad._KINK_LOG
        ad._KINK_LOG = []
        return self

    def __exit__(self, *exc):
        self.log = ad._KINK_LOG
        ad._KINK_LOG = self.prev

    def signature(self) -> bytes:
        return b"".join(m.tobytes() for m in self.log)


def numeric_grad(fn: Callable, arrays: Sequence[np.ndarray], which: int, h: float = 1e-4,
                 indices=None, with_kinks: bool = False):
    """Central differences of ``fn(*arrays)`` (a float) w.r.t. ``arrays[which]``.

    ``indices`` restricts the flat positions probed; the rest are left at 0.
    With ``with_kinks`` also returns a boolean array marking coordinates whose
    stencil ``[x - h, x + h]`` straddles a kink of a piecewise-linear op
    (ReLU, leaky ReLU, abs, clip); the derivative is undefined across those.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[which]
    flat = target.reshape(-1)
    out = np.zeros_like(flat)
    crossed = np.zeros(flat.shape, dtype=bool)
    probe = range(flat.size) if indices is None else indices
    for i in probe:
        orig = flat[i]
        flat[i] = orig + h
        with _KinkRecorder() as rp:
            fp = fn(*base)
        flat[i] = orig - h
        with _KinkRecorder() as rm:
            fm = fn(*base)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
        crossed[i] = rp.signature() != rm.signature()
    if with_kinks:
        return out.reshape(target.shape), crossed.reshape(target.shape)
    return out.reshape(target.shape)


def check_gradients(fn: Callable, arrays: Sequence[np.ndarray], h: float = 1e-4,
                    wrt: Sequence[int] | None = None, report: dict | None = None) -> list[float]:
    """Relative error of the analytic gradient for every input in ``wrt``.

    ``fn`` maps tensors to a scalar tensor. Coordinates whose stencil straddles
    a kink are degenerate for central differences and are left out of the
    comparison; their count is added to ``report["kink_skipped"]``.
    """
    wrt = range(len(arrays)) if wrt is None else wrt
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*tensors)
    out.backward()

    def value(*arrs):
        return float(fn(*[Tensor(a) for a in arrs]).data)

    errs = []
    for i in wrt:
        analytic = tensors[i].grad if tensors[i].grad is not None else np.zeros_like(tensors[i].data)
        numeric, crossed = numeric_grad(value, arrays, i, h, with_kinks=True)
        if report is not None:
            report["kink_skipped"] = report.get("kink_skipped", 0) + int(crossed.sum())
            report["probed"] = report.get("probed", 0) + crossed.size
        keep = ~crossed
        errs.append(relative_error(analytic[keep], numeric[keep]))
    return errs


def _project(op):
    """Turn a tensor-valued op into a scalar via a fixed random projection."""
    cache = {}

    def fn(*ts):
        y = op(*ts)
        if y.shape not in cache:
            cache[y.shape] = np.random.default_rng(len(cache) + 17).normal(size=y.shape)
        return ad.sum_(ad.mul(y, Tensor(cache[y.shape])))

    return fn


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _frac_disp(rng, shape, lo, hi):
    """Disparities whose fractional part stays in [0.1, 0.9]."""
    base = rng.integers(lo, hi, size=shape).astype(np.float64)
    return base + rng.uniform(0.1, 0.9, size=shape)


# each case: name -> (builder(rng) -> (fn, arrays, wrt))
def _cases():
    from .. import losses as L

    cases = {}

    def unary(name, op, gen=None):
        def build(rng):
            x = (gen or (lambda r: r.normal(size=(2, 3, 5, 5))))(rng)
            return _project(op), [x], None
        cases[name] = build

    unary("relu", ad.relu, lambda r: _away_from_zero(r, (2, 3, 5, 5)))
    unary("leaky_relu", ad.leaky_relu, lambda r: _away_from_zero(r, (2, 3, 5, 5)))
    unary("sigmoid", ad.sigmoid)
    unary("softplus", ad.softplus)
    unary("abs", ad.abs_, lambda r: _away_from_zero(r, (2, 3, 5, 5)))
    unary("log", ad.log, lambda r: r.uniform(0.5, 2.0, size=(2, 3, 5, 5)))
    unary("clip", lambda x: ad.clip(x, -0.5, 0.5),
          lambda r: r.choice([-1, 1], size=(2, 3, 5, 5)) * r.choice([r.uniform(0, 0.4), r.uniform(0.6, 1.0)], size=(2, 3, 5, 5)))
    unary("softmax", lambda x: ad.softmax(x, axis=1))
    unary("scale", lambda x: ad.scale(x, -2.5))
    unary("neg", ad.neg)
    unary("upsample2x", ad.upsample2x)
    unary("mean", lambda x: ad.mean(x, axis=1))
    unary("sum", lambda x: ad.sum_(x, axis=(2, 3)))
    unary("getitem", lambda x: x[:, 1:, :-1, ::2])

    def binary(name, op):
        def build(rng):
            return _project(op), [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 5, 5))], None
        cases[name] = build

    binary("add", ad.add)
    binary("sub", ad.sub)
    binary("mul", ad.mul)
    binary("concat", lambda a, b: ad.concat([a, b], axis=1))

    def conv(stride):
        def build(rng):
            x = rng.normal(size=(2, 3, 5, 5))
            w = rng.normal(size=(4, 3, 3, 3))
            b = rng.normal(size=4)
            return _project(lambda x, w, b: ad.conv2d(x, w, b, stride=stride, padding=1)), [x, w, b], None
        return build

    cases["conv2d_s1"] = conv(1)
    cases["conv2d_s2"] = conv(2)

    def deconv(rng):
        x = rng.normal(size=(2, 3, 5, 5))
        w = rng.normal(size=(3, 2, 4, 4))
        b = rng.normal(size=2)
        return _project(lambda x, w, b: ad.conv_transpose2d(x, w, b)), [x, w, b], None

    cases["conv_transpose2d"] = deconv

    def corr(rng):
        return _project(lambda a, b: ad.corr1d(a, b, 3)), [rng.normal(size=(2, 3, 5, 5)), rng.normal(size=(2, 3, 5, 5))], None

    cases["corr1d"] = corr

    def warp(rng):
        img = rng.uniform(0, 1, size=(2, 3, 5, 5))
        d = _frac_disp(rng, (2, 1, 5, 5), 0, 4)
        return _project(ad.warp), [img, d], None

    cases["warp"] = warp

    # losses
    def l1(rng):
        p = rng.uniform(0, 8, size=(2, 1, 5, 5))
        t = p + _away_from_zero(rng, p.shape)
        v = rng.integers(0, 2, size=p.shape).astype(float)
        return (lambda p, t, v: L.disparity_l1(p, t, v)), [p, t, v], [0, 1]

    cases["loss_disparity_l1"] = l1

    def bce(rng):
        p = rng.uniform(0.05, 0.95, size=(2, 1, 5, 5))
        t = rng.integers(0, 2, size=p.shape).astype(float)
        return L.occlusion_bce, [p, t], [0]

    cases["loss_occlusion_bce"] = bce

    def photo(rng):
        left = rng.uniform(0, 1, size=(2, 3, 5, 7))
        right = rng.uniform(0, 1, size=(2, 3, 5, 7))
        d = _frac_disp(rng, (2, 1, 5, 7), 0, 5)
        m = rng.integers(0, 2, size=d.shape).astype(float)
        # keep |left - warped| away from the abs kink
        warped = ad.warp(Tensor(right), Tensor(d)).data
        left = np.where(np.abs(left - warped) < 0.05, np.clip(warped + 0.1, 0, 1) - 0.2 * (warped > 0.85), left)
        return L.photometric_masked, [left, right, d, m], [0, 1, 2]

    cases["loss_photometric_masked"] = photo

    def absreg(rng):
        d = rng.uniform(0, 8, size=(2, 1, 5, 5))
        du = d + _away_from_zero(rng, d.shape)
        m = rng.integers(0, 2, size=d.shape).astype(float)
        return (lambda d, du, m: L.absolute_reg(d, du, m, 0.1)), [d, du, m], [0, 1]

    cases["loss_absolute_reg"] = absreg

    def relreg(rng):
        # random walk steps bounded away from zero keep every difference off the kink
        du = rng.uniform(0, 8, size=(2, 1, 5, 5))
        diff = np.cumsum(_away_from_zero(rng, (2, 1, 5, 5), 0.2, 1.0), axis=3)
        diff += 3.0 * np.cumsum(_away_from_zero(rng, (2, 1, 5, 1), 0.5, 1.0), axis=2)
        return L.relative_reg, [du + diff, du], [0, 1]

    cases["loss_relative_reg"] = relreg

    def unsup(rng):
        fn, (left, right, d, m), _ = photo(rng)
        du = d + _away_from_zero(rng, d.shape)
        w = L.LossWeights(gamma1=0.05, gamma2=0.1, gamma3=0.1)
        # relative term: make disp - disp_un vary enough to avoid kinks
        du = du + np.cumsum(_away_from_zero(rng, d.shape, 0.2, 0.5), axis=3)

        def f(left, right, d, du):
            return L.unsup_ft_loss(left, right, d, du, m, w)
        return f, [left, right, d, du], [2]

    cases["loss_unsup_ft"] = unsup

    def pyramid(rng, with_mask):
        shapes = [(2, 1, 8, 8), (2, 1, 4, 4)]
        pred = [rng.uniform(0, 8, size=s) for s in shapes]
        gt = [p + _away_from_zero(rng, p.shape) for p in pred]
        occ = [rng.uniform(0.05, 0.95, size=s) for s in shapes]
        gocc = [rng.integers(0, 2, size=s).astype(float) for s in shapes]
        return pred, gt, occ, gocc

    def stereo_sup(rng):
        pred, gt, occ, gocc = pyramid(rng, True)
        w = L.LossWeights.for_scales(2)

        def f(d0, d1, o0, o1):
            return L.stereo_sup_loss([(d0, o0), (d1, o1)], list(zip(gt, gocc)), w)
        return f, pred + occ, None

    cases["loss_stereo_sup"] = stereo_sup

    def distill(rng):
        pred, gt, _, _ = pyramid(rng, False)
        w = L.LossWeights.for_scales(2)

        def f(s0, s1, t0, t1):
            return L.distill_loss([s0, s1], [t0, t1], w)
        return f, pred + gt, None

    cases["loss_distill"] = distill

    def supft(rng):
        pred, gt, _, _ = pyramid(rng, False)
        w = L.LossWeights.for_scales(2)

        def f(s0, s1):
            return L.supervised_ft_loss([s0, s1], gt, w)
        return f, pred, None

    cases["loss_supervised_ft"] = supft

    from . import nets

    def net_case(kind):
        def build(rng):
            seed = int(rng.integers(2**31))
            if kind == "stereo":
                arch = nets.stereo_arch(channels=(2, 3, 4, 4), decoder=(2, 2, 2, 2), max_disp=3)
            else:
                arch = nets.mono_arch(channels=(2, 3, 4, 4), decoder=(2, 2, 2, 2))
            params = nets.init_params(arch, seed)
            names = list(params.tensors)
            # larger-than-default biases keep pre-activations off the ReLU kinks
            arrays = [params.tensors[k] + (rng.normal(0, 0.3, size=params.tensors[k].shape)
                                           if k.endswith(".b") else 0.0) for k in names]
            left = rng.uniform(0, 1, size=(1, 3, 32, 32))
            right = np.roll(left, -2, axis=3)
            # targets offset from the initial prediction keep every L1 residual off its kink
            P0 = {k: Tensor(a) for k, a in zip(names, arrays)}
            if kind == "stereo":
                pred0 = [d.data for d, _ in nets.stereo_forward(params, left, right, tensors=P0)]
            else:
                pred0 = [d.data for d in nets.mono_forward(params, left, tensors=P0)]
            target = [p + _away_from_zero(rng, p.shape, 0.3, 1.0) for p in pred0]
            occ = [rng.integers(0, 2, size=t.shape).astype(float) for t in target]
            w = L.LossWeights()

            def f(*ps):
                P = dict(zip(names, ps))
                if kind == "stereo":
                    pyr = nets.stereo_forward(params, left, right, tensors=P)
                    return L.stereo_sup_loss(pyr, list(zip(target, occ)), w)
                pyr = nets.mono_forward(params, left, tensors=P)
                return L.distill_loss(pyr, target, w)
            return f, arrays, None
        return build

    cases["net_stereo_sup"] = net_case("stereo")
    cases["net_mono_distill"] = net_case("mono")
    return cases


SUITE = _cases


@dataclass
class CheckResult:
    name: str
    instances: int
    max_rel_err: float
    seconds: float
    kink_skipped: int = 0
    probed: int = 0


def run_suite(instances: int = 20, seed: int = 0, h: float = 1e-4, names=None,
              net_instances: int = 3) -> list[CheckResult]:
    """Run every registered check.

    Ops and losses get ``instances`` random draws each; the whole-network
    checks (every parameter of a tiny network) get ``net_instances``.
    """
    results = []
    for name, build in _cases().items():
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, sum(map(ord, name))])
        t0 = time.perf_counter()
        worst = 0.0
        count = net_instances if name.startswith("net_") else instances
        report: dict = {}
        for _ in range(count):
            fn, arrays, wrt = build(rng)
            worst = max(worst, *check_gradients(fn, arrays, h=h, wrt=wrt, report=report))
        results.append(CheckResult(name, count, worst, time.perf_counter() - t0,
                                   report.get("kink_skipped", 0), report.get("probed", 0)))
    return results
