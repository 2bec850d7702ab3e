"""Command line front end: ``proxydepth <subcommand> ...``.

Subcommands: ``gen``, ``pretrain``, ``teacher``, ``finetune``, ``distill``,
``predict``, ``eval``, ``gradcheck``. Training subcommands read a YAML
key-value config (keys are the :class:`~proxydepth.pipeline.TrainConfig`
fields); ``--set key=value`` and the dedicated flags override single keys.

Every run writes ``manifest.json`` next to its outputs with the command
line, the resolved config and its hash, the seed, input and output paths
with SHA-256 digests, and the package version.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import subprocess
import sys
from pathlib import Path

import numpy as np
import yaml

from . import __version__, imgproc, pipeline
from .diffnet import nets
from .eval import DEFAULT_CAP, DESK_RIG, MetricsReport, aggregate, disparity_to_depth, evaluate_pair
from .scenegen import domain_preset, generate_dataset

__all__ = ["main", "run", "colorize", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_NUMERIC"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

# Fixed visualisation palette: (position, RGB) anchors, linearly interpolated.
# Near (large disparity) is bright yellow, far is dark purple.
PALETTE = (
    (0.00, (0.00, 0.00, 0.02)),
    (0.25, (0.23, 0.06, 0.44)),
    (0.50, (0.55, 0.16, 0.51)),
    (0.75, (0.93, 0.35, 0.25)),
    (1.00, (0.99, 0.91, 0.14)),
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def colorize(disp, vmax: float | None = None) -> np.ndarray:
    """Map a disparity map to an RGB image with :data:`PALETTE` (``vmax`` defaults to the map maximum)."""
    d = np.asarray(disp, dtype=np.float64)
    top = float(d.max()) if vmax is None else float(vmax)
    t = np.clip(d / top, 0.0, 1.0) if top > 0 else np.zeros_like(d)
    xs = [p for p, _ in PALETTE]
    return np.stack([np.interp(t, xs, [c[k] for _, c in PALETTE]) for k in range(3)], axis=-1)


def version_string() -> str:
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _sha256(path: Path) -> str | None:
    if not path.is_file():
        return None
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _describe(paths: dict) -> dict:
    return {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in paths.items() if p}


def _write_manifest(out_dir: Path, command: str, argv, *, config: dict | None = None, seed=None,
                    inputs: dict | None = None, outputs: dict | None = None, extra: dict | None = None) -> Path:
    cfg = config or {}
    body = {
        "command": command,
        "argv": list(argv),
        "version": version_string(),
        "config": cfg,
        "config_hash": hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest(),
        "seed": seed,
        "inputs": _describe(inputs or {}),
        "outputs": _describe(outputs or {}),
    }
    body.update(extra or {})
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(body, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _cmd_gen(args, argv):
    spec = domain_preset(args.domain, args.width, args.height, seed=args.seed)
    samples = generate_dataset(spec, args.count, start=args.start)
    out = Path(args.out)
    prov = {
        "command": "gen",
        "argv": list(argv),
        "version": version_string(),
        "domain": args.domain,
        "seed": args.seed,
        "start": args.start,
        "count": args.count,
        "spec": spec.to_dict(),
        "config_hash": hashlib.sha256(json.dumps(spec.to_dict(), sort_keys=True).encode()).hexdigest(),
        "scene_seeds": [[args.seed, args.start + i] for i in range(args.count)],
    }
    pipeline.write_dataset(out, samples, prov)
    print(f"wrote {args.count} domain-{args.domain} samples to {out}")


def _load_config(args, stage_hint: str | None = None) -> pipeline.TrainConfig:
    data = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"{path}: config file not found")
        data = yaml.safe_load(path.read_text()) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a key-value mapping")
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        data[key.strip()] = yaml.safe_load(value)
    for key in ("seed", "epochs", "train_data", "val_data", "init_checkpoint", "teacher_cache"):
        value = getattr(args, key, None)
        if value is not None:
            data[key] = value
    if stage_hint and "stage" not in data:
        data["stage"] = stage_hint
    return pipeline.TrainConfig.from_mapping(data)


def _require(path: str, what: str) -> Path:
    if not path:
        raise UsageError(f"missing {what}")
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{p}: {what} not found")
    return p


def _finish_training(result: pipeline.TrainResult, cfg: pipeline.TrainConfig, args, argv, inputs, extra=None):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.ckpt"
    nets.save_params(result.params, ckpt)
    log_path = out / "loss_log.json"
    log_path.write_text(json.dumps(result.log_dict(), indent=1))
    outputs = {"checkpoint": ckpt, "loss_log": log_path}
    _write_manifest(out, cfg.stage, argv, config=cfg.to_dict(), seed=cfg.seed, inputs=inputs,
                    outputs=outputs, extra=extra)
    last = result.epoch_loss[-1] if result.epoch_loss else float("nan")
    print(f"{cfg.stage}: {len(result.steps)} steps, final epoch loss {last:.5f}, checkpoint {ckpt}")


def _cmd_pretrain(args, argv):
    cfg = _load_config(args, "pretrain")
    if cfg.stage != "pretrain":
        raise UsageError(f"pretrain needs stage 'pretrain', config says {cfg.stage!r}")
    data = _require(cfg.train_data, "training data directory")
    samples = pipeline.read_dataset(data)
    result = pipeline.pretrain_stereo(samples, cfg)
    extra = {}
    if cfg.val_data:
        val = pipeline.read_dataset(_require(cfg.val_data, "validation data directory"))
        extra["validation"] = pipeline.evaluate_stereo(result.params, val).to_dict()
    _finish_training(result, cfg, args, argv, {"train_data": data / "manifest.json"}, extra)


def _cmd_teacher(args, argv):
    ckpt = _require(args.checkpoint, "teacher checkpoint")
    data = _require(args.data, "data directory")
    params = nets.load_params(ckpt)
    cache = pipeline.precompute_teacher(params, pipeline.read_dataset(data))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "teacher_cache.npz"
    cache.save(path)
    _write_manifest(out, "teacher", argv, inputs={"checkpoint": ckpt, "data": data / "manifest.json"},
                    outputs={"teacher_cache": path}, extra={"cache_checksum": cache.checksum()})
    print(f"teacher cache for {len(cache)} samples: {path}")


def _cmd_finetune(args, argv):
    cfg = _load_config(args, "ft-unsupervised")
    if cfg.stage not in ("ft-supervised", "ft-unsupervised"):
        raise UsageError(f"finetune needs stage ft-supervised or ft-unsupervised, config says {cfg.stage!r}")
    init = _require(cfg.init_checkpoint, "initial checkpoint (init_checkpoint)")
    data = _require(cfg.train_data, "training data directory")
    params = nets.load_params(init)
    samples = pipeline.read_dataset(data)
    inputs = {"init_checkpoint": init, "train_data": data / "manifest.json"}
    if cfg.stage == "ft-supervised":
        result = pipeline.finetune_supervised(params, samples, cfg)
    else:
        cache_path = _require(cfg.teacher_cache, "teacher cache (teacher_cache)")
        cache = pipeline.TeacherCache.load(cache_path)
        inputs["teacher_cache"] = cache_path
        result = pipeline.finetune_unsupervised(params, samples, cache, cfg)
    _finish_training(result, cfg, args, argv, inputs)


def _cmd_distill(args, argv):
    cfg = _load_config(args, "distill")
    if cfg.stage != "distill":
        raise UsageError(f"distill needs stage 'distill', config says {cfg.stage!r}")
    teacher = _require(args.teacher, "teacher checkpoint")
    data = _require(cfg.train_data, "training data directory")
    result = pipeline.distill_mono(nets.load_params(teacher), pipeline.read_dataset(data), cfg)
    _finish_training(result, cfg, args, argv, {"teacher": teacher, "train_data": data / "manifest.json"})


def _cmd_predict(args, argv):
    ckpt = _require(args.checkpoint, "checkpoint")
    params = nets.load_params(ckpt)
    stereo = params.arch["kind"] == "stereo"
    if args.data:
        data = _require(args.data, "data directory")
        samples = pipeline.read_dataset(data)
        lefts = [s.left for s in samples]
        rights = [s.right for s in samples]
        inputs = {"data": data / "manifest.json"}
    else:
        left = _require(args.left, "--left image (or --data)")
        lefts = [imgproc.load_image(left)]
        inputs = {"left": left}
        rights = None
        if stereo:
            right = _require(args.right, "--right image for a stereo checkpoint")
            rights = [imgproc.load_image(right)]
            inputs["right"] = right
    rig = imgproc.CameraRig(args.baseline, args.focal)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = {}
    if stereo:
        from .scenegen import StereoSample

        zeros = np.zeros(lefts[0].shape[:2])
        pairs = [StereoSample(l, r, zeros, zeros, zeros) for l, r in zip(lefts, rights)]
        disps, masks = pipeline.predict_stereo(params, pairs)
    else:
        disps, masks = pipeline.predict_mono(params, lefts), None
    for i, d in enumerate(disps):
        stem = f"{i:05d}"
        files = {
            f"{stem}_disp": out / f"{stem}_disp.pfm",
            f"{stem}_depth": out / f"{stem}_depth.pfm",
            f"{stem}_viz": out / f"{stem}_viz.png",
        }
        imgproc.write_pfm(d, files[f"{stem}_disp"])
        imgproc.write_pfm(disparity_to_depth(d, rig, args.cap), files[f"{stem}_depth"])
        imgproc.save_image(colorize(d, args.vmax), files[f"{stem}_viz"])
        if masks is not None:
            files[f"{stem}_mask"] = out / f"{stem}_mask.png"
            imgproc.save_mask_png((masks[i] >= 0.5).astype(np.float64), files[f"{stem}_mask"])
        outputs.update(files)
    _write_manifest(out, "predict", argv, config={"baseline": args.baseline, "focal": args.focal,
                                                   "cap": args.cap, "vmax": args.vmax},
                    inputs={"checkpoint": ckpt, **inputs}, outputs=outputs)
    print(f"wrote predictions for {len(disps)} input(s) to {out}")


def _cmd_eval(args, argv):
    pred_dir = _require(args.pred, "prediction directory")
    gt_dir = _require(args.gt, "ground-truth data directory")
    gt = pipeline.read_dataset(gt_dir)
    rig = imgproc.CameraRig(args.baseline, args.focal)
    rows, reports = [], []
    for i, s in enumerate(gt):
        path = pred_dir / f"{i:05d}_disp.pfm"
        if not path.is_file():
            raise FileNotFoundError(f"{path}: prediction missing for sample {i}")
        rep = evaluate_pair(imgproc.read_pfm(path), s.disp_left, rig, args.cap)
        reports.append(rep)
        rows.append({"image": f"{i:05d}", **rep.to_dict()})
    mean = aggregate(reports)
    rows.append({"image": "mean", **mean.to_dict()})
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / "metrics.csv", out / "metrics.json"
    keys = ["image"] + MetricsReport.keys()
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=keys)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    json_path.write_text(json.dumps({"cap": args.cap, "per_image": rows[:-1], "mean": mean.to_dict()},
                                    indent=2, sort_keys=True))
    _write_manifest(out, "eval", argv, config={"baseline": args.baseline, "focal": args.focal, "cap": args.cap},
                    inputs={"pred": pred_dir, "gt": gt_dir / "manifest.json"},
                    outputs={"csv": csv_path, "json": json_path})
    print(f"abs_rel {mean.abs_rel:.4f}  rms {mean.rms:.3f}  delta1 {mean.delta1:.3f}  "
          f"mae {mean.mae_px:.3f}px  >3px {mean.bad3_frac:.3f}")


def _cmd_gradcheck(args, argv):
    from .diffnet.gradcheck import run_suite

    results = run_suite(instances=args.instances, seed=args.seed, net_instances=args.net_instances,
                        names=args.only)
    if not results:
        raise UsageError(f"no gradient check named {', '.join(args.only)}")
    failed = []
    for r in results:
        ok = r.max_rel_err < args.tol
        if not ok:
            failed.append(r.name)
        print(f"{r.name:28s} max_rel_err {r.max_rel_err:.3e}  n={r.instances:<3d} "
              f"{r.seconds:6.2f}s  {'ok' if ok else 'FAIL'}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        report = out / "gradcheck.json"
        report.write_text(json.dumps([r.__dict__ for r in results], indent=1))
        _write_manifest(out, "gradcheck", argv, config={"instances": args.instances, "tol": args.tol},
                        seed=args.seed, outputs={"report": report})
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _training_flags(p):
    p.add_argument("--config", help="YAML key-value file with TrainConfig keys")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--out", required=True, help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="proxydepth", description="Stereo-proxy distillation for monocular depth.")
    parser.add_argument("--version", action="version", version=f"proxydepth {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch losses")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic stereo dataset")
    p.add_argument("--domain", choices=["A", "B"], required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--start", type=int, default=0, help="first scene index")
    p.add_argument("--width", type=int, default=128)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="supervised stereo pretraining")
    _training_flags(p)
    p.add_argument("--val-data", dest="val_data")

    p = sub.add_parser("teacher", help="precompute the frozen teacher disparities and masks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("finetune", help="fine-tune a stereo checkpoint (supervised or unsupervised)")
    _training_flags(p)
    p.add_argument("--init", dest="init_checkpoint", help="checkpoint to start from")
    p.add_argument("--teacher-cache", dest="teacher_cache")

    p = sub.add_parser("distill", help="distill a stereo teacher into the monocular network")
    _training_flags(p)
    p.add_argument("--teacher", required=True, help="stereo teacher checkpoint")

    p = sub.add_parser("predict", help="run a checkpoint and write disparity, depth, mask and visualisation")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (uses every sample)")
    p.add_argument("--left")
    p.add_argument("--right")
    p.add_argument("--baseline", type=float, default=DESK_RIG.baseline_m)
    p.add_argument("--focal", type=float, default=DESK_RIG.focal_px)
    p.add_argument("--cap", type=float, default=DEFAULT_CAP)
    p.add_argument("--vmax", type=float, help="disparity mapped to the top colour (default: per-map max)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="score predicted disparities against a dataset")
    p.add_argument("--pred", required=True, help="directory written by predict")
    p.add_argument("--gt", required=True, help="dataset directory written by gen")
    p.add_argument("--baseline", type=float, default=DESK_RIG.baseline_m)
    p.add_argument("--focal", type=float, default=DESK_RIG.focal_px)
    p.add_argument("--cap", type=float, default=DEFAULT_CAP, help="depth cap in metres (80 or 50)")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op, loss and network")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--net-instances", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--only", action="append", metavar="NAME", help="run only this check (repeatable)")
    p.add_argument("--out")
    return parser


_COMMANDS = {
    "gen": _cmd_gen,
    "pretrain": _cmd_pretrain,
    "teacher": _cmd_teacher,
    "finetune": _cmd_finetune,
    "distill": _cmd_distill,
    "predict": _cmd_predict,
    "eval": _cmd_eval,
    "gradcheck": _cmd_gradcheck,
}


def _fail(kind: str, message: str, code: int) -> int:
    print(f"proxydepth: error [{kind}]: {message}", file=sys.stderr)
    return code


def run(argv=None) -> int:
    """Parse ``argv`` and execute one subcommand; returns the exit status."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip() + "\n(no subcommand given)")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        code = _COMMANDS[args.command](args, argv)
        return EXIT_OK if code is None else code
    except UsageError as e:
        return _fail("usage", str(e), EXIT_USAGE)
    except pipeline.DivergenceError as e:
        return _fail("numerical", str(e), EXIT_NUMERIC)
    except FloatingPointError as e:
        return _fail("numerical", str(e), EXIT_NUMERIC)
    except (FileNotFoundError, imgproc.RasterIOError, KeyError, ValueError, OSError) as e:
        return _fail("data", str(e), EXIT_DATA)


def main() -> None:
    sys.exit(run())
