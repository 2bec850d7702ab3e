import csv
import json

import numpy as np
import pytest

from proxydepth import cli, imgproc, pipeline
from proxydepth.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, run


def _manifest(directory):
    return json.loads((directory / "manifest.json").read_text())


def test_gen_writes_samples_and_manifest(tmp_path):
    out = tmp_path / "d"
    assert run(["gen", "--domain", "A", "--count", "8", "--seed", "7", "--out", str(out)]) == EXIT_OK
    for i in range(8):
        for suffix in ("left.ppm", "right.ppm", "disp_left.pfm", "disp_right.pfm", "occ.png"):
            assert (out / f"{i:05d}_{suffix}").is_file()
    m = _manifest(out)
    assert m["seed"] == 7 and m["count"] == 8 and len(m["samples"]) == 8
    assert m["scene_seeds"][3] == [7, 3]
    assert m["version"].startswith("0.")
    assert len(pipeline.read_dataset(out)) == 8


def test_usage_errors(capsys):
    assert run([]) == EXIT_USAGE
    assert run(["frobnicate"]) == EXIT_USAGE
    assert run(["gen", "--domain", "A", "--count", "1", "--bogus", "--out", "x"]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "usage:" in err and "Traceback" not in err


def test_missing_inputs_are_data_errors(tmp_path, capsys):
    assert run(["eval", "--pred", str(tmp_path / "p"), "--gt", str(tmp_path / "g"), "--out", str(tmp_path)]) == EXIT_DATA
    assert run(["pretrain", "--train-data", str(tmp_path / "none"), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert run(["predict", "--checkpoint", str(tmp_path / "x.ckpt"), "--left", "a.png", "--out", str(tmp_path)]) == EXIT_DATA
    err = capsys.readouterr().err
    assert err.count("error [data]") == 3 and "Traceback" not in err


def test_unknown_config_key_is_reported(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("stage: pretrain\nwarmup: 3\n")
    assert run(["pretrain", "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_DATA
    assert "warmup" in capsys.readouterr().err


def test_gradcheck_quick_run(tmp_path, capsys):
    code = run(["gradcheck", "--instances", "2", "--net-instances", "1", "--out", str(tmp_path)])
    text = capsys.readouterr().out
    assert code == EXIT_OK
    assert "corr1d" in text and "FAIL" not in text
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert all(r["max_rel_err"] < 1e-3 for r in report)
    assert run(["gradcheck", "--only", "sigmoid", "--instances", "1", "--tol", "1e-30"]) == EXIT_NUMERIC
    assert run(["gradcheck", "--only", "nonsense"]) == EXIT_USAGE


def test_colorize_is_fixed():
    rgb = cli.colorize(np.array([[0.0, 5.0, 10.0]]))
    np.testing.assert_allclose(rgb[0, 0], cli.PALETTE[0][1])
    np.testing.assert_allclose(rgb[0, 2], cli.PALETTE[-1][1])
    np.testing.assert_allclose(rgb[0, 1], cli.PALETTE[2][1])


def _write_preds(directory, disps):
    directory.mkdir()
    for i, d in enumerate(disps):
        imgproc.write_pfm(d, directory / f"{i:05d}_disp.pfm")


def _read_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def test_eval_cap_passthrough(tmp_path):
    gt_dir = tmp_path / "gt"
    assert run(["gen", "--domain", "B", "--count", "2", "--seed", "1", "--out", str(gt_dir)]) == EXIT_OK
    gt = pipeline.read_dataset(gt_dir)
    # near-zero disparities turn into far depths that the two caps treat differently
    preds = [np.clip(s.disp_left * 0.9, 0.5, None) for s in gt]
    _write_preds(tmp_path / "pred", preds)
    for cap in ("80", "50"):
        assert run(["eval", "--pred", str(tmp_path / "pred"), "--gt", str(gt_dir), "--cap", cap,
                    "--out", str(tmp_path / f"e{cap}")]) == EXIT_OK
    m80 = json.loads((tmp_path / "e80" / "metrics.json").read_text())
    m50 = json.loads((tmp_path / "e50" / "metrics.json").read_text())
    assert (m80["cap"], m50["cap"]) == (80.0, 50.0)
    # disparity metrics do not involve the cap; depth metrics do
    for k in ("mae_px", "bad1_frac", "bad3_frac"):
        assert m80["mean"][k] == m50["mean"][k]
    assert m80["mean"]["valid_pixels"] >= m50["mean"]["valid_pixels"]
    rows = _read_csv(tmp_path / "e80" / "metrics.csv")
    assert [r["image"] for r in rows] == ["00000", "00001", "mean"]
    assert _manifest(tmp_path / "e80")["config"]["cap"] == 80.0


def _pipeline_commands(root):
    a, b, val = root / "A", root / "B", root / "Bval"
    return [
        ["gen", "--domain", "A", "--count", "4", "--seed", "3", "--width", "160", "--height", "80", "--out", str(a)],
        ["gen", "--domain", "B", "--count", "4", "--seed", "4", "--out", str(b)],
        ["gen", "--domain", "B", "--count", "2", "--seed", "5", "--out", str(val)],
        ["pretrain", "--train-data", str(a), "--epochs", "1", "--seed", "1", "--out", str(root / "pre")],
        ["teacher", "--checkpoint", str(root / "pre" / "checkpoint.ckpt"), "--data", str(b),
         "--out", str(root / "cache")],
        ["finetune", "--set", "stage=ft-unsupervised", "--epochs", "1", "--seed", "1", "--train-data", str(b),
         "--init", str(root / "pre" / "checkpoint.ckpt"),
         "--teacher-cache", str(root / "cache" / "teacher_cache.npz"), "--out", str(root / "ft")],
        ["distill", "--teacher", str(root / "ft" / "checkpoint.ckpt"), "--train-data", str(b), "--epochs", "1",
         "--seed", "1", "--out", str(root / "mono")],
        ["predict", "--checkpoint", str(root / "mono" / "checkpoint.ckpt"), "--data", str(val),
         "--out", str(root / "pred")],
        ["eval", "--pred", str(root / "pred"), "--gt", str(val), "--out", str(root / "eval")],
    ]


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    for argv in _pipeline_commands(root):
        assert run(argv) == EXIT_OK, argv
    return root


def test_pipeline_outputs_and_manifests(pipeline_run):
    root = pipeline_run
    for stage in ("pre", "ft", "mono"):
        m = _manifest(root / stage)
        assert len(m["config_hash"]) == 64 and m["seed"] == 1
        assert m["outputs"]["checkpoint"]["sha256"]
        assert json.loads((root / stage / "loss_log.json").read_text())["steps"]
    ft = _manifest(root / "ft")
    assert ft["config"]["stage"] == "ft-unsupervised"
    assert ft["inputs"]["init_checkpoint"]["sha256"] == _manifest(root / "pre")["outputs"]["checkpoint"]["sha256"]
    for i in range(2):
        for suffix in ("disp.pfm", "depth.pfm", "viz.png"):
            assert (root / "pred" / f"{i:05d}_{suffix}").is_file()
    assert (root / "eval" / "metrics.csv").is_file()


def test_stereo_predict_writes_masks(pipeline_run, tmp_path):
    root = pipeline_run
    out = tmp_path / "sp"
    assert run(["predict", "--checkpoint", str(root / "ft" / "checkpoint.ckpt"),
                "--left", str(root / "Bval" / "00000_left.ppm"), "--right", str(root / "Bval" / "00000_right.ppm"),
                "--out", str(out)]) == EXIT_OK
    mask = imgproc.load_image(out / "00000_mask.png")
    assert set(np.unique(mask)) <= {0.0, 1.0}
    depth = imgproc.read_pfm(out / "00000_depth.pfm")
    assert depth.max() <= 80.0


def test_replay_from_manifests_is_bit_identical(pipeline_run, tmp_path):
    first = pipeline_run
    second = tmp_path / "replay"
    order = ["A", "B", "Bval", "pre", "cache", "ft", "mono", "pred", "eval"]
    for name in order:
        argv = [a.replace(str(first), str(second)) for a in _manifest(first / name)["argv"]]
        assert run(argv) == EXIT_OK, argv
    for rel in ("pre/checkpoint.ckpt", "ft/checkpoint.ckpt", "mono/checkpoint.ckpt", "cache/teacher_cache.npz",
                "pred/00000_disp.pfm", "eval/metrics.csv", "eval/metrics.json"):
        assert (first / rel).read_bytes() == (second / rel).read_bytes(), rel
