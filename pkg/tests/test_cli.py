import hashlib
import json
import os

import numpy as np
import pytest

from ctcascade.cli import PRESETS, build_parser, main, resolve_config
from ctcascade.data import load_dataset
from ctcascade.metrics import blend, read_report_csv
from ctcascade.tensor import load_ten, save_ten

SIM = ["--patients", "3", "--train", "2", "--slices", "2", "--size", "32", "--dose", "0.25", "--seed", "1"]
TRAIN = ["--cascades", "2", "--depth", "1", "--features", "4", "--iters", "6", "--minibatch", "2",
         "--patches-per-slice", "4", "--patch-size", "8", "--log-every", "2", "--seed", "7"]
# wall-clock and path-bearing files are excluded from byte comparisons
VOLATILE = {"run_config.json", "train_records.json"}


def digest_tree(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            if name in VOLATILE:
                continue
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


def run_pipeline(root, sim=SIM, train=TRAIN):
    """simulate + train + evaluate into ``root``; returns the three directories."""
    data, run, ev = (os.path.join(root, d) for d in ("data", "run", "eval"))
    assert main(["simulate", *sim, "--out", data]) == 0
    assert main(["train", "--data", data, *train, "--out", run]) == 0
    assert main(["evaluate", "--chain", run, "--data", data, "--out", ev]) == 0
    return data, run, ev


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(str(tmp_path_factory.mktemp("cli")))


def test_pipeline_artifacts(pipeline):
    data, run, ev = pipeline
    ds = load_dataset(data)
    assert len(ds.split("train")) == 2 and len(ds.split("test")) == 1
    for d in (data, run, ev):
        assert os.path.exists(os.path.join(d, "run_config.json"))
    with open(os.path.join(run, "chain.json")) as fh:
        assert json.load(fh)["n_cascades"] == 2
    assert os.path.exists(os.path.join(run, "loss_cascade_02.csv"))
    rows = read_report_csv(os.path.join(ev, "report.csv"))
    assert len(rows) == 4
    assert {r["variant"] for r in rows} == {"original", "blended"}
    with open(os.path.join(ev, "run_config.json")) as fh:
        assert json.load(fh)["alpha"] == 0.7


def test_simulate_rerun_identical(pipeline, tmp_path):
    data, _, _ = pipeline
    assert main(["simulate", *SIM, "--out", str(tmp_path / "again")]) == 0
    assert digest_tree(data) == digest_tree(tmp_path / "again")


def test_denoise_outputs(pipeline, tmp_path):
    data, run, _ = pipeline
    out = tmp_path / "den"
    args = ["denoise", "--chain", run, "--data", data, "--split", "test",
            "--emit-intermediates", "--blend", "0.7", "--out", str(out)]
    assert main(args) == 0
    first = digest_tree(out)
    stems = sorted(p for p in first if p.endswith("_denoised.ten"))
    assert len(stems) == 2
    assert sum(p.endswith(".ten") and "_cascade" in p for p in first) == 4
    low = load_dataset(data).slices("test")[0].low
    den = load_ten(out / "p02_s000_denoised.ten")
    assert np.array_equal(load_ten(out / "p02_s000_cascade02.ten"), den)
    assert np.array_equal(load_ten(out / "p02_s000_blend.ten"), blend(den, low, 0.7).astype(np.float32))
    assert main(args) == 0
    assert digest_tree(out) == first


def test_denoise_input_files(pipeline, tmp_path):
    _, run, _ = pipeline
    save_ten(tmp_path / "slice.ten", np.zeros((20, 20), np.float32))
    assert main(["denoise", "--chain", run, "--input", str(tmp_path / "slice.ten"), "--out", str(tmp_path / "o")]) == 0
    assert load_ten(tmp_path / "o" / "slice_denoised.ten").shape == (20, 20)
    save_ten(tmp_path / "vol.ten", np.zeros((2, 20, 20), np.float32))
    assert main(["denoise", "--chain", run, "--input", str(tmp_path / "vol.ten"), "--out", str(tmp_path / "o")]) == 2


def test_evaluate_exports_images(pipeline, tmp_path):
    data, run, _ = pipeline
    assert main(["evaluate", "--chain", run, "--data", data, "--export-images", "--alpha", "0.5",
                 "--out", str(tmp_path)]) == 0
    assert (tmp_path / "images" / "p02" / "s001_cascade02.png").exists()
    assert read_report_csv(tmp_path / "report.csv")[0]["n_slices"] == "2"


def test_run_config_written_before_failure(tmp_path):
    assert main(["train", "--data", str(tmp_path / "missing"), *TRAIN, "--out", str(tmp_path / "run")]) == 2
    with open(tmp_path / "run" / "run_config.json") as fh:
        assert json.load(fh)["cascades"] == 2


def test_dose_zero_is_error(tmp_path, capsys):
    args = [a if a != "0.25" else "0" for a in SIM]
    assert main(["simulate", *args, "--out", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_required_option(capsys):
    assert main(["evaluate"]) == 2
    assert "--chain" in capsys.readouterr().err


def test_config_precedence(tmp_path):
    cfg_file = tmp_path / "c.json"
    cfg_file.write_text(json.dumps({"iters": 11, "lr": 0.5, "patch-size": 9}))
    args = build_parser().parse_args(["train", "--config", str(cfg_file), "--lr", "0.25"])
    cfg = resolve_config(args)
    assert cfg["iters"] == 11 and cfg["patch_size"] == 9 and cfg["lr"] == 0.25
    assert cfg["depth"] == PRESETS["desk"]["depth"] and cfg["threads"] == 1
    cfg = resolve_config(build_parser().parse_args(["train", "--preset", "full"]))
    assert cfg["iters"] == 90_000 and cfg["size"] == 512


def test_bad_config_file(tmp_path):
    (tmp_path / "bad.json").write_text("[1, 2]")
    assert main(["train", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path)]) == 2
    assert main(["train", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == 2


def test_gradcheck_passes_and_reports(tmp_path, capsys):
    assert main(["gradcheck", "--seeds", "1", "--out", str(tmp_path)]) == 0
    lines = (tmp_path / "gradcheck.csv").read_text().splitlines()
    assert lines[0].startswith("primitive,") and len(lines) == 7
    assert capsys.readouterr().out.count("PASS") == 6


def test_gradcheck_corrupt_fails(capsys):
    assert main(["gradcheck", "--seeds", "1", "--checks", "conv", "--corrupt", "conv"]) == 1
    assert "FAIL conv" in capsys.readouterr().out
    assert main(["gradcheck", "--corrupt", "nothing"]) == 2
