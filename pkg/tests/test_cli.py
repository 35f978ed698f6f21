import json
from pathlib import Path

import numpy as np
import pytest

from itmn import gradcheck as gc
from itmn.cli import (ExperimentConfig, desk_preset, load_config_file, main,
                      _sweep_cells)
from itmn.dataset import SynthConfig, synth_pairs
from itmn.hdrio import LdrImage, read_pfm, read_rgbe, write_pnm
from itmn.train import TrainLog


def parse_echo(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        key, val = (s.strip() for s in line.split("=", 1))
        out[key] = val
    return out


@pytest.fixture
def dataset_dir(hdr_corpus, tmp_path):
    out = tmp_path / "data"
    main(["synth", str(hdr_corpus), str(out), "--resize-to", "64"])
    return out


def train_args(dataset_dir, out, extra=()):
    return ["train", "--data", str(dataset_dir / "index.jsonl"), "--out", str(out),
            "--iterations", "4", "--patch-size", "32", "--batch-size", "2",
            "--checkpoint-every", "0", *extra]


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

def test_synth_three_fixtures_exit_zero(hdr_corpus, tmp_path, capsys):
    out = tmp_path / "data"
    assert main(["synth", str(hdr_corpus), str(out)]) == 0
    assert "3 pairs" in capsys.readouterr().out
    assert (out / "index.jsonl").exists() and (out / "config.echo").exists()


def test_synth_empty_dir_exit_one(tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    assert main(["synth", str(empty), str(tmp_path / "out")]) == 1


def test_synth_peak_nits_recorded_in_provenance(hdr_corpus, tmp_path):
    out = tmp_path / "data"
    assert main(["synth", str(hdr_corpus), str(out), "--peak-nits", "1000"]) == 0
    rec = json.loads((out / "index.jsonl").read_text().splitlines()[0])
    assert rec["peak_nits"] == 1000.0


# --------------------------------------------------------------------------
# train
# --------------------------------------------------------------------------

def test_train_paper_preset_echoes_published_defaults(dataset_dir, tmp_path):
    # only size knobs are overridden; the paper block's hyperparameters
    # (lambda, alpha, batch, lr0) must land in the echo untouched
    out = tmp_path / "run"
    rc = main(["train", "--data", str(dataset_dir / "index.jsonl"),
               "--out", str(out), "--preset", "paper", "--iterations", "2",
               "--patch-size", "32", "--width-multiplier", "0.25",
               "--checkpoint-every", "0"])
    assert rc == 0
    echo = parse_echo(out / "config.echo")
    assert float(echo["lambda"]) == 1e4
    assert float(echo["alpha"]) == 1e5
    assert int(echo["batch_size"]) == 6
    assert float(echo["lr0"]) == 1e-4


def test_train_writes_log_and_final_params(dataset_dir, tmp_path):
    out = tmp_path / "run"
    assert main(train_args(dataset_dir, out)) == 0
    assert (out / "generator_final.itmn").exists()
    assert (out / "log.jsonl").exists()
    log = TrainLog.from_jsonl(out / "log.jsonl")
    assert len(log) == 4


def test_train_no_dmse_equals_alpha_zero_bitwise(dataset_dir, tmp_path):
    out_a = tmp_path / "a"
    out_b = tmp_path / "b"
    assert main(train_args(dataset_dir, out_a, ["--mode", "no_dmse"])) == 0
    assert main(train_args(dataset_dir, out_b, ["--alpha", "0"])) == 0
    la = TrainLog.from_jsonl(out_a / "log.jsonl")
    lb = TrainLog.from_jsonl(out_b / "log.jsonl")
    assert la.same_trajectory(lb)
    assert (out_a / "generator_final.itmn").read_bytes() == \
        (out_b / "generator_final.itmn").read_bytes()


def test_train_sweep_produces_five_cells(dataset_dir, tmp_path):
    out = tmp_path / "sweep"
    rc = main(train_args(dataset_dir, out,
                         ["--sweep", "alpha=1e3,1e5,1e7", "lambda=1e2,1e4,1e6",
                          "--mode", "no_advreg", "--iterations", "2"]))
    assert rc == 0
    cells = sorted(p.name for p in out.iterdir() if p.is_dir())
    assert len(cells) == 5   # 3 alphas at center lambda + 3 lambdas minus overlap
    for cell in cells:
        assert (out / cell / "log.jsonl").exists()
        assert (out / cell / "config.echo").exists()


def test_sweep_cell_arithmetic():
    cfg = ExperimentConfig()   # center (alpha 1e5, lambda 1e4)
    cells = _sweep_cells(cfg, ["alpha=1e3,1e5,1e7", "lambda=1e2,1e4,1e6"])
    assert cells == [(1e3, 1e4), (1e5, 1e4), (1e7, 1e4), (1e5, 1e2), (1e5, 1e6)]


def test_train_missing_manifest_exit_one(tmp_path):
    rc = main(["train", "--data", str(tmp_path / "nope.jsonl"),
               "--out", str(tmp_path / "o")])
    assert rc == 1


# --------------------------------------------------------------------------
# config file handling
# --------------------------------------------------------------------------

def test_config_file_roundtrip(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("lambda = 5e3\nalpha = 2e4   # inline comment\n"
                        "# full line comment\nmode = no_dmse\nseed = 7\n")
    cfg = load_config_file(cfg_file, ExperimentConfig())
    assert cfg.lambda_ == 5e3 and cfg.alpha == 2e4
    assert cfg.mode == "no_dmse" and cfg.seed == 7


def test_config_file_unknown_key_rejected(tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("lamda = 5e3\n")   # typo
    from itmn.cli import CliError
    with pytest.raises(CliError):
        load_config_file(cfg_file, ExperimentConfig())


def test_flags_override_config_file(dataset_dir, tmp_path):
    cfg_file = tmp_path / "exp.cfg"
    cfg_file.write_text("alpha = 123.0\n")
    out = tmp_path / "run"
    rc = main(train_args(dataset_dir, out,
                         ["--config", str(cfg_file), "--alpha", "77.0"]))
    assert rc == 0
    assert float(parse_echo(out / "config.echo")["alpha"]) == 77.0


def test_desk_preset_sizes():
    cfg = desk_preset()
    assert (cfg.batch_size, cfg.iterations, cfg.patch_size,
            cfg.width_multiplier) == (4, 2000, 64, 0.25)
    assert (cfg.lambda_, cfg.alpha, cfg.lr0) == (1e4, 1e5, 1e-4)


# --------------------------------------------------------------------------
# infer
# --------------------------------------------------------------------------

@pytest.fixture
def trained_model(dataset_dir, tmp_path):
    out = tmp_path / "model_run"
    assert main(train_args(dataset_dir, out)) == 0
    return out / "generator_final.itmn"


def test_infer_pnm_to_pfm(trained_model, dataset_dir, tmp_path):
    out = tmp_path / "pred"
    inp = dataset_dir / "ldr" / "scene0.pnm"
    assert main(["infer", "--model", str(trained_model), "--out", str(out),
                 str(inp)]) == 0
    result = read_pfm(out / "scene0.pfm")
    assert (result.width, result.height) == (64, 64)
    assert 0.0 < result.pixels.min() and result.pixels.max() < 1.0


def test_infer_indivisible_dims_error_names_requirement(trained_model, tmp_path, capsys):
    rng = np.random.default_rng(0)
    odd = LdrImage(65, 65, rng.uniform(0, 1, (65, 65, 3)).astype(np.float32))
    write_pnm(odd, tmp_path / "odd.pnm")
    rc = main(["infer", "--model", str(trained_model), "--out",
               str(tmp_path / "p"), str(tmp_path / "odd.pnm")])
    assert rc == 1
    assert "32" in capsys.readouterr().err


def test_infer_pad_reflect_crops_back(trained_model, tmp_path):
    rng = np.random.default_rng(1)
    odd = LdrImage(65, 65, rng.uniform(0, 1, (65, 65, 3)).astype(np.float32))
    write_pnm(odd, tmp_path / "odd.pnm")
    out = tmp_path / "p"
    assert main(["infer", "--model", str(trained_model), "--out", str(out),
                 str(tmp_path / "odd.pnm"), "--pad"]) == 0
    result = read_pfm(out / "odd.pfm")
    assert (result.width, result.height) == (65, 65)


def test_infer_rgbe_denormalizes_by_peak(trained_model, dataset_dir, tmp_path):
    out = tmp_path / "pred"
    inp = dataset_dir / "ldr" / "scene1.pnm"
    assert main(["infer", "--model", str(trained_model), "--out", str(out),
                 str(inp), "--rgbe", "--peak-nits", "1000"]) == 0
    pfm = read_pfm(out / "scene1.pfm")
    hdr = read_rgbe(out / "scene1.hdr")
    ratio = hdr.pixels.max() / pfm.pixels.max()
    assert ratio == pytest.approx(1000.0, rel=0.02)


def test_infer_bad_model_exit_one(tmp_path):
    bad = tmp_path / "bad.itmn"
    bad.write_bytes(b"JUNKJUNKJUNK")
    rc = main(["infer", "--model", str(bad), "--out", str(tmp_path / "o"), "x.pnm"])
    assert rc == 1


# --------------------------------------------------------------------------
# eval
# --------------------------------------------------------------------------

def test_eval_ref_against_itself(dataset_dir, tmp_path, capsys):
    out = tmp_path / "eval"
    rc = main(["eval", str(dataset_dir / "hdr"), str(dataset_dir / "hdr"),
               "--out", str(out)])
    assert rc == 0
    lines = (out / "report.csv").read_text().strip().splitlines()
    assert lines[0] == "id,mpsnr_db,ssim,log_psnr_db"
    for line in lines[1:]:
        _, mp, ss, lp = line.split(",")
        assert float(mp) == 99.0 and float(ss) == 1.0 and float(lp) == 99.0
    assert json.loads((out / "aggregate.json").read_text())["aggregates"]["count"] == 3


def test_eval_zero_matches_exit_one(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    a.mkdir(), b.mkdir()
    assert main(["eval", str(a), str(b), "--out", str(tmp_path / "o")]) == 1


# --------------------------------------------------------------------------
# gradcheck
# --------------------------------------------------------------------------

def test_gradcheck_command_passes(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    for op in ("conv2d", "batchnorm", "composite_conv_bn_lrelu_mse"):
        assert op in out


def test_gradcheck_detects_broken_op(monkeypatch, capsys):
    broken = dict(gc.CHECKS)
    broken["conv2d"] = lambda: 1.0   # a gradient error far above tolerance
    monkeypatch.setattr(gc, "CHECKS", broken)
    assert main(["gradcheck"]) == 1
    assert "FAIL" in capsys.readouterr().out


# --------------------------------------------------------------------------
# help and exit codes
# --------------------------------------------------------------------------

def test_help_lists_flags_with_defaults(capsys):
    assert main(["train", "--help"]) == 0
    out = capsys.readouterr().out
    assert "--lambda" in out and "10000.0" in out
    assert "--alpha" in out and "100000.0" in out
    assert "--lr0" in out and "0.0001" in out
    assert "--batch-size" in out and "6" in out


def test_unknown_command_exit_one():
    assert main(["frobnicate"]) == 1
