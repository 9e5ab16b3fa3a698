import csv
import math
from pathlib import Path

import numpy as np
import pytest

from darol import analysis, cli, dataset, nn
from darol.config import ConfigError, parse_config

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

SMALL = """\
experiment: small
seed: 3
forward:
  kind: identity
  d_m: 3
  d_a: 3
prior:
  kind: uniform_box
noise:
  kind: gaussian
  std: 0.05
regularizer:
  type: lasso
  lambda: 0.1
data:
  n_train: 60
  n_test: 40
  sweep: [20, 40, 60]
network:
  width: 8
  depth: 2
  clamp: 2.0
  frobenius_cap: 2.0
training:
  epochs: 5
"""


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def _run(*argv):
    return cli.main([str(a) for a in argv])


def test_gen_writes_matching_train_and_test(small, tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("gen", "--config", small, "--out", out) == 0
    tr, te = dataset.load(out / "train.darol"), dataset.load(out / "test.darol")
    assert len(tr) == 60 and len(te) == 40
    assert tr.forward_spec == te.forward_spec and tr.regularizer_spec == te.regularizer_spec
    assert tr.metadata["config_hash"] == te.metadata["config_hash"]
    assert tr.metadata["role"] == "train" and te.metadata["role"] == "test"
    assert not np.array_equal(tr.m[:40], te.m)


def test_rerun_gives_identical_files(small, tmp_path, capsys):
    for d in ("a", "b"):
        assert _run("gen", "--config", small, "--out", tmp_path / d) == 0
    for f in ("train.darol", "test.darol"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_full_pipeline_outputs(small, tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("run", "--config", small, "--out", out) == 0
    hist = list(csv.DictReader((out / "history.csv").open()))
    assert len(hist) == 5 and set(hist[0]) == {"epoch", "train_loss"}
    sweep = list(csv.DictReader((out / "sweep.csv").open()))
    assert [int(r["n"]) for r in sweep] == [20, 40, 60]
    assert all(float(r["identity_residual"]) == 0.0 for r in sweep)
    flat, meta = analysis.load_report(out / "report.darol")
    assert meta["seed"] == 3 and meta["config_hash"]
    assert abs(flat["identity_residual"]) <= 1e-12
    # bound fields agree with the standalone bound functions
    ref = analysis.bound_generalization(flat["input.d_a"], flat["input.r_A"], flat["input.r_F"],
                                        flat["input.r_M"], flat["input.weight_layers"],
                                        flat["input.M_F"], flat["input.n"])
    assert flat["bound_gen"] == ref
    assert flat["bound_approx"] == analysis.bound_approximation(
        flat["input.d_m"], flat["input.d_a"], flat["input.L_f"], flat["input.r_M"],
        flat["input.p"], flat["input.L"])
    assert _run("report", "--out", out) == 0
    assert "bound_gen" in capsys.readouterr().out


def test_zero_epoch_training_keeps_initialization(small, tmp_path, capsys):
    cfg = tmp_path / "z.yaml"
    cfg.write_text(SMALL.replace("epochs: 5", "epochs: 0"))
    out = tmp_path / "out"
    assert _run("gen", "--config", cfg, "--out", out) == 0
    assert _run("train", "--config", cfg, "--out", out) == 0
    net, _ = nn.load_checkpoint(out / "checkpoint.darol")
    cfgobj = parse_config(cfg.read_text())
    from darol.rng import derive_seed

    ref = nn.init_network(3, 3, 8, 2, 2.0, seed=derive_seed(cfgobj.seed, "init", "main"))
    nn.project_frobenius(ref, 2.0)
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), ref.params()))
    assert (out / "history.csv").read_text() == "epoch,train_loss\n"


def test_realizable_task_reaches_small_mse(tmp_path, capsys):
    cfg = tmp_path / "r.yaml"
    cfg.write_text(SMALL.replace("type: lasso\n  lambda: 0.1", "type: implicit")
                   .replace("std: 0.05", "std: 0.0").replace("epochs: 5", "epochs: 150")
                   .replace("n_train: 60", "n_train: 400").replace("sweep: [20, 40, 60]", "sweep: []")
                   .replace("width: 8", "width: 16").replace("step_size", "step_size"))
    out = tmp_path / "out"
    assert _run("run", "--config", cfg, "--out", out) == 0
    _, meta = nn.load_checkpoint(out / "checkpoint.darol")
    assert meta["final_loss"] / 3 < 1e-3


def test_sensing_lasso_certification_rate(tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("gen", "--config", CONFIGS / "sensing_lasso.yaml", "--out", out) == 0
    tr = dataset.load(out / "train.darol")
    frac = np.mean([d["certified"] for d in tr.diagnostics])
    assert frac >= 0.99


def test_mixed_provenance_refused(small, tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("run", "--config", small, "--out", out) == 0
    assert _run("eval", "--config", small, "--out", out, "--seed-override", 4) == 1
    assert "mixed provenance" in capsys.readouterr().err
    other = tmp_path / "other.yaml"
    other.write_text(SMALL.replace("std: 0.05", "std: 0.06"))
    assert _run("eval", "--config", other, "--out", out) == 1
    assert "mixed provenance" in capsys.readouterr().err


def test_seed_override_recorded(small, tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("gen", "--config", small, "--out", out, "--seed-override", 11) == 0
    meta = dataset.load(out / "train.darol").metadata
    assert meta["seed"] == 11 and meta["seed_override"] == 11


def test_corrupted_artifact_is_validation_error(small, tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("gen", "--config", small, "--out", out) == 0
    p = out / "train.darol"
    lines = p.read_bytes().split(b"\n")
    lines[2] = b"9" + lines[2][1:] if not lines[2].startswith(b"9") else b"8" + lines[2][1:]
    p.write_bytes(b"\n".join(lines))
    assert _run("train", "--config", small, "--out", out) == 1
    assert "checksum" in capsys.readouterr().err


def test_divergence_is_numerical_failure(small, tmp_path, capsys):
    cfg = tmp_path / "d.yaml"
    cfg.write_text(SMALL.replace("epochs: 5", "epochs: 5\n  optimizer: sgd\n  step_size: 1.0e+30")
                   .replace("clamp: 2.0", "clamp: 1.0e+300").replace("  frobenius_cap: 2.0\n", ""))
    out = tmp_path / "out"
    assert _run("gen", "--config", cfg, "--out", out) == 0
    with np.errstate(all="ignore"):
        assert _run("train", "--config", cfg, "--out", out) == 3


@pytest.mark.parametrize("edit,line,needle", [
    (("lambda: 0.1", "lambda: -0.1"), 14, "regularizer.lambda"),
    (("  width: 8", "  widht: 8"), 20, "network.widht"),
    (("seed: 3\n", ""), None, "seed: required"),
    (("kind: identity", "kind: wavelet"), 4, "forward.kind"),
    (("sweep: [20, 40, 60]", "sweep: [20, 400]"), 18, "data.sweep.1"),
])
def test_validation_errors_are_line_anchored(edit, line, needle):
    with pytest.raises(ConfigError) as info:
        parse_config(SMALL.replace(*edit), source="c.yaml")
    msg = str(info.value)
    assert needle in msg
    if line is not None:
        assert info.value.line == line and msg.startswith(f"c.yaml:{line}:")


def test_invalid_config_exit_code(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("experiment: x\nseed: [1\n")
    assert _run("gen", "--config", p, "--out", tmp_path) == 1
    assert "bad.yaml:" in capsys.readouterr().err


def test_example_configs_parse():
    for p in sorted(CONFIGS.glob("*.yaml")):
        cfg = parse_config(p.read_text(), str(p))
        assert cfg.seed >= 0 and cfg.hash


def test_verify_passes_and_fault_injection_fails(capsys):
    assert _run("verify") == 0
    assert "0 failed" in capsys.readouterr().out
    assert _run("verify", "--suite", "lasso", "--inject-fault", "kkt-tolerance") == 2
    out = capsys.readouterr().out
    assert "FAIL  lasso.kkt_residual" in out


def test_bounds_reference_certified_constant(small, tmp_path, capsys):
    out = tmp_path / "out"
    assert _run("run", "--config", small, "--out", out) == 0
    flat, _ = analysis.load_report(out / "report.darol")
    assert flat["input.L_f_certified"] == pytest.approx(2.0)
    assert flat["input.L_f_empirical"] <= 1.0 + 1e-9
    assert math.isfinite(flat["input.bound_approx_certified"])
