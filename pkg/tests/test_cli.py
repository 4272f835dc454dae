"""End-to-end CLI checks on a 16x16 miniature experiment."""

import json
from pathlib import Path

import pytest

from sketchadapt.cli import main

TINY_YAML = """
seed: 11
data:
  samples_per_category: 6
  canvas: 16
  t_max: 8
  n_meta_test_categories: 1
nets:
  canvas: 16
  feature_dim: 16
  primary_dim: 8
  sketch_aux_dim: 8
  photo_aux_dim: 8
  hidden_size: 8
  channels: [8, 8, 8, 8]
  norm_groups: 4
  eta_hidden: [8, 8]
train:
  outer_iters: 2
  meta_batch: 2
  n_train_pairs: 2
  n_val_pairs: 1
  pool_size: 2
  outer_lr: 0.001
ttt:
  tau_s: 1
  tau_p: 1
  max_queries: 4
  gallery_batch: 16
  k_precision: 5
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY_YAML)
    return root, cfg


@pytest.fixture(scope="module")
def trained(workdir):
    root, cfg = workdir
    run = root / "run"
    rc = main(["train", "--config", str(cfg), "--out", str(run)])
    assert rc == 0
    return run / "checkpoint.pt"


def test_data_gen_and_inspect(workdir, capsys):
    root, cfg = workdir
    out = root / "ds.jsonl"
    assert main(["data", "gen", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
    assert out.exists()
    assert main(["data", "inspect", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "pairs: 60" in printed
    assert "canvas: 16" in printed


def test_data_gen_deterministic(workdir):
    root, cfg = workdir
    a, b = root / "a.jsonl", root / "b.jsonl"
    main(["data", "gen", "--config", str(cfg), "--seed", "5", "--out", str(a)])
    main(["data", "gen", "--config", str(cfg), "--seed", "5", "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_train_writes_artifacts(workdir, trained):
    root, _ = workdir
    run = root / "run"
    assert trained.exists()
    metrics = (run / "metrics.csv").read_text().splitlines()
    assert metrics[0].startswith("# fingerprint: ")
    assert metrics[1] == "iteration,l_trn,l_val,map_meta_test,wall_clock"
    assert len(metrics) == 2 + 2  # header comment + columns + one row per iteration
    assert (run / "config.yaml").exists()


def test_train_same_config_reproduces_metrics(workdir):
    root, cfg = workdir
    r1, r2 = root / "repro1", root / "repro2"
    assert main(["train", "--config", str(cfg), "--out", str(r1)]) == 0
    assert main(["train", "--config", str(cfg), "--out", str(r2)]) == 0
    strip = lambda p: (p / "metrics.csv").read_text().splitlines()
    rows1, rows2 = strip(r1), strip(r2)
    # identical apart from wall-clock column
    cut = lambda rows: [",".join(r.split(",")[:3]) for r in rows[2:]]
    assert cut(rows1) == cut(rows2)


def test_train_joint_mode_flaggable(workdir):
    root, cfg = workdir
    run = root / "joint"
    rc = main(["train", "--config", str(cfg), "--out", str(run),
               "--use-meta", "false", "--use-eta", "false",
               "--set", "train.outer_iters=1"])
    assert rc == 0
    rows = (run / "metrics.csv").read_text().splitlines()
    l_val = rows[2].split(",")[2]
    assert l_val == "nan"  # no inner adaptation record in joint mode


def test_missing_data_path_is_config_error(workdir):
    root, cfg = workdir
    rc = main(["train", "--config", str(cfg), "--data", str(root / "nope.jsonl"),
               "--out", str(root / "x")])
    assert rc == 2


def test_eval_writes_variants_and_trace(workdir, trained):
    root, cfg = workdir
    data = root / "ds.jsonl"
    out = root / "eval"
    rc = main(["eval", "--checkpoint", str(trained), "--data", str(data),
               "--config", str(cfg), "--out", str(out)])
    assert rc == 0
    lines = (out / "eval.csv").read_text().splitlines()
    assert lines[0].startswith("# fingerprint: ")
    variants = [ln.split(",")[0] for ln in lines[2:]]
    assert variants == ["frozen", "ttt", "ttt_no_tpa"]
    trace = [json.loads(ln) for ln in (out / "trace.jsonl").read_text().splitlines()]
    assert len(trace) == 4  # max_queries
    assert {"query", "pre_loss", "post_loss", "ap"} <= set(trace[0])


def test_eval_frozen_equals_zero_step_ttt(workdir, trained):
    root, cfg = workdir
    data = root / "ds.jsonl"
    out = root / "eval0"
    rc = main(["eval", "--checkpoint", str(trained), "--data", str(data),
               "--config", str(cfg), "--tau-s", "0", "--tau-p", "0", "--out", str(out)])
    assert rc == 0
    lines = (out / "eval.csv").read_text().splitlines()[2:]
    frozen = lines[0].split(",")[1:3]
    ttt_row = lines[1].split(",")[1:3]
    assert frozen == ttt_row


def test_eval_fingerprint_mismatch_exits_2(workdir, trained, tmp_path):
    root, cfg = workdir
    bad_cfg = tmp_path / "other.yaml"
    bad_cfg.write_text(TINY_YAML.replace("seed: 11", "seed: 12"))
    rc = main(["eval", "--checkpoint", str(trained), "--data", str(root / "ds.jsonl"),
               "--config", str(bad_cfg), "--out", str(tmp_path / "e")])
    assert rc == 2


def test_sweep_ttt_steps(workdir, trained):
    root, cfg = workdir
    out = root / "sweep"
    rc = main(["sweep", "--config", str(cfg), "--axis", "ttt_steps",
               "--values", "1,0", "--checkpoint", str(trained), "--out", str(out)])
    assert rc == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert lines[1] == "ttt_steps,map_all,p_at_k"
    values = [int(ln.split(",")[0]) for ln in lines[2:]]
    assert values == sorted(values) == [0, 1]
    png = out / "sweep.png"
    assert png.exists() and png.stat().st_size > 0


def test_sweep_rejects_unknown_axis(workdir):
    root, cfg = workdir
    # argparse rejects the choice itself with exit code 2
    with pytest.raises(SystemExit) as err:
        main(["sweep", "--config", str(cfg), "--axis", "nope", "--values", "1"])
    assert err.value.code == 2


def test_numerical_failure_exits_3(workdir, tmp_path):
    root, cfg = workdir
    # an absurd inner rate makes the adapted parameters overflow
    rc = main(["train", "--config", str(cfg), "--out", str(tmp_path / "blow"),
               "--set", "nets.alpha_init=1e18", "--set", "train.outer_iters=3"])
    assert rc == 3


def test_sweep_train_axis(workdir, tmp_path):
    root, cfg = workdir
    out = tmp_path / "dp_sweep"
    rc = main(["sweep", "--config", str(cfg), "--axis", "d_p", "--values", "4,8",
               "--out", str(out), "--set", "train.outer_iters=1",
               "--set", "out_dir=" + str(tmp_path / "dp_runs")])
    assert rc == 0
    lines = (out / "sweep.csv").read_text().splitlines()
    assert [ln.split(",")[0] for ln in lines[2:]] == ["4", "8"]


def test_output_root_env(workdir, monkeypatch, tmp_path):
    root, cfg = workdir
    monkeypatch.setenv("SKETCHADAPT_OUT_ROOT", str(tmp_path))
    rc = main(["train", "--config", str(cfg), "--out", "envrun",
               "--set", "train.outer_iters=1"])
    assert rc == 0
    assert (tmp_path / "envrun" / "checkpoint.pt").exists()
