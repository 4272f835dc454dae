"""Command-line experiment runner.

Subcommands: ``data gen``, ``data inspect``, ``train``, ``eval``, ``sweep``.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
Set SKETCHADAPT_OUT_ROOT to re-root relative output directories.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from collections import Counter
from pathlib import Path

import numpy as np

from sketchadapt import metatrain, ttt
from sketchadapt.config import ExperimentConfig, dataset_for, resolve_out_dir
from sketchadapt.dataio import load_dataset, save_dataset
from sketchadapt.errors import CheckpointError, ConfigError, NumericalError, SketchAdaptError
from sketchadapt.nets import load_checkpoint
from sketchadapt.synth import synth_generate

SWEEP_AXES = ("ttt_steps", "inner_steps", "d_p", "d_aP")


def _load_config(path, overrides=()):
    cfg = ExperimentConfig.from_yaml(path) if path else ExperimentConfig()
    if overrides:
        cfg = cfg.apply_overrides(overrides)
    cfg.validate()
    return cfg


def run_train(cfg: ExperimentConfig):
    """Train per config; writes config snapshot, metrics CSV, checkpoint."""
    cfg.validate()
    out = resolve_out_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.yaml")
    dataset = dataset_for(cfg)
    fingerprint = cfg.fingerprint()
    iters = cfg.train.outer_iters
    model, rows = metatrain.train(
        dataset,
        cfg.nets,
        cfg.losses,
        cfg.train,
        out_dir=out,
        fingerprint=fingerprint,
        log_every=max(1, iters // 20) if iters else 0,
    )
    return out / "checkpoint.pt", rows


def _eval_variants(base: ttt.TTTConfig):
    frozen = dataclasses.replace(base, tau_s=0, tau_p=0, use_tpa=False)
    no_tpa = dataclasses.replace(base, use_tpa=False)
    return {"frozen": frozen, "ttt": base, "ttt_no_tpa": no_tpa}


def run_eval(checkpoint_path, dataset, ttt_cfg: ttt.TTTConfig, out_dir: Path,
             expected_fingerprint: str | None = None):
    """Evaluate the three standard variants; writes eval.csv and trace.jsonl."""
    model, fingerprint, _ = load_checkpoint(checkpoint_path, expected_fingerprint)
    out_dir.mkdir(parents=True, exist_ok=True)
    reports = {}
    for name, variant_cfg in _eval_variants(ttt_cfg).items():
        reports[name] = ttt.evaluate_zs(model, dataset, variant_cfg)

    with open(out_dir / "eval.csv", "w") as fh:
        fh.write(f"# fingerprint: {fingerprint}\n")
        fh.write("variant,map_all,p_at_k,k,n_queries,gallery_size,incidents\n")
        for name, rep in reports.items():
            fh.write(
                f"{name},{rep.map_ttt:.6f},{rep.p_at_k_ttt:.6f},{rep.k},"
                f"{rep.n_queries},{rep.gallery_size},{rep.incidents}\n"
            )
    with open(out_dir / "trace.jsonl", "w") as fh:
        for row in reports["ttt"].per_query:
            fh.write(
                json.dumps(
                    {
                        "query": row["query_index"],
                        "category_id": row["category_id"],
                        "pre_loss": row["pre_loss"],
                        "post_loss": row["post_loss"],
                        "ap": row["ap_ttt"],
                    }
                )
                + "\n"
            )
    return reports


def run_sweep(cfg: ExperimentConfig, axis: str, values, out_dir: Path,
              checkpoint_path=None):
    """One evaluation per axis value; emits sweep.csv and sweep.png."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis must be one of {SWEEP_AXES}, got {axis!r}")
    values = sorted(values)
    out_dir.mkdir(parents=True, exist_ok=True)
    fingerprint = cfg.fingerprint()
    rows = []

    if axis == "ttt_steps":
        if checkpoint_path is None:
            checkpoint_path, _ = run_train(cfg)
        model, fingerprint, _ = load_checkpoint(checkpoint_path)
        dataset = dataset_for(cfg)
        for v in values:
            rep = ttt.evaluate_zs(model, dataset, dataclasses.replace(cfg.ttt, tau_s=int(v)))
            rows.append((v, rep.map_ttt, rep.p_at_k_ttt))
    else:
        section_field = {
            "inner_steps": ("train", "inner_steps", int),
            "d_p": ("nets", "primary_dim", int),
            "d_aP": ("nets", "photo_aux_dim", int),
        }[axis]
        for v in values:
            section, name, cast = section_field
            point = cfg.apply_overrides([f"{section}.{name}={cast(v)}"])
            point = dataclasses.replace(point, out_dir=str(Path(cfg.out_dir) / f"{axis}_{v}"))
            ckpt, _ = run_train(point)
            model, _, _ = load_checkpoint(ckpt)
            rep = ttt.evaluate_zs(model, dataset_for(point), point.ttt)
            rows.append((v, rep.map_ttt, rep.p_at_k_ttt))

    csv_path = out_dir / "sweep.csv"
    with open(csv_path, "w") as fh:
        fh.write(f"# fingerprint: {fingerprint}\n")
        fh.write(f"{axis},map_all,p_at_k\n")
        for v, m, p in rows:
            fh.write(f"{v},{m:.6f},{p:.6f}\n")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    xs = [r[0] for r in rows]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(xs, [r[1] for r in rows], "o-", label="mAP@all")
    ax.plot(xs, [r[2] for r in rows], "s--", label="P@K")
    ax.set_xlabel(axis)
    ax.set_ylabel("retrieval score")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "sweep.png", metadata={"Description": f"fingerprint={fingerprint}"})
    plt.close(fig)
    return rows


# ------------------------------------------------------------------ parser


def _bool_flag(text: str) -> bool:
    val = text.strip().lower()
    if val in ("true", "1", "yes", "on"):
        return True
    if val in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true/false, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchadapt", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_data = sub.add_parser("data", help="dataset generation and inspection")
    data_sub = p_data.add_subparsers(dest="data_command", required=True)
    p_gen = data_sub.add_parser("gen", help="generate a synthetic dataset")
    p_gen.add_argument("--config", default=None, help="experiment config YAML")
    p_gen.add_argument("--seed", type=int, required=True)
    p_gen.add_argument("--out", required=True)
    p_inspect = data_sub.add_parser("inspect", help="summarize a dataset file")
    p_inspect.add_argument("path")

    p_train = sub.add_parser("train", help="meta-train a retrieval model")
    p_train.add_argument("--config", default=None)
    p_train.add_argument("--out", default=None, help="override out_dir")
    p_train.add_argument("--data", default=None, help="override data_path")
    p_train.add_argument("--seed", type=int, default=None)
    p_train.add_argument("--use-meta", type=_bool_flag, default=None)
    p_train.add_argument("--use-eta", type=_bool_flag, default=None)
    p_train.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                         help="dotted config override, e.g. train.outer_iters=100")

    p_eval = sub.add_parser("eval", help="zero-shot retrieval evaluation")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--config", default=None,
                        help="optional config; its fingerprint must match the checkpoint")
    p_eval.add_argument("--no-tpa", action="store_true")
    p_eval.add_argument("--tau-s", type=int, default=None)
    p_eval.add_argument("--tau-p", type=int, default=None)
    p_eval.add_argument("--lr-ttt", type=float, default=None)
    p_eval.add_argument("--k", type=int, default=None)
    p_eval.add_argument("--queries", type=int, default=None, help="cap query count")
    p_eval.add_argument("--out", default="eval_out")

    p_sweep = sub.add_parser("sweep", help="evaluate along one config axis")
    p_sweep.add_argument("--config", default=None)
    p_sweep.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p_sweep.add_argument("--values", required=True, help="comma-separated values")
    p_sweep.add_argument("--checkpoint", default=None)
    p_sweep.add_argument("--out", default="sweep_out")
    p_sweep.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    return parser


def _cmd_data(args) -> int:
    if args.data_command == "gen":
        cfg = _load_config(args.config)
        dataset = synth_generate(cfg.data, args.seed)
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_dataset(dataset, out)
        print(f"wrote {len(dataset.pairs)} pairs to {out}")
        return 0
    ds = load_dataset(args.path)
    print(f"pairs: {len(ds.pairs)}")
    print(f"canvas: {ds.canvas}  t_max: {ds.t_max}  line_width: {ds.line_width}")
    print(f"categories: {list(ds.category_names)}")
    print(f"split: meta_train={list(ds.split.meta_train)} "
          f"meta_test={list(ds.split.meta_test)} unseen_test={list(ds.split.unseen_test)}")
    print(f"styles: seen={list(ds.seen_styles)} unseen={list(ds.unseen_styles)}")
    by_cat = Counter(p.category_id for p in ds.pairs)
    for cat in sorted(by_cat):
        name = ds.category_names[cat] if cat < len(ds.category_names) else "?"
        print(f"  category {cat} ({name}): {by_cat[cat]} pairs")
    return 0


def _cmd_train(args) -> int:
    overrides = list(args.set)
    if args.use_meta is not None:
        overrides.append(f"train.use_meta={str(args.use_meta).lower()}")
    if args.use_eta is not None:
        overrides.append(f"train.use_eta={str(args.use_eta).lower()}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    cfg = _load_config(args.config, overrides)
    if args.data is not None:
        cfg = dataclasses.replace(cfg, data_path=args.data)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    cfg.validate()
    ckpt, rows = run_train(cfg)
    last = rows[-1] if rows else {"l_trn": float("nan"), "l_val": float("nan")}
    print(f"checkpoint: {ckpt}")
    print(f"final l_trn={last['l_trn']:.4f} l_val={last['l_val']:.4f}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config) if args.config else ExperimentConfig()
    expected = cfg.fingerprint() if args.config else None
    base = cfg.ttt
    updates = {}
    if args.no_tpa:
        updates["use_tpa"] = False
    if args.tau_s is not None:
        updates["tau_s"] = args.tau_s
    if args.tau_p is not None:
        updates["tau_p"] = args.tau_p
    if args.lr_ttt is not None:
        updates["lr_ttt"] = args.lr_ttt
    if args.k is not None:
        updates["k_precision"] = args.k
    if args.queries is not None:
        updates["max_queries"] = args.queries
    base = dataclasses.replace(base, **updates)
    dataset = load_dataset(args.data)
    reports = run_eval(args.checkpoint, dataset, base, Path(args.out), expected)
    for name, rep in reports.items():
        print(f"{name:12s} mAP@all={rep.map_ttt:.4f}  P@{rep.k}={rep.p_at_k_ttt:.4f}")
    print(f"wrote {Path(args.out) / 'eval.csv'}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load_config(args.config, args.set)
    values = [yaml_scalar(v) for v in args.values.split(",") if v.strip()]
    rows = run_sweep(cfg, args.axis, values, Path(args.out), args.checkpoint)
    for v, m, p in rows:
        print(f"{args.axis}={v}: mAP@all={m:.4f} P@K={p:.4f}")
    return 0


def yaml_scalar(text: str):
    import yaml

    return yaml.safe_load(text.strip())


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "data":
            return _cmd_data(args)
        if args.command == "train":
            return _cmd_train(args)
        if args.command == "eval":
            return _cmd_eval(args)
        if args.command == "sweep":
            return _cmd_sweep(args)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, CheckpointError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except SketchAdaptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
