"""Command-line entry point.

Commands: stats, train, eval, sweep, compare. Every training-config field
has a flag; flags override values from --config files. Exit codes: 0 on
success, 1 on runtime failure, 2 on usage errors. The KGFORGE_DATA_DIR
environment variable is the fallback root for --data names.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from kgforge.data import (
    DatasetNotFoundError,
    dataset_stats,
    format_stats,
    load_dataset,
    write_stats_kv,
)
from kgforge.evaluation import RankMode, TiePolicy, compare, evaluate
from kgforge.models import load_checkpoint, save_checkpoint
from kgforge.training import ConfigError, TrainConfig, fit, parse_kv_file
from kgforge import reporting

CHECKPOINT_NAME = "checkpoint.kgfg"

SWEEP_BATCH_SIZES = (25, 50, 100, 200, 500, 1000)
SWEEP_NEG_RATIOS = (5, 10, 25, 50, 100, 200)
SWEEP_VARIANTS = (
    # (label, alpha, p_bias, joint)
    ("baseline", 0.0, 0.0, False),
    ("biased", 0.0, 0.3, False),
    ("joint", 0.5, 0.0, True),
    ("jobi", 0.5, 0.3, True),
)


class UsageError(Exception):
    """Bad invocation; maps to exit code 2."""


def resolve_data_dir(name: str) -> Path:
    """A --data value is a directory path, or a name under KGFORGE_DATA_DIR."""
    path = Path(name)
    if path.is_dir():
        return path
    root = os.environ.get("KGFORGE_DATA_DIR")
    if root:
        candidate = Path(root) / name
        if candidate.is_dir():
            return candidate
    raise UsageError(f"dataset directory not found: {name}")


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    # defaults stay None so only user-set flags override the config file
    p.add_argument("--model", choices=["distmult", "complex", "simple"], default=None)
    p.add_argument("--joint", action="store_const", const="true", default=None,
                   help="train the pair-occurrence module jointly")
    p.add_argument("--d", dest="dim", type=int, default=None, help="embedding dimension")
    p.add_argument("--batch", dest="batch_size", type=int, default=None)
    p.add_argument("--n-neg", dest="n_neg", type=int, default=None,
                   help="negative examples per positive (sampled mode)")
    p.add_argument("--alpha", type=float, default=None, help="pair-loss weight")
    p.add_argument("--p-bias", dest="p_bias", type=float, default=None,
                   help="biased corruption probability")
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta1", type=float, default=None)
    p.add_argument("--beta2", type=float, default=None)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--loss", dest="loss_mode", choices=["sampled", "full"], default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--eval-every", dest="eval_every", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--max-epochs", dest="max_epochs", type=int, default=None)
    p.add_argument("--exclude-gold", dest="exclude_gold", action="store_const",
                   const="true", default=None)
    p.add_argument("--alternate-sides", dest="alternate_sides", action="store_const",
                   const="true", default=None)
    p.add_argument("--reg-lambda", dest="reg_lambda", type=float, default=None)
    p.add_argument("--float32", action="store_const", const="true", default=None)
    p.add_argument("--softmax-budget", dest="full_softmax_budget", type=int, default=None)
    p.add_argument("--debug-checks", dest="debug_checks", action="store_const",
                   const="true", default=None)
    p.add_argument("--config", default=None, help="key=value config file")


_CONFIG_FLAG_FIELDS = (
    "model", "joint", "dim", "batch_size", "n_neg", "alpha", "p_bias", "lr",
    "beta1", "beta2", "eps", "loss_mode", "seed", "eval_every", "patience",
    "max_epochs", "exclude_gold", "alternate_sides", "reg_lambda", "float32",
    "full_softmax_budget", "debug_checks",
)


def _merge_config(args) -> TrainConfig:
    file_values = parse_kv_file(args.config) if args.config else {}
    flag_values = {}
    for name in _CONFIG_FLAG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            flag_values[name] = value if isinstance(value, str) else str(value)
    effective = dict(file_values)
    effective.update(flag_values)
    if effective.get("loss_mode") in ("full", "full_softmax") and "n_neg" in effective:
        raise UsageError("--n-neg has no effect with --loss full; drop one of them")
    config = TrainConfig.from_dict(effective)
    config.validate()
    return config


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgforge",
        description="Bilinear knowledge-graph embeddings with joint "
        "pair-occurrence training and biased negative sampling.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--lowercase", action="store_true")
    p.add_argument("--out", default=None, help="directory for stats files")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="train a model and keep the best checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=".", help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="filtered ranking evaluation of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--tie", choices=["opt", "pess", "mean"], default="mean")
    p.add_argument("--mode", choices=["both", "tail-only"], default="both")
    p.add_argument("--out", default=None, help="directory for report files")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="batch-size or negative-ratio sweep over the four variants")
    p.add_argument("--data", required=True)
    p.add_argument("--sweep", choices=["batch", "nneg"], required=True)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--parallel", type=int, default=1, help="worker processes")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("compare", help="per-relation gains between two checkpoints")
    p.add_argument("ckpt_a")
    p.add_argument("ckpt_b")
    p.add_argument("--data", required=True)
    p.add_argument("--tie", choices=["opt", "pess", "mean"], default="mean")
    p.add_argument("--out", default=".", help="output directory")
    p.set_defaults(func=cmd_compare)
    return parser


def cmd_stats(args) -> int:
    ds = load_dataset(resolve_data_dir(args.data), lowercase=args.lowercase)
    stats = dataset_stats(ds)
    print(format_stats(stats))
    if args.out:
        out = reporting.ensure_dir(args.out)
        (out / "stats.txt").write_text(format_stats(stats) + "\n", encoding="utf-8")
        write_stats_kv(stats, out / "stats.kv")
    return 0


def cmd_train(args) -> int:
    config = _merge_config(args)
    ds = load_dataset(resolve_data_dir(args.data))
    out = reporting.ensure_dir(args.out)
    print(config.to_text(), end="")
    config.to_file(out / "config.txt")
    with open(out / "training_log.tsv", "w", encoding="utf-8") as log_file:
        best, log = fit(ds, config, log_stream=log_file)
    save_checkpoint(out / CHECKPOINT_NAME, best, ds.vocab)
    print(f"checkpoint written to {out / CHECKPOINT_NAME}")
    if reporting.save_training_curves(log, out / "training_curves.png"):
        print(f"training curves written to {out / 'training_curves.png'}")
    if log.epochs and ds.valid.n:
        report = evaluate(ds.valid, best, ds.filter_set, vocab=ds.vocab)
        print("validation metrics of the best checkpoint:")
        print(report.format_text())
    return 0


def cmd_eval(args) -> int:
    ds = load_dataset(resolve_data_dir(args.data))
    table, vocab = load_checkpoint(args.checkpoint)
    if vocab != ds.vocab:
        raise RuntimeError("checkpoint vocabulary does not match the dataset")
    report = evaluate(
        ds.test,
        table,
        ds.filter_set,
        mode=RankMode.parse(args.mode),
        tie=TiePolicy.parse(args.tie),
        vocab=ds.vocab,
    )
    print(report.format_text())
    if args.out:
        out = reporting.ensure_dir(args.out)
        (out / "report.txt").write_text(report.format_text() + "\n", encoding="utf-8")
        reporting.write_tsv(out / "metrics.tsv", ("metric", "value"), report.metric_rows())
        reporting.write_tsv(
            out / "per_relation.tsv",
            ("relation_id", "relation", "count", "hits1_head", "hits1_tail"),
            report.relation_rows(),
        )
        reporting.save_relation_hits_figure(report, out / "per_relation_hits1.png")
    return 0


def _sweep_point(data_dir: str, base: dict, sweep: str, value: int, variant) -> float:
    """Train one sweep point and return its test hits@10. Loads the dataset
    itself so it can run in a worker process."""
    label, alpha, p_bias, joint = variant
    ds = load_dataset(data_dir)
    overrides = dict(base)
    overrides.update(
        {
            "alpha": str(alpha),
            "p_bias": str(p_bias),
            "joint": "true" if joint else "false",
        }
    )
    if sweep == "batch":
        overrides["batch_size"] = str(value)
        overrides.setdefault("n_neg", "25")
    else:
        overrides["n_neg"] = str(value)
        overrides.setdefault("batch_size", "200")
    config = TrainConfig.from_dict(overrides)
    config.validate()
    best, _ = fit(ds, config)
    report = evaluate(ds.test, best, ds.filter_set)
    return report.metrics["hits10"]


def cmd_sweep(args) -> int:
    base_config = _merge_config(args)
    base = {}
    for name in _CONFIG_FLAG_FIELDS:
        if name in ("alpha", "p_bias", "joint", "batch_size", "n_neg"):
            continue
        value = getattr(base_config, name)
        base[name] = value.value if hasattr(value, "value") else str(value)
    data_dir = str(resolve_data_dir(args.data))
    values = SWEEP_BATCH_SIZES if args.sweep == "batch" else SWEEP_NEG_RATIOS
    x_label = "batch size" if args.sweep == "batch" else "negatives per positive"
    jobs = [(value, variant) for value in values for variant in SWEEP_VARIANTS]

    results: dict[tuple[int, str], float] = {}
    if args.parallel > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            futures = {
                (value, variant[0]): pool.submit(_sweep_point, data_dir, base, args.sweep, value, variant)
                for value, variant in jobs
            }
            for key, future in futures.items():
                results[key] = future.result()
    else:
        for value, variant in jobs:
            results[(value, variant[0])] = _sweep_point(data_dir, base, args.sweep, value, variant)

    rows = [(value, variant[0], results[(value, variant[0])]) for value, variant in jobs]
    out = reporting.ensure_dir(args.out)
    reporting.write_tsv(out / "sweep.tsv", (args.sweep, "variant", "hits10"), rows)
    reporting.save_sweep_figure(rows, x_label, out / "sweep.png")
    for value, label, hits10 in rows:
        print(f"{args.sweep}={value}\t{label}\t{hits10:.4f}")
    print(f"sweep table written to {out / 'sweep.tsv'}")
    return 0


def cmd_compare(args) -> int:
    table_a, vocab_a = load_checkpoint(args.ckpt_a)
    table_b, vocab_b = load_checkpoint(args.ckpt_b)
    if vocab_a != vocab_b:
        raise RuntimeError("checkpoints were trained over different vocabularies")
    ds = load_dataset(resolve_data_dir(args.data))
    if vocab_a != ds.vocab:
        raise RuntimeError("checkpoint vocabulary does not match the dataset")
    tie = TiePolicy.parse(args.tie)
    report_a = evaluate(ds.test, table_a, ds.filter_set, tie=tie, vocab=ds.vocab)
    report_b = evaluate(ds.test, table_b, ds.filter_set, tie=tie, vocab=ds.vocab)
    diff = compare(ds.test, report_a, report_b, vocab=ds.vocab)

    out = reporting.ensure_dir(args.out)
    reporting.write_tsv(
        out / "gains.tsv",
        ("relation_id", "relation", "count", "correct_a", "correct_b", "gain"),
        diff.gain_rows(),
    )
    newly_rows = [
        (side, *ds.vocab.decode(h, r, t)) for side, h, r, t in diff.newly_first
    ]
    reporting.write_tsv(
        out / "newly_first.tsv", ("side", "head", "relation", "tail"), newly_rows
    )
    reporting.save_gain_figure(diff, out / "gains.png")
    total_gain = sum(g.gain for g in diff.gains)
    print(f"relations compared: {len(diff.gains)}")
    print(f"net ranked-first gain (B - A): {total_gain}")
    for g in diff.gains[:10]:
        print(f"  {g.name}\tcount={g.count}\t{g.correct_a} -> {g.correct_b}\t({g.gain:+d})")
    print(f"gain table written to {out / 'gains.tsv'}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse already printed the usage message
        return exc.code if isinstance(exc.code, int) else 2
    try:
        return args.func(args)
    except (UsageError, DatasetNotFoundError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failures map to exit code 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
