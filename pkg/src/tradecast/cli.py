"""Batch command-line interface.

Four subcommands: ``synth`` (generate a synthetic dataset), ``train``
(seeded multi-run protocol for one model), ``tune`` (sequential
hyperparameter study with optional random-search control), ``sweep``
(window-length sensitivity table).  Every command writes a
``manifest.json`` beside its outputs recording the argv, the resolved
configuration, input fingerprints, and seeds; re-running the same argv
reproduces every output byte for byte (nothing here reads the clock).

Exit codes: 0 success, 2 usage error, 1 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import __version__
from .bayesopt import (
    TrialConfig,
    random_search_control,
    read_config_file,
    run_study,
    write_best_config,
    write_trial_log,
)
from .encoder import EncoderConfig
from .graphdata import (
    ConfigError,
    load_dataset,
    synth_generate,
    write_edges_csv,
    write_features_csv,
)
from .rng import Rng
from .training import TrainConfig, aggregate_runs, run_seeds, window_sweep

__all__ = ["main"]


def _fmt(x) -> str:
    """Numeric CSV cell: 6 significant digits."""
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def parse_int_range(text: str, flag: str) -> tuple[int, ...]:
    """``a..b`` (inclusive), ``a,b,c``, or a single integer."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError
            return tuple(range(lo, hi + 1))
        if "," in text:
            return tuple(int(p) for p in text.split(","))
        return (int(text),)
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"{flag} expects N, N..M, or N,M,... — got {text!r}") from None


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command: str, argv: list[str], config: dict,
                   fingerprints: dict[str, str], seeds, outputs: list[str]) -> None:
    manifest = {
        "command": command,
        "argv": argv,
        "config": config,
        "dataset_fingerprint": fingerprints,
        "seeds": list(seeds),
        "version": __version__,
        "outputs": sorted(outputs),
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def dataset_label(edges_path: str) -> str:
    p = Path(edges_path)
    return p.parent.name if p.stem == "edges" and p.parent.name else p.stem


def _train_config_from_args(args) -> TrainConfig:
    encoder = EncoderConfig(
        hidden_dim=args.hidden_dim,
        latent_dim=args.latent_dim,
        heads=args.heads,
        depth=args.depth,
        drop_edge=args.drop_edge,
    )
    cfg = TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        kl_weight=args.kl_weight,
        window=args.window,
        seeds=args.seeds,
        encoder=encoder,
        eval_seed=args.eval_seed,
        persist_memory=getattr(args, "persist_memory", False),
    )
    config_file = getattr(args, "config", None)
    if config_file:
        tuned = read_config_file(config_file)
        cfg = apply_trial_config(cfg, tuned)
    return cfg


def apply_trial_config(cfg: TrainConfig, tuned: TrialConfig) -> TrainConfig:
    return replace(
        cfg,
        lr=tuned.lr,
        kl_weight=tuned.lambda_kl,
        gamma_init=tuned.gamma_init,
        beta_init=tuned.beta_init,
        encoder=replace(cfg.encoder, latent_dim=tuned.z_dim),
    )


def _config_dict(cfg: TrainConfig) -> dict:
    out = asdict(cfg)
    out["seeds"] = list(cfg.seeds)
    return out


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds = synth_generate(Rng(args.seed), n=args.nodes, s_years=args.years,
                        p_backbone=args.backbone, p_churn=args.churn,
                        feature_noise=args.feature_noise)
    edges, feats = out / "edges.csv", out / "features.csv"
    write_edges_csv(ds, edges)
    write_features_csv(ds, feats)
    write_manifest(out, "synth", argv,
                   {"nodes": args.nodes, "years": args.years, "backbone": args.backbone,
                    "churn": args.churn, "feature_noise": args.feature_noise,
                    "seed": args.seed},
                   {"edges.csv": _sha256(str(edges)), "features.csv": _sha256(str(feats))},
                   [args.seed], [str(edges), str(feats)])
    print(f"wrote {edges} and {feats} ({ds.n} countries, years "
          f"{ds.years[0]}..{ds.years[-1]})")
    return 0


def cmd_train(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, report = load_dataset(args.edges, args.features)
    if report["dropped_self_loops"]:
        print(f"notice: dropped {report['dropped_self_loops']} self-loop rows", file=sys.stderr)
    cfg = _train_config_from_args(args)
    if args.model == "static":
        print("notice: --model static trains on the last pre-target snapshot; "
              "--window is ignored for training", file=sys.stderr)
    results = run_seeds(ds, cfg, args.model, args.jobs)
    label = args.name or dataset_label(args.edges)

    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["model", "dataset", "w", "seed", "auc", "ap", "final_loss"])
        for r in results:
            writer.writerow([args.model, label, cfg.window, r.seed,
                             _fmt(r.final_auc), _fmt(r.final_ap), _fmt(r.final_loss)])
    curve_paths = []
    for r in results:
        path = out / f"curves_{r.seed}.csv"
        curve_paths.append(str(path))
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss", "auc", "ap"])
            for e, (loss, auc, ap) in enumerate(zip(r.loss_curve, r.auc_curve, r.ap_curve),
                                                start=1):
                writer.writerow([e, _fmt(loss), _fmt(auc), _fmt(ap)])
    summary = aggregate_runs(results, args.model).summary()
    print(summary)
    write_manifest(out, "train", argv, _config_dict(cfg),
                   {"edges": _sha256(args.edges), "features": _sha256(args.features)},
                   cfg.seeds, [str(metrics_path), *curve_paths])
    return 0


def cmd_tune(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ds, _ = load_dataset(args.edges, args.features)
    base = _train_config_from_args(args)
    result = run_study(ds, base, args.trials, args.seed,
                       trial_seeds=args.trial_seeds, trial_epochs=args.epochs,
                       checkpoint_every=args.checkpoint_every, jobs=args.jobs)
    trials_path = out / "trials.csv"
    write_trial_log(result.trials, trials_path)
    best_path = out / "best.cfg"
    write_best_config(result.best.config, best_path)
    report_path = out / "report.txt"
    report_path.write_text(result.report.summary() + "\n", encoding="utf-8")
    outputs = [str(trials_path), str(best_path), str(report_path)]
    pruned = sum(t.status == "pruned" for t in result.trials)
    print(f"bo best objective: {result.best.objective:.6g} "
          f"(trial {result.best.trial_id}, {pruned} pruned)")
    print(result.report.summary())
    if args.control == "random":
        control_best, control_trials = random_search_control(
            ds, base, args.trials, args.seed, trial_seeds=args.trial_seeds,
            trial_epochs=args.epochs)
        control_path = out / "trials_control.csv"
        write_trial_log(control_trials, control_path)
        outputs.append(str(control_path))
        best_obj = max(t.objective for t in control_trials if t.objective is not None)
        print(f"random best objective: {best_obj:.6g}")
    write_manifest(out, "tune", argv, _config_dict(base),
                   {"edges": _sha256(args.edges), "features": _sha256(args.features)},
                   args.trial_seeds, outputs)
    return 0


def cmd_sweep(args, argv) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if len(args.edges) != len(args.features):
        raise ConfigError("--edges and --features must be given the same number of times")
    cfg = _train_config_from_args(args)
    per_dataset = []
    fingerprints = {}
    for edges, feats in zip(args.edges, args.features):
        ds, _ = load_dataset(edges, feats)
        rows, notices = window_sweep(ds, cfg, args.windows, jobs=args.jobs)
        for line in notices:
            print(f"notice: {dataset_label(edges)}: {line}", file=sys.stderr)
        per_dataset.append((dataset_label(edges), rows))
        fingerprints[edges] = _sha256(edges)
    sweep_path = out / "sweep.csv"
    multi = len(per_dataset) > 1
    with open(sweep_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        cols = ["w", "auc_mean", "auc_std", "ap_mean", "ap_std"]
        writer.writerow((["dataset"] if multi else []) + cols)
        for label, rows in per_dataset:
            for row in rows:
                writer.writerow(([label] if multi else []) + [_fmt(row[c]) for c in cols])
        if multi:
            # one average row per window length present in every dataset
            common = sorted(set.intersection(*[{r["w"] for r in rows}
                                               for _, rows in per_dataset]))
            for w in common:
                vals = [next(r for r in rows if r["w"] == w) for _, rows in per_dataset]
                writer.writerow(["average", w] + [
                    _fmt(sum(v[c] for v in vals) / len(vals))
                    for c in cols[1:]])
    print(f"wrote {sweep_path}")
    write_manifest(out, "sweep", argv, _config_dict(cfg), fingerprints,
                   cfg.seeds, [str(sweep_path)])
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser, epochs_default: int) -> None:
    p.add_argument("--window", type=int, default=4,
                   help="sliding window length (default 4)")
    p.add_argument("--epochs", type=int, default=epochs_default,
                   help=f"training epochs (default {epochs_default})")
    p.add_argument("--lr", type=float, default=1e-3, help="learning rate (default 0.001)")
    p.add_argument("--kl-weight", type=float, default=1e-4,
                   help="posterior regularization weight (default 0.0001)")
    p.add_argument("--seeds", type=lambda s: parse_int_range(s, "--seeds"),
                   default=tuple(range(1000, 1010)),
                   help="seed list or range, e.g. 1000..1009 (default)")
    p.add_argument("--hidden-dim", type=int, default=64, help="encoder hidden width (default 64)")
    p.add_argument("--latent-dim", type=int, default=32, help="latent width (default 32)")
    p.add_argument("--heads", type=int, default=3, help="attention heads (default 3)")
    p.add_argument("--depth", type=int, default=2, help="propagation steps per head (default 2)")
    p.add_argument("--drop-edge", type=float, default=0.2,
                   help="edge dropout fraction during training (default 0.2)")
    p.add_argument("--eval-seed", type=int, default=2718,
                   help="seed for the evaluation negative sample (default 2718)")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker threads for per-seed runs (default 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tradecast",
        description="Temporal link prediction for evolving trade networks")
    parser.add_argument("--version", action="version", version=f"tradecast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--nodes", type=int, default=60, help="countries (default 60)")
    p.add_argument("--years", type=int, default=10, help="snapshots (default 10)")
    p.add_argument("--backbone", type=float, default=0.06,
                   help="persistent edge density (default 0.06)")
    p.add_argument("--churn", type=float, default=0.02,
                   help="yearly edge turnover rate (default 0.02)")
    p.add_argument("--feature-noise", type=float, default=0.1,
                   help="feature random-walk step size (default 0.1)")
    p.add_argument("--seed", type=int, default=7, help="generator seed (default 7)")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the seeded training protocol")
    p.add_argument("--edges", required=True, help="edge CSV path")
    p.add_argument("--features", required=True, help="feature CSV path")
    p.add_argument("--model", choices=["tama", "gru", "static"], default="tama",
                   help="tama (full), gru (memory weight frozen at 0), or static baseline")
    p.add_argument("--config", help="key=value file from tune; overrides lr, kl weight, "
                                    "latent dim, and the momentum/memory initial values")
    p.add_argument("--name", help="dataset label for metrics.csv (default: inferred)")
    p.add_argument("--persist-memory", action="store_true",
                   help="warm the structural memory from the preceding window at evaluation")
    _add_train_flags(p, epochs_default=300)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("tune", help="sequential hyperparameter study")
    p.add_argument("--edges", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--trials", type=int, default=20, help="trial count (default 20)")
    p.add_argument("--trial-seeds", type=lambda s: parse_int_range(s, "--trial-seeds"),
                   default=(1000, 1001, 1002),
                   help="seeds trained per trial (default 1000..1002)")
    p.add_argument("--checkpoint-every", type=int, default=50,
                   help="epochs between pruning checkpoints (default 50)")
    p.add_argument("--seed", type=int, default=1, help="study seed (default 1)")
    p.add_argument("--control", choices=["none", "random"], default="none",
                   help="also run a random-search control arm")
    _add_train_flags(p, epochs_default=500)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("sweep", help="window-length sensitivity table")
    p.add_argument("--edges", action="append", required=True,
                   help="edge CSV path (repeat for several datasets)")
    p.add_argument("--features", action="append", required=True,
                   help="feature CSV path (repeat to match --edges)")
    p.add_argument("--windows", type=lambda s: parse_int_range(s, "--windows"),
                   default=tuple(range(3, 9)), help="window lengths, e.g. 3..8 (default)")
    _add_train_flags(p, epochs_default=300)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args, argv)
    except Exception as err:  # noqa: BLE001 - single CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
