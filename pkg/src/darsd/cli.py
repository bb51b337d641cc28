"""Command line entry point: ``darsd <subcommand> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path

from .autodiff import ContractError
from .config import ConfigError, load_config
from .data import DatasetParseError, SyntheticShiftConfig, generate_synthetic_pair, load_dataset, save_dataset
from .gradcheck import run_gradcheck
from .lcib import oracle_subspace_extraction
from .networks import CheckpointError

GRADCHECK_TOL = 1e-4
ORACLE_TOL = 1e-10
ORACLE_SHAPES = ((16, 4), (32, 8), (128, 24))


def _config(args):
    return load_config(args.config, seed=args.seed, partition_mode=getattr(args, "mode", None),
                       schedule=getattr(args, "schedule", None))


def _pair(args):
    """Datasets from --source/--target, or the default synthetic pair."""
    if args.source and args.target:
        return load_dataset(args.source), load_dataset(args.target)
    if args.source or args.target:
        raise SystemExit("error: pass both --source and --target, or neither")
    return generate_synthetic_pair(SyntheticShiftConfig(seed=args.data_seed))


def _emit(rows: list[dict], out: Path | None, name: str) -> None:
    """Comma-separated table on stdout, and a copy under --out."""
    if not rows:
        return
    keys = list(rows[0])
    w = csv.DictWriter(sys.stdout, fieldnames=keys, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    if out:
        with open(out / name, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            w.writerows(rows)


# -- subcommands ------------------------------------------------------------

def cmd_synth(args) -> int:
    out = Path(args.out)
    src, tgt = generate_synthetic_pair(SyntheticShiftConfig(seed=args.seed if args.seed is not None else 0))
    save_dataset(src, out / "source")
    # target labels are kept on disk for scoring; training loads them without labels
    save_dataset(tgt, out / "target")
    print(f"wrote {len(src)} source and {len(tgt)} target samples to {out}")
    return 0


def cmd_train(args) -> int:
    from .plotting import plot_training_curves
    from .train import evaluate, train, train_source_only

    cfg = _config(args)
    source, target = _pair(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    if args.source_only:
        res = train_source_only(cfg, source, target)
        res.model.save(out / "checkpoint.bin")
    else:
        res = train(cfg, source, target.unlabeled(), target_labels=target.y, out_dir=out,
                    dump_pseudo_labels=args.dump_pseudo_labels)
        plot_training_curves([json.loads(m.to_json()) for m in res.metrics], out / "training_curves.png")
    rows = []
    for split, ds in (("source", source), ("target", target)):
        if ds.y is not None:
            ev = evaluate(res.model, ds)
            rows.append({"split": split, "macro_f1": f"{ev.macro_f1:.6f}", "accuracy": f"{ev.accuracy:.6f}"})
    _emit(rows, out, "scores.csv")
    return 0


def cmd_eval(args) -> int:
    from .train import Model, evaluate

    model = Model.load(args.checkpoint)
    ds = load_dataset(args.data)
    ev = evaluate(model, ds)
    row = {"macro_f1": f"{ev.macro_f1:.6f}", "accuracy": f"{ev.accuracy:.6f}"}
    row.update({f"f1_class{c}": f"{v:.6f}" for c, v in enumerate(ev.per_class_f1)})
    _emit([row], Path(args.out) if args.out else None, "eval.csv")
    return 0


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation
    from .train import ABLATION_ROWS, run_ablation

    cfg = _config(args)
    source, target = _pair(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    base = cfg.seed
    table = run_ablation(cfg, source, target, rows=args.rows or list(ABLATION_ROWS),
                         seeds=range(base, base + args.seeds))
    rows = [{
        "id": r["id"], "lcib": int(r["lcib"]), "adv": int(r["adv"]), "sup": int(r["sup"]),
        "self": int(r["self"]), "anti": int(r["anti"]),
        "macro_f1": f"{r['macro_f1']:.6f}", "accuracy": f"{r['accuracy']:.6f}",
        "zero_terms": " ".join(r["zero_terms"]),
    } for r in table]
    _emit(rows, out, "ablation.csv")
    plot_ablation(table, out / "ablation.png")
    return 0


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    worst = run_gradcheck(seed=args.seed or 0, repeats=args.repeats)
    rows = [{"op": k, "max_rel_error": f"{v:.3e}", "pass": int(v < GRADCHECK_TOL)} for k, v in worst.items()]
    _emit(rows, Path(args.out) if args.out else None, "gradcheck.csv")
    print(f"# {len(rows)} checks in {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    return 0 if all(r["pass"] for r in rows) else 1


def cmd_oracle(args) -> int:
    t0 = time.perf_counter()
    rows = []
    for d, m in ORACLE_SHAPES:
        err = oracle_subspace_extraction(d, m, trials=args.trials, seed=args.seed or 0)
        rows.append({"d": d, "m": m, "trials": args.trials, "max_error": f"{err:.3e}", "pass": int(err < ORACLE_TOL)})
    _emit(rows, Path(args.out) if args.out else None, "oracle.csv")
    print(f"# oracle finished in {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    return 0 if all(r["pass"] for r in rows) else 1


# -- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="darsd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=False):
        sp.add_argument("--seed", type=int, default=None, help="RNG seed (overrides the config file)")
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    def training(sp):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--mode", choices=("quantile", "threshold"), help="confidence partition mode")
        sp.add_argument("--schedule", choices=("linear", "stepwise"), help="confidence ratio schedule")
        sp.add_argument("--source", help="labeled source dataset directory")
        sp.add_argument("--target", help="target dataset directory (labels, if present, are only used for scoring)")
        sp.add_argument("--data-seed", type=int, default=0, help="generator seed when no datasets are given")
        return sp

    common(sub.add_parser("synth", help="write the default synthetic source/target pair"), True)

    sp = training(common(sub.add_parser("train", help="two-stage training"), True))
    sp.add_argument("--dump-pseudo-labels", action="store_true", help="write per-step pseudo-labels to CSV")
    sp.add_argument("--source-only", action="store_true", help="train the non-adapted baseline instead")

    sp = common(sub.add_parser("eval", help="score a checkpoint on a labeled dataset"))
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)

    sp = training(common(sub.add_parser("ablate", help="component ablation table"), True))
    sp.add_argument("--seeds", type=int, default=3, help="number of consecutive seeds per row")
    sp.add_argument("--rows", nargs="*", help="subset of row ids, e.g. ID.1 ID.5")

    sp = common(sub.add_parser("gradcheck", help="central-difference check of every op and loss"))
    sp.add_argument("--repeats", type=int, default=3)

    sp = common(sub.add_parser("oracle", help="invariant-coordinate recovery check"))
    sp.add_argument("--trials", type=int, default=100)
    return p


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "gradcheck": cmd_gradcheck, "oracle": cmd_oracle}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if getattr(args, "out", None):
        Path(args.out).mkdir(parents=True, exist_ok=True)
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, ContractError, DatasetParseError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
