"""Command line entry point: ``holistic {train,sweep,attack-eval,report,stability}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiment as ex
from .attacks import AttackConfig, fgsm
from .data import apply_scaling
from .metrics import adversarial_accuracy_curve, natural_accuracy
from .network import Classifier, load_checkpoint

log = logging.getLogger("holistic")


def _load_config(args) -> ex.ExperimentConfig:
    cfg = ex.ExperimentConfig.load(args.config)
    if args.precision:
        cfg.training["precision"] = args.precision
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if args.out:
        cfg.out = str(args.out)
    return cfg


def _write_reports(records, out: Path, radii) -> list:
    written = []
    tables = ex.report(records, "best_by_natural")
    written += ex.write_report(tables, out / "reports", "best_by_natural")
    for r in radii:
        tables = ex.report(records, "best_by_adv", r)
        written += ex.write_report(tables, out / "reports", f"best_by_adv_{r:.0e}")
    return written


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    records = ex.run(cfg, jobs=args.jobs)
    if not records:
        log.error("no run finished; see *.error.txt under %s/runs", cfg.out)
        return 1
    for p in _write_reports(records, Path(cfg.out), cfg.radii):
        if p.name.endswith("summary.txt") and "natural" in p.name:
            sys.stdout.write(p.read_text())
    incomplete = [r["fingerprint"] for r in records if not r["complete"]]
    if incomplete:
        log.warning("%d configs have failed seeds: %s", len(incomplete), ", ".join(incomplete))
        return 2
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args)
    configs = ex.expand_grid(cfg)
    if len(configs) != 1:
        log.error("train expects a config that expands to exactly one run, got %d; use sweep", len(configs))
        return 1
    tc, seed, out = configs[0], cfg.seeds[0], Path(cfg.out)
    err = ex._execute(ex.build_dataset(cfg.dataset), cfg, tc, seed, out)
    if err is not None:
        sys.stderr.write(err)
        return 1
    payload = json.loads((out / "runs" / tc.fingerprint() / f"seed-{seed}.json").read_text())
    print(json.dumps({"fingerprint": tc.fingerprint(), "seed": seed, "best_iteration": payload["best_iteration"],
                      "val_acc": payload["val_acc"], **payload["metrics"]}, indent=1, sort_keys=True))
    print(f"checkpoint: {out / 'runs' / tc.fingerprint() / f'seed-{seed}.npz'}")
    return 0


def cmd_attack_eval(args) -> int:
    cfg = ex.ExperimentConfig.load(args.config)
    params, gate_cfg, header = load_checkpoint(args.checkpoint)
    meta = header.get("meta", {})
    ds = ex.build_dataset(cfg.dataset)
    X, y = ds.part("test")
    if meta.get("scaling", "none") != "none":
        X = apply_scaling(X, np.asarray(meta["mean"]), np.asarray(meta["sd"]))
    model = Classifier.from_params(params, gate_cfg, args.precision or header["precision"])
    radii = args.rho or cfg.radii
    clip = tuple(args.clip) if args.clip else None
    result = {"checkpoint": str(args.checkpoint), "attack": args.attack, "natural_acc": natural_accuracy(model, X, y)}
    if args.attack == "pgd":
        curve = adversarial_accuracy_curve(model, X, y, radii, steps=args.steps, restarts=args.restarts,
                                           seed=args.seed or 0, clip=clip)
    else:
        curve = {float(r): natural_accuracy(model, fgsm(model, X, y, float(r), clip), y) for r in sorted(radii)}
    result["adv_acc"] = {f"{r:.0e}": v for r, v in sorted(curve.items())}
    text = json.dumps(result, indent=1, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_report(args) -> int:
    records = ex.load_records(*args.records)
    if not records:
        log.error("no records found in %s", " ".join(map(str, args.records)))
        return 1
    if args.mode == "best_by_adv" and args.rho is None:
        log.error("--mode best_by_adv needs --rho")
        return 1
    tables = ex.report(records, args.mode, args.rho, args.variants)
    tag = args.mode if args.mode == "best_by_natural" else f"best_by_adv_{args.rho:.0e}"
    if args.out:
        ex.write_report(tables, args.out, tag)
    for name, rows in tables.items():
        print(f"== {name}")
        sys.stdout.write(ex.render_text(rows))
    return 0


def cmd_stability(args) -> int:
    cfg = _load_config(args)
    if len(cfg.seeds) < 2:
        log.error("the stability score needs at least two seeds")
        return 1
    records = ex.run(cfg, jobs=args.jobs)
    rows = [["fingerprint", "variant", "seeds", "stability", "natural_acc"]]
    for r in records:
        rows.append([r["fingerprint"], r["variant"], str(len(r["seeds"])),
                     ex._fmt(r["aggregate"]["stability_score"]), ex._fmt(r["aggregate"]["natural_acc"])])
    sys.stdout.write(ex.render_text(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="holistic", description="Robust, sparse and stable MLP training harness.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, seed=True, jobs=True):
        p.add_argument("--config", required=True, type=Path, help="YAML or JSON experiment config")
        p.add_argument("--out", type=Path, help="output directory (overrides the config)")
        p.add_argument("--precision", choices=["f32", "f64"])
        if seed:
            p.add_argument("--seed", type=int, help="run this single seed instead of the configured list")
        if jobs:
            p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")

    p = sub.add_parser("train", help="train one configuration for one seed")
    common(p, jobs=False)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="run the full grid over all seeds, then write reports")
    common(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("attack-eval", help="evaluate a checkpoint under attack")
    p.add_argument("--config", required=True, type=Path, help="config naming the dataset")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--rho", type=float, nargs="+", help="attack radii (default: config radii)")
    p.add_argument("--attack", choices=["pgd", "fgsm"], default="pgd")
    p.add_argument("--steps", type=int, default=40)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--clip", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--seed", type=int)
    p.add_argument("--precision", choices=["f32", "f64"])
    p.add_argument("--out", type=Path, help="write the JSON result here")
    p.set_defaults(func=cmd_attack_eval)

    p = sub.add_parser("report", help="tables from run records")
    p.add_argument("records", nargs="+", type=Path, help="sweep output or records directories")
    p.add_argument("--mode", choices=["best_by_natural", "best_by_adv"], default="best_by_natural")
    p.add_argument("--rho", type=float, help="radius for best_by_adv")
    p.add_argument("--variants", nargs="+", help="column order / subset")
    p.add_argument("--out", type=Path, help="write .tsv and .txt tables here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("stability", help="stability score of multi-seed ensembles")
    common(p, seed=False)
    p.set_defaults(func=cmd_stability)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ex.ConfigError, FileNotFoundError) as e:
        log.error("%s", e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
