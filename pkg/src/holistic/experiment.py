"""Experiment configs, grid expansion, resumable multi-seed sweeps and reports."""
from __future__ import annotations

import concurrent.futures as cf
import itertools
import json
import logging
import math
import os
import tempfile
import traceback
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import data as data_mod
from .gates import GateConfig
from .losses import DISPLAY_NAMES, VARIANTS, LossSpec
from .metrics import MetricBundle, improvement_captured
from .network import save_checkpoint
from .train import TrainConfig, aggregate, prepare, run_seed

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


_TOP_KEYS = {"version", "name", "dataset", "variants", "grid", "training", "gate", "seeds", "attack", "out"}
_DATASET_KEYS = {"kind", "path", "label", "categorical", "delimiter", "scaling", "split_seed", "name",
                 "n", "p", "informative", "seed", "pool_size", "val_fraction"}
_GRID_KEYS = {"learning_rate", "layer_sizes", "weight_decay", "dropout", "rho", "lam", "stability"}
_TRAINING_KEYS = {"batch_size", "max_iterations", "validation_period", "a_fraction", "precision", "per_example_gates"}
_ATTACK_KEYS = {"radii", "steps", "restarts", "clip"}
_GATE_KEYS = {"beta", "gamma", "zeta"}

_GRID_DEFAULTS = {
    "learning_rate": [1e-3],
    "layer_sizes": [[128, 64]],
    "weight_decay": [0.0],
    "dropout": [0.0],
    "rho": [1e-2],
    "lam": [1e-5],
}


def _reject_unknown(section: str, given: dict, allowed: set):
    if not isinstance(given, dict):
        raise ConfigError(f"{section}: expected a mapping, got {type(given).__name__}")
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


@dataclass
class ExperimentConfig:
    dataset: dict
    variants: list
    grid: dict
    training: dict = field(default_factory=dict)
    gate: dict = field(default_factory=dict)
    seeds: list = field(default_factory=lambda: list(range(10)))
    attack: dict = field(default_factory=dict)
    out: str = "runs/experiment"
    name: str = "experiment"

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _reject_unknown("config", raw, _TOP_KEYS)
        if raw.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"config: unsupported schema version {raw.get('version')}")
        if "dataset" not in raw:
            raise ConfigError("config: 'dataset' is required")
        _reject_unknown("dataset", raw["dataset"], _DATASET_KEYS)
        if raw["dataset"].get("kind") not in ("csv", "mnist", "synthetic"):
            raise ConfigError("dataset.kind must be one of csv, mnist, synthetic")
        variants = raw.get("variants", ["nominal", "hdl"])
        bad = [v for v in variants if v not in VARIANTS]
        if bad or not variants:
            raise ConfigError(f"variants: unknown or empty {bad}; expected names from {list(VARIANTS)}")
        grid = dict(raw.get("grid") or {})
        _reject_unknown("grid", grid, _GRID_KEYS)
        for k, v in grid.items():
            if not isinstance(v, list) or not v:
                raise ConfigError(f"grid.{k}: must be a non-empty list")
        training = dict(raw.get("training") or {})
        _reject_unknown("training", training, _TRAINING_KEYS)
        gate = dict(raw.get("gate") or {})
        _reject_unknown("gate", gate, _GATE_KEYS)
        attack = dict(raw.get("attack") or {})
        _reject_unknown("attack", attack, _ATTACK_KEYS)
        seeds = raw.get("seeds", list(range(10)))
        if not isinstance(seeds, list) or not seeds:
            raise ConfigError("seeds: must be a non-empty list")
        return cls(raw["dataset"], list(variants), grid, training, gate, [int(s) for s in seeds], attack,
                   str(raw.get("out", "runs/experiment")), str(raw.get("name", "experiment")))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            raw = yaml.safe_load(fh)
        return cls.from_dict(raw or {})

    def to_dict(self) -> dict:
        return {"version": SCHEMA_VERSION, "name": self.name, "dataset": self.dataset, "variants": self.variants,
                "grid": self.grid, "training": self.training, "gate": self.gate, "seeds": self.seeds,
                "attack": self.attack, "out": self.out}

    @property
    def radii(self) -> list:
        return [float(r) for r in self.attack.get("radii", [1e-3, 1e-2, 1e-1])]

    def attack_kwargs(self) -> dict:
        kw = {"steps": int(self.attack.get("steps", 40)), "restarts": int(self.attack.get("restarts", 1))}
        clip = self.attack.get("clip")
        if clip is not None:
            kw["clip"] = tuple(float(c) for c in clip)
        return kw

    @property
    def scaling(self) -> str:
        default = "none" if self.dataset["kind"] == "mnist" else "zscore"
        return self.dataset.get("scaling", default)

    @property
    def val_fraction(self) -> float:
        default = 0.2 if self.dataset["kind"] == "mnist" else 0.25
        return float(self.dataset.get("val_fraction", default))


def expand_grid(cfg: ExperimentConfig) -> list:
    """Cartesian product of the grid per variant; axes a variant ignores are collapsed."""
    axes = {k: cfg.grid.get(k, v) for k, v in _GRID_DEFAULTS.items()}
    for k, v in axes.items():
        if not v:
            raise ConfigError(f"grid.{k}: empty axis")
    t = cfg.training
    gate = GateConfig(**cfg.gate) if cfg.gate else GateConfig()
    out, seen = [], set()
    stability = cfg.grid.get("stability", [False, True])
    for variant in cfg.variants:
        robust, sparse, stable = VARIANTS[variant]
        if stable not in stability:
            # the stability flag is fixed by the variant; the axis only filters
            log.warning("variant %s skipped: stability=%s not in grid", variant, stable)
            continue
        rhos = axes["rho"] if robust else [0.0]
        lams = axes["lam"] if sparse else [0.0]
        for lr, sizes, wd, drop, rho, lam in itertools.product(
                axes["learning_rate"], axes["layer_sizes"], axes["weight_decay"], axes["dropout"], rhos, lams):
            spec = LossSpec.variant(variant, rho=float(rho), lam=float(lam), gate=gate,
                                    a_fraction=float(t.get("a_fraction", 0.7)), weight_decay=float(wd),
                                    per_example_gates=bool(t.get("per_example_gates", False)))
            tc = TrainConfig(hidden_sizes=tuple(sizes), learning_rate=float(lr),
                             batch_size=int(t.get("batch_size", 128)),
                             max_iterations=int(t.get("max_iterations", 50_000)),
                             validation_period=int(t.get("validation_period", 1000)),
                             dropout=float(drop), loss=spec, precision=t.get("precision", "f32"))
            fp = tc.fingerprint()
            if fp not in seen:
                seen.add(fp)
                out.append(tc)
    if not out:
        raise ConfigError("grid expands to zero configurations")
    return out


def build_dataset(spec: dict) -> data_mod.Dataset:
    """Load the configured dataset and fix its test split."""
    kind = spec["kind"]
    if kind == "mnist":
        return data_mod.load_mnist(spec.get("path", "data/mnist"), int(spec.get("pool_size", 50_000)))
    if kind == "csv":
        if "path" not in spec or "label" not in spec:
            raise ConfigError("csv datasets need 'path' and 'label'")
        ds = data_mod.load_csv(spec["path"], spec["label"], spec.get("categorical", []), spec.get("delimiter"),
                               spec.get("name"))
    else:
        ds = data_mod.make_synthetic(int(spec.get("n", 500)), int(spec.get("p", 20)),
                                     int(spec.get("informative", 5)), int(spec.get("seed", 0)),
                                     spec.get("name", "synthetic"))
    return data_mod.split(ds, int(spec.get("split_seed", 0)))


# --- persistence ---------------------------------------------------------------

def _atomic_write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1) + "\n"


def _seed_path(out: Path, fp: str, seed: int) -> Path:
    return out / "runs" / fp / f"seed-{seed}.json"


def _execute(dataset, cfg: ExperimentConfig, tc: TrainConfig, seed: int, out: Path):
    """Train/evaluate one (config, seed) job and persist its files. Returns an error string or None."""
    fp = tc.fingerprint()
    _atomic_write(out / "runs" / fp / "config.json", _dump(tc.resolved()))
    try:
        run = run_seed(dataset, tc, seed, cfg.radii, cfg.scaling, cfg.val_fraction,
                       **cfg.attack_kwargs())
        ds = prepare(dataset, seed, cfg.scaling, cfg.val_fraction)
        meta = {"fingerprint": fp, "seed": seed, "iteration": run.checkpoint.iteration,
                "val_acc": run.checkpoint.val_acc, "theta": run.checkpoint.theta, "dataset": dataset.name,
                "scaling": cfg.scaling}
        if cfg.scaling != "none":
            meta["mean"], meta["sd"] = ds.mean.tolist(), ds.sd.tolist()
        d = out / "runs" / fp
        save_checkpoint(d / f"seed-{seed}.npz", run.checkpoint.params,
                        tc.loss.gate if tc.loss.sparse else None, tc.precision, meta)
        _atomic_write(d / f"seed-{seed}.history.csv", run.history.to_csv())
        payload = {"seed": seed, "fingerprint": fp, "metrics": run.metrics.to_dict(),
                   "best_iteration": run.checkpoint.iteration, "val_acc": run.checkpoint.val_acc,
                   "test_predictions": run.test_predictions.astype(int).tolist(), "wall_clock": run.wall_clock}
        _atomic_write(_seed_path(out, fp, seed), _dump(payload))
        err = d / f"seed-{seed}.error.txt"
        if err.exists():
            err.unlink()
        return None
    except Exception:
        msg = traceback.format_exc()
        _atomic_write(out / "runs" / fp / f"seed-{seed}.error.txt", msg)
        return msg


_WORKER = {}


def _init_worker(dataset, cfg):
    _WORKER["dataset"], _WORKER["cfg"] = dataset, cfg


def _worker_job(args):
    tc, seed, out = args
    return _execute(_WORKER["dataset"], _WORKER["cfg"], tc, seed, Path(out))


def run(cfg: ExperimentConfig, jobs: int = 1, out=None) -> list:
    """Execute every missing (config, seed) pair, then write one record per config."""
    if not cfg.seeds:
        raise ConfigError("seeds: empty seed list")
    out = Path(out or cfg.out)
    dataset = build_dataset(cfg.dataset)
    configs = expand_grid(cfg)
    _atomic_write(out / "experiment.json", _dump(cfg.to_dict()))
    todo = []
    for tc in configs:
        for s in cfg.seeds:
            if not _seed_path(out, tc.fingerprint(), s).exists():
                todo.append((tc, s))
    log.info("%d configs x %d seeds; %d jobs to run", len(configs), len(cfg.seeds), len(todo))
    failures = []
    if jobs <= 1 or len(todo) <= 1:
        for tc, s in todo:
            if (e := _execute(dataset, cfg, tc, s, out)) is not None:
                failures.append((tc.fingerprint(), s, e))
    else:
        with cf.ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(dataset, cfg)) as ex:
            for (tc, s), e in zip(todo, ex.map(_worker_job, [(tc, s, str(out)) for tc, s in todo])):
                if e is not None:
                    failures.append((tc.fingerprint(), s, e))
    for fp, s, e in failures:
        log.warning("run %s seed %d failed: %s", fp, s, e.strip().splitlines()[-1])
    return reduce_records(cfg, configs, dataset, out)


def reduce_records(cfg: ExperimentConfig, configs, dataset, out: Path) -> list:
    records = []
    for tc in configs:
        fp = tc.fingerprint()
        per_seed, preds, wall = {}, [], 0.0
        for s in cfg.seeds:
            p = _seed_path(out, fp, s)
            if not p.exists():
                continue
            payload = json.loads(p.read_text())
            per_seed[s] = MetricBundle.from_dict(payload["metrics"])
            preds.append(np.asarray(payload["test_predictions"]))
            wall += payload["wall_clock"]
        if not per_seed:
            continue
        agg, stab = aggregate(list(per_seed.values()), preds, dataset.n_classes)
        rec = {
            "fingerprint": fp,
            "variant": tc.loss.name,
            "config": tc.resolved(),
            "dataset": {"name": dataset.name, "n": int(len(dataset.y)), "p": int(dataset.n_features),
                        "classes": int(dataset.n_classes)},
            "seeds": sorted(per_seed),
            "complete": len(per_seed) == len(cfg.seeds),
            "per_seed": {str(s): b.to_dict() for s, b in sorted(per_seed.items())},
            "aggregate": {**agg, "adv_acc": {f"{r:.0e}": v for r, v in agg["adv_acc"].items()}},
            "wall_clock": wall,
        }
        _atomic_write(out / "records" / f"{fp}.json", _dump(rec))
        records.append(rec)
    return records


def load_records(*dirs) -> list:
    recs = []
    for d in dirs:
        d = Path(d)
        rd = d / "records" if (d / "records").is_dir() else d
        for p in sorted(rd.glob("*.json")):
            recs.append(json.loads(p.read_text()))
    return recs


# --- reports -------------------------------------------------------------------

def size_category(n: int, p: int) -> str:
    np_ = n * p
    return "Small" if np_ < 10_000 else ("Medium" if np_ <= 100_000 else "Large")


def _criterion(rec: dict, mode: str, rho: float | None) -> float:
    agg = rec["aggregate"]
    if mode == "best_by_natural":
        return agg["natural_acc"]
    if mode == "best_by_adv":
        key = f"{rho:.0e}"
        if key not in agg["adv_acc"]:
            raise ConfigError(f"records lack adversarial accuracy at radius {key}")
        return agg["adv_acc"][key]
    raise ConfigError(f"unknown report mode {mode!r}")


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "-"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


def select_best(records, mode: str = "best_by_natural", rho: float | None = None) -> dict:
    """{dataset: {variant: record}} with the best record per variant under ``mode``."""
    best: dict = {}
    for rec in sorted(records, key=lambda r: (r["dataset"]["name"], r["variant"], r["fingerprint"])):
        slot = best.setdefault(rec["dataset"]["name"], {})
        cur = slot.get(rec["variant"])
        if cur is None or _criterion(rec, mode, rho) > _criterion(cur, mode, rho):
            slot[rec["variant"]] = rec
    return best


def report(records, mode: str = "best_by_natural", rho: float | None = None, variants=None) -> dict:
    """Tables (name -> list of rows, first row is the header) mirroring the paper-style layouts."""
    if mode == "best_by_adv" and rho is None:
        raise ConfigError("best_by_adv needs a radius")
    best = select_best(records, mode, rho)
    order = [v for v in (variants or VARIANTS) if any(v in b for b in best.values())]
    for want in variants or []:
        if not any(want in b for b in best.values()):
            warnings.warn(f"variant {want!r} has no records; omitted", RuntimeWarning)
    tables = {}
    radii = sorted({k for b in best.values() for r in b.values() for k in r["aggregate"]["adv_acc"]}, key=float)

    summary = [["dataset", "variant", "fingerprint", "natural_acc", *[f"adv_acc@{r}" for r in radii],
                "stability", "sparsity", "improvement_captured"]]
    for ds in sorted(best):
        nominal = best[ds].get("nominal")
        for v in order:
            rec = best[ds].get(v)
            if rec is None:
                continue
            agg = rec["aggregate"]
            imp = None
            if nominal is not None and nominal["aggregate"]["natural_acc"] < 1:
                imp = improvement_captured(nominal["aggregate"]["natural_acc"], agg["natural_acc"])
            summary.append([ds, DISPLAY_NAMES[v], rec["fingerprint"], _fmt(agg["natural_acc"]),
                            *[_fmt(agg["adv_acc"].get(r)) for r in radii],
                            _fmt(agg["stability_score"]), _fmt(agg["sparsity"]), _fmt(imp)])
    tables["summary"] = summary

    for ds in sorted(best):
        cols = [v for v in order if v in best[ds]]
        rows = [["Method", *[DISPLAY_NAMES[v] for v in cols]]]
        get = lambda f: [_fmt(f(best[ds][v]["aggregate"])) for v in cols]
        rows.append(["Accuracy", *get(lambda a: a["natural_acc"])])
        for r in radii:
            rows.append([f"Adv. Accuracy ({r})", *get(lambda a, r=r: a["adv_acc"].get(r))])
        rows.append(["Stability", *get(lambda a: a["stability_score"])])
        rows.append(["Sparsity", *get(lambda a: a["sparsity"])])
        tables[f"table_{ds}"] = rows

    wins = {c: {v: 0 for v in order} for c in ("Small", "Medium", "Large")}
    counts = {c: 0 for c in wins}
    for ds in sorted(best):
        any_rec = next(iter(best[ds].values()))
        cat = size_category(any_rec["dataset"]["n"], any_rec["dataset"]["p"])
        counts[cat] += 1
        top = max(_criterion(r, mode, rho) for r in best[ds].values())
        for v, r in best[ds].items():
            if _criterion(r, mode, rho) == top:
                wins[cat][v] += 1
    tables["wins"] = [["size", "n", *[DISPLAY_NAMES[v] for v in order]]] + [
        [c, str(counts[c]), *[str(wins[c][v]) for v in order]] for c in ("Small", "Medium", "Large")]
    return tables


def render_tsv(rows) -> str:
    return "".join("\t".join(r) + "\n" for r in rows)


def render_text(rows) -> str:
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    lines = []
    for j, r in enumerate(rows):
        lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
        if j == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def write_report(tables: dict, out_dir, tag: str) -> list:
    out_dir = Path(out_dir)
    written = []
    for name, rows in tables.items():
        for ext, render in (("tsv", render_tsv), ("txt", render_text)):
            p = out_dir / f"{tag}.{name}.{ext}"
            _atomic_write(p, render(rows))
            written.append(p)
    return written
