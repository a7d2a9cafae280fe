"""Adam training with periodic validation and best-checkpoint selection."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import _rng
from .data import Dataset, normalize, resplit_train_val
from .diffcore import PRECISIONS, Graph, backward
from .gates import expected_l0
from .losses import LossSpec, compose
from .metrics import MetricBundle, evaluate, natural_accuracy, stability_score
from .network import Classifier, MLPParams, bind, glorot_init

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    hidden_sizes: tuple = (128, 64)
    learning_rate: float = 1e-3
    batch_size: int = 128
    max_iterations: int = 50_000
    validation_period: int = 1000
    dropout: float = 0.0
    loss: LossSpec = field(default_factory=LossSpec)
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if self.learning_rate <= 0 or self.batch_size < 1 or self.validation_period < 1:
            raise ValueError("learning_rate, batch_size and validation_period must be positive")
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be >= 0")
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden sizes must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")

    @property
    def weight_decay(self) -> float:
        return self.loss.weight_decay

    def resolved(self) -> dict:
        """Hyperparameters that determine a run, excluding the seed."""
        return {
            "hidden_sizes": list(self.hidden_sizes),
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "max_iterations": self.max_iterations,
            "validation_period": self.validation_period,
            "dropout": self.dropout,
            "precision": self.precision,
            "loss": self.loss.resolved(),
        }

    def fingerprint(self) -> str:
        blob = json.dumps(self.resolved(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


# --- optimizer ---------------------------------------------------------------

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, weight_decay: float = 0.0,
              decay: set | None = None):
    """One bias-corrected Adam update, in place.

    ``weight_decay * p`` is added to the gradient of every name in ``decay``
    (an l2 penalty of weight_decay / 2 * ||p||^2).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
        if params[name].shape != g.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {params[name].shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if weight_decay and decay is not None and name in decay:
            g = g + weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return params, state


# --- fitting -------------------------------------------------------------------

@dataclass
class Checkpoint:
    params: MLPParams
    theta: float
    iteration: int
    val_acc: float
    metrics: MetricBundle | None = None


@dataclass
class History:
    rows: list = field(default_factory=list)

    FIELDS = ("iteration", "train_loss", "val_acc", "expected_l0", "theta")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


def _batches(n: int, batch_size: int, rng):
    while True:
        perm = rng.permutation(n)
        for s in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield perm[s:s + batch_size]


def fit(dataset: Dataset, cfg: TrainConfig) -> tuple[Checkpoint, History]:
    """Train on ``dataset.train``; validate every ``validation_period`` iterations.

    Returns the checkpoint with the best validation accuracy (earliest on ties)
    and the training history.
    """
    if not dataset.has_split:
        raise ValueError("fit needs a split dataset")
    dtype = PRECISIONS[cfg.precision]
    spec = cfg.loss
    Xtr, ytr = dataset.part("train")
    Xva, yva = dataset.part("val")
    Xtr = Xtr.astype(dtype)
    sizes = (dataset.n_features, *cfg.hidden_sizes, dataset.n_classes)
    params = glorot_init(sizes, cfg.seed, gated=spec.sparse, dtype=dtype)
    arrays = params.arrays()
    decay = {k for k in arrays if not k.startswith("log_alpha")}
    theta = np.array(0.0, dtype=dtype)
    if spec.stable:
        arrays["theta"] = theta
    state = AdamState()
    batch_rng = _rng.stream(cfg.seed, "batches")
    noise_rng = _rng.stream(cfg.seed, "gates")
    batches = _batches(len(ytr), cfg.batch_size, batch_rng)
    gate_cfg = spec.gate if spec.sparse else None
    hist = History()

    def validate(it, train_loss):
        acc = natural_accuracy(Classifier.from_params(params, gate_cfg, cfg.precision), Xva, yva)
        hist.rows.append({
            "iteration": it,
            "train_loss": float(train_loss) if train_loss is not None else float("nan"),
            "val_acc": acc,
            "expected_l0": expected_l0(params.log_alpha, spec.gate) if params.gated else float(params.n_weights),
            "theta": float(theta),
        })
        return acc

    best = Checkpoint(params.copy(), float(theta), 0, validate(0, None))
    running, count = 0.0, 0
    for it in range(1, cfg.max_iterations + 1):
        idx = next(batches)
        g = Graph(cfg.precision)
        bound = bind(g, params)
        th = g.param(theta, name="theta") if spec.stable else None
        root = compose(spec, g, Xtr[idx], ytr[idx], bound, theta=th, rng=noise_rng,
                       dropout_rate=cfg.dropout, mode="train")
        loss = float(g.value(root))
        if not np.isfinite(loss):
            raise FloatingPointError(f"non-finite training loss at iteration {it}")
        grads = backward(g, root)
        named = {k: grads[nid] for k, nid in bound.all_nodes().items()}
        if th is not None:
            named["theta"] = grads[th]
        adam_step(arrays, named, state, cfg.learning_rate, spec.weight_decay, decay)
        running += loss
        count += 1
        if it % cfg.validation_period == 0 or it == cfg.max_iterations:
            acc = validate(it, running / count)
            running, count = 0.0, 0
            if acc > best.val_acc:
                best = Checkpoint(params.copy(), float(theta), it, acc)
            log.debug("it=%d val_acc=%.4f", it, acc)
    return best, hist


# --- multi-seed --------------------------------------------------------------

@dataclass
class SeedRun:
    seed: int
    checkpoint: Checkpoint
    metrics: MetricBundle
    test_predictions: np.ndarray
    history: History
    wall_clock: float


@dataclass
class EnsembleResult:
    runs: list
    aggregate: dict
    stability_score: float | None


def prepare(dataset: Dataset, seed: int, scaling: str = "zscore", val_fraction: float = 0.25) -> Dataset:
    """Per-seed train/val resplit (test fixed) followed by train-only normalization."""
    return normalize(resplit_train_val(dataset, seed, val_fraction), scaling)


def run_seed(dataset: Dataset, cfg: TrainConfig, seed: int, radii=(), scaling: str = "zscore",
             val_fraction: float = 0.25, **attack_kw) -> SeedRun:
    start = time.perf_counter()
    ds = prepare(dataset, seed, scaling, val_fraction)
    c = replace(cfg, seed=seed)
    ckpt, hist = fit(ds, c)
    Xte, yte = ds.part("test")
    gate_cfg = c.loss.gate if c.loss.sparse else None
    bundle, pred = evaluate(ckpt.params, Xte, yte, radii, gate_cfg, c.precision, seed=seed, **attack_kw)
    ckpt.metrics = bundle
    return SeedRun(seed, ckpt, bundle, pred, hist, time.perf_counter() - start)


def aggregate(bundles, predictions, n_classes: int) -> tuple[dict, float | None]:
    agg = {
        "natural_acc": float(np.mean([b.natural_acc for b in bundles])),
        "sparsity": float(np.mean([b.sparsity for b in bundles])),
        "adv_acc": {r: float(np.mean([b.adv_acc[r] for b in bundles])) for r in sorted(bundles[0].adv_acc)},
    }
    stab = stability_score(np.vstack(predictions), n_classes) if len(predictions) >= 2 else None
    agg["stability_score"] = stab
    return agg, stab


def multi_seed(dataset: Dataset, cfg: TrainConfig, seeds, radii=(), scaling: str = "zscore",
               val_fraction: float = 0.25, **attack_kw) -> EnsembleResult:
    """Independent fits per seed on a shared test split, plus mean metrics and the stability score."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("multi_seed needs at least one seed")
    runs = [run_seed(dataset, cfg, s, radii, scaling, val_fraction, **attack_kw) for s in seeds]
    agg, stab = aggregate([r.metrics for r in runs], [r.test_predictions for r in runs], dataset.n_classes)
    for r in runs:
        r.metrics.stability_score = stab
    return EnsembleResult(runs, agg, stab)
