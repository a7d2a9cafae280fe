"""Dataset ingestion, stratified splits and train-only normalization."""
from __future__ import annotations

import csv
import gzip
import logging
import os
import struct
import tempfile
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import pandas as pd

from . import _rng

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CACHE_VERSION = 1
SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    feature_names: list = field(default_factory=list)
    classes: list = field(default_factory=list)
    name: str = "dataset"
    train_idx: np.ndarray | None = None
    val_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None
    mean: np.ndarray | None = None
    sd: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.X.ndim != 2 or len(self.X) != len(self.y):
            raise ValueError(f"X {self.X.shape} and y {self.y.shape} disagree")
        if np.isnan(self.X).any():
            raise ValueError("X contains NaN")
        if not self.classes:
            self.classes = list(range(int(self.y.max()) + 1 if len(self.y) else 0))

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    @property
    def has_split(self) -> bool:
        return self.train_idx is not None

    def part(self, which: str):
        idx = {"train": self.train_idx, "val": self.val_idx, "test": self.test_idx}[which]
        if idx is None:
            raise ValueError(f"dataset {self.name!r} has no {which} split")
        return self.X[idx], self.y[idx]


# --- readers ---------------------------------------------------------------

def load_csv(path, label: str, categorical=(), delimiter: str | None = None, name: str | None = None) -> Dataset:
    """Read a header-row CSV; one-hot categoricals, encode labels by first appearance."""
    path = Path(path)
    if not path.read_text().strip():
        raise ValueError(f"{path}: empty file")
    try:
        df = pd.read_csv(path, sep=delimiter if delimiter else None, engine="python" if delimiter is None else "c",
                         skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise ValueError(f"{path}: empty file") from None
    except (pd.errors.ParserError, csv.Error) as e:
        raise ValueError(f"{path}: cannot parse: {e}") from None
    if df.empty:
        raise ValueError(f"{path}: no data rows")
    if label not in df.columns:
        raise ValueError(f"{path}: label column {label!r} not in {list(df.columns)}")
    categorical = list(categorical)
    missing = [c for c in categorical if c not in df.columns]
    if missing:
        raise ValueError(f"{path}: categorical columns {missing} not found")
    before = len(df)
    df = df.dropna().reset_index(drop=True)
    dropped = before - len(df)
    if dropped:
        log.info("%s: dropped: %d", path.name, dropped)
    numeric = [c for c in df.columns if c != label and c not in categorical]
    for c in numeric:
        conv = pd.to_numeric(df[c], errors="coerce")
        bad = conv.isna()
        if bad.any():
            raise ValueError(f"{path}: non-numeric value {df[c][bad].iloc[0]!r} in numeric column {c!r}")
        df[c] = conv
    codes, uniques = pd.factorize(df[label], sort=False)
    parts, names = [df[numeric].to_numpy(dtype=np.float64)], list(numeric)
    for c in categorical:
        levels = pd.unique(df[c].astype(str))
        onehot = (df[c].astype(str).to_numpy()[:, None] == levels[None, :]).astype(np.float64)
        parts.append(onehot)
        names += [f"{c}={lv}" for lv in levels]
    X = np.hstack(parts) if parts else np.zeros((len(df), 0))
    return Dataset(X, codes, names, [str(u) for u in uniques], name or path.stem, info={"dropped": dropped})


def _open(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise ValueError(f"{path}: bad IDX magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(raw) < 4 + 4 * ndim:
        raise ValueError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    need = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < need:
        raise ValueError(f"{path}: truncated IDX payload ({len(body)} of {need} bytes)")
    return np.frombuffer(body, dtype=np.uint8, count=need).reshape(dims)


def load_idx(images_path, labels_path, name: str = "idx") -> Dataset:
    """Big-endian IDX image/label pair (gzip allowed); pixels scaled to [0, 1] and flattened."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ValueError(f"IDX count mismatch: {len(images)} images vs {len(labels)} labels")
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    ncls = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(X, labels.astype(np.int64), [f"px{i}" for i in range(X.shape[1])], list(range(ncls)), name)


def write_idx(path, array: np.ndarray) -> None:
    """Write uint8 data as IDX (3-d images or 1-d labels); gzip if the name ends in .gz."""
    arr = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}[arr.ndim]
    payload = struct.pack(">I", magic) + struct.pack(f">{arr.ndim}I", *arr.shape) + arr.tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(payload)


def _find(directory: Path, stem: str) -> Path:
    for cand in (stem, stem + ".gz", stem.replace("-idx", ".idx"), stem.replace("-idx", ".idx") + ".gz"):
        if (directory / cand).exists():
            return directory / cand
    raise FileNotFoundError(f"{stem}[.gz] not found in {directory}")


def load_mnist(directory, pool_size: int = 50_000) -> Dataset:
    """Standard MNIST files: the first ``pool_size`` training images form the
    train/validation pool and the 10k test images are the fixed test split."""
    d = Path(directory)
    tr = load_idx(_find(d, "train-images-idx3-ubyte"), _find(d, "train-labels-idx1-ubyte"))
    te = load_idx(_find(d, "t10k-images-idx3-ubyte"), _find(d, "t10k-labels-idx1-ubyte"))
    n = min(pool_size, len(tr.y))
    X = np.vstack([tr.X[:n], te.X])
    y = np.concatenate([tr.y[:n], te.y])
    return Dataset(X, y, tr.feature_names, list(range(10)), "mnist",
                   test_idx=np.arange(n, n + len(te.y)), info={"pool": n})


def make_synthetic(n: int = 500, p: int = 20, informative: int = 5, seed: int = 0, name: str = "synthetic") -> Dataset:
    """Two Gaussian classes that differ only in the first ``informative`` features."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    rng.shuffle(y)
    X = rng.normal(size=(n, p))
    shift = np.zeros(p)
    shift[:informative] = 1.0
    X += np.where(y[:, None] == 1, 0.5, -0.5) * shift
    return Dataset(X, y, [f"f{i}" for i in range(p)], [0, 1], name)


# --- splitting ----------------------------------------------------------------

def _targets(n: int, fractions) -> np.ndarray:
    t = np.array([int(round(f * n)) for f in fractions[:-1]])
    return np.append(t, n - t.sum())


def _stratified(y, fractions, rng):
    """Per-class largest-remainder allocation; every part gets >= 1 of each class."""
    classes = np.unique(y)
    fr = np.asarray(fractions, dtype=float)
    counts = np.array([(y == c).sum() for c in classes])
    want = counts[:, None] * fr[None, :]
    q = np.floor(want).astype(int)
    q = np.maximum(q, 1)
    for i, c in enumerate(counts):
        while q[i].sum() > c:
            j = int(np.argmax(np.where(q[i] > 1, q[i] - want[i], -np.inf)))
            q[i, j] -= 1
        while q[i].sum() < c:
            q[i, int(np.argmax(want[i] - q[i]))] += 1
    totals = _targets(len(y), fractions)
    # move single examples between parts until the overall sizes hit their targets
    while (q.sum(axis=0) != totals).any():
        over = int(np.argmax(q.sum(axis=0) - totals))
        under = int(np.argmin(q.sum(axis=0) - totals))
        gain = (q[:, over] - want[:, over]) - (q[:, under] - want[:, under])
        gain = np.where(q[:, over] > 1, gain, -np.inf)
        i = int(np.argmax(gain))
        if not np.isfinite(gain[i]):
            break
        q[i, over] -= 1
        q[i, under] += 1
    parts = [[] for _ in fractions]
    for i, c in enumerate(classes):
        idx = rng.permutation(np.flatnonzero(y == c))
        cut = np.cumsum(q[i])[:-1]
        for j, chunk in enumerate(np.split(idx, cut)):
            parts[j].append(chunk)
    return [np.sort(np.concatenate(p)) for p in parts]


def _partition(y, fractions, rng):
    counts = np.bincount(y)
    counts = counts[counts > 0]
    if counts.min() < len(fractions):
        warnings.warn(f"a class has only {counts.min()} examples; falling back to an unstratified split", RuntimeWarning)
        perm = rng.permutation(len(y))
        cut = np.cumsum(_targets(len(y), fractions))[:-1]
        return [np.sort(p) for p in np.split(perm, cut)]
    return _stratified(y, fractions, rng)


def split(dataset: Dataset, seed: int, fractions=SPLIT_FRACTIONS) -> Dataset:
    """Seeded stratified train/val/test split (60/20/20 by default)."""
    n = len(dataset.y)
    if n < 5:
        raise ValueError(f"need at least 5 rows to split, got {n}")
    tr, va, te = _partition(dataset.y, fractions, _rng.stream(seed, "split"))
    return replace(dataset, train_idx=tr, val_idx=va, test_idx=te, mean=None, sd=None)


def resplit_train_val(dataset: Dataset, seed: int, val_fraction: float = 0.25) -> Dataset:
    """New train/val partition of every non-test row; the test split is kept."""
    if dataset.test_idx is None:
        raise ValueError("resplit_train_val needs a fixed test split")
    pool = np.setdiff1d(np.arange(len(dataset.y)), dataset.test_idx)
    a, b = _partition(dataset.y[pool], (1 - val_fraction, val_fraction), _rng.stream(seed, "split", 1))
    return replace(dataset, train_idx=pool[a], val_idx=pool[b], mean=None, sd=None)


def normalize(dataset: Dataset, method: str = "zscore") -> Dataset:
    """Scale features with statistics of the training rows only.

    ``zscore`` maps features to (x - mean_train) / sd_train (constant features
    become 0); ``none`` records identity statistics.
    """
    if not dataset.has_split:
        raise ValueError("normalize needs a split (statistics come from the training rows)")
    if method == "none":
        M = dataset.n_features
        return replace(dataset, mean=np.zeros(M), sd=np.ones(M), info={**dataset.info, "scaling": "none"})
    if method != "zscore":
        raise ValueError(f"unknown normalization {method!r}")
    Xtr = dataset.X[dataset.train_idx]
    mean = Xtr.mean(axis=0)
    sd = Xtr.std(axis=0)
    return replace(dataset, X=apply_scaling(dataset.X, mean, sd), mean=mean, sd=sd,
                   info={**dataset.info, "scaling": "zscore"})


def apply_scaling(X, mean, sd) -> np.ndarray:
    safe = np.where(sd > 0, sd, 1.0)
    return np.where(sd > 0, (np.asarray(X) - mean) / safe, 0.0)


# --- cache -------------------------------------------------------------------

def save_cache(dataset: Dataset, path) -> Path:
    """Versioned ``.npz`` snapshot of a dataset including splits and statistics."""
    path = Path(path)
    arrays = {"version": np.array(CACHE_VERSION), "X": dataset.X, "y": dataset.y,
              "feature_names": np.array(dataset.feature_names, dtype=str),
              "classes": np.array([str(c) for c in dataset.classes], dtype=str),
              "name": np.array(dataset.name)}
    for k in ("train_idx", "val_idx", "test_idx", "mean", "sd"):
        v = getattr(dataset, k)
        if v is not None:
            arrays[k] = v
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "wb") as fh:
        np.savez(fh, **arrays)
    os.replace(tmp, path)
    return path


def load_cache(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        if int(z["version"]) != CACHE_VERSION:
            raise ValueError(f"{path}: unsupported cache version {int(z['version'])}")
        opt = {k: z[k] for k in ("train_idx", "val_idx", "test_idx", "mean", "sd") if k in z.files}
        return Dataset(z["X"], z["y"], list(z["feature_names"]), list(z["classes"]), str(z["name"]), **opt)
