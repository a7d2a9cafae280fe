"""Materialize MNIST as gzipped IDX files without direct internet access.

The ``mnist-hub`` wheel on PyPI bundles the classic ``mnist.pkl.gz``
(50k/10k/10k split, pixels stored as byte / 256). This script fetches the
wheel with pip, recovers the original bytes exactly and writes the four
standard IDX files (train = first 60k images in the original order).

    python scripts/fetch_mnist.py data/mnist
"""
import argparse
import gzip
import io
import pickle
import subprocess
import sys
import tempfile
import zipfile
from pathlib import Path

import numpy as np

from holistic.data import write_idx

WHEEL = "mnist-hub==0.1.4"
MEMBER = "mnist/data/mnist.pkl.gz"


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("out", type=Path, nargs="?", default=Path("data/mnist"))
    ap.add_argument("--wheel", type=Path, help="use an already downloaded wheel")
    args = ap.parse_args(argv)

    with tempfile.TemporaryDirectory() as tmp:
        wheel = args.wheel
        if wheel is None:
            subprocess.run([sys.executable, "-m", "pip", "download", "--no-deps", "-q", WHEEL, "-d", tmp], check=True)
            wheel = next(Path(tmp).glob("mnist_hub-*.whl"))
        with zipfile.ZipFile(wheel) as z:
            blob = z.read(MEMBER)
    parts = pickle.load(gzip.open(io.BytesIO(blob)), encoding="latin1")
    (trX, trY), (vaX, vaY), (teX, teY) = parts

    def to_bytes(x):
        b = np.round(np.asarray(x, dtype=np.float64) * 256.0)
        if np.abs(b / 256.0 - x).max() > 0 or b.max() > 255:
            raise ValueError("pixel values are not byte / 256")
        return b.astype(np.uint8).reshape(-1, 28, 28)

    train_images = np.concatenate([to_bytes(trX), to_bytes(vaX)])
    train_labels = np.concatenate([trY, vaY]).astype(np.uint8)
    args.out.mkdir(parents=True, exist_ok=True)
    write_idx(args.out / "train-images-idx3-ubyte.gz", train_images)
    write_idx(args.out / "train-labels-idx1-ubyte.gz", train_labels)
    write_idx(args.out / "t10k-images-idx3-ubyte.gz", to_bytes(teX))
    write_idx(args.out / "t10k-labels-idx1-ubyte.gz", np.asarray(teY, dtype=np.uint8))
    print(f"wrote MNIST IDX files to {args.out}")


if __name__ == "__main__":
    main()
