"""Time the numba and pure-numpy kernels side by side.

    python benchmarks/bench_kernels.py [--repeat 20]

Shapes mirror training: robust_l1 at a 128-example batch with 10 classes and
784 inputs (MNIST), corner_max at M = 16. Also times one full HDL training
step with each backend selected through HOLISTIC_DISABLE_NUMBA.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from holistic import kernels

STEP = """
import numpy as np, timeit
from holistic.diffcore import Graph, backward
from holistic.losses import LossSpec, compose
from holistic.network import bind, glorot_init
rng = np.random.default_rng(0)
p = glorot_init((784, 128, 64, 10), 0, gated=True, dtype=np.float32)
x = rng.random((128, 784), dtype=np.float32); y = rng.integers(0, 10, 128)
spec = LossSpec.variant("hdl", rho=1e-2, lam=1e-6)
def step():
    g = Graph("f32"); b = bind(g, p); th = g.param(np.float32(0.0))
    backward(g, compose(spec, g, x, y, b, theta=th, rng=rng))
step()
print(min(timeit.repeat(step, number=1, repeat={repeat})) * 1e3)
"""


def best_ms(fn, repeat):
    fn()  # compile / warm up
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    J = rng.normal(size=(128, 10, 784)).astype(np.float32)
    y = rng.integers(0, 10, 128)
    g = rng.normal(size=(128, 10)).astype(np.float32)
    c = rng.normal(size=16)

    rows = [
        ("robust_l1", lambda: kernels.robust_l1_numpy(J, y), lambda: kernels.robust_l1_numba(J, y)),
        ("robust_l1_grad", lambda: kernels.robust_l1_grad_numpy(J, y, g), lambda: kernels.robust_l1_grad_numba(J, y, g)),
        ("corner_max M=16", lambda: kernels.corner_max_numpy(c, 0.1), lambda: kernels.corner_max_numba(c, 0.1)),
    ]
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for name, f_np, f_nb in rows:
        a, b = best_ms(f_np, args.repeat), best_ms(f_nb, args.repeat)
        print(f"{name:<18}{a:>10.3f}{b:>10.3f}{a / b:>8.1f}x")

    step = {}
    for label, flag in (("numpy", "1"), ("numba", "0")):
        env = {**os.environ, "HOLISTIC_DISABLE_NUMBA": flag}
        out = subprocess.run([sys.executable, "-c", STEP.format(repeat=max(3, args.repeat // 4))], env=env,
                             capture_output=True, text=True, check=True)
        step[label] = float(out.stdout.strip())
    print(f"{'hdl train step':<18}{step['numpy']:>10.3f}{step['numba']:>10.3f}{step['numpy'] / step['numba']:>8.1f}x")


if __name__ == "__main__":
    main()
