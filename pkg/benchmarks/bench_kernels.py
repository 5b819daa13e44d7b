"""Compare the compiled kernels with the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--end-to-end]

Kernel timings import both implementations directly. ``--end-to-end``
also times one desk-scale training epoch per backend in a subprocess,
because the backend is chosen once at import.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from maarcert import _kernels_py

try:
    from maarcert import _ckernels
except ImportError:
    _ckernels = None

EPOCH_SNIPPET = """
import time
from maarcert import kernels
from maarcert.data import load_digits_split
from maarcert.maar import StagePlan, TrainingConfig, train
from maarcert.nn import init_network
tr, _ = load_digits_split(1000, 500, 0)
net = init_network([("conv", 8, 3, 2, 1), ("conv", 8, 3, 1, 1), ("dense", 32), ("dense", 10)], (1, 8, 8), 0)
cfg = TrainingConfig(eps=0.05, stage_plan=[StagePlan(0, 1)], learning_rate=0.003)
t = time.perf_counter()
train(net, (tr.X, tr.y), cfg)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def cases(rng):
    # shapes seen in desk training: batch 100, conv1 on the input, conv2 on conv1's output,
    # and the zonotope bound computation on a 100-example batch with 64 generators
    x1 = rng.uniform(size=(100, 1, 8, 8))
    w1 = rng.normal(size=(8, 1, 3, 3))
    x2 = rng.normal(size=(100, 8, 4, 4))
    w2 = rng.normal(size=(8, 8, 3, 3))
    b = np.zeros(8)
    g1 = rng.normal(size=(100, 8, 4, 4))
    g2 = rng.normal(size=(100, 8, 4, 4))
    c = rng.normal(size=(100, 128))
    gens = rng.normal(size=(100, 64, 128))
    return [
        ("conv1 forward", lambda k: k.conv2d_forward(x1, w1, b, 2, 1)),
        ("conv1 backward", lambda k: k.conv2d_backward(g1, x1, w1, 2, 1)),
        ("conv2 forward", lambda k: k.conv2d_forward(x2, w2, b, 1, 1)),
        ("conv2 backward", lambda k: k.conv2d_backward(g2, x2, w2, 1, 1)),
        ("conv2 backward (input only)", lambda k: k.conv2d_backward(g2, x2, w2, 1, 1, True, False)),
        ("zono_bounds", lambda k: k.zono_bounds(c, gens)),
    ]


def time_call(fn, repeat):
    return min(timeit.repeat(fn, number=10, repeat=repeat)) / 10


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--end-to-end", action="store_true")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; nothing to compare", file=sys.stderr)
        return 1
    rng = np.random.default_rng(0)
    print(f"{'kernel':<30}{'compiled ms':>12}{'python ms':>12}{'speedup':>9}")
    for name, fn in cases(rng):
        tc = time_call(lambda: fn(_ckernels), args.repeat) * 1e3
        tp = time_call(lambda: fn(_kernels_py), args.repeat) * 1e3
        print(f"{name:<30}{tc:>12.3f}{tp:>12.3f}{tp / tc:>8.2f}x")
    if args.end_to_end:
        for pure in ("0", "1"):
            env = dict(os.environ, MAARCERT_PURE_PYTHON=pure)
            out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True, text=True, check=True)
            backend, secs = out.stdout.split()
            print(f"one training epoch, {backend:<9} backend: {float(secs):.2f} s")
    return 0


if __name__ == "__main__":
    sys.exit(main())
