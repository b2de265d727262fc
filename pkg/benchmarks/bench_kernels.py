"""Compare the compiled im2col/col2im kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import time

import numpy as np

from cfsl import _kernels_py as py

try:
    from cfsl import _kernels as cy
except ImportError:
    cy = None

SHAPES = [(64, 32, 32, 1, 16), (64, 16, 16, 16, 32), (64, 8, 8, 32, 64), (64, 4, 4, 64, 64)]


def best(fn, repeat):
    ts = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t)
    return min(ts)


def conv_fwd_bwd(mod, x, w):
    n, h, wd, c = x.shape
    cols = mod.im2col(x, 3)
    out = cols @ w.reshape(-1, w.shape[-1])
    g = np.ones_like(out)
    gcols = g @ w.reshape(-1, w.shape[-1]).T
    mod.col2im(gcols, x.shape, 3)
    return cols.T @ g


def train_step_time(mod, repeat):
    """One full-loss step of the default model on a batch of 64, kernels swapped to ``mod``."""
    from cfsl import kernels
    from cfsl.losses import LossWeights, generate_permutation_set, total_loss
    from cfsl.model import ModelState

    saved = kernels.im2col, kernels.col2im
    kernels.im2col, kernels.col2im = mod.im2col, mod.col2im
    try:
        rng = np.random.default_rng(0)
        m = ModelState.init(seed=0, conv_init="he")
        perms = generate_permutation_set(4, 24, 0)
        x, y = rng.random((64, 32, 32, 1)), rng.integers(20, size=64)

        def step():
            loss, _ = total_loss(x, y, m, LossWeights(), perms, np.random.default_rng(1))
            loss.backward()

        return best(step, repeat)
    finally:
        kernels.im2col, kernels.col2im = saved


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    if cy is None:
        print("compiled kernels not built; numpy timings only")
    print(f"{'shape (N,H,W,Cin,Cout)':28s} {'op':10s} {'numpy ms':>9s} {'cython ms':>10s} {'speedup':>8s}")
    for n, h, w_, c, co in SHAPES:
        x = rng.standard_normal((n, h, w_, c))
        wt = rng.standard_normal((3, 3, c, co))
        cols = py.im2col(x, 3)
        ops = {
            "im2col": lambda m: m.im2col(x, 3),
            "col2im": lambda m: m.col2im(cols, x.shape, 3),
            "conv f+b": lambda m: conv_fwd_bwd(m, x, wt),
        }
        for name, op in ops.items():
            tp = best(lambda: op(py), args.repeat) * 1e3
            if cy is not None:
                assert np.array_equal(op(py), op(cy))
                tc = best(lambda: op(cy), args.repeat) * 1e3
                print(f"{str((n, h, w_, c, co)):28s} {name:10s} {tp:9.3f} {tc:10.3f} {tp / tc:7.2f}x")
            else:
                print(f"{str((n, h, w_, c, co)):28s} {name:10s} {tp:9.3f} {'-':>10s} {'-':>8s}")
    reps = max(1, args.repeat // 5)
    tp = train_step_time(py, reps) * 1e3
    if cy is not None:
        tc = train_step_time(cy, reps) * 1e3
        print(f"{'default model, batch 64':28s} {'train step':10s} {tp:9.1f} {tc:10.1f} {tp / tc:7.2f}x")
    else:
        print(f"{'default model, batch 64':28s} {'train step':10s} {tp:9.1f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
