"""Time one training step (loss, gradients, Adam) on each available backend.

    python benchmarks/bench_kernels.py --n-s 256 1024 2048 --dtype float32 float64
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from persianrug import kernels
from persianrug.datagen import DataConfig, sample_batch
from persianrug.model import ToyModel


def time_step(n_s: int, ratio: float, p: float, dtype: str, backend: str,
              batch: int, repeats: int) -> float:
    """Median seconds per training step over ``repeats`` steps after one warm-up."""
    n_d = max(1, int(ratio * n_s))
    model = ToyModel.initialize(n_s, n_d, seed=0)
    params = [np.ascontiguousarray(model.W_in.T, dtype=dtype),
              np.ascontiguousarray(model.W_out, dtype=dtype),
              (model.b - 0.1).astype(dtype)]
    grads = [np.empty_like(q) for q in params]
    m1 = [np.zeros_like(q).reshape(-1) for q in params]
    m2 = [np.zeros_like(q).reshape(-1) for q in params]
    cfg = DataConfig(p, n_s, seed=1)
    xs = [sample_batch(cfg, batch, index=i, dtype=np.dtype(dtype)) for i in range(repeats + 1)]
    times = []
    for t, x in enumerate(xs, start=1):
        start = time.perf_counter()
        kernels.loss_grad(*params, x, *grads, backend=backend)
        for q, g, a, v in zip(params, grads, m1, m2):
            kernels.adam_update(q.reshape(-1), g.reshape(-1), a, v, 1e-3, 0.9, 0.999, 1e-8, t, backend=backend)
        times.append(time.perf_counter() - start)
    return statistics.median(times[1:])


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n-s", type=int, nargs="+", default=[256, 1024, 2048])
    ap.add_argument("--ratio", type=float, default=0.25)
    ap.add_argument("--p", type=float, default=0.05)
    ap.add_argument("--dtype", nargs="+", default=["float32", "float64"])
    ap.add_argument("--batch", type=int, default=1024)
    ap.add_argument("--repeats", type=int, default=20)
    args = ap.parse_args(argv)

    backends = list(kernels.AVAILABLE)
    print(f"backends: {', '.join(backends)}; p={args.p}, r={args.ratio}, batch={args.batch}")
    header = f"{'n_s':>6} {'dtype':>8}" + "".join(f" {b + ' ms':>13}" for b in backends)
    if len(backends) == 2:
        header += f" {'speedup':>8}"
    print(header)
    for n_s in args.n_s:
        for dtype in args.dtype:
            ms = [1e3 * time_step(n_s, args.ratio, args.p, dtype, b, args.batch, args.repeats) for b in backends]
            line = f"{n_s:>6} {dtype:>8}" + "".join(f" {v:>13.2f}" for v in ms)
            if len(ms) == 2:
                line += f" {ms[1] / ms[0]:>7.2f}x"
            print(line)


if __name__ == "__main__":
    main()
