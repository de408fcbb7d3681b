"""Numba vs numpy kernel timings, plus one training epoch under each backend.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--skip-epoch]

Kernel timings call both implementations directly. The epoch timing runs
a subprocess per backend because the backend is fixed at import time
(``SASREC_NUMBA``).
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from sasrec import kernels

EPOCH_SNIPPET = """
import time
from sasrec import kernels
from sasrec.data import five_core_filter, split_leave_one_out
from sasrec.model import ModelConfig
from sasrec.synthetic import planted_markov
from sasrec.trainer import TrainConfig, measure_epoch_time
sp = split_leave_one_out(five_core_filter(planted_markov(600, 300, 60, seed=0)[0]))
mc = ModelConfig(num_items=sp.num_items, d=50, n=50)
tc = TrainConfig(seed=0)
measure_epoch_time(sp, [50], mc, tc)  # warm-up / jit compile
print(kernels.backend(), measure_epoch_time(sp, [50], mc, tc)[0][1])
"""


def make_inputs(rng):
    B, n, d, items = 128, 200, 50, 3000
    x = rng.standard_normal((B, n, n)).astype(np.float32)
    mask = np.tril(np.ones((n, n), dtype=bool))[None].repeat(B, axis=0)
    mask[:, :, : n // 3] = False
    mask |= np.eye(n, dtype=bool)[None]
    y = kernels.masked_softmax_numpy(x, mask)
    gy = rng.standard_normal(y.shape).astype(np.float32)
    h = rng.standard_normal((B * n, d)).astype(np.float32)
    alpha = np.ones(d, np.float32)
    beta = np.zeros(d, np.float32)
    _, xhat, rstd = kernels.layer_norm_forward_numpy(h, alpha, beta, 1e-8)
    idx = rng.integers(0, items + 1, size=B * n)
    sets = [np.unique(rng.integers(1, items + 1, size=150)) for _ in range(6000)]
    indptr = np.concatenate([[0], np.cumsum([len(s) for s in sets])])
    flat = np.concatenate(sets)
    cand = rng.integers(1, items + 1, size=(6000, 101))
    rows = np.arange(6000)
    scores = rng.standard_normal((6000, 101)).astype(np.float32)
    valid = np.ones((6000, 101), dtype=bool)
    return {
        "masked_softmax": (x, mask),
        "softmax_backward": (y, gy),
        "layer_norm_forward": (h, alpha, beta, 1e-8),
        "layer_norm_backward": (rng.standard_normal(h.shape).astype(np.float32), xhat, rstd, alpha),
        "scatter_add_rows": (idx, h, items + 1),
        "isin_rows": (cand, rows, indptr, flat),
        "pessimistic_ranks": (scores, valid),
    }


def timeit(fn, args, repeat):
    fn(*args)  # compile / warm caches
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def epoch_times():
    out = {}
    for flag in ("0", "1"):
        env = {**os.environ, "SASREC_NUMBA": flag}
        res = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env,
                             capture_output=True, text=True, check=True)
        name, secs = res.stdout.split()[-2:]
        out[name] = float(secs)
    return out


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--skip-epoch", action="store_true")
    args = ap.parse_args(argv)
    if not kernels.NUMBA_KERNELS:
        sys.exit("numba is not installed; nothing to compare")

    inputs = make_inputs(np.random.default_rng(0))
    print(f"{'kernel':<22}{'numpy ms':>11}{'numba ms':>11}{'speedup':>9}")
    for name, args_ in inputs.items():
        t_np = timeit(kernels.NUMPY_KERNELS[name], args_, args.repeat)
        t_nb = timeit(kernels.NUMBA_KERNELS[name], args_, args.repeat)
        print(f"{name:<22}{t_np * 1e3:>11.2f}{t_nb * 1e3:>11.2f}{t_np / t_nb:>8.1f}x")

    if not args.skip_epoch:
        t = epoch_times()
        print(f"\none epoch (600 users, n=50, d=50): numpy {t['numpy']:.2f}s, numba {t['numba']:.2f}s, "
              f"speedup {t['numpy'] / t['numba']:.2f}x")


if __name__ == "__main__":
    main()
