"""Benchmark the compiled indexing kernels against the pure-Python reference.

Usage: python benchmarks/bench_kernels.py [N]

Times fnv1a64 and activation_indices_batch on N random states (default
200_000) for both backends and verifies their outputs are identical.
"""
from __future__ import annotations

import sys
import time

import numpy as np

from cvdispatch import kernels
from cvdispatch._pykernels import BACKEND as PY_BACKEND
from cvdispatch import _pykernels
from cvdispatch.index import IndexConfig
from cvdispatch.rngs import substream


def _time(fn, repeats: int = 3) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def main() -> int:
    n = int(sys.argv[1]) if len(sys.argv) > 1 else 200_000
    cfg = IndexConfig()
    rng = substream(0, "bench")
    xs = rng.uniform(-50_000, 50_000, n)
    ys = rng.uniform(-50_000, 50_000, n)
    ts = rng.integers(0, 86_400, n)

    backends = [("python", _pykernels)]
    if kernels.BACKEND != PY_BACKEND:
        backends.append((kernels.BACKEND, kernels))
    else:
        print("compiled extension not available; timing reference only")

    payload = bytes(range(48))
    results = {}
    for name, mod in backends:
        t_hash = _time(lambda m=mod: [m.fnv1a64(payload, 7) for _ in range(20_000)])
        args = cfg._kernel_args()
        t_idx = _time(
            lambda m=mod: m.activation_indices_batch(xs, ys, ts, *args)
        )
        idx = mod.activation_indices_batch(xs, ys, ts, *args)
        results[name] = (t_hash, t_idx, idx)
        print(f"{name:>8}: fnv1a64 20k calls {t_hash * 1e3:8.1f} ms | "
              f"activation_indices {n} states {t_idx * 1e3:8.1f} ms")

    if len(results) == 2:
        (a, b) = results.values()
        same = np.array_equal(a[2], b[2])
        print(f"outputs identical: {same}")
        print(f"speedup: fnv1a64 {a[0] / b[0]:.1f}x | "
              f"activation_indices {a[1] / b[1]:.1f}x")
        if not same:
            return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
