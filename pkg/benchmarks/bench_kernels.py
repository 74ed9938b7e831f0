"""Timing comparison of the compiled attention kernels vs the numpy fallback.

Run from the repository root:

    python3 benchmarks/bench_kernels.py

Shapes mirror real workloads: small rows-vs-cache matrices from streaming
steps, and the square dense pass of a full training episode.
"""

import time

import numpy as np

from streamnav._kernels import get_impl

# (label, n_queries, n_keys, d_model, heads)
CASES = (
    ("stream act row", 1, 260, 64, 4),
    ("stream ctxt block", 16, 260, 64, 4),
    ("dense short episode", 260, 260, 64, 4),
    ("dense long episode", 760, 760, 64, 4),
)


def bench(impl, n_q, n_k, d, heads, repeats):
    rng = np.random.default_rng(0)
    q = rng.normal(size=(n_q, d))
    k = rng.normal(size=(n_k, d))
    v = rng.normal(size=(n_k, d))
    mask = np.tril(np.ones((n_q, n_k), dtype=bool), k=n_k - n_q)
    grad = rng.normal(size=(n_q, d))

    out, probs = impl.attn_fwd(q, k, v, mask.view(np.uint8), heads)
    best_f = min(
        _timeit(lambda: impl.attn_fwd(q, k, v, mask.view(np.uint8), heads))
        for _ in range(repeats))
    best_b = min(
        _timeit(lambda: impl.attn_bwd(grad, q, k, v, probs, heads))
        for _ in range(repeats))
    return best_f, best_b


def _timeit(fn):
    t0 = time.perf_counter()
    fn()
    return time.perf_counter() - t0


def main():
    impls = []
    for name in ("numpy", "cython"):
        try:
            impls.append((name, get_impl(name)))
        except ImportError:
            print(f"{name}: not built, skipping")
    header = f"{'case':>22} {'dir':>4}"
    for name, _ in impls:
        header += f" {name:>12}"
    if len(impls) == 2:
        header += f" {'speedup':>9}"
    print(header)
    for label, n_q, n_k, d, heads in CASES:
        repeats = 5 if n_q < 512 else 3
        results = [bench(impl, n_q, n_k, d, heads, repeats)
                   for _, impl in impls]
        for j, direction in enumerate(("fwd", "bwd")):
            line = f"{label:>22} {direction:>4}"
            for t in results:
                line += f" {t[j] * 1e3:>10.3f}ms"
            if len(results) == 2:
                line += f" {results[0][j] / results[1][j]:>8.2f}x"
            print(line)


if __name__ == "__main__":
    main()
