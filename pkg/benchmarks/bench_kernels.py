"""Time the numba kernels against the pure-numpy fallbacks.

Run from the repository root:

    python3 benchmarks/bench_kernels.py [--repeats N]

Each kernel is timed on shapes matching real training workloads.  The
numba column includes a warm-up call so JIT compilation is not billed.
"""

import argparse
import os
import time

import numpy as np


def _timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def _workloads():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((4, 48, 64, 64)).astype(np.float32)
    cols = rng.standard_normal((4, 48 * 9, 64 * 64)).astype(np.float32)
    sites = rng.standard_normal((4096, 8)).astype(np.float32)
    entries = rng.standard_normal((256, 8)).astype(np.float32)
    return [
        ("im2col 4x48x64x64 k3", lambda be: be.im2col(x, 3, 3, 1, 1)),
        ("col2im 4x48x64x64 k3", lambda be: be.col2im(cols, x.shape, 3, 3, 1, 1)),
        ("nearest_codebook 4096x8 B=256", lambda be: be.nearest_codebook(sites, entries)),
    ]


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()

    from idfcr import backend

    results = {}
    for flag, label in (("0", "numpy"), ("1", "numba")):
        os.environ["IDFCR_NUMBA"] = flag
        backend._reset()
        try:
            name = backend.backend_name()
        except Exception as exc:
            print(f"skipping {label}: {exc}")
            continue
        assert name == label, (name, label)
        for title, call in _workloads():
            call(backend)  # warm-up (numba JIT compile)
            results.setdefault(title, {})[label] = _timeit(
                lambda: call(backend), args.repeats
            )
    os.environ.pop("IDFCR_NUMBA", None)
    backend._reset()

    width = max(len(t) for t in results) + 2
    print(f"{'kernel':<{width}}{'numpy':>12}{'numba':>12}{'speedup':>10}")
    for title, row in results.items():
        np_t = row.get("numpy")
        nb_t = row.get("numba")
        np_s = f"{np_t * 1e3:9.2f} ms" if np_t else "-"
        nb_s = f"{nb_t * 1e3:9.2f} ms" if nb_t else "-"
        ratio = f"{np_t / nb_t:9.2f}x" if np_t and nb_t else "-"
        print(f"{title:<{width}}{np_s:>12}{nb_s:>12}{ratio:>10}")


if __name__ == "__main__":
    main()
