"""Compare the numba loop kernels with their numpy counterparts.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--quick]

Both implementations are imported directly, so the XSPEC_NO_NUMBA flag does
not matter here. Each row checks that the two agree before timing them.
"""
import argparse
import timeit

import numpy as np

from xspec import kernels


def cases(quick):
    rng = np.random.default_rng(0)
    n_batch = 32 if quick else 64
    n_probe, n_gallery = (100, 80) if quick else (800, 400)
    dim = 128

    x = rng.normal(size=(n_batch, dim))
    labels = np.repeat(np.arange(n_batch // 4), 4).astype(np.int64)
    dist = np.sqrt(kernels.sqdist_numpy(x, x))
    g = rng.normal(size=dist.shape)
    q = rng.normal(size=(n_probe, dim))
    gal = rng.normal(size=(n_gallery, dim))
    order = np.argsort(kernels.sqdist_numpy(q, gal), axis=1, kind="stable").astype(np.int64)
    pid = rng.integers(0, 20, size=n_probe).astype(np.int64)
    gid = rng.integers(0, 20, size=n_gallery).astype(np.int64)
    hits = kernels.hits_numpy(order, pid, gid)
    return [
        ("sqdist (batch)", "sqdist", (x, x)),
        ("sqdist (probe x gallery)", "sqdist", (q, gal)),
        ("pdist_backward", "pdist_backward", (x, dist, g)),
        ("hardest_pairs", "hardest_pairs", (dist, labels)),
        ("hits", "hits", (order, pid, gid)),
        ("first_hit", "first_hit", (hits,)),
        ("average_precision", "average_precision", (hits,)),
    ]


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(u, v) for u, v in zip(a, b))
    return np.allclose(a, b, rtol=1e-12, atol=1e-12, equal_nan=True)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--quick", action="store_true", help="small inputs, for smoke runs")
    args = ap.parse_args(argv)
    number = 3 if args.quick else 20

    print(f"numba available: {kernels.numba is not None}; default binding: "
          f"{'numba' if kernels.USE_NUMBA else 'numpy'}")
    print(f"{'kernel':28s} {'numba [us]':>12s} {'numpy [us]':>12s} {'speedup':>8s}")
    for label, name, inputs in cases(args.quick):
        fast = getattr(kernels, name + "_loops")
        ref = getattr(kernels, name + "_numpy")
        fast(*inputs)   # compile
        if not _same(fast(*inputs), ref(*inputs)):
            raise SystemExit(f"{name}: numba and numpy kernels disagree")
        t_fast = min(timeit.repeat(lambda: fast(*inputs), number=number, repeat=args.repeat)) / number
        t_ref = min(timeit.repeat(lambda: ref(*inputs), number=number, repeat=args.repeat)) / number
        print(f"{label:28s} {t_fast * 1e6:12.1f} {t_ref * 1e6:12.1f} {t_ref / t_fast:8.2f}x")


if __name__ == "__main__":
    main()
