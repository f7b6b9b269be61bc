"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat N] [--rows N]

Prints one line per kernel with the best-of-N time for each backend, the
speedup, and whether the outputs are bit-identical.
"""
import argparse
import time

import numpy as np

from mbcnet.kernels import _pykernels, embedding_bag, embedding_bag_grad, gather_csr, rank_auc

try:
    from mbcnet.kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t)
    return min(times), out


def same(a, b):
    if isinstance(a, tuple):
        return all(same(x, y) for x, y in zip(a, b))
    return np.array_equal(np.asarray(a), np.asarray(b))


def workloads(rows, rng):
    vocab, dim = 10_000, 8
    lengths = rng.integers(0, 6, rows)
    off = np.zeros(rows + 1, dtype=np.int64)
    np.cumsum(lengths, out=off[1:])
    ids = rng.integers(0, vocab, int(off[-1]))
    table = rng.normal(size=(vocab, dim))
    grad = rng.normal(size=(rows, dim))
    pick = rng.permutation(rows)[: rows // 2]
    scores = rng.integers(0, 1000, rows * 4) / 1000.0
    labels = rng.integers(0, 2, rows * 4)
    return {
        "embedding_bag": lambda impl: embedding_bag(table, ids, off, impl=impl),
        "embedding_bag_grad": lambda impl: embedding_bag_grad(grad, ids, off, vocab, impl=impl),
        "gather_csr": lambda impl: gather_csr(off, ids, pick, impl=impl),
        "rank_auc": lambda impl: rank_auc(scores, labels, impl=impl),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--rows", type=int, default=50_000)
    args = p.parse_args(argv)
    if _ckernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'kernel':20s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}  identical")
    for name, run in workloads(args.rows, rng).items():
        t_py, out_py = best_of(lambda: run(_pykernels), args.repeat)
        if _ckernels is None:
            print(f"{name:20s} {t_py * 1e3:10.3f} {'-':>10s} {'-':>8s}  -")
            continue
        t_c, out_c = best_of(lambda: run(_ckernels), args.repeat)
        print(f"{name:20s} {t_py * 1e3:10.3f} {t_c * 1e3:10.3f} {t_py / t_c:7.1f}x  {same(out_py, out_c)}")


if __name__ == "__main__":
    main()
