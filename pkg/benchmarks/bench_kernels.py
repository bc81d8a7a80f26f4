"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--number 200]

Each row reports the best per-call time of both backends and the speed-up.
Shapes are the ones the trend experiments hit most often.
"""
import argparse
import timeit

import numpy as np

from mmfuse import _pykernels

try:
    from mmfuse import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    att = rng.standard_normal((2 * 16 * 48, 48))      # heads x batch x n rows of attention scores
    hid = rng.standard_normal((16 * 48, 32))          # layer-norm input, batch x n rows of width d
    g = rng.standard_normal(hid.shape)
    a = rng.integers(0, 50, size=24).astype(np.int64)  # token ids of a candidate/reference pair
    b = rng.integers(0, 50, size=30).astype(np.int64)
    y = _pykernels.softmax_rows(att)
    xhat, rstd = _pykernels.layer_norm_rows(hid, 1e-5)
    return {
        "softmax (1536x48)": lambda k: k.softmax_rows(att),
        "softmax backward": lambda k: k.softmax_rows_backward(y, att),
        "layer norm (768x32)": lambda k: k.layer_norm_rows(hid, 1e-5),
        "layer norm backward": lambda k: k.layer_norm_rows_backward(xhat, rstd, g),
        "lcs (24 vs 30 ids)": lambda k: k.lcs_length(a, b),
        "interp matrix (16->48)": lambda k: k.interp_matrix(16, 48),
    }


def best(fn, number, repeat):
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--number", type=int, default=200)
    args = ap.parse_args()
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation` first")
        return 1
    print(f"{'kernel':<24}{'python us':>12}{'cython us':>12}{'speed-up':>10}")
    for name, call in cases(np.random.default_rng(0)).items():
        tp = best(lambda: call(_pykernels), args.number, args.repeat)
        tc = best(lambda: call(_ckernels), args.number, args.repeat)
        print(f"{name:<24}{tp * 1e6:>12.2f}{tc * 1e6:>12.2f}{tp / tc:>9.1f}x")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
