"""Time the compiled kernels against the numpy fallback on representative inputs.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""
import argparse
import timeit

import numpy as np

from debus import _kernels_py
from debus.kernels import available_backends


def cases(rng):
    x = rng.random((4, 16, 32, 32)).astype(np.float32)
    cols_shape = (4, 16, 32, 32)
    cols = _kernels_py.im2col(x, 3, 3, 1, 1)
    iou = rng.random((100, 3))
    return {
        "im2col 4x16x32x32 k3": lambda k: k.im2col(x, 3, 3, 1, 1),
        "col2im 4x16x32x32 k3": lambda k: k.col2im(cols, cols_shape, 3, 3, 1, 1),
        "assignment 3x10": lambda k, c=rng.random((3, 10)): k.linear_sum_assignment(c),
        "assignment 10x10": lambda k, c=rng.random((10, 10)): k.linear_sum_assignment(c),
        "assignment 50x50": lambda k, c=rng.random((50, 50)): k.linear_sum_assignment(c),
        "greedy match 100x3": lambda k: k.greedy_match(iou, 0.5),
    }


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeats", type=int, default=50)
    args = p.parse_args(argv)
    backends = available_backends()
    if "cython" not in backends:
        print("compiled backend not built; only the python fallback is available")
    print(f"{'kernel':24s} " + " ".join(f"{name + ' ms':>12s}" for name in backends) + "    speedup")
    for name, fn in cases(np.random.default_rng(0)).items():
        outs = {b: fn(mod) for b, mod in backends.items()}
        ref = outs["python"]
        for b, out in outs.items():
            np.testing.assert_allclose(out, ref, rtol=1e-6, atol=1e-6, err_msg=f"{name}: {b} disagrees")
        times = {b: min(timeit.repeat(lambda: fn(mod), number=1, repeat=args.repeats)) * 1e3
                 for b, mod in backends.items()}
        speed = f"{times['python'] / times['cython']:9.1f}x" if "cython" in times else ""
        print(f"{name:24s} " + " ".join(f"{t:12.3f}" for t in times.values()) + f"  {speed}")


if __name__ == "__main__":
    main()
