"""Times the compiled kernels against the numpy fallback on training-sized inputs.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes follow one ConvLSTM gate convolution of a batch of 16 (41 input plus
32 hidden channels into 4 * 32 gate channels) and the first CNN layer.
"""
import argparse
import timeit

import numpy as np

from heatgrid._kernels import _pykernels

try:
    from heatgrid._kernels import _ckernels
except ImportError:  # extension not built
    _ckernels = None

CASES = {
    "convlstm gate": ((16, 73, 32, 32), (128, 73, 3, 3)),
    "cnn layer 1": ((16, 123, 32, 32), (64, 123, 3, 3)),
    "small direct": ((2, 8, 16, 16), (8, 8, 3, 3)),
}


def kernels(mod, x, w, b):
    B, C, H, W = x.shape
    cols = mod.im2col(x, 3, 3, 1)
    return {
        "im2col": lambda: mod.im2col(x, 3, 3, 1),
        "col2im": lambda: mod.col2im(cols, B, C, H, W, 3, 3, 1),
        "conv2d_direct": lambda: mod.conv2d_direct(x, w, b, 1),
    }


def best_of(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    ap.add_argument("--dtype", choices=["float32", "float64"], default="float32")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    backends = {"numpy": _pykernels}
    if _ckernels is not None:
        backends["cython"] = _ckernels
    print(f"{'case':<16}{'kernel':<15}" + "".join(f"{n:>12}" for n in backends) + ("     speedup" if len(backends) == 2 else ""))
    for case, (xs, ws) in CASES.items():
        x = rng.standard_normal(xs).astype(args.dtype)
        w = rng.standard_normal(ws).astype(args.dtype)
        b = rng.standard_normal(ws[0]).astype(args.dtype)
        table = {name: kernels(mod, x, w, b) for name, mod in backends.items()}
        for kernel in ("im2col", "col2im", "conv2d_direct"):
            # the direct loop is the exact reference path and slow on big inputs
            reps = 1 if kernel == "conv2d_direct" and case != "small direct" else args.repeat
            times = {name: best_of(t[kernel], reps) for name, t in table.items()}
            row = f"{case:<16}{kernel:<15}" + "".join(f"{times[n] * 1e3:>10.2f}ms" for n in backends)
            if len(times) == 2:
                row += f"{times['numpy'] / times['cython']:>11.1f}x"
            print(row)


if __name__ == "__main__":
    main()
