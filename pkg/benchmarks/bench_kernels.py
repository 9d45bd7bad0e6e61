"""Compare the compiled and pure-Python kernel backends.

Run with ``python3 benchmarks/bench_kernels.py [--repeat N]``. Each kernel is
timed on both backends with identical inputs, outputs are checked for
equality, and a table of best-of-N wall times and speedups is printed.
"""
import argparse
import timeit

import numpy as np

from u2airway import kernels
from u2airway.tensor import Tensor, backward, conv2d, no_grad, reduce_sum
from u2airway.u2net import U2NetSpec, init_params, u2net_forward


def _cases(rng):
    x = rng.standard_normal((2, 16, 64, 64))
    cols = kernels.im2col(x, 3, 1, 2, 2, 64, 64)
    pooled = rng.standard_normal((2, 16, 65, 65))
    _, arg = kernels.maxpool2x2(pooled)
    g = rng.standard_normal((2, 16, 33, 33))
    mask = rng.random((48, 96, 96)) < 0.3
    w = Tensor(rng.standard_normal((16, 16, 3, 3)), requires_grad=True)
    xt = Tensor(x, requires_grad=True)
    spec = U2NetSpec.preset("toy")
    store = init_params(spec, seed=0)
    slice_ = rng.standard_normal((1, 2, 64, 64))

    def conv_step():
        out = conv2d(xt, w, padding=2, dilation=2)
        backward(reduce_sum(out))
        return out.data

    def net_forward():
        with no_grad():
            return u2net_forward(slice_, spec, store.copy(), training=False).fuse.data

    return {
        "im2col 2x16x64x64 k3 d2": lambda: kernels.im2col(x, 3, 1, 2, 2, 64, 64),
        "col2im 2x16x64x64 k3 d2": lambda: kernels.col2im(cols, x.shape, 3, 1, 2, 2, 64, 64),
        "maxpool 2x16x65x65": lambda: kernels.maxpool2x2(pooled)[0],
        "maxpool backward": lambda: kernels.maxpool2x2_backward(g, arg, pooled.shape),
        "label 48x96x96 26-conn": lambda: kernels.label_raw(mask, 26)[0],
        "label 48x96x96 6-conn": lambda: kernels.label_raw(mask, 6)[0],
        "conv2d fwd+bwd": conv_step,
        "toy net forward 64x64": net_forward,
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "compiled" not in backends:
        print("compiled backend not built; only the python backend is available")
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':28s}" + "".join(f"{b:>14s}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for name, fn in cases.items():
        times, outs = {}, {}
        for b in backends:
            with kernels.use_backend(b):
                outs[b] = fn()
                times[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        row = f"{name:28s}" + "".join(f"{times[b] * 1e3:12.2f}ms" for b in backends)
        if len(backends) > 1:
            same = np.array_equal(outs["compiled"], outs["python"])
            row += f"{times['python'] / times['compiled']:11.1f}x" + ("" if same else "  MISMATCH")
        print(row)


if __name__ == "__main__":
    main()
