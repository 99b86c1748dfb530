"""Time the compiled and numpy kernel backends on network-sized tensors.

    python benchmarks/bench_kernels.py [--repeat N]

Prints one line per (kernel, shape, backend) with the best wall time of
``N`` runs and the speedup of the compiled path. Outputs of the two backends
are compared before timing.
"""

import argparse
import time

import numpy as np

from spinecascade import kernels

SHAPES = [(1, 32, 32, 32, 8), (1, 16, 16, 16, 16), (2, 8, 8, 8, 32)]


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(shape, rng):
    x = rng.standard_normal(shape).astype(np.float32)
    cols = kernels.im2col(x, 3, 1, 1)
    pooled, arg = kernels.maxpool2_forward(x)
    g_cols = rng.standard_normal(cols.shape).astype(np.float32)
    g_pool = rng.standard_normal(pooled.shape).astype(np.float32)
    return {
        "im2col": lambda: kernels.im2col(x, 3, 1, 1),
        "col2im": lambda: kernels.col2im(g_cols, x.shape, 3, 1, 1),
        "maxpool_fwd": lambda: kernels.maxpool2_forward(x),
        "maxpool_bwd": lambda: kernels.maxpool2_backward(g_pool, arg),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    print(f"backends: {', '.join(backends)}")
    for shape in SHAPES:
        for name in ("im2col", "col2im", "maxpool_fwd", "maxpool_bwd"):
            timings, outputs = {}, {}
            for b in backends:
                previous = kernels.use_backend(b)
                try:
                    fn = cases(shape, np.random.default_rng(1))[name]
                    outputs[b] = fn()
                    timings[b] = best_of(fn, args.repeat)
                finally:
                    kernels.use_backend(previous)
            ref = outputs["python"]
            for b, out in outputs.items():
                for u, v in zip(ref if isinstance(ref, tuple) else (ref,), out if isinstance(out, tuple) else (out,)):
                    np.testing.assert_allclose(np.asarray(u), np.asarray(v), rtol=1e-5, atol=1e-5)
            line = f"{name:12s} {str(shape):22s} " + "  ".join(f"{b}={t * 1e3:8.2f} ms" for b, t in timings.items())
            if "cython" in timings:
                line += f"  speedup={timings['python'] / timings['cython']:.1f}x"
            print(line)


if __name__ == "__main__":
    main()
