"""Time the NumPy and compiled kernel backends on UNet-sized workloads.

    python benchmarks/bench_kernels.py [--repeat 20]

Prints one row per (kernel, backend) with the median wall-clock in
milliseconds, then the end-to-end forward/backward time of the desk-preset
UNet under each backend. Outputs of both backends are compared before timing.
"""

from __future__ import annotations

import argparse
import statistics
import time

import numpy as np

from vpd import kernels
from vpd import tensor as T
from vpd.unet import UNet3D, UNetConfig


def workloads(rng: np.random.Generator) -> dict:
    x3 = rng.standard_normal((1, 8, 16, 32, 32)).astype(np.float32)
    cols_shape = kernels.im2col3d(x3, (3, 3, 3), (1, 1, 1), (1, 1, 1)).shape
    g3 = rng.standard_normal(cols_shape).astype(np.float32)
    x2 = rng.standard_normal((4, 32, 32)).astype(np.float32)
    off = (rng.standard_normal((18, 32, 32)) * 1.5).astype(np.float32)
    dcols = kernels.deform_im2col(x2, off, 3, 1)
    g2 = rng.standard_normal(dcols.shape).astype(np.float32)
    return {
        "im2col3d": lambda: kernels.im2col3d(x3, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        "col2im3d": lambda: kernels.col2im3d(g3, x3.shape, (3, 3, 3), (1, 1, 1), (1, 1, 1)),
        "deform_im2col": lambda: kernels.deform_im2col(x2, off, 3, 1),
        "deform_col2im": lambda: kernels.deform_col2im(g2, x2, off, 3, 1),
    }


def median_ms(fn, repeat: int) -> float:
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return 1e3 * statistics.median(times)


def unet_step(rng: np.random.Generator):
    cfg = UNetConfig(base_channels=8, groups=4, depth=16, height=32, width=32, time_dim=32, context_channels=8)
    net = UNet3D(cfg)
    y = rng.standard_normal((1, 16, 32, 32)).astype(np.float32)
    prior = np.full_like(y, 1 / 16)
    ctx = [T.Tensor(rng.standard_normal((8, 32 // s, 32 // s)).astype(np.float32)) for s in (1, 2, 4)]

    def step():
        net.zero_grad()
        net(y, prior, 500, ctx).sum().backward()
    return step


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled kernels are not built; only the NumPy backend is timed")

    results: dict[str, dict[str, float]] = {}
    outputs: dict[str, dict[str, np.ndarray]] = {}
    for backend in backends:
        kernels.use_backend(backend)
        for name, fn in workloads(np.random.default_rng(0)).items():
            out = fn()
            outputs.setdefault(name, {})[backend] = out if isinstance(out, tuple) else (out,)
            results.setdefault(name, {})[backend] = median_ms(fn, args.repeat)
        results.setdefault("unet fwd+bwd", {})[backend] = median_ms(
            unet_step(np.random.default_rng(0)), max(3, args.repeat // 5))

    for name, by_backend in outputs.items():
        if len(by_backend) == 2:
            err = max(float(np.max(np.abs(a - b)) / (np.max(np.abs(a)) + 1e-12))
                      for a, b in zip(by_backend["python"], by_backend["cython"]))
            if err > 1e-5:
                raise SystemExit(f"{name}: backends disagree (relative error {err:.2e})")

    print(f"{'kernel':<16}" + "".join(f"{b + ' ms':>14}" for b in backends) + ("  speedup" if len(backends) == 2 else ""))
    for name, by_backend in results.items():
        row = f"{name:<16}" + "".join(f"{by_backend[b]:>14.2f}" for b in backends)
        if len(backends) == 2:
            row += f"  {by_backend['python'] / by_backend['cython']:>6.1f}x"
        print(row)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
