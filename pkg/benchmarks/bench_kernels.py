#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times each hot kernel (forward + backward) under both backends, interleaved
and best-of-N so slow drift in machine speed (shared CPUs, frequency
scaling) does not skew the comparison, then times one full training step of
the default model per backend. Run after `python setup.py build_ext
--inplace` (or an editable install); without the extension only the python
backend is reported.

The compiled backend intentionally re-exports the transcendental-bound
kernels (gelu, softmax forward) from the numpy reference, so those rows
should read ~1.0x; its wins are the fused arithmetic loops.
"""

import argparse
import time

import numpy as np

from flmae import _kernels
from flmae.federation import sample_batch_masks
from flmae.mae import MaeArchitecture, MaeModel, init_params


def best_timing(fn, repeats, batches=5):
    """Best mean-over-`repeats` across batches; robust to machine-speed drift."""
    fn()
    best = float("inf")
    for _ in range(batches):
        t0 = time.perf_counter()
        for _ in range(repeats):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeats)
    return best


def kernel_cases(backend, rows, cols):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(rows, cols))
    dy = rng.normal(size=(rows, cols))
    gamma, beta = rng.normal(size=cols), rng.normal(size=cols)
    y = backend.softmax_fwd(x)
    _, mean, rstd = backend.layernorm_fwd(x, gamma, beta, 1e-5)
    return {
        "gelu_fwd": lambda: backend.gelu_fwd(x),
        "gelu_bwd": lambda: backend.gelu_bwd(x, dy),
        "softmax_fwd": lambda: backend.softmax_fwd(x),
        "softmax_bwd": lambda: backend.softmax_bwd(y, dy),
        "layernorm_fwd": lambda: backend.layernorm_fwd(x, gamma, beta, 1e-5),
        "layernorm_bwd": lambda: backend.layernorm_bwd(x, gamma, mean, rstd, dy),
    }


def bench_train_step(backend_name, batch, repeats):
    previous = _kernels.active
    _kernels.active = _kernels.get_backend(backend_name)
    try:
        arch = MaeArchitecture()
        model = MaeModel(arch)
        rng = np.random.default_rng(1)
        params = init_params(arch, rng)
        images = rng.uniform(size=(batch, arch.image_size, arch.image_size, arch.channels))
        masks = sample_batch_masks(rng, batch, arch.n_patches, arch.n_masked)
        return best_timing(lambda: model.loss_and_grad(params, images, masks),
                           repeats, batches=3)
    finally:
        _kernels.active = previous


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--rows", type=int, default=512)
    parser.add_argument("--cols", type=int, default=128)
    parser.add_argument("--batch", type=int, default=32)
    parser.add_argument("--repeats", type=int, default=50)
    args = parser.parse_args()

    names = _kernels.available_backends()
    print(f"backends available: {names} (active: {_kernels.backend_name()})")
    cases = {name: kernel_cases(_kernels.get_backend(name), args.rows, args.cols)
             for name in names}

    print(f"\nkernel timings, {args.rows}x{args.cols} float64, "
          f"best mean of {args.repeats} over 5 interleaved batches:")
    header = f"{'kernel':<16}" + "".join(f"{n:>14}" for n in names)
    if len(names) == 2:
        header += f"{'speedup':>10}"
    print(header)
    for kernel in cases[names[0]]:
        timing = {}
        for _ in range(2):  # interleave so drift hits both backends alike
            for name in names:
                t = best_timing(cases[name][kernel], args.repeats, batches=3)
                timing[name] = min(t, timing.get(name, float("inf")))
        row = f"{kernel:<16}" + "".join(f"{timing[n] * 1e6:>12.1f}us" for n in names)
        if len(names) == 2:
            row += f"{timing['python'] / timing['compiled']:>9.2f}x"
        print(row)

    print(f"\nfull training step (batch {args.batch}, default architecture):")
    steps = {}
    for name in names:
        steps[name] = bench_train_step(name, args.batch, max(10, args.repeats // 5))
        print(f"  {name:<10} {steps[name] * 1e3:8.2f} ms/step")
    if len(names) == 2:
        print(f"  end-to-end speedup: {steps['python'] / steps['compiled']:.2f}x")


if __name__ == "__main__":
    main()
