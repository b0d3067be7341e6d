#!/usr/bin/env python3
"""Benchmark the compiled kernel backend against the NumPy reference backend.

Runs each hot kernel on protocol-realistic shapes, reports per-call wall time
for both backends plus the speedup, and verifies that the two backends return
bitwise-identical float32 results on the benchmarked inputs.

Usage:
    python benchmarks/bench_kernels.py [--repeats N] [--batch N]
"""
from __future__ import annotations

import argparse
import time

import numpy as np

from mhflid.kernels import reference

try:
    from mhflid.kernels import _fastconv as compiled
except ImportError:  # pragma: no cover - exercised only on broken builds
    compiled = None


def _time(fn, args, repeats: int) -> float:
    fn(*args)  # warm-up (and output for the agreement check)
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def _cases(batch: int):
    rng = np.random.default_rng(0)

    def f32(*shape):
        return rng.standard_normal(shape).astype(np.float32)

    # conv on a 16x16 single-channel image with a 16-filter 3x3 kernel, and a
    # deeper 16->32 layer on an 8x8 map: the two layer geometries that
    # dominate a training round
    x1, w1 = f32(batch, 1, 16, 16), f32(16, 1, 3, 3)
    x2, w2 = f32(batch, 16, 8, 8), f32(32, 16, 3, 3)
    g1 = f32(batch, 16, 16, 16)
    g2 = f32(batch, 32, 8, 8)
    xp, kp = f32(batch, 16, 16, 16), 2
    _, idx = reference.maxpool2d_forward(xp, kp, kp)
    gp = f32(batch, 16, 8, 8)
    xt, wt = f32(batch, 16, 8, 8), f32(16, 8, 2, 2)
    gt = f32(batch, 8, 16, 16)

    return [
        ("conv2d_forward 1->16 k3 16x16", "conv2d_forward", (x1, w1, 1, 1)),
        ("conv2d_forward 16->32 k3 8x8", "conv2d_forward", (x2, w2, 1, 1)),
        ("conv2d_grad_input 16->32", "conv2d_grad_input", (g2, w2, 1, 1, 8, 8)),
        ("conv2d_grad_weight 16->32", "conv2d_grad_weight", (g2, x2, 1, 1, 3, 3)),
        ("conv2d_grad_input 1->16", "conv2d_grad_input", (g1, w1, 1, 1, 16, 16)),
        ("conv2d_grad_weight 1->16", "conv2d_grad_weight", (g1, x1, 1, 1, 3, 3)),
        ("maxpool2d_forward k2 16x16", "maxpool2d_forward", (xp, kp, kp)),
        ("maxpool2d_backward k2", "maxpool2d_backward", (gp, idx, 16, 16, kp, kp)),
        ("convt2d_forward 16->8 k2 s2", "convt2d_forward", (xt, wt, 2)),
        ("convt2d_grad_input 16->8", "convt2d_grad_input", (gt, wt, 2)),
        ("convt2d_grad_weight 16->8", "convt2d_grad_weight", (gt, xt, 2, 2, 2)),
    ]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=20, help="timing repeats per kernel (best-of)")
    parser.add_argument("--batch", type=int, default=8, help="batch size for all cases")
    args = parser.parse_args()

    if compiled is None:
        print("compiled backend not importable; showing the NumPy reference only")

    header = f"{'kernel':<34} {'python':>10} {'compiled':>10} {'speedup':>8}  match"
    print(header)
    print("-" * len(header))
    mismatches = 0
    for label, name, call_args in _cases(args.batch):
        ref_fn = getattr(reference, name)
        t_ref = _time(ref_fn, call_args, args.repeats)
        if compiled is None:
            print(f"{label:<34} {t_ref * 1e3:>9.3f}ms {'-':>10} {'-':>8}")
            continue
        fast_fn = getattr(compiled, name)
        t_fast = _time(fast_fn, call_args, args.repeats)
        out_ref, out_fast = ref_fn(*call_args), fast_fn(*call_args)
        if not isinstance(out_ref, tuple):
            out_ref, out_fast = (out_ref,), (out_fast,)
        same = all(np.array_equal(a, b) for a, b in zip(out_ref, out_fast))
        mismatches += not same
        print(
            f"{label:<34} {t_ref * 1e3:>9.3f}ms {t_fast * 1e3:>9.3f}ms {t_ref / t_fast:>7.2f}x  {'yes' if same else 'NO'}"
        )
    if mismatches:
        print(f"\n{mismatches} kernel(s) disagree between backends")
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
