#!/usr/bin/env python3
"""Compare the compiled convolution backend against the numpy fallback.

Runs forward, input-gradient and weight-gradient kernels over the layer
shapes the network actually uses during training (batch of 32 patches
of 16^3 and 32^3), and prints per-shape timings plus totals.

Usage:
    python benchmarks/bench_kernels.py [--batch 32] [--iters 5]

The backend is chosen at import time, so this script runs each backend
in a subprocess with ANATOMAP_KERNELS set accordingly.
"""

import argparse
import json
import os
import subprocess
import sys
import time

# (in_channels, out_channels, side): encoder, decoder and head layers
def layer_shapes(patch_side):
    s = patch_side
    enc = [(1, 8, s), (8, 8, s), (8, 16, s // 2), (16, 16, s // 2),
           (16, 32, s // 4), (32, 32, s // 4), (32, 64, s // 8), (64, 64, s // 8)]
    dec = [(64, 32, s // 16), (32, 32, s // 16), (32, 32, s // 8), (32, 32, s // 8),
           (32, 16, s // 4), (16, 16, s // 4), (16, 8, s // 2), (8, 8, s // 2)]
    return enc + dec


def run_backend(batch, iters, patch_side):
    import numpy as np
    from anatomap.nn import kernels

    rng = np.random.default_rng(0)

    def bench(f, *args):
        f(*args)
        t0 = time.perf_counter()
        for _ in range(iters):
            f(*args)
        return (time.perf_counter() - t0) / iters

    rows = []
    totals = [0.0, 0.0, 0.0]
    for ci, co, s in layer_shapes(patch_side):
        x = rng.standard_normal((batch, ci, s, s, s)).astype(np.float32)
        w = rng.standard_normal((co, ci, 3, 3, 3)).astype(np.float32)
        b = np.zeros(co, np.float32)
        g = rng.standard_normal((batch, co, s, s, s)).astype(np.float32)
        t = [bench(kernels.conv3d_forward, x, w, b, (1, 1, 1), 1),
             bench(kernels.conv3d_backward_input, g, w, (s, s, s), (1, 1, 1), 1),
             bench(kernels.conv3d_backward_weight, x, g, w.shape, (1, 1, 1), 1)]
        for i in range(3):
            totals[i] += t[i]
        gflops = 2 * batch * co * s ** 3 * ci * 27 / 1e9
        rows.append({"shape": f"{ci:3d}->{co:3d} @{s:2d}^3", "gflop": gflops,
                     "fwd_ms": t[0] * 1e3, "bwd_in_ms": t[1] * 1e3,
                     "bwd_w_ms": t[2] * 1e3})
    return {"backend": kernels.active_backend(), "rows": rows,
            "totals_ms": [v * 1e3 for v in totals]}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--iters", type=int, default=5)
    ap.add_argument("--patch", type=int, default=16, choices=(16, 32))
    ap.add_argument("--_child", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()

    if args._child:
        print(json.dumps(run_backend(args.batch, args.iters, args.patch)))
        return

    results = {}
    for backend in ("compiled", "numpy"):
        env = dict(os.environ, ANATOMAP_KERNELS=backend)
        try:
            out = subprocess.run(
                [sys.executable, __file__, "--_child", "--batch", str(args.batch),
                 "--iters", str(args.iters), "--patch", str(args.patch)],
                env=env, capture_output=True, text=True, check=True)
        except subprocess.CalledProcessError as e:
            print(f"{backend}: unavailable ({e.stderr.strip().splitlines()[-1]})")
            continue
        results[backend] = json.loads(out.stdout)

    print(f"batch {args.batch}, {args.patch}^3 patches, mean of {args.iters} runs\n")
    header = f"{'layer':>16s} {'GFLOP':>7s}"
    for b in results:
        header += f" | {b:^24s}"
    print(header)
    sub = " " * 24
    for b in results:
        sub += " |   fwd   bwd_in  bwd_w  "
    print(sub)
    n_rows = len(next(iter(results.values()))["rows"])
    for i in range(n_rows):
        any_row = next(iter(results.values()))["rows"][i]
        line = f"{any_row['shape']:>16s} {any_row['gflop']:7.3f}"
        for b in results:
            r = results[b]["rows"][i]
            line += f" | {r['fwd_ms']:6.1f} {r['bwd_in_ms']:6.1f} {r['bwd_w_ms']:6.1f} "
        print(line)
    line = f"{'TOTAL':>16s} {'':7s}"
    for b in results:
        t = results[b]["totals_ms"]
        line += f" | {t[0]:6.1f} {t[1]:6.1f} {t[2]:6.1f} "
    print(line)
    if len(results) == 2:
        ct = sum(results["compiled"]["totals_ms"])
        nt = sum(results["numpy"]["totals_ms"])
        print(f"\ncompiled backend is {nt / ct:.2f}x the numpy fallback "
              f"over the training layer mix")


if __name__ == "__main__":
    main()
