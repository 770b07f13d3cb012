"""Compare the numba and numpy convolution backends.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per (shape, pass, backend) with the best wall time, and a
check that both backends agree bit for bit on the forward pass.
"""

import argparse
import time

import numpy as np

from imo.core import kernels

CASES = [
    # name, x shape, w shape, stride, padding, groups
    ("fundus 3x3 s2", (4, 3, 64, 64), (16, 3, 3, 3), 2, 1, 1),
    ("eps 3x3", (4, 16, 64, 64), (16, 16, 3, 3), 1, 1, 1),
    ("eps mix 3x3", (4, 48, 32, 32), (32, 48, 3, 3), 1, 1, 1),
    ("grading dw 3x3", (4, 64, 8, 8), (64, 1, 3, 3), 1, 1, 64),
    ("cmfa spatial 7x7", (4, 2, 8, 8), (1, 2, 7, 7), 1, 3, 1),
    ("oct 3x3x3 s2", (4, 1, 16, 32, 32), (8, 1, 3, 3, 3), 2, 1, 1),
]


def _lift(shape):
    return shape if len(shape) == 5 else shape[:2] + (1,) + shape[2:]


def _triple(v, nd):
    return (v,) * 3 if nd == 5 else (1, v, v) if v != 0 else (0, 0, 0)


def _best(fn, repeat):
    fn()  # warm-up / JIT
    best = float("inf")
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(repeat):
    rng = np.random.default_rng(0)
    rows = []
    for name, xs, ws, s, p, g in CASES:
        x = rng.standard_normal(_lift(xs)).astype(np.float32)
        w = rng.standard_normal(_lift(ws)).astype(np.float32)
        stride = _triple(s, len(xs))
        pad = (p, p, p) if len(xs) == 5 else (0, p, p)
        outs = {}
        for backend in kernels.available_backends():
            kernels.set_backend(backend)
            out, saved = kernels.conv_forward(x, w, stride, pad, g)
            gout = rng.standard_normal(out.shape).astype(np.float32)
            outs[backend] = out
            t_f = _best(lambda: kernels.conv_forward(x, w, stride, pad, g), repeat)
            t_x = _best(lambda: kernels.conv_backward_input(gout, w, saved), repeat)
            t_w = _best(lambda: kernels.conv_backward_weight(gout, saved), repeat)
            rows.append((name, backend, t_f, t_x, t_w))
        same = len(outs) < 2 or np.array_equal(*outs.values())
        rows.append((name, "forward bit-equal", same))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    original = kernels.get_backend()
    try:
        rows = run(args.repeat)
    finally:
        kernels.set_backend(original)
    print(f"{'case':18s} {'backend':8s} {'fwd ms':>9s} {'dx ms':>9s} {'dw ms':>9s}")
    for r in rows:
        if len(r) == 3:
            print(f"{r[0]:18s} {r[1]}: {r[2]}")
        else:
            name, b, tf, tx, tw = r
            print(f"{name:18s} {b:8s} {tf * 1e3:9.2f} {tx * 1e3:9.2f} {tw * 1e3:9.2f}")


if __name__ == "__main__":
    main()
