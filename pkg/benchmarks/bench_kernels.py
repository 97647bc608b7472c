"""Timing comparison of the compiled and pure-numpy kernel flavours.

Runs every hot kernel at production-like shapes with identical inputs,
reports the median wall time per call for both flavours plus the largest
output disagreement. Usage:

    python3 benchmarks/bench_kernels.py [--repeats 30]

The compiled column needs numba; without it only the numpy flavour runs.
"""

import argparse
import statistics
import time

import numpy as np

from fxppo import kernels
from fxppo.kernels import ACT_RELU, ACT_SOFTMAX, HAS_NUMBA


def time_call(fn, args, repeats):
    fn(*args)  # warmup (and jit compile for the _nb flavour)
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn(*args)
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def max_diff(a, b):
    if isinstance(a, tuple):
        return max(max_diff(x, y) for x, y in zip(a, b))
    return float(np.max(np.abs(np.asarray(a, dtype=np.float64) - b)))


def scenarios():
    rng = np.random.default_rng(0)

    x_rows = rng.normal(size=(32, 128))
    w = rng.normal(size=(128, 64)) * 0.05
    b = rng.normal(size=64) * 0.05
    y_rows, pre_rows = kernels.dense_rows_forward_py(x_rows, w, b, ACT_RELU)
    dy = rng.normal(size=(32, 64))
    yield "dense_rows_forward  (32x128->64 relu)", "dense_rows_forward", (
        x_rows, w, b, ACT_RELU,
    )
    yield "dense_rows_backward (32x128->64 relu)", "dense_rows_backward", (
        x_rows, pre_rows, y_rows, w, ACT_RELU, dy,
    )

    x_gemm = rng.normal(size=(32, 80))
    w2 = rng.normal(size=(80, 128)) * 0.05
    b2 = rng.normal(size=128) * 0.05
    y_gemm, pre_gemm = kernels.dense_gemm_forward_py(x_gemm, w2, b2, ACT_SOFTMAX)
    dy2 = rng.normal(size=(32, 128))
    yield "dense_gemm_forward  (32x80->128 softmax)", "dense_gemm_forward", (
        x_gemm, w2, b2, ACT_SOFTMAX,
    )
    yield "dense_gemm_backward (32x80->128 softmax)", "dense_gemm_backward", (
        x_gemm, pre_gemm, y_gemm, w2, ACT_SOFTMAX, dy2,
    )

    T, nin, nh = 32, 80, 128
    xs = rng.normal(size=(T, nin))
    resets = np.zeros(T, dtype=np.uint8)
    resets[0] = 1
    h0 = np.zeros(nh)
    c0 = np.zeros(nh)
    wx = rng.normal(size=(nin, 4 * nh)) * 0.05
    wh = rng.normal(size=(nh, 4 * nh)) * 0.05
    bl = rng.normal(size=4 * nh) * 0.05
    fwd = kernels.lstm_seq_forward_py(xs, resets, h0, c0, wx, wh, bl)
    hs, cs, tanhc, gates, hprev, cprev, _, _ = fwd
    dh_out = rng.normal(size=(T, nh))
    dtail = np.zeros(nh)
    yield "lstm_seq_forward    (T=32, 80->128)", "lstm_seq_forward", (
        xs, resets, h0, c0, wx, wh, bl,
    )
    yield "lstm_seq_backward   (T=32, 80->128)", "lstm_seq_backward", (
        xs, resets, gates, cs, tanhc, hprev, cprev, wx, wh, dh_out, dtail, dtail,
    )

    pts = rng.normal(size=(5000, 12))
    cents = rng.normal(size=(12, 12))
    labels, _ = kernels.kmeans_assign_py(pts, cents)
    yield "kmeans_assign       (5000x12, k=12)", "kmeans_assign", (pts, cents)
    yield "kmeans_update       (5000x12, k=12)", "kmeans_update", (pts, labels, 12)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()

    header = f"{'kernel':44s} {'numpy':>12s} {'numba':>12s} {'speedup':>9s} {'max diff':>10s}"
    print(header)
    print("-" * len(header))
    for label, base, call_args in scenarios():
        py = getattr(kernels, base + "_py")
        t_py = time_call(py, call_args, args.repeats)
        if HAS_NUMBA:
            nb = getattr(kernels, base + "_nb")
            t_nb = time_call(nb, call_args, args.repeats)
            diff = max_diff(py(*call_args), nb(*call_args))
            print(
                f"{label:44s} {t_py * 1e6:9.1f} us {t_nb * 1e6:9.1f} us "
                f"{t_py / t_nb:8.1f}x {diff:10.2e}"
            )
        else:
            print(f"{label:44s} {t_py * 1e6:9.1f} us {'-':>12s} {'-':>9s} {'-':>10s}")


if __name__ == "__main__":
    main()
