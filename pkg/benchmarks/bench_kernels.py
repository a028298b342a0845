"""Time the numba and numpy variants of each hot kernel on the same inputs.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both variants are called directly, so the ``BAATBENCH_NUMBA`` flag does not
matter here. The first numba call (compilation) is excluded from timings.
"""
import argparse
import json
import time

import numpy as np

from baatbench import kernels
from baatbench.dataset import SyntheticSpec, generate_synthetic
from baatbench.triggers import build_warp_field


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return min(times)


def cases():
    imgs = generate_synthetic(SyntheticSpec(num_classes=4, per_class_train=16, per_class_test=1,
                                            difficulty="natural")).train.images
    batch = imgs.astype(np.float64)
    field = build_warp_field(8, 32, 32, 0)
    yy, xx = np.mgrid[0:32, 0:32].astype(np.float64)
    ys, xs = yy + field[0] * 0.5, xx + field[1] * 0.5
    rng = np.random.default_rng(0)
    pts = rng.uniform(size=(220, 64))
    groups = np.arange(220) % 11
    q = rng.uniform(size=(500, 64))

    def kuw(impl):
        return lambda: [impl(x, 3) for x in imgs]

    def wrp(impl):
        return lambda: [impl(x, ys, xs) for x in batch]

    def rbf(impl):
        return lambda: impl(q, pts, groups, 11, 0.01)

    return {
        "kuwahara r=3 x64 images": (kuw(kernels.kuwahara_numba), kuw(kernels.kuwahara_numpy)),
        "warp x64 images": (wrp(kernels.warp_numba), wrp(kernels.warp_numpy)),
        "rbf 500 queries x 220 points": (rbf(kernels.rbf_group_sums_numba), rbf(kernels.rbf_group_sums_numpy)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None)
    args = ap.parse_args(argv)
    rows = []
    print(f"{'kernel':32s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}")
    for name, (fast, ref) in cases().items():
        fast()  # compile
        t_nb, t_np = best_of(fast, args.repeat), best_of(ref, args.repeat)
        rows.append({"kernel": name, "numba_s": t_nb, "numpy_s": t_np, "speedup": t_np / t_nb})
        print(f"{name:32s} {1e3 * t_nb:10.2f} {1e3 * t_np:10.2f} {t_np / t_nb:8.1f}x")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as f:
            json.dump(rows, f, indent=1)
    return rows


if __name__ == "__main__":
    main()
