"""Compare the compiled kernels against the pure-Python fallback.

Run from the repo root after installing:

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes mirror the default pipeline: a 72x88 fine grid (6336 points), a
39-member ensemble reduced to 10 quantile levels, a 730-record calibration
stack ranked once per coverage level, and per-record metric folds.
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from gridcp._backend import available_backends, order_stats

POINTS = 72 * 88


def _time(fn, repeat: int) -> float:
    best = float("inf")
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - start)
    return best


def _cases(rng):
    ensemble = rng.standard_normal((39, POINTS))
    member_ranks = np.array([2, 6, 10, 14, 18, 22, 26, 30, 34, 38], dtype=np.int64)
    calibration = np.abs(rng.standard_normal((730, POINTS)))
    cal_rank = np.array([695], dtype=np.int64)
    lower = rng.standard_normal(POINTS)
    upper = lower + np.abs(rng.standard_normal(POINTS)) + 0.1
    truth = rng.standard_normal(POINTS)

    def make_fold(kernels):
        cover_sum = np.zeros(POINTS, dtype=np.int64)
        cover_cnt = np.zeros(POINTS, dtype=np.int64)
        score_sum = np.zeros(POINTS)
        width_sum = np.zeros(POINTS)
        bounded_cnt = np.zeros(POINTS, dtype=np.int64)

        def fold():
            kernels.interval_accumulate(lower, upper, truth, 0.1, cover_sum,
                                        cover_cnt, score_sum, width_sum, bounded_cnt)

        return fold

    def make_pinball(kernels):
        qs_sum = np.zeros(POINTS)
        qs_cnt = np.zeros(POINTS, dtype=np.int64)

        def fold():
            kernels.pinball_accumulate(lower, truth, 0.95, qs_sum, qs_cnt)

        return fold

    return [
        ("order_stats 39x6336 -> 10 levels",
         lambda k: (lambda: k.order_stats(ensemble, member_ranks))),
        ("order_stats 730x6336 -> 1 rank",
         lambda k: (lambda: k.order_stats(calibration, cal_rank))),
        ("interval fold 6336 pts", make_fold),
        ("pinball fold 6336 pts", make_pinball),
    ]


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=7,
                        help="timing repetitions per case (best is kept)")
    args = parser.parse_args()
    backends = available_backends()
    rng = np.random.Generator(np.random.PCG64(20240817))
    print(f"backends: {', '.join(backends)}")
    print(f"{'case':<36} " + " ".join(f"{name:>12}" for name in backends)
          + "  speedup")
    for label, build in _cases(rng):
        times = {}
        for name, kernels in backends.items():
            times[name] = _time(build(kernels), args.repeat)
        cells = " ".join(f"{times[name] * 1e3:>10.3f}ms" for name in backends)
        if "compiled" in times and "python" in times:
            ratio = f"{times['python'] / times['compiled']:>8.1f}x"
        else:
            ratio = "     n/a"
        print(f"{label:<36} {cells}  {ratio}")
    # cross-check while we are here: both backends must agree bit for bit
    sample = rng.standard_normal((101, 257))
    ranks = np.arange(1, 102, dtype=np.int64)
    results = [order_stats(sample, ranks, kernels=k) for k in backends.values()]
    for other in results[1:]:
        if not np.array_equal(results[0], other):
            raise SystemExit("backend results disagree")
    print("cross-check: backends agree")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
