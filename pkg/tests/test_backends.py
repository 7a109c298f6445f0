"""Cross-backend agreement and dispatch behavior.

The compiled and pure-numpy kernels must agree bit for bit, not just to
tolerance: metric accumulation is exact float arithmetic in a fixed order,
so any divergence is a backend bug, and equality is checked with
np.array_equal (NaNs compared positionally).
"""

import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gridcp._backend import (available_backends, backend_name,
                             interval_accumulate, order_stats,
                             pinball_accumulate)

BACKENDS = available_backends()
PAIRS = [("python", "compiled")] if "compiled" in BACKENDS else []


def test_compiled_backend_is_present():
    # the build must have produced the extension; the python fallback is for
    # environments without a compiler, not for this test environment
    assert "compiled" in BACKENDS
    assert backend_name() in BACKENDS


def _random_samples(rng, n, p, nan_cols=True):
    values = rng.standard_normal((n, p))
    # ties, infinities and NaN columns are where sort implementations diverge
    values[:, : p // 4] = rng.integers(-2, 3, size=(n, p // 4))
    if n > 2:
        values[0, p // 4] = np.inf
        values[1, p // 4] = -np.inf
    if nan_cols and p > 2:
        values[n // 2, -1] = np.nan
        values[0, -2] = np.nan
    return values


@pytest.mark.parametrize("pair", PAIRS)
@pytest.mark.parametrize("n,p", [(1, 7), (5, 40), (39, 101), (200, 33)])
def test_order_stats_bitwise_parity(pair, n, p, rng):
    values = _random_samples(rng, n, p)
    ranks = np.arange(1, n + 1, dtype=np.int64)
    a = order_stats(values, ranks, kernels=BACKENDS[pair[0]])
    b = order_stats(values, ranks, kernels=BACKENDS[pair[1]])
    assert np.array_equal(a, b, equal_nan=True)


@pytest.mark.parametrize("pair", PAIRS)
def test_order_stats_sparse_rank_parity(pair, rng):
    # one and two ranks out of hundreds takes the selection path in both
    # backends; results must match the full-sort path bit for bit
    values = _random_samples(rng, 730, 57)
    for ranks in ([695], [1], [365, 730], [37, 365, 695]):
        ranks = np.asarray(ranks, dtype=np.int64)
        a = order_stats(values, ranks, kernels=BACKENDS[pair[0]])
        b = order_stats(values, ranks, kernels=BACKENDS[pair[1]])
        full = order_stats(values, np.arange(1, 731, dtype=np.int64),
                           kernels=BACKENDS[pair[0]])[ranks - 1]
        assert np.array_equal(a, b, equal_nan=True)
        assert np.array_equal(a, full, equal_nan=True)


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_order_stats_adversarial_columns(name, rng):
    # constant, sorted, reverse-sorted and low-cardinality columns
    n = 128
    cols = [np.full(n, 3.25), np.arange(n, dtype=float),
            np.arange(n, dtype=float)[::-1],
            rng.choice([0.0, 1.0, 2.0], size=n),
            np.full(n, -0.0)]
    values = np.ascontiguousarray(np.stack(cols, axis=1))
    ranks = np.array([1, 5, 64, 128], dtype=np.int64)
    got = order_stats(values, ranks, kernels=BACKENDS[name])
    expected = np.sort(values, axis=0)[ranks - 1]
    assert np.array_equal(got, expected)


@given(st.lists(st.floats(allow_nan=False, allow_infinity=False,
                          width=64), min_size=1, max_size=60),
       st.data())
@settings(max_examples=200, deadline=None)
def test_order_stats_matches_python_sorted(sample, data):
    """Brute-force oracle: rank-k order statistic == sorted(sample)[k-1]."""
    n = len(sample)
    k = data.draw(st.integers(min_value=1, max_value=n))
    values = np.array(sample, dtype=np.float64).reshape(n, 1)
    expected = sorted(sample)[k - 1]
    for name, kernels in BACKENDS.items():
        got = order_stats(values, np.array([k], dtype=np.int64), kernels=kernels)
        assert got[0, 0] == expected or (np.isnan(got[0, 0]) and np.isnan(expected)), name


def _fresh_accumulators(p):
    return dict(
        cover_sum=np.zeros(p, dtype=np.int64),
        cover_cnt=np.zeros(p, dtype=np.int64),
        score_sum=np.zeros(p),
        width_sum=np.zeros(p),
        bounded_cnt=np.zeros(p, dtype=np.int64),
    )


@pytest.mark.parametrize("pair", PAIRS)
def test_interval_accumulate_bitwise_parity(pair, rng):
    p = 300
    results = []
    for name in pair:
        acc = _fresh_accumulators(p)
        inner_rng = np.random.Generator(np.random.PCG64(7))
        for _ in range(13):
            lower = inner_rng.standard_normal(p)
            upper = lower + np.abs(inner_rng.standard_normal(p))
            truth = inner_rng.standard_normal(p) * 2.0
            lower[0] = np.nan
            upper[1] = np.inf
            lower[2] = -np.inf
            truth[3] = np.nan
            interval_accumulate(lower, upper, truth, 0.1, kernels=BACKENDS[name], **acc)
        results.append(acc)
    for key in results[0]:
        assert np.array_equal(results[0][key], results[1][key]), key


@pytest.mark.parametrize("pair", PAIRS)
def test_pinball_accumulate_bitwise_parity(pair, rng):
    p = 250
    results = []
    for name in pair:
        qs_sum = np.zeros(p)
        qs_cnt = np.zeros(p, dtype=np.int64)
        inner_rng = np.random.Generator(np.random.PCG64(11))
        for _ in range(9):
            q = inner_rng.standard_normal(p)
            x = inner_rng.standard_normal(p)
            q[0] = np.nan
            x[1] = np.nan
            pinball_accumulate(q, x, 0.95, qs_sum, qs_cnt, kernels=BACKENDS[name])
        results.append((qs_sum, qs_cnt))
    assert np.array_equal(results[0][0], results[1][0])
    assert np.array_equal(results[0][1], results[1][1])


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_nan_column_contract(name):
    values = np.array([[1.0, np.nan], [2.0, 5.0], [3.0, 6.0]])
    out = order_stats(values, np.array([1, 3], dtype=np.int64),
                      kernels=BACKENDS[name])
    assert out[0, 0] == 1.0 and out[1, 0] == 3.0
    assert np.isnan(out[:, 1]).all()


@pytest.mark.parametrize("name", sorted(BACKENDS))
def test_read_only_inputs_accepted(name):
    values = np.arange(12.0).reshape(4, 3)
    values.setflags(write=False)
    out = order_stats(values, np.array([4], dtype=np.int64), kernels=BACKENDS[name])
    assert list(out[0]) == [9.0, 10.0, 11.0]


class TestWrapperValidation:
    def test_rank_out_of_range(self):
        values = np.zeros((3, 2))
        with pytest.raises(ValueError, match="order-statistic rank out of range"):
            order_stats(values, np.array([4], dtype=np.int64))
        with pytest.raises(ValueError, match="order-statistic rank out of range"):
            order_stats(values, np.array([0], dtype=np.int64))

    def test_requires_2d_samples(self):
        with pytest.raises(ValueError, match="2-D"):
            order_stats(np.zeros(3), np.array([1], dtype=np.int64))

    def test_accumulator_dtype_checked(self):
        p = 4
        acc = _fresh_accumulators(p)
        acc["cover_sum"] = np.zeros(p, dtype=np.int32)
        with pytest.raises(ValueError, match="cover_sum"):
            interval_accumulate(np.zeros(p), np.ones(p), np.zeros(p), 0.5, **acc)

    def test_accumulator_length_checked(self):
        acc = _fresh_accumulators(5)
        with pytest.raises(ValueError, match="length"):
            interval_accumulate(np.zeros(4), np.ones(4), np.zeros(4), 0.5, **acc)

    def test_alpha_range_checked(self):
        acc = _fresh_accumulators(2)
        with pytest.raises(ValueError, match="alpha"):
            interval_accumulate(np.zeros(2), np.ones(2), np.zeros(2), 1.0, **acc)


class TestEnvSelection:
    """GRIDCP_BACKEND is read at import, so each case runs a fresh interpreter."""

    def _backend_in_subprocess(self, value):
        env = dict(os.environ)
        if value is None:
            env.pop("GRIDCP_BACKEND", None)
        else:
            env["GRIDCP_BACKEND"] = value
        code = ("import gridcp; print(gridcp.backend_name())")
        return subprocess.run([sys.executable, "-c", code], env=env,
                              capture_output=True, text=True)

    def test_auto_prefers_compiled(self):
        proc = self._backend_in_subprocess(None)
        assert proc.returncode == 0 and proc.stdout.strip() == "compiled"

    def test_forced_python(self):
        proc = self._backend_in_subprocess("python")
        assert proc.returncode == 0 and proc.stdout.strip() == "python"

    def test_forced_compiled(self):
        proc = self._backend_in_subprocess("compiled")
        assert proc.returncode == 0 and proc.stdout.strip() == "compiled"

    def test_unknown_value_rejected(self):
        proc = self._backend_in_subprocess("cuda")
        assert proc.returncode != 0
        assert "GRIDCP_BACKEND" in proc.stderr
