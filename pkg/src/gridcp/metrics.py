"""Calibration and sharpness metrics for interval and quantile forecasts.

Per grid point, metrics are averaged over test records first; spatial
averages over valid points come second.  Interval endpoints are inclusive
for coverage.  Intervals with an infinite endpoint count as covering but are
excluded from score and width averages, with the exclusion count reported,
since their width is undefined.

The interval (Winkler) score at miscoverage alpha is width plus 2/alpha
times the distance by which the truth escapes the interval; the quantile
(pinball) score at level gamma is gamma * (x - q) for under-prediction and
(1 - gamma) * (q - x) otherwise.  The two are linked by the identity
IS = (2/alpha) * (QS_{alpha/2} + QS_{1-alpha/2}), which the tests use as an
algebraic cross-check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._backend import interval_accumulate, pinball_accumulate
from .conformal import IntervalGridSet
from .grids import GridField, masks_equal
from .levels import LevelScheme, level_fraction, level_key
from .quantiles import QuantileGridSet


def _as_prob(name: str, value) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {value}")
    return value


def interval_score(lower, upper, x, alpha):
    """Winkler score of the interval [lower, upper] against outcome x.

    Elementwise over broadcastable arrays; scalars in, scalar out.  Bounds
    must satisfy lower <= upper (crossing pairs are collapsed upstream).
    """
    alpha = _as_prob("alpha", alpha)
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if np.any(lower > upper):
        raise ValueError("interval bounds out of order")
    coef = 2.0 / alpha
    width = upper - lower
    score = width + np.where(x < lower, coef * (lower - x), 0.0) \
                  + np.where(x > upper, coef * (x - upper), 0.0)
    return float(score) if score.ndim == 0 else score


def quantile_score(q, x, gamma):
    """Pinball loss of quantile forecast q at level gamma against outcome x."""
    gamma = _as_prob("gamma", gamma)
    q = np.asarray(q, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    loss = np.where(x > q, gamma * (x - q), (1.0 - gamma) * (q - x))
    return float(loss) if loss.ndim == 0 else loss


@dataclass(frozen=True, eq=False)
class MetricReport:
    """Grid-wise and aggregate evaluation results.

    Stacks are indexed like their level tuples; aggregate tuples hold the
    spatial means over valid grid points.  ``unbounded_excluded`` counts
    (record, point) pairs dropped from the score/width averages per level.
    """

    coverage_levels: tuple
    quantile_levels: tuple
    picp_grids: np.ndarray
    mean_picp: tuple[float, ...]
    pct_deviation: tuple[float, ...]
    is_grids: np.ndarray
    mean_is: tuple[float, ...]
    iw_grids: np.ndarray
    mean_iw: tuple[float, ...]
    qs_grids: np.ndarray
    mean_qs: tuple[float, ...]
    unbounded_excluded: tuple[int, ...]
    record_count: int
    valid_point_count: int
    mask: np.ndarray | None = None

    def _cov_index(self, level) -> int:
        frac = level_fraction(level)
        try:
            return self.coverage_levels.index(frac)
        except ValueError:
            raise ValueError(f"coverage level {level_key(frac)} not present") from None

    def _q_index(self, level) -> int:
        frac = level_fraction(level)
        try:
            return self.quantile_levels.index(frac)
        except ValueError:
            raise ValueError(f"quantile level {level_key(frac)} not present") from None

    def picp_grid(self, level) -> np.ndarray:
        return self.picp_grids[self._cov_index(level)]

    def picp(self, level) -> float:
        return self.mean_picp[self._cov_index(level)]

    def deviation(self, level) -> float:
        return self.pct_deviation[self._cov_index(level)]

    def mean_interval_score(self, level) -> float:
        return self.mean_is[self._cov_index(level)]

    def mean_interval_width(self, level) -> float:
        return self.mean_iw[self._cov_index(level)]

    def mean_quantile_score(self, level) -> float:
        return self.mean_qs[self._q_index(level)]

    def to_summary_dict(self) -> dict:
        """JSON-ready aggregate summary (no grids)."""
        coverage = {}
        for i, cov in enumerate(self.coverage_levels):
            coverage[level_key(cov)] = {
                "picp": self.mean_picp[i],
                "pct_deviation": self.pct_deviation[i],
                "mean_interval_score": self.mean_is[i],
                "mean_interval_width": self.mean_iw[i],
                "unbounded_excluded": self.unbounded_excluded[i],
            }
        quantile = {
            level_key(g): self.mean_qs[i] for i, g in enumerate(self.quantile_levels)
        }
        return {
            "record_count": self.record_count,
            "valid_points": self.valid_point_count,
            "coverage": coverage,
            "quantile_score": quantile,
        }


class MetricAccumulator:
    """Streaming per-record metric accumulation over a fixed grid.

    Records are folded in one at a time so a full test set never needs to be
    resident; the fold order is the record order, giving bit-reproducible
    sums for a fixed ordering.
    """

    def __init__(self, scheme: LevelScheme, shape: tuple[int, int],
                 mask: np.ndarray | None = None):
        self.scheme = scheme
        self.shape = tuple(shape)
        self.mask = None if mask is None else np.asarray(mask, dtype=bool)
        p = self.shape[0] * self.shape[1]
        levels = scheme.coverage_levels
        self._cover_sum = [np.zeros(p, dtype=np.int64) for _ in levels]
        self._cover_cnt = [np.zeros(p, dtype=np.int64) for _ in levels]
        self._score_sum = [np.zeros(p) for _ in levels]
        self._width_sum = [np.zeros(p) for _ in levels]
        self._bounded_cnt = [np.zeros(p, dtype=np.int64) for _ in levels]
        self._qs_sum = [np.zeros(p) for _ in scheme.quantile_levels]
        self._qs_cnt = [np.zeros(p, dtype=np.int64) for _ in scheme.quantile_levels]
        self.record_count = 0

    def add_record(self, intervals: IntervalGridSet, quantiles: QuantileGridSet,
                   truth: GridField):
        if intervals.shape != self.shape or truth.shape != self.shape \
                or quantiles.shape != self.shape:
            raise ValueError("record grid dimensions do not match the accumulator")
        if not (masks_equal(intervals.mask, self.mask)
                and masks_equal(truth.mask, self.mask)
                and masks_equal(quantiles.mask, self.mask)):
            raise ValueError("record mask does not match the accumulator")
        truth_flat = truth.values.ravel()
        for i, cov in enumerate(self.scheme.coverage_levels):
            alpha = float(1 - cov)
            interval_accumulate(
                intervals.lower(cov).ravel(), intervals.upper(cov).ravel(),
                truth_flat, alpha,
                self._cover_sum[i], self._cover_cnt[i],
                self._score_sum[i], self._width_sum[i], self._bounded_cnt[i],
            )
        for i, gamma in enumerate(self.scheme.quantile_levels):
            pinball_accumulate(
                quantiles.grid(gamma).ravel(), truth_flat, float(gamma),
                self._qs_sum[i], self._qs_cnt[i],
            )
        self.record_count += 1

    @staticmethod
    def _ratio(num: np.ndarray, den: np.ndarray) -> np.ndarray:
        out = np.full(num.shape, np.nan)
        good = den > 0
        out[good] = num[good] / den[good]
        return out

    @staticmethod
    def _valid_mean(grid: np.ndarray) -> float:
        good = ~np.isnan(grid)
        return float(grid[good].mean()) if good.any() else float("nan")

    def finalize(self) -> MetricReport:
        if self.record_count == 0:
            raise ValueError("at least one test record is required")
        h, w = self.shape
        n_cov = len(self.scheme.coverage_levels)
        picp_grids = np.empty((n_cov, h, w))
        is_grids = np.empty((n_cov, h, w))
        iw_grids = np.empty((n_cov, h, w))
        mean_picp, pct_dev, mean_is, mean_iw, excluded = [], [], [], [], []
        for i, cov in enumerate(self.scheme.coverage_levels):
            picp_grids[i] = self._ratio(
                self._cover_sum[i].astype(np.float64), self._cover_cnt[i]
            ).reshape(h, w)
            is_grids[i] = self._ratio(self._score_sum[i], self._bounded_cnt[i]).reshape(h, w)
            iw_grids[i] = self._ratio(self._width_sum[i], self._bounded_cnt[i]).reshape(h, w)
            picp_mean = self._valid_mean(picp_grids[i])
            mean_picp.append(picp_mean)
            pct_dev.append(100.0 * (picp_mean - float(cov)) / float(cov))
            mean_is.append(self._valid_mean(is_grids[i]))
            mean_iw.append(self._valid_mean(iw_grids[i]))
            excluded.append(int((self._cover_cnt[i] - self._bounded_cnt[i]).sum()))
        n_q = len(self.scheme.quantile_levels)
        qs_grids = np.empty((n_q, h, w))
        mean_qs = []
        for i in range(n_q):
            qs_grids[i] = self._ratio(self._qs_sum[i], self._qs_cnt[i]).reshape(h, w)
            mean_qs.append(self._valid_mean(qs_grids[i]))
        valid_points = int(np.count_nonzero(self.mask)) if self.mask is not None else h * w
        return MetricReport(
            coverage_levels=self.scheme.coverage_levels,
            quantile_levels=self.scheme.quantile_levels,
            picp_grids=picp_grids,
            mean_picp=tuple(mean_picp),
            pct_deviation=tuple(pct_dev),
            is_grids=is_grids,
            mean_is=tuple(mean_is),
            iw_grids=iw_grids,
            mean_iw=tuple(mean_iw),
            qs_grids=qs_grids,
            mean_qs=tuple(mean_qs),
            unbounded_excluded=tuple(excluded),
            record_count=self.record_count,
            valid_point_count=valid_points,
            mask=self.mask,
        )


def picp(interval_sets, truths, level):
    """Coverage fraction per grid point and its spatial mean at one level.

    A truth exactly on a bound counts as covered (closed interval).
    """
    interval_sets = list(interval_sets)
    truths = list(truths)
    if not truths or len(interval_sets) != len(truths):
        raise ValueError("at least one aligned test record is required")
    cov = level_fraction(level)
    shape = truths[0].shape
    p = shape[0] * shape[1]
    cover_sum = np.zeros(p, dtype=np.int64)
    cover_cnt = np.zeros(p, dtype=np.int64)
    score_sum = np.zeros(p)
    width_sum = np.zeros(p)
    bounded_cnt = np.zeros(p, dtype=np.int64)
    alpha = float(1 - cov)
    for iv, truth in zip(interval_sets, truths):
        if iv.shape != shape or truth.shape != shape:
            raise ValueError("record grid dimensions misaligned")
        interval_accumulate(
            iv.lower(cov).ravel(), iv.upper(cov).ravel(), truth.values.ravel(),
            alpha, cover_sum, cover_cnt, score_sum, width_sum, bounded_cnt,
        )
    grid = MetricAccumulator._ratio(cover_sum.astype(np.float64), cover_cnt)
    grid = grid.reshape(shape)
    return grid, MetricAccumulator._valid_mean(grid)


def evaluate(interval_sets, quantile_sets, truths, scheme: LevelScheme) -> MetricReport:
    """Full metric sweep over an aligned test set.

    ``interval_sets`` and ``quantile_sets`` are per-record predictions;
    ``truths`` the matching observed fields.
    """
    interval_sets = list(interval_sets)
    quantile_sets = list(quantile_sets)
    truths = list(truths)
    if not truths:
        raise ValueError("at least one test record is required")
    if len(interval_sets) != len(truths) or len(quantile_sets) != len(truths):
        raise ValueError(
            f"misaligned test set: {len(interval_sets)} interval sets,"
            f" {len(quantile_sets)} quantile sets, {len(truths)} truths"
        )
    acc = MetricAccumulator(scheme, truths[0].shape, truths[0].mask)
    for iv, qs, truth in zip(interval_sets, quantile_sets, truths):
        acc.add_record(iv, qs, truth)
    return acc.finalize()
