"""Split conformal calibration of grid-point prediction intervals.

Two calibration routes share one rank rule.  The symmetric route scores a
deterministic prediction by absolute residual and widens it into an interval.
The asymmetric route (conformalized quantile regression) scores each tail of
a predicted quantile pair separately, so a model that is too narrow on only
one side gets corrected only there.

For a calibration set of n exchangeable records, the correction at coverage
target beta is the k-th smallest score with k = ceil((n + 1) * beta).  When
k exceeds n no finite score is a valid correction; the offset becomes +inf
and the interval is reported unbounded rather than silently clamped, since
clamping would void the coverage guarantee.  Ranks are evaluated in exact
rational arithmetic (see levels module) so decimal targets behave as written.

Offsets are computed independently at every grid point; there is no pooling
across space.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from ._backend import order_stats
from .grids import GridField, masks_equal
from .levels import LevelScheme, ceil_fraction, level_fraction, level_key
from .quantiles import QuantileGridSet

SCORE_SIDES = ("symmetric", "lower", "upper")
PROVENANCES = ("raw-quantile", "split-cp", "cqr")


def conformal_rank(n: int, beta) -> int:
    """Order-statistic index k = ceil((n + 1) * beta).

    The caller interprets k > n as the unbounded-correction case.  With
    continuous scores, picking the k-th smallest of n calibration scores
    yields marginal coverage in [beta, beta + 1/(n + 1)].
    """
    if n < 1:
        raise ValueError(f"calibration size must be at least 1, got {n}")
    return ceil_fraction((n + 1) * level_fraction(beta))


@dataclass(frozen=True, eq=False)
class ConformityScoreGrid:
    """Per-grid-point sorted calibration scores, stacked as (n, height, width).

    Row k - 1 of ``sorted_scores`` holds the k-th smallest score at each
    point.  Masked points are NaN in every row.
    """

    sorted_scores: np.ndarray
    side: str
    mask: np.ndarray | None = None

    def __post_init__(self):
        if self.side not in SCORE_SIDES:
            raise ValueError(f"side must be one of {SCORE_SIDES}, got {self.side!r}")
        scores = np.array(self.sorted_scores, dtype=np.float64, order="C", copy=True)
        if scores.ndim != 3 or scores.shape[0] < 1:
            raise ValueError(
                f"scores must be (n, height, width) with n >= 1, got {scores.shape}"
            )
        scores.setflags(write=False)
        object.__setattr__(self, "sorted_scores", scores)
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool, order="C", copy=True)
            if mask.shape != scores.shape[1:]:
                raise ValueError(
                    f"mask shape {mask.shape} does not match grid shape {scores.shape[1:]}"
                )
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @classmethod
    def from_raw(cls, raw_scores: np.ndarray, side: str,
                 mask: np.ndarray | None = None) -> "ConformityScoreGrid":
        """Sort per-point raw scores across records (axis 0).

        Masked points are forced to NaN before sorting, so they stay NaN in
        every derived offset.
        """
        raw = np.array(raw_scores, dtype=np.float64, order="C", copy=True)
        if raw.ndim != 3:
            raise ValueError(f"raw scores must be (n, height, width), got {raw.shape}")
        n, height, width = raw.shape
        if mask is not None:
            raw[:, ~np.asarray(mask, dtype=bool)] = np.nan
        ranks = np.arange(1, n + 1, dtype=np.int64)
        ordered = order_stats(raw.reshape(n, height * width), ranks)
        return cls(ordered.reshape(n, height, width), side=side, mask=mask)

    @property
    def calibration_size(self) -> int:
        return self.sorted_scores.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.sorted_scores.shape[1:]

    def offset_at(self, k: int) -> np.ndarray:
        """The k-th smallest score per point; +inf when k exceeds n.

        The +inf grid keeps masked points NaN, matching mask propagation.
        """
        n = self.calibration_size
        if k < 1:
            raise ValueError(f"rank must be positive, got {k}")
        if k <= n:
            return self.sorted_scores[k - 1].copy()
        out = np.full(self.shape, np.inf)
        if self.mask is not None:
            out[~self.mask] = np.nan
        else:
            out[np.isnan(self.sorted_scores[0])] = np.nan
        return out


@dataclass(frozen=True, eq=False)
class ConformalOffsets:
    """Calibrated additive corrections per coverage level.

    ``lower_stack[i]``/``upper_stack[i]`` widen (or, when negative, shrink)
    the predicted bounds at ``levels[i]``.  ``unbounded[i]`` marks levels
    whose rank exceeded the calibration size; their offsets are +inf.
    """

    levels: tuple
    lower_stack: np.ndarray
    upper_stack: np.ndarray
    unbounded: tuple[bool, ...]
    calibration_size: int
    method: str
    mask: np.ndarray | None = None

    def __post_init__(self):
        levels = tuple(level_fraction(lv) for lv in self.levels)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("coverage levels must be strictly increasing")
        if self.method not in ("split-cp", "cqr"):
            raise ValueError(f"method must be split-cp or cqr, got {self.method!r}")
        if self.calibration_size < 1:
            raise ValueError("calibration size must be at least 1")
        lower = np.array(self.lower_stack, dtype=np.float64, order="C", copy=True)
        upper = np.array(self.upper_stack, dtype=np.float64, order="C", copy=True)
        expected = (len(levels),)
        if lower.ndim != 3 or lower.shape[:1] != expected or upper.shape != lower.shape:
            raise ValueError(
                f"offset stacks must be ({len(levels)}, height, width),"
                f" got {lower.shape} and {upper.shape}"
            )
        unbounded = tuple(bool(u) for u in self.unbounded)
        if len(unbounded) != len(levels):
            raise ValueError("unbounded flags must match the level count")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "lower_stack", lower)
        object.__setattr__(self, "upper_stack", upper)
        object.__setattr__(self, "unbounded", unbounded)
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool, order="C", copy=True)
            if mask.shape != lower.shape[1:]:
                raise ValueError(
                    f"mask shape {mask.shape} does not match grid shape {lower.shape[1:]}"
                )
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.lower_stack.shape[1:]

    def level_index(self, level) -> int:
        frac = level_fraction(level)
        try:
            return self.levels.index(frac)
        except ValueError:
            raise ValueError(
                f"coverage level {level_key(frac)} not present"
            ) from None

    def lower(self, level) -> np.ndarray:
        return self.lower_stack[self.level_index(level)]

    def upper(self, level) -> np.ndarray:
        return self.upper_stack[self.level_index(level)]

    def is_unbounded(self, level) -> bool:
        return self.unbounded[self.level_index(level)]


def _check_aligned_fields(fields, truths, what: str):
    if len(fields) != len(truths) or not truths:
        raise ValueError(
            f"need equal nonempty {what} and truth lists,"
            f" got {len(fields)} and {len(truths)}"
        )
    shape = truths[0].shape
    mask = truths[0].mask
    for i, (f, t) in enumerate(zip(fields, truths)):
        if f.shape != shape or t.shape != shape:
            raise ValueError(f"record {i}: grid dimensions misaligned")
        if not (masks_equal(t.mask, mask) and masks_equal(f.mask, mask)):
            raise ValueError(f"record {i}: mask misaligned")
    return shape, mask


def calibrate_split_cp(predictions, truths, scheme: LevelScheme) -> ConformalOffsets:
    """Symmetric absolute-residual calibration of a deterministic prediction.

    Per grid point the scores are |truth - prediction| over the calibration
    records; at each coverage level both offsets equal the score of rank
    ceil((n + 1) * (1 - alpha)).
    """
    predictions = list(predictions)
    truths = list(truths)
    (height, width), mask = _check_aligned_fields(predictions, truths, "prediction")
    n = len(truths)
    raw = np.empty((n, height, width))
    for c, (pred, truth) in enumerate(zip(predictions, truths)):
        np.abs(truth.values - pred.values, out=raw[c])
    scores = ConformityScoreGrid.from_raw(raw, side="symmetric", mask=mask)
    offsets = []
    flags = []
    for cov in scheme.coverage_levels:
        k = conformal_rank(n, cov)
        offsets.append(scores.offset_at(k))
        flags.append(k > n)
    stack = np.stack(offsets)
    return ConformalOffsets(
        levels=scheme.coverage_levels,
        lower_stack=stack,
        upper_stack=stack,
        unbounded=tuple(flags),
        calibration_size=n,
        method="split-cp",
        mask=mask,
    )


def calibrate_cqr(quantile_sets, truths, scheme: LevelScheme) -> ConformalOffsets:
    """Asymmetric per-tail calibration of predicted quantile pairs.

    For coverage 1 - alpha the lower tail is scored by q_{alpha/2} - truth
    and the upper tail by truth - q_{1-alpha/2}; each side takes the score of
    rank ceil((n + 1) * (1 - alpha/2)) independently, so each tail's
    miscoverage is at most alpha/2.
    """
    quantile_sets = list(quantile_sets)
    truths = list(truths)
    if len(quantile_sets) != len(truths) or not truths:
        raise ValueError(
            f"need equal nonempty quantile-set and truth lists,"
            f" got {len(quantile_sets)} and {len(truths)}"
        )
    shape = truths[0].shape
    mask = truths[0].mask
    for i, (qset, truth) in enumerate(zip(quantile_sets, truths)):
        if qset.shape != shape or truth.shape != shape:
            raise ValueError(f"record {i}: grid dimensions misaligned")
        if not (masks_equal(truth.mask, mask) and masks_equal(qset.mask, mask)):
            raise ValueError(f"record {i}: mask misaligned")
    n = len(truths)
    height, width = shape
    lower_offsets = []
    upper_offsets = []
    flags = []
    raw_lo = np.empty((n, height, width))
    raw_up = np.empty((n, height, width))
    for cov in scheme.coverage_levels:
        tail_lo, tail_hi = scheme.tail_levels(cov)
        for c, (qset, truth) in enumerate(zip(quantile_sets, truths)):
            np.subtract(qset.grid(tail_lo), truth.values, out=raw_lo[c])
            np.subtract(truth.values, qset.grid(tail_hi), out=raw_up[c])
        k = conformal_rank(n, 1 - scheme.alpha(cov) / 2)
        lo_scores = ConformityScoreGrid.from_raw(raw_lo, side="lower", mask=mask)
        up_scores = ConformityScoreGrid.from_raw(raw_up, side="upper", mask=mask)
        lower_offsets.append(lo_scores.offset_at(k))
        upper_offsets.append(up_scores.offset_at(k))
        flags.append(k > n)
    return ConformalOffsets(
        levels=scheme.coverage_levels,
        lower_stack=np.stack(lower_offsets),
        upper_stack=np.stack(upper_offsets),
        unbounded=tuple(flags),
        calibration_size=n,
        method="cqr",
        mask=mask,
    )


@dataclass(frozen=True, eq=False)
class IntervalGridSet:
    """Per-grid-point [lower, upper] bounds per coverage level.

    Bounds satisfy lower <= upper at every valid point (crossing pairs are
    collapsed upstream and tallied in ``collapsed``).  Nesting across levels
    is guaranteed for raw-quantile provenance; independently calibrated
    levels can violate it, which :meth:`nesting_violations` quantifies.
    """

    levels: tuple
    lower_stack: np.ndarray
    upper_stack: np.ndarray
    provenance: str
    mask: np.ndarray | None = None
    collapsed: tuple[int, ...] = ()

    def __post_init__(self):
        levels = tuple(level_fraction(lv) for lv in self.levels)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("coverage levels must be strictly increasing")
        if self.provenance not in PROVENANCES:
            raise ValueError(
                f"provenance must be one of {PROVENANCES}, got {self.provenance!r}"
            )
        lower = np.array(self.lower_stack, dtype=np.float64, order="C", copy=True)
        upper = np.array(self.upper_stack, dtype=np.float64, order="C", copy=True)
        if lower.ndim != 3 or lower.shape[0] != len(levels) or upper.shape != lower.shape:
            raise ValueError(
                f"bound stacks must be ({len(levels)}, height, width),"
                f" got {lower.shape} and {upper.shape}"
            )
        if np.any(lower > upper):
            raise ValueError("interval bounds out of order")
        collapsed = tuple(int(c) for c in self.collapsed) or (0,) * len(levels)
        if len(collapsed) != len(levels):
            raise ValueError("collapse tallies must match the level count")
        lower.setflags(write=False)
        upper.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "lower_stack", lower)
        object.__setattr__(self, "upper_stack", upper)
        object.__setattr__(self, "collapsed", collapsed)
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool, order="C", copy=True)
            if mask.shape != lower.shape[1:]:
                raise ValueError(
                    f"mask shape {mask.shape} does not match grid shape {lower.shape[1:]}"
                )
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)

    @property
    def shape(self) -> tuple[int, int]:
        return self.lower_stack.shape[1:]

    def level_index(self, level) -> int:
        frac = level_fraction(level)
        try:
            return self.levels.index(frac)
        except ValueError:
            raise ValueError(
                f"coverage level {level_key(frac)} not present"
            ) from None

    def lower(self, level) -> np.ndarray:
        return self.lower_stack[self.level_index(level)]

    def upper(self, level) -> np.ndarray:
        return self.upper_stack[self.level_index(level)]

    def collapsed_at(self, level) -> int:
        return self.collapsed[self.level_index(level)]

    def nesting_violations(self) -> int:
        """Valid points where a lower-coverage interval escapes a higher one."""
        if len(self.levels) < 2:
            return 0
        bad = (np.diff(self.lower_stack, axis=0) > 0) | (np.diff(self.upper_stack, axis=0) < 0)
        bad = bad.any(axis=0)
        if self.mask is not None:
            bad &= self.mask
        return int(np.count_nonzero(bad))


def raw_intervals(q: QuantileGridSet, scheme: LevelScheme) -> IntervalGridSet:
    """Uncalibrated intervals read straight off the predicted quantiles."""
    lower = []
    upper = []
    for cov in scheme.coverage_levels:
        tail_lo, tail_hi = scheme.tail_levels(cov)
        lower.append(q.grid(tail_lo))
        upper.append(q.grid(tail_hi))
    return IntervalGridSet(
        levels=scheme.coverage_levels,
        lower_stack=np.stack(lower),
        upper_stack=np.stack(upper),
        provenance="raw-quantile",
        mask=q.mask,
    )


def apply_offsets(q: QuantileGridSet, off: ConformalOffsets,
                  scheme: LevelScheme) -> IntervalGridSet:
    """Widen predicted quantile pairs by calibrated offsets.

    Bounds are lower = q_{alpha/2} - lower_offset and upper = q_{1-alpha/2} +
    upper_offset.  Strongly negative offsets can cross the bounds; crossing
    pairs collapse to their midpoint and are tallied per level.
    """
    if off.shape != q.shape:
        raise ValueError(
            f"offset grid shape {off.shape} does not match quantile grid shape {q.shape}"
        )
    if not masks_equal(off.mask, q.mask):
        raise ValueError("offset mask does not match quantile mask")
    lower = []
    upper = []
    tallies = []
    for cov in scheme.coverage_levels:
        tail_lo, tail_hi = scheme.tail_levels(cov)
        lo = q.grid(tail_lo) - off.lower(cov)
        up = q.grid(tail_hi) + off.upper(cov)
        crossing = lo > up
        count = int(np.count_nonzero(crossing))
        if count:
            mid = 0.5 * (lo[crossing] + up[crossing])
            lo[crossing] = mid
            up[crossing] = mid
        tallies.append(count)
        lower.append(lo)
        upper.append(up)
    return IntervalGridSet(
        levels=scheme.coverage_levels,
        lower_stack=np.stack(lower),
        upper_stack=np.stack(upper),
        provenance=off.method,
        mask=q.mask,
        collapsed=tuple(tallies),
    )


def intervals_to_quantiles(iv: IntervalGridSet, scheme: LevelScheme) -> QuantileGridSet:
    """Read tail quantiles back off interval bounds.

    The lower bound at coverage 1 - alpha estimates the alpha/2 quantile and
    the upper bound the 1 - alpha/2 quantile.  Used to score calibrated
    intervals with the pinball loss; monotonicity across levels holds exactly
    when the intervals nest.
    """
    table: dict[Fraction, np.ndarray] = {}
    for cov in scheme.coverage_levels:
        tail_lo, tail_hi = scheme.tail_levels(cov)
        table[tail_lo] = iv.lower(cov)
        table[tail_hi] = iv.upper(cov)
    levels = tuple(sorted(table))
    stack = np.stack([table[lv] for lv in levels])
    return QuantileGridSet(levels=levels, stack=stack, mask=iv.mask)
