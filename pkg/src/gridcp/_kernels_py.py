"""Pure numpy implementations of the hot kernels.

Fallback used when the compiled extension is unavailable.  Both backends
implement the same contract and must agree bit for bit:

* elementwise arithmetic uses the same operations in the same order, so
  results are identical under IEEE-754 double arithmetic (the extension is
  compiled without value-changing float optimisations);
* a column containing any NaN yields NaN for every requested order statistic
  of that column (numpy's sort would otherwise place NaN last and silently
  return a valid-looking value);
* accumulator updates are in-place and per grid point, with no cross-point
  reductions, so the accumulation order across records is the caller's.

Shapes: ``values`` is (n, p) with samples down axis 0, ``ranks`` are 1-based
order-statistic ranks in [1, n].  Accumulator arrays are 1-D of length p.
Rank validation happens in the shared wrapper, not here.
"""

from __future__ import annotations

import numpy as np


def order_stats(values: np.ndarray, ranks: np.ndarray) -> np.ndarray:
    """Selected order statistics of each column: out[j, :] = ranks[j]-th smallest.

    Partitions instead of sorting when the rank set is sparse; either way
    the requested rows hold exact order statistics, so the two code paths
    (and the two backends) agree bitwise.
    """
    n = values.shape[0]
    if ranks.size and 4 * ranks.size < n:
        ordered = np.partition(values, np.unique(ranks - 1), axis=0)
    else:
        ordered = np.sort(values, axis=0)
    out = ordered[ranks - 1, :].copy()
    bad = np.isnan(values).any(axis=0)
    if bad.any():
        out[:, bad] = np.nan
    return out


def interval_accumulate(lower, upper, truth, alpha,
                        cover_sum, cover_cnt, score_sum, width_sum, bounded_cnt):
    """Fold one record's intervals into per-point running sums.

    A point is skipped entirely when lower, upper or truth is NaN there.
    Intervals with an infinite endpoint count toward coverage but are
    excluded from the score and width sums (bounded_cnt tracks how many
    contributed).
    """
    coef = 2.0 / alpha
    valid = ~(np.isnan(lower) | np.isnan(upper) | np.isnan(truth))
    covered = valid & (lower <= truth) & (truth <= upper)
    bounded = valid & np.isfinite(lower) & np.isfinite(upper)

    width = upper - lower
    below = truth < lower
    above = truth > upper
    score = width + np.where(below, coef * (lower - truth), 0.0) \
                  + np.where(above, coef * (truth - upper), 0.0)

    cover_cnt += valid
    cover_sum += covered
    bounded_cnt += bounded
    score_sum[bounded] += score[bounded]
    width_sum[bounded] += width[bounded]


def pinball_accumulate(quantile, truth, gamma, qs_sum, qs_cnt):
    """Fold one record's pinball losses at level gamma into running sums."""
    valid = ~(np.isnan(quantile) | np.isnan(truth))
    over = truth > quantile
    loss = np.where(over, gamma * (truth - quantile),
                    (1.0 - gamma) * (quantile - truth))
    qs_cnt += valid
    qs_sum[valid] += loss[valid]
