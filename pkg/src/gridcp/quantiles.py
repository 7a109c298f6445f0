"""Per-grid-point empirical quantiles from ensembles.

Quantiles are exact inverse-empirical-CDF values (type 1): the gamma-quantile
of M members is the k-th smallest member value with k = ceil(gamma * M), no
interpolation.  Every quantile therefore equals some member's value, and the
family is monotone in gamma by construction.  Interpolating estimators would
change the conformity scores computed downstream, so none are offered.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from ._backend import order_stats
from .grids import EnsembleBatch, GridField, masks_equal
from .levels import LevelScheme, ceil_fraction, level_fraction, level_key


class SmallEnsembleWarning(UserWarning):
    """Ensemble too small to resolve a requested tail level."""


def member_rank(gamma, member_count: int) -> int:
    """1-based order-statistic rank for the gamma-quantile of M members."""
    if member_count < 1:
        raise ValueError("empty ensemble")
    return ceil_fraction(level_fraction(gamma) * member_count)


def empirical_quantile(sorted_values, gamma) -> float:
    """Inverse empirical CDF of a nondecreasing sample at level gamma.

    Returns inf{x : #{m : v_m <= x} / M >= gamma}, which is the k-th order
    statistic with k = ceil(gamma * M).
    """
    values = np.asarray(sorted_values, dtype=np.float64)
    if values.ndim != 1:
        raise ValueError("expected a 1-D sample")
    if values.size == 0:
        raise ValueError("empty ensemble")
    if np.any(values[1:] < values[:-1]):
        raise ValueError("sample values must be nondecreasing")
    return float(values[member_rank(gamma, values.size) - 1])


def _small_m_warnings(member_count: int, scheme: LevelScheme) -> tuple[str, ...]:
    # An ensemble can only resolve level gamma when M >= 1/min(gamma, 1-gamma);
    # below that the order statistic saturates at the sample extreme.
    notes = []
    for gamma in scheme.quantile_levels:
        tail = min(gamma, 1 - gamma)
        needed = ceil_fraction(1 / tail)
        if member_count < needed:
            notes.append(
                f"ensemble of {member_count} members cannot resolve quantile level"
                f" {level_key(gamma)} (needs at least {needed})"
            )
    return tuple(notes)


@dataclass(frozen=True, eq=False)
class QuantileGridSet:
    """One quantile grid per level, stacked as (levels, height, width).

    ``warnings`` carries small-ensemble notes attached at construction.
    Monotonicity in the level holds for sets built from ensembles; sets
    assembled from independently calibrated interval bounds can violate it,
    which :meth:`monotonicity_violations` quantifies.
    """

    levels: tuple
    stack: np.ndarray
    mask: np.ndarray | None = None
    warnings: tuple[str, ...] = ()

    def __post_init__(self):
        levels = tuple(level_fraction(lv) for lv in self.levels)
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise ValueError("quantile levels must be strictly increasing")
        stack = np.array(self.stack, dtype=np.float64, order="C", copy=True)
        if stack.ndim != 3 or stack.shape[0] != len(levels):
            raise ValueError(
                f"stack shape {stack.shape} does not match {len(levels)} levels"
            )
        stack.setflags(write=False)
        object.__setattr__(self, "levels", levels)
        object.__setattr__(self, "stack", stack)
        if self.mask is not None:
            mask = np.array(self.mask, dtype=bool, order="C", copy=True)
            if mask.shape != stack.shape[1:]:
                raise ValueError(
                    f"mask shape {mask.shape} does not match grid shape {stack.shape[1:]}"
                )
            mask.setflags(write=False)
            object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "warnings", tuple(self.warnings))

    @property
    def shape(self) -> tuple[int, int]:
        return self.stack.shape[1:]

    def level_index(self, level) -> int:
        frac = level_fraction(level)
        try:
            return self.levels.index(frac)
        except ValueError:
            raise ValueError(
                f"quantile level {level_key(frac)} not present"
            ) from None

    def has_level(self, level) -> bool:
        return level_fraction(level) in self.levels

    def grid(self, level) -> np.ndarray:
        """The quantile grid at one level (read-only view)."""
        return self.stack[self.level_index(level)]

    def monotonicity_violations(self) -> int:
        """Count of valid points where some adjacent level pair is out of order."""
        if self.stack.shape[0] < 2:
            return 0
        bad = np.diff(self.stack, axis=0) < 0
        bad = bad.any(axis=0)
        if self.mask is not None:
            bad &= self.mask
        return int(np.count_nonzero(bad))


def ensemble_to_quantiles(batch: EnsembleBatch, scheme: LevelScheme) -> QuantileGridSet:
    """Per-grid-point empirical quantiles of an ensemble at the scheme's levels.

    Masked points come out NaN.  When the ensemble is too small to resolve a
    requested tail level, a SmallEnsembleWarning is issued and the same notes
    are attached to the result.
    """
    stacked = batch.stacked()
    mask = batch.shared_mask()
    m, height, width = stacked.shape
    notes = _small_m_warnings(m, scheme)
    for note in notes:
        warnings.warn(note, SmallEnsembleWarning, stacklevel=2)
    ranks = np.array(
        [member_rank(gamma, m) for gamma in scheme.quantile_levels], dtype=np.int64
    )
    flat = np.ascontiguousarray(stacked.reshape(m, height * width))
    stack = order_stats(flat, ranks).reshape(len(ranks), height, width)
    if mask is not None:
        stack[:, ~mask] = np.nan
    return QuantileGridSet(
        levels=scheme.quantile_levels, stack=stack, mask=mask, warnings=notes
    )


def compose_residual(deterministic: GridField, residual_members: EnsembleBatch) -> EnsembleBatch:
    """Add a deterministic base field to every residual member."""
    shape = residual_members.shape
    if any(m.shape != shape for m in residual_members.members):
        raise ValueError("ensemble member dimension mismatch")
    if deterministic.shape != shape:
        raise ValueError(
            f"deterministic field shape {deterministic.shape} does not match"
            f" ensemble shape {shape}"
        )
    mask = residual_members.shared_mask()
    if not masks_equal(deterministic.mask, mask):
        raise ValueError("deterministic field mask does not match ensemble mask")
    members = tuple(
        GridField(deterministic.values + member.values, mask=mask)
        for member in residual_members.members
    )
    return EnsembleBatch(members)


def constant_quantiles(field: GridField, scheme: LevelScheme) -> QuantileGridSet:
    """Degenerate quantile set equal to one field at every level.

    Lets a deterministic prediction flow through the interval machinery: its
    implied predictive distribution is a point mass, whose quantile function
    is constant in the level.
    """
    values = field.values
    if field.mask is not None:
        values = values.copy()
        values[~field.mask] = np.nan
    stack = np.broadcast_to(values, (len(scheme.quantile_levels),) + values.shape)
    return QuantileGridSet(
        levels=scheme.quantile_levels, stack=stack, mask=field.mask
    )
