"""Coverage and quantile level bookkeeping.

Levels (coverage targets ``1 - alpha`` and quantile levels ``gamma``) are
user-facing decimals such as 0.05 or 0.9.  Internally they are snapped to
exact rationals so that rank arithmetic like ``ceil((n + 1) * beta)`` follows
the decimal intent instead of binary-float noise: the float ``0.9`` is
slightly above the real 0.9, and an exact ceiling on it would shift the
conformal rank by one.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

# Any float within ~1e-12 of a rational with denominator up to this bound is
# interpreted as that rational (covers percent/permille levels, thirds, ...).
MAX_LEVEL_DENOMINATOR = 10**6

_HALF = Fraction(1, 2)
_ONE = Fraction(1)


def level_fraction(level) -> Fraction:
    """Interpret a probability level as an exact rational in (0, 1)."""
    if isinstance(level, Fraction):
        frac = level
    elif isinstance(level, str):
        frac = Fraction(level)
    elif isinstance(level, float):
        frac = Fraction(level).limit_denominator(MAX_LEVEL_DENOMINATOR)
    elif isinstance(level, int):
        frac = Fraction(level)
    else:
        raise TypeError(f"cannot interpret {level!r} as a probability level")
    if not (0 < frac < 1):
        raise ValueError(f"level {level!r} is not in the open interval (0, 1)")
    return frac


def ceil_fraction(value: Fraction) -> int:
    """Exact ceiling of a rational."""
    return -((-value.numerator) // value.denominator)


def level_key(level) -> str:
    """Canonical string for a level, used in filenames and JSON keys.

    Decimal levels render as trimmed decimals ("0.05", "0.9"); rationals with
    no finite decimal expansion render as "<num>over<den>".
    """
    frac = level_fraction(level)
    scaled = frac
    digits = 0
    while scaled.denominator != 1 and digits < 12:
        scaled *= 10
        digits += 1
    if scaled.denominator != 1:
        return f"{frac.numerator}over{frac.denominator}"
    text = f"{frac.numerator / frac.denominator:.{digits}f}".rstrip("0")
    return text + "0" if text.endswith(".") else text


@dataclass(frozen=True)
class LevelScheme:
    """Coverage targets plus the quantile grid that supports them.

    Every coverage level ``1 - alpha`` must have both of its tail levels
    ``alpha/2`` and ``1 - alpha/2`` present in ``quantile_levels`` (the
    balanced-pair closure), so prediction-interval bounds can always be read
    off the quantile grid.
    """

    coverage_levels: tuple[Fraction, ...]
    quantile_levels: tuple[Fraction, ...]

    def __post_init__(self):
        coverage = tuple(level_fraction(c) for c in self.coverage_levels)
        quantiles = tuple(level_fraction(q) for q in self.quantile_levels)
        if not coverage:
            raise ValueError("scheme needs at least one coverage level")
        if not quantiles:
            raise ValueError("scheme needs at least one quantile level")
        if any(b <= a for a, b in zip(coverage, coverage[1:])):
            raise ValueError("coverage levels must be strictly increasing")
        if any(b <= a for a, b in zip(quantiles, quantiles[1:])):
            raise ValueError("quantile levels must be strictly increasing")
        available = set(quantiles)
        for cov in coverage:
            lo = (_ONE - cov) / 2
            hi = _ONE - lo
            missing = [lv for lv in (lo, hi) if lv not in available]
            if missing:
                keys = ", ".join(level_key(lv) for lv in missing)
                raise ValueError(
                    f"coverage level {level_key(cov)} needs quantile level(s) {keys}"
                )
        object.__setattr__(self, "coverage_levels", coverage)
        object.__setattr__(self, "quantile_levels", quantiles)

    def alpha(self, coverage) -> Fraction:
        return _ONE - level_fraction(coverage)

    def tail_levels(self, coverage) -> tuple[Fraction, Fraction]:
        """(alpha/2, 1 - alpha/2) for a coverage level ``1 - alpha``."""
        lo = self.alpha(coverage) / 2
        return lo, _ONE - lo

    @property
    def coverage_floats(self) -> tuple[float, ...]:
        return tuple(float(c) for c in self.coverage_levels)

    @property
    def quantile_floats(self) -> tuple[float, ...]:
        return tuple(float(q) for q in self.quantile_levels)


def make_scheme(coverage_levels, quantile_levels=None) -> LevelScheme:
    """Build a scheme; the quantile grid defaults to the coverage tails."""
    coverage = sorted(level_fraction(c) for c in coverage_levels)
    if quantile_levels is None:
        tails = set()
        for cov in coverage:
            lo = (_ONE - cov) / 2
            tails.update((lo, _ONE - lo))
        quantile_levels = sorted(tails)
    return LevelScheme(tuple(coverage), tuple(quantile_levels))


def default_levels() -> LevelScheme:
    """Deciles-style quantile grid with the matching odd coverage ladder.

    Quantile levels are {0.05, 0.15, ..., 0.95}; coverage levels are
    {0.1, 0.3, 0.5, 0.7, 0.9}, each paired with its two tails.
    """
    quantiles = tuple(Fraction(5 + 10 * k, 100) for k in range(10))
    coverage = tuple(Fraction(10 + 20 * k, 100) for k in range(5))
    return LevelScheme(coverage, quantiles)
