"""Raster field containers and dataset-level consistency checks.

A ``GridField`` is one scalar variable on an h x w raster with an optional
validity mask (True = valid grid point); sea or missing points are masked
rather than encoded as sentinel magnitudes, which would silently corrupt
order statistics downstream.  Multi-variable data is handled by running the
pipeline once per variable.

All containers are immutable after construction (arrays are copied and
write-protected) and safe to share across workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SPLIT_TAGS = ("train-surrogate", "calibration", "test")


def _frozen_array(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, order="C", copy=True)
    arr.setflags(write=False)
    return arr


def masks_equal(a: np.ndarray | None, b: np.ndarray | None) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(frozen=True, eq=False)
class GridField:
    """One scalar field on a fine-resolution raster.

    ``mask`` marks valid grid points; when absent every point is valid.
    Values at valid points are expected to be finite -- that is a dataset
    invariant reported by :func:`validate_dataset`, not enforced here, so
    data read from files can be diagnosed instead of rejected blindly.
    """

    values: np.ndarray
    mask: np.ndarray | None = None

    def __post_init__(self):
        values = _frozen_array(self.values, np.float64)
        if values.ndim != 2:
            raise ValueError(f"grid values must be 2-D, got shape {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"grid dimensions must be positive, got {values.shape}")
        object.__setattr__(self, "values", values)
        if self.mask is not None:
            mask = _frozen_array(self.mask, bool)
            if mask.shape != values.shape:
                raise ValueError(
                    f"mask shape {mask.shape} does not match values shape {values.shape}"
                )
            object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def valid_values(self) -> np.ndarray:
        """1-D array of the values at valid points."""
        if self.mask is None:
            return self.values.ravel()
        return self.values[self.mask]


@dataclass(frozen=True, eq=False)
class CoarseField:
    """Coarse-resolution conditioning field (no mask)."""

    values: np.ndarray

    def __post_init__(self):
        values = _frozen_array(self.values, np.float64)
        if values.ndim != 2:
            raise ValueError(f"grid values must be 2-D, got shape {values.shape}")
        if values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"grid dimensions must be positive, got {values.shape}")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


@dataclass(frozen=True, eq=False)
class EnsembleBatch:
    """Ordered ensemble of exchangeable member fields for one conditioning input.

    Construction is permissive (any nonempty member list) so that defective
    batches can be represented and diagnosed; operations that require
    consistent members (:meth:`stacked`, :meth:`shared_mask`) raise when the
    batch is inconsistent, and :func:`validate_dataset` reports the
    violations.
    """

    members: tuple[GridField, ...]

    def __post_init__(self):
        members = tuple(self.members)
        if not members:
            raise ValueError("ensemble must contain at least one member")
        object.__setattr__(self, "members", members)

    @property
    def member_count(self) -> int:
        return len(self.members)

    @property
    def shape(self) -> tuple[int, int]:
        return self.members[0].shape

    def stacked(self) -> np.ndarray:
        """Members as one (M, h, w) array; raises on dimension mismatch."""
        shape = self.members[0].shape
        if any(m.shape != shape for m in self.members):
            raise ValueError("ensemble member dimension mismatch")
        return np.stack([m.values for m in self.members])

    def shared_mask(self) -> np.ndarray | None:
        """The mask common to all members; raises if members disagree."""
        mask = self.members[0].mask
        if any(not masks_equal(m.mask, mask) for m in self.members[1:]):
            raise ValueError("ensemble member mask mismatch")
        return mask


@dataclass(frozen=True, eq=False)
class PairedRecord:
    """One (coarse predictor, fine truth, ensemble) triple."""

    coarse: CoarseField
    truth: GridField
    ensemble: EnsembleBatch


@dataclass(frozen=True, eq=False)
class PairedDataset:
    """A split-tagged list of paired records."""

    records: tuple[PairedRecord, ...] = field(default_factory=tuple)
    split_tag: str = "calibration"

    def __post_init__(self):
        object.__setattr__(self, "records", tuple(self.records))
        if self.split_tag not in SPLIT_TAGS:
            raise ValueError(
                f"split_tag must be one of {SPLIT_TAGS}, got {self.split_tag!r}"
            )

    def __len__(self) -> int:
        return len(self.records)


def _finite_at_valid(fieldobj: GridField) -> bool:
    if fieldobj.mask is None:
        return bool(np.isfinite(fieldobj.values).all())
    return bool(np.isfinite(fieldobj.values[fieldobj.mask]).all())


def validate_dataset(dataset: PairedDataset) -> list[str]:
    """Diagnostic scan of every dataset invariant.

    Returns an empty list iff all invariants hold; otherwise one message per
    violation, each naming the offending record index.  Never raises.
    """
    problems: list[str] = []
    records = dataset.records
    if not records:
        return problems
    ref = records[0]
    for i, rec in enumerate(records):
        truth = rec.truth
        if not _finite_at_valid(truth):
            problems.append(f"record {i}: non-finite value at a valid grid point in truth field")
        if rec.coarse.height > truth.height or rec.coarse.width > truth.width:
            problems.append(f"record {i}: coarse field exceeds fine grid dimensions")
        members = rec.ensemble.members
        if len(members) < 2:
            problems.append(f"record {i}: ensemble has fewer than 2 members")
        if any(m.shape != truth.shape for m in members):
            problems.append(f"record {i}: ensemble member dimension mismatch")
        else:
            for m_index, member in enumerate(members):
                if not masks_equal(member.mask, truth.mask):
                    problems.append(f"record {i}: ensemble member {m_index} mask mismatch")
                elif not _finite_at_valid(member):
                    problems.append(
                        f"record {i}: non-finite value at a valid grid point"
                        f" in ensemble member {m_index}"
                    )
        if rec.truth.shape != ref.truth.shape:
            problems.append(f"record {i}: fine grid dimensions differ from record 0")
        elif not masks_equal(rec.truth.mask, ref.truth.mask):
            problems.append(f"record {i}: mask differs from record 0")
        if rec.ensemble.member_count != ref.ensemble.member_count:
            problems.append(f"record {i}: ensemble member count differs from record 0")
    return problems
