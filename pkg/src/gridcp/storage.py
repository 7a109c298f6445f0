"""File formats and artifact persistence.

Grids travel as CGF1 binary files: an 8-byte magic "CGRIDv1\\0", little-endian
u32 height and width, a u8 mask-present flag, height*width float64 values in
row-major order, then (when flagged) height*width u8 mask bytes.  Small grids
can also be ingested from CSV with header ``row,col,value[,mask]``.

Composite artifacts (datasets, quantile sets, offsets, intervals) are
directories of CGF1 files tied together by a JSON manifest.  Levels are
stored both as exact fraction strings (for lossless round-trips) and as the
decimal keys used in filenames.  All JSON is written with sorted keys and a
trailing newline so repeated runs are byte-identical.

Every malformed or missing input surfaces as DataError, which the CLI maps
to its data-error exit code.
"""

from __future__ import annotations

import csv
import json
import struct
from fractions import Fraction
from pathlib import Path

import numpy as np

from .conformal import ConformalOffsets, IntervalGridSet
from .grids import CoarseField, EnsembleBatch, GridField, PairedDataset, PairedRecord
from .levels import level_fraction, level_key
from .quantiles import QuantileGridSet
from .synth import SynthConfig

MAGIC = b"CGRIDv1\x00"
_HEADER = struct.Struct("<IIB")

DATASET_MANIFEST = "dataset.json"
QUANTILES_MANIFEST = "quantiles.json"
OFFSETS_MANIFEST = "offsets.json"
INTERVALS_MANIFEST = "intervals.json"


class DataError(Exception):
    """Missing or malformed input data (maps to CLI exit code 2)."""


def write_grid(path, values: np.ndarray, mask: np.ndarray | None = None) -> None:
    """Write one grid (and optional validity mask) as a CGF1 file."""
    values = np.ascontiguousarray(values, dtype="<f8")
    if values.ndim != 2:
        raise ValueError(f"grid values must be 2-D, got shape {values.shape}")
    height, width = values.shape
    if mask is not None and mask.shape != values.shape:
        raise ValueError(f"mask shape {mask.shape} does not match values shape {values.shape}")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(height, width, 0 if mask is None else 1))
        fh.write(values.tobytes())
        if mask is not None:
            fh.write(np.ascontiguousarray(mask, dtype=np.uint8).tobytes())


def read_grid(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a CGF1 file back into (values, mask-or-None)."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read grid file {path}: {exc}") from exc
    if len(blob) < len(MAGIC) + _HEADER.size:
        raise DataError(f"{path}: truncated grid file")
    if blob[: len(MAGIC)] != MAGIC:
        raise DataError(f"{path}: not a CGF1 grid file")
    height, width, has_mask = _HEADER.unpack_from(blob, len(MAGIC))
    if height < 1 or width < 1:
        raise DataError(f"{path}: invalid grid dimensions {height}x{width}")
    offset = len(MAGIC) + _HEADER.size
    count = height * width
    expected = offset + 8 * count + (count if has_mask else 0)
    if len(blob) != expected:
        raise DataError(
            f"{path}: grid file size {len(blob)} does not match header"
            f" (expected {expected})"
        )
    values = np.frombuffer(blob, dtype="<f8", count=count, offset=offset)
    values = values.reshape(height, width).astype(np.float64)
    mask = None
    if has_mask:
        raw = np.frombuffer(blob, dtype=np.uint8, count=count, offset=offset + 8 * count)
        if np.any(raw > 1):
            raise DataError(f"{path}: mask bytes must be 0 or 1")
        mask = raw.reshape(height, width).astype(bool)
    return values, mask


def write_csv_grid(path, values: np.ndarray, mask: np.ndarray | None = None) -> None:
    """Write a grid as row,col,value[,mask] CSV in row-major order."""
    values = np.asarray(values, dtype=np.float64)
    path = Path(path)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        if mask is None:
            writer.writerow(["row", "col", "value"])
            for (r, c), v in np.ndenumerate(values):
                writer.writerow([r, c, repr(float(v))])
        else:
            writer.writerow(["row", "col", "value", "mask"])
            for (r, c), v in np.ndenumerate(values):
                writer.writerow([r, c, repr(float(v)), int(mask[r, c])])


def read_csv_grid(path) -> tuple[np.ndarray, np.ndarray | None]:
    """Read a row,col,value[,mask] CSV into (values, mask-or-None).

    Every cell of the implied bounding grid must appear exactly once.
    """
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header is None:
                raise DataError(f"{path}: empty CSV grid")
            header = [h.strip().lower() for h in header]
            if header not in (["row", "col", "value"], ["row", "col", "value", "mask"]):
                raise DataError(
                    f"{path}: CSV header must be row,col,value[,mask], got {header}"
                )
            has_mask = len(header) == 4
            entries = []
            for line_no, fields in enumerate(reader, start=2):
                if not fields:
                    continue
                if len(fields) != len(header):
                    raise DataError(f"{path}: line {line_no}: wrong field count")
                try:
                    r, c = int(fields[0]), int(fields[1])
                    v = float(fields[2])
                    m = int(fields[3]) if has_mask else 1
                except ValueError as exc:
                    raise DataError(f"{path}: line {line_no}: {exc}") from exc
                if r < 0 or c < 0 or m not in (0, 1):
                    raise DataError(f"{path}: line {line_no}: invalid cell")
                entries.append((r, c, v, m))
    except OSError as exc:
        raise DataError(f"cannot read CSV grid {path}: {exc}") from exc
    if not entries:
        raise DataError(f"{path}: CSV grid has no cells")
    height = max(e[0] for e in entries) + 1
    width = max(e[1] for e in entries) + 1
    values = np.full((height, width), np.nan)
    seen = np.zeros((height, width), dtype=bool)
    mask = np.zeros((height, width), dtype=bool) if has_mask else None
    for r, c, v, m in entries:
        if seen[r, c]:
            raise DataError(f"{path}: duplicate cell ({r}, {c})")
        seen[r, c] = True
        values[r, c] = v
        if mask is not None:
            mask[r, c] = bool(m)
    if not seen.all():
        r, c = np.argwhere(~seen)[0]
        raise DataError(f"{path}: missing cell ({r}, {c}) of {height}x{width} grid")
    return values, mask


def write_json(path, payload: dict) -> None:
    """Deterministic JSON: sorted keys, two-space indent, trailing newline."""
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text + "\n")


def read_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from exc


def _level_entry(level) -> dict:
    frac = level_fraction(level)
    return {"level": f"{frac.numerator}/{frac.denominator}", "key": level_key(frac)}


def _parse_level(entry: dict, path) -> Fraction:
    try:
        return level_fraction(Fraction(entry["level"]))
    except (KeyError, ValueError, ZeroDivisionError) as exc:
        raise DataError(f"{path}: bad level entry {entry!r}") from exc


def save_quantiles(directory, qset: QuantileGridSet) -> None:
    """One CGF1 file per level plus a JSON index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    levels = []
    for level in qset.levels:
        entry = _level_entry(level)
        entry["file"] = f"q_{entry['key']}.cgf"
        write_grid(directory / entry["file"], qset.grid(level), qset.mask)
        levels.append(entry)
    write_json(directory / QUANTILES_MANIFEST, {"kind": "quantiles", "levels": levels})


def load_quantiles(directory) -> QuantileGridSet:
    directory = Path(directory)
    manifest = read_json(directory / QUANTILES_MANIFEST)
    levels = []
    grids = []
    mask = None
    for entry in manifest.get("levels", []):
        frac = _parse_level(entry, directory / QUANTILES_MANIFEST)
        values, mask = read_grid(directory / entry["file"])
        levels.append(frac)
        grids.append(values)
    if not grids:
        raise DataError(f"{directory}: quantile index lists no levels")
    return QuantileGridSet(levels=tuple(levels), stack=np.stack(grids), mask=mask)


def save_offsets(directory, offsets: ConformalOffsets) -> None:
    """CGF1 grids per (level, side) plus a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    levels = []
    for i, level in enumerate(offsets.levels):
        entry = _level_entry(level)
        entry["lower"] = f"off_{entry['key']}_lower.cgf"
        entry["upper"] = f"off_{entry['key']}_upper.cgf"
        entry["unbounded"] = offsets.unbounded[i]
        write_grid(directory / entry["lower"], offsets.lower_stack[i], offsets.mask)
        write_grid(directory / entry["upper"], offsets.upper_stack[i], offsets.mask)
        levels.append(entry)
    write_json(directory / OFFSETS_MANIFEST, {
        "kind": "offsets",
        "method": offsets.method,
        "calibration_size": offsets.calibration_size,
        "levels": levels,
    })


def load_offsets(directory) -> ConformalOffsets:
    directory = Path(directory)
    manifest = read_json(directory / OFFSETS_MANIFEST)
    levels, lower, upper, flags = [], [], [], []
    mask = None
    for entry in manifest.get("levels", []):
        frac = _parse_level(entry, directory / OFFSETS_MANIFEST)
        lo, mask = read_grid(directory / entry["lower"])
        up, _ = read_grid(directory / entry["upper"])
        levels.append(frac)
        lower.append(lo)
        upper.append(up)
        flags.append(bool(entry.get("unbounded", False)))
    if not levels:
        raise DataError(f"{directory}: offsets manifest lists no levels")
    try:
        return ConformalOffsets(
            levels=tuple(levels),
            lower_stack=np.stack(lower),
            upper_stack=np.stack(upper),
            unbounded=tuple(flags),
            calibration_size=int(manifest["calibration_size"]),
            method=manifest["method"],
            mask=mask,
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"{directory}: invalid offsets manifest: {exc}") from exc


def save_intervals(directory, intervals: IntervalGridSet) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    levels = []
    for i, level in enumerate(intervals.levels):
        entry = _level_entry(level)
        entry["lower"] = f"int_{entry['key']}_lower.cgf"
        entry["upper"] = f"int_{entry['key']}_upper.cgf"
        entry["collapsed"] = intervals.collapsed[i]
        write_grid(directory / entry["lower"], intervals.lower_stack[i], intervals.mask)
        write_grid(directory / entry["upper"], intervals.upper_stack[i], intervals.mask)
        levels.append(entry)
    write_json(directory / INTERVALS_MANIFEST, {
        "kind": "intervals",
        "provenance": intervals.provenance,
        "levels": levels,
    })


def load_intervals(directory) -> IntervalGridSet:
    directory = Path(directory)
    manifest = read_json(directory / INTERVALS_MANIFEST)
    levels, lower, upper, collapsed = [], [], [], []
    mask = None
    for entry in manifest.get("levels", []):
        frac = _parse_level(entry, directory / INTERVALS_MANIFEST)
        lo, mask = read_grid(directory / entry["lower"])
        up, _ = read_grid(directory / entry["upper"])
        levels.append(frac)
        lower.append(lo)
        upper.append(up)
        collapsed.append(int(entry.get("collapsed", 0)))
    if not levels:
        raise DataError(f"{directory}: intervals manifest lists no levels")
    try:
        return IntervalGridSet(
            levels=tuple(levels),
            lower_stack=np.stack(lower),
            upper_stack=np.stack(upper),
            provenance=manifest.get("provenance", "raw-quantile"),
            mask=mask,
            collapsed=tuple(collapsed),
        )
    except ValueError as exc:
        raise DataError(f"{directory}: invalid intervals manifest: {exc}") from exc


def write_record_files(directory, name: str, record: PairedRecord) -> dict:
    """Write one record's grids under ``directory/name`` and return its entry."""
    rec_dir = Path(directory) / name
    rec_dir.mkdir(parents=True, exist_ok=True)
    write_grid(rec_dir / "coarse.cgf", record.coarse.values)
    write_grid(rec_dir / "truth.cgf", record.truth.values, record.truth.mask)
    members = []
    for m, member in enumerate(record.ensemble.members):
        member_file = f"m{m:03d}.cgf"
        write_grid(rec_dir / member_file, member.values, member.mask)
        members.append(f"{name}/{member_file}")
    return {
        "coarse": f"{name}/coarse.cgf",
        "truth": f"{name}/truth.cgf",
        "members": members,
    }


def write_dataset_manifest(directory, split_tag: str, entries: list,
                           synth_config: SynthConfig | None = None) -> None:
    manifest = {
        "format": "gridcp-dataset-v1",
        "split_tag": split_tag,
        "record_count": len(entries),
        "records": entries,
        "synth_config": None if synth_config is None else synth_config.to_dict(),
    }
    write_json(Path(directory) / DATASET_MANIFEST, manifest)


def write_dataset(directory, dataset: PairedDataset,
                  synth_config: SynthConfig | None = None,
                  start_index: int = 0) -> None:
    """Persist a paired dataset as one subdirectory of CGF1 files per record."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for offset, record in enumerate(dataset.records):
        entries.append(
            write_record_files(directory, f"r{start_index + offset:05d}", record)
        )
    write_dataset_manifest(directory, dataset.split_tag, entries, synth_config)


class StoredDataset:
    """Lazy reader over a dataset directory; records load on demand."""

    def __init__(self, directory):
        self.directory = Path(directory)
        manifest_path = self.directory / DATASET_MANIFEST
        if not manifest_path.exists():
            raise DataError(f"missing dataset manifest {manifest_path}")
        self.manifest = read_json(manifest_path)
        if self.manifest.get("format") != "gridcp-dataset-v1":
            raise DataError(f"{manifest_path}: unknown dataset format")
        self.split_tag = self.manifest.get("split_tag", "calibration")
        self._records = self.manifest.get("records", [])

    def __len__(self) -> int:
        return len(self._records)

    @property
    def synth_config(self) -> SynthConfig | None:
        raw = self.manifest.get("synth_config")
        return None if raw is None else SynthConfig.from_dict(raw)

    def record(self, index: int) -> PairedRecord:
        try:
            entry = self._records[index]
        except IndexError:
            raise DataError(
                f"record {index} out of range for dataset of {len(self)}"
            ) from None
        coarse_values, _ = read_grid(self.directory / entry["coarse"])
        truth_values, truth_mask = read_grid(self.directory / entry["truth"])
        members = []
        for member_file in entry["members"]:
            values, mask = read_grid(self.directory / member_file)
            members.append(GridField(values, mask=mask))
        return PairedRecord(
            coarse=CoarseField(coarse_values),
            truth=GridField(truth_values, mask=truth_mask),
            ensemble=EnsembleBatch(tuple(members)),
        )

    def iter_records(self):
        for index in range(len(self)):
            yield self.record(index)

    def to_dataset(self) -> PairedDataset:
        """Materialize every record (small datasets only)."""
        return PairedDataset(records=tuple(self.iter_records()), split_tag=self.split_tag)
