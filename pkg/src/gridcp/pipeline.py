"""End-to-end runs behind the command line.

Pipeline stages mirror the evaluation protocol: synthesize paired splits,
reduce ensembles to quantile grids, calibrate offsets on the calibration
split, apply them to the test split, evaluate metrics, and simulate coverage
over many independent splits.  Every stage persists its artifacts with a
config echo so a run can be audited and reproduced; identical configs and
seeds give byte-identical outputs regardless of worker count.

The coverage simulation redraws calibration and test data in every trial and
checks the aggregate empirical coverage of conformal intervals against the
finite-sample band [beta, beta + slack] with slack 1/(n+1) for the symmetric
route (2/(n+1) for the two independently calibrated tails of the asymmetric
route), within three standard errors of the trial mean.  For speed it
evaluates a fixed random sub-grid of points and vectorizes records per
trial; the scoring, ranking and inclusive-coverage rules are exactly the
library ones (order statistics at rank ceil((n+1) * beta), closed
intervals), and its quantile model for the asymmetric route is the
dispersion-scaled closed-form quantile surface of the generator.
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._backend import order_stats
from .conformal import (apply_offsets, calibrate_cqr, calibrate_split_cp,
                        conformal_rank, intervals_to_quantiles, raw_intervals)
from .grids import GridField
from .levels import LevelScheme, default_levels, level_key, make_scheme
from .metrics import MetricAccumulator
from .quantiles import constant_quantiles, ensemble_to_quantiles
from .report import (sanitize_json, save_metric_grids, save_report_charts,
                     save_report_tables, save_summary_json)
from .storage import (DATASET_MANIFEST, QUANTILES_MANIFEST, DataError,
                      StoredDataset, load_offsets, load_quantiles,
                      save_intervals, save_offsets, save_quantiles,
                      write_dataset_manifest, write_json, write_record_files)
from .synth import (COARSE_AMPLITUDE, SynthConfig, bilinear_upsample_at,
                    deterministic_field, elevation_perturbation, sigma_field,
                    skew_normal_draws, smooth3, standard_skew_normal_quantile,
                    synthesize_records)

METHODS = ("raw", "split-cp", "cqr")
SPLITS = ("calibration", "test")

# Spawn-key prefixes reserved by the coverage simulation so its draws never
# collide with dataset record streams.
_SIM_POINTS_STREAM = 101
_SIM_TRIAL_STREAM = 102


@dataclass(frozen=True)
class PipelineConfig:
    """One declarative description of a pipeline run."""

    dataset_dir: str = "dataset"
    output_dir: str = "out"
    scheme: LevelScheme = field(default_factory=default_levels)
    n_calibration: int = 730
    n_test: int = 730
    method: str = "cqr"
    synth: SynthConfig = field(default_factory=SynthConfig)
    trial_count: int = 200
    jobs: int = 1
    sim_calibration_size: int = 99
    sim_test_draws: int = 1000
    sim_subgrid_points: int = 100

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        for name in ("n_calibration", "n_test", "trial_count", "jobs",
                     "sim_calibration_size", "sim_test_draws", "sim_subgrid_points"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1, got {getattr(self, name)}")

    def to_dict(self) -> dict:
        return {
            "dataset_dir": self.dataset_dir,
            "output_dir": self.output_dir,
            "coverage_levels": [
                f"{c.numerator}/{c.denominator}" for c in self.scheme.coverage_levels
            ],
            "quantile_levels": [
                f"{q.numerator}/{q.denominator}" for q in self.scheme.quantile_levels
            ],
            "n_calibration": self.n_calibration,
            "n_test": self.n_test,
            "method": self.method,
            "synth": self.synth.to_dict(),
            "trial_count": self.trial_count,
            "jobs": self.jobs,
            "sim_calibration_size": self.sim_calibration_size,
            "sim_test_draws": self.sim_test_draws,
            "sim_subgrid_points": self.sim_subgrid_points,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)} - {"scheme", "synth"}
        known |= {"coverage_levels", "quantile_levels", "synth"}
        extra = set(data) - known
        if extra:
            raise DataError(f"unknown config keys: {sorted(extra)}")
        try:
            coverage = data.get("coverage_levels")
            quantiles = data.get("quantile_levels")
            if coverage is None and quantiles is None:
                scheme = default_levels()
            elif quantiles is None:
                scheme = make_scheme(coverage)
            else:
                scheme = LevelScheme(tuple(coverage or ()), tuple(quantiles))
            synth = SynthConfig.from_dict(data.get("synth", {}))
            kwargs = {
                k: data[k] for k in data
                if k not in ("coverage_levels", "quantile_levels", "synth")
            }
            return cls(scheme=scheme, synth=synth, **kwargs)
        except (TypeError, ValueError) as exc:
            raise DataError(f"invalid config: {exc}") from exc


def load_config(path) -> PipelineConfig:
    from .storage import read_json

    data = read_json(path)
    if not isinstance(data, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return PipelineConfig.from_dict(data)


def _split_path(cfg: PipelineConfig, split: str) -> Path:
    return Path(cfg.dataset_dir) / split


def _open_split(cfg: PipelineConfig, split: str) -> StoredDataset:
    path = _split_path(cfg, split)
    if not (path / DATASET_MANIFEST).exists():
        raise DataError(
            f"missing dataset split '{split}' at {path} (run the synth subcommand"
            f" or point dataset_dir at an existing dataset)"
        )
    return StoredDataset(path)


def _det_prediction(record, synth_cfg: SynthConfig | None) -> GridField:
    """Deterministic prediction for the symmetric route.

    Datasets generated here carry their generator settings, so the exact
    noise-free estimate is reconstructed; for foreign datasets the ensemble
    mean stands in as the deterministic estimate.
    """
    if synth_cfg is not None:
        values = deterministic_field(synth_cfg, record.coarse)
    else:
        values = record.ensemble.stacked().mean(axis=0)
    return GridField(values, mask=record.truth.mask)


def _quantile_dir(cfg: PipelineConfig, split: str, index: int) -> Path:
    return Path(cfg.output_dir) / "quantiles" / split / f"r{index:05d}"


def _record_quantiles(cfg: PipelineConfig, split: str, index: int, record):
    """Stored per-record quantiles when present, else computed from members."""
    qdir = _quantile_dir(cfg, split, index)
    if (qdir / QUANTILES_MANIFEST).exists():
        return load_quantiles(qdir)
    return ensemble_to_quantiles(record.ensemble, cfg.scheme)


def _synth_record_entry(args) -> dict:
    synth_cfg, directory, index = args
    record = synthesize_records(synth_cfg, 1, start_index=index)[0]
    return write_record_files(directory, f"r{index:05d}", record)


def _pool_map(jobs: int, fn, payloads: list):
    """Run payloads through fn, in order, optionally on a process pool."""
    if jobs <= 1 or len(payloads) <= 1:
        return [fn(p) for p in payloads]
    chunk = max(1, len(payloads) // (jobs * 4))
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, payloads, chunksize=chunk))


def run_synth(cfg: PipelineConfig) -> Path:
    """Write calibration and test splits of i.i.d. synthetic records.

    Calibration records come first in the index stream, test records after,
    so the splits are disjoint and ordered like a temporal split.
    """
    base = Path(cfg.dataset_dir)
    base.mkdir(parents=True, exist_ok=True)
    layout = (
        ("calibration", 0, cfg.n_calibration),
        ("test", cfg.n_calibration, cfg.n_test),
    )
    for split, start, count in layout:
        directory = base / split
        directory.mkdir(parents=True, exist_ok=True)
        payloads = [(cfg.synth, directory, start + i) for i in range(count)]
        entries = _pool_map(cfg.jobs, _synth_record_entry, payloads)
        write_dataset_manifest(directory, split, entries, cfg.synth)
    write_json(base / "config_echo.json", cfg.to_dict())
    return base


def run_quantiles(cfg: PipelineConfig) -> Path:
    """Persist per-record ensemble quantile grids for every present split."""
    out = Path(cfg.output_dir) / "quantiles"
    processed = {}
    for split in SPLITS:
        if not (_split_path(cfg, split) / DATASET_MANIFEST).exists():
            continue
        stored = _open_split(cfg, split)
        for index in range(len(stored)):
            record = stored.record(index)
            qset = ensemble_to_quantiles(record.ensemble, cfg.scheme)
            save_quantiles(_quantile_dir(cfg, split, index), qset)
        processed[split] = len(stored)
    if not processed:
        raise DataError(f"no dataset splits found under {cfg.dataset_dir}")
    write_json(out / "run.json", {"config": cfg.to_dict(), "records": processed})
    return out


def run_calibrate(cfg: PipelineConfig) -> Path:
    """Compute and persist conformal offsets from the calibration split."""
    if cfg.method == "raw":
        raise DataError("method 'raw' uses no calibration; choose split-cp or cqr")
    stored = _open_split(cfg, "calibration")
    if len(stored) == 0:
        raise DataError("calibration split is empty")
    synth_cfg = stored.synth_config
    truths = []
    if cfg.method == "split-cp":
        predictions = []
        for index in range(len(stored)):
            record = stored.record(index)
            truths.append(record.truth)
            predictions.append(_det_prediction(record, synth_cfg))
        offsets = calibrate_split_cp(predictions, truths, cfg.scheme)
    else:
        quantile_sets = []
        for index in range(len(stored)):
            record = stored.record(index)
            truths.append(record.truth)
            quantile_sets.append(_record_quantiles(cfg, "calibration", index, record))
        offsets = calibrate_cqr(quantile_sets, truths, cfg.scheme)
    out_dir = Path(cfg.output_dir) / f"offsets_{cfg.method}"
    save_offsets(out_dir, offsets)
    write_json(out_dir / "run.json", {
        "config": cfg.to_dict(),
        "calibration_records": len(truths),
        "unbounded_levels": [
            level_key(lv) for lv, flag in zip(offsets.levels, offsets.unbounded) if flag
        ],
    })
    return out_dir


def _load_method_offsets(cfg: PipelineConfig):
    path = Path(cfg.output_dir) / f"offsets_{cfg.method}"
    from .storage import OFFSETS_MANIFEST

    if not (path / OFFSETS_MANIFEST).exists():
        raise DataError(
            f"missing offsets for method {cfg.method} at {path}"
            f" (run the calibrate subcommand first)"
        )
    return load_offsets(path)


def _test_record_intervals(cfg: PipelineConfig, index: int, record, offsets,
                           synth_cfg: SynthConfig | None):
    """Interval and scoring-quantile sets for one test record."""
    if cfg.method == "raw":
        qset = _record_quantiles(cfg, "test", index, record)
        intervals = raw_intervals(qset, cfg.scheme)
        return intervals, qset
    if cfg.method == "split-cp":
        qset = constant_quantiles(_det_prediction(record, synth_cfg), cfg.scheme)
    else:
        qset = _record_quantiles(cfg, "test", index, record)
    intervals = apply_offsets(qset, offsets, cfg.scheme)
    return intervals, intervals_to_quantiles(intervals, cfg.scheme)


def run_apply(cfg: PipelineConfig) -> Path:
    """Persist per-record calibrated (or raw) intervals for the test split."""
    stored = _open_split(cfg, "test")
    if len(stored) == 0:
        raise DataError("test split is empty")
    synth_cfg = stored.synth_config
    offsets = None if cfg.method == "raw" else _load_method_offsets(cfg)
    out_dir = Path(cfg.output_dir) / f"intervals_{cfg.method}"
    collapsed = None
    for index in range(len(stored)):
        record = stored.record(index)
        intervals, _ = _test_record_intervals(cfg, index, record, offsets, synth_cfg)
        save_intervals(out_dir / f"r{index:05d}", intervals)
        tally = np.asarray(intervals.collapsed, dtype=np.int64)
        collapsed = tally if collapsed is None else collapsed + tally
    write_json(out_dir / "run.json", {
        "config": cfg.to_dict(),
        "test_records": len(stored),
        "collapsed": {
            level_key(lv): int(c)
            for lv, c in zip(cfg.scheme.coverage_levels, collapsed)
        },
    })
    return out_dir


def run_evaluate(cfg: PipelineConfig) -> tuple[Path, dict]:
    """Stream the test split through the metric suite and emit reports."""
    stored = _open_split(cfg, "test")
    if len(stored) == 0:
        raise DataError("test split is empty")
    synth_cfg = stored.synth_config
    offsets = None if cfg.method == "raw" else _load_method_offsets(cfg)
    accumulator = None
    collapsed = np.zeros(len(cfg.scheme.coverage_levels), dtype=np.int64)
    nesting_total = 0
    provenance = None
    for index in range(len(stored)):
        record = stored.record(index)
        intervals, scoring_quantiles = _test_record_intervals(
            cfg, index, record, offsets, synth_cfg
        )
        if accumulator is None:
            accumulator = MetricAccumulator(
                cfg.scheme, record.truth.shape, record.truth.mask
            )
        accumulator.add_record(intervals, scoring_quantiles, record.truth)
        collapsed += np.asarray(intervals.collapsed, dtype=np.int64)
        nesting_total += intervals.nesting_violations()
        provenance = intervals.provenance
    report = accumulator.finalize()
    summary = report.to_summary_dict()
    method_dir = Path(cfg.output_dir) / cfg.method
    extra = {
        "config": cfg.to_dict(),
        "provenance": provenance,
        "collapsed": {
            level_key(lv): int(c)
            for lv, c in zip(cfg.scheme.coverage_levels, collapsed)
        },
        "nesting_violation_points": nesting_total,
    }
    save_summary_json(method_dir / "summary.json", cfg.method, summary, extra)
    save_metric_grids(method_dir, report)
    sanitized = sanitize_json(summary)
    save_report_tables(method_dir, [(cfg.method, sanitized)], cfg.scheme)
    save_report_charts(method_dir, [(cfg.method, sanitized)], cfg.scheme)
    return method_dir, summary


def run_report(cfg: PipelineConfig) -> Path:
    """Merge every evaluated method into comparison tables and charts."""
    from .storage import read_json

    out = Path(cfg.output_dir)
    entries = []
    for method in METHODS:
        summary_path = out / method / "summary.json"
        if summary_path.exists():
            payload = read_json(summary_path)
            entries.append((method, payload.get("metrics", {})))
    if not entries:
        raise DataError(
            f"no evaluation summaries found under {out} (run evaluate first)"
        )
    report_dir = out / "report"
    try:
        save_report_tables(report_dir, entries, cfg.scheme)
        save_report_charts(report_dir, entries, cfg.scheme)
    except KeyError as exc:
        raise DataError(
            f"summary missing level {exc}; re-run evaluate with the current levels"
        ) from exc
    write_json(report_dir / "run.json", {
        "config": cfg.to_dict(),
        "methods": [m for m, _ in entries],
    })
    return report_dir


def _sim_trial(payload) -> np.ndarray:
    """Coverage of conformal intervals for one fresh calibration/test redraw."""
    (synth_cfg, trial, n, draws, rows, cols, sigma_sub, pert_sub, method,
     level_params) = payload
    seq = np.random.SeedSequence(synth_cfg.noise_seed,
                                 spawn_key=(_SIM_TRIAL_STREAM, trial))
    rng = np.random.Generator(np.random.PCG64(seq))
    total = n + draws
    white = rng.standard_normal((total,) + synth_cfg.coarse_dims)
    coarse = COARSE_AMPLITUDE * synth_cfg.base_sigma * smooth3(white)
    det = bilinear_upsample_at(coarse, synth_cfg.upscale_factor, rows, cols) + pert_sub
    z = skew_normal_draws(rng, (total, rows.size), synth_cfg.skew)
    truth = det + sigma_sub * z
    lam = synth_cfg.dispersion_factor
    coverages = np.empty(len(level_params))
    if method == "split-cp":
        scores = np.abs(truth[:n] - det[:n])
        errors = np.abs(truth[n:] - det[n:])
        for i, (k,) in enumerate(level_params):
            if k > n:
                coverages[i] = 1.0
                continue
            off = order_stats(scores, np.array([k], dtype=np.int64))[0]
            coverages[i] = float(np.mean(errors <= off))
    else:
        for i, (k, z_lo, z_hi) in enumerate(level_params):
            q_lo = det + lam * sigma_sub * z_lo
            q_hi = det + lam * sigma_sub * z_hi
            if k > n:
                coverages[i] = 1.0
                continue
            rank = np.array([k], dtype=np.int64)
            low_off = order_stats(np.ascontiguousarray(q_lo[:n] - truth[:n]), rank)[0]
            up_off = order_stats(np.ascontiguousarray(truth[:n] - q_hi[:n]), rank)[0]
            inside = (truth[n:] >= q_lo[n:] - low_off) & (truth[n:] <= q_hi[n:] + up_off)
            coverages[i] = float(np.mean(inside))
    return coverages


def run_coverage_sim(cfg: PipelineConfig) -> tuple[bool, dict]:
    """Monte-Carlo check of the finite-sample coverage band.

    Every trial redraws a calibration set of ``sim_calibration_size`` records
    and ``sim_test_draws`` test records on a fixed random sub-grid of
    ``sim_subgrid_points`` points, calibrates with the configured method, and
    measures empirical coverage.  Returns (band_ok, stats) and persists
    per-trial plus aggregate CSVs; a False flag maps to the CLI's
    band-violation exit code.
    """
    if cfg.method not in ("split-cp", "cqr"):
        raise DataError("coverage-sim needs method split-cp or cqr")
    synth_cfg = cfg.synth
    n = cfg.sim_calibration_size
    height, width = synth_cfg.fine_dims
    points = cfg.sim_subgrid_points
    if points > height * width:
        raise DataError(
            f"sim_subgrid_points {points} exceeds the {height}x{width} fine grid"
        )
    seq = np.random.SeedSequence(synth_cfg.noise_seed, spawn_key=(_SIM_POINTS_STREAM,))
    rng = np.random.Generator(np.random.PCG64(seq))
    flat = np.sort(rng.choice(height * width, size=points, replace=False))
    rows, cols = np.divmod(flat, width)
    sigma_sub = sigma_field(synth_cfg).ravel()[flat].copy()
    pert_sub = elevation_perturbation(synth_cfg).ravel()[flat].copy()

    level_params = []
    for cov in cfg.scheme.coverage_levels:
        if cfg.method == "split-cp":
            level_params.append((conformal_rank(n, cov),))
        else:
            tail_lo, tail_hi = cfg.scheme.tail_levels(cov)
            level_params.append((
                conformal_rank(n, 1 - cfg.scheme.alpha(cov) / 2),
                standard_skew_normal_quantile(tail_lo, synth_cfg.skew),
                standard_skew_normal_quantile(tail_hi, synth_cfg.skew),
            ))
    payloads = [
        (synth_cfg, trial, n, cfg.sim_test_draws, rows, cols, sigma_sub,
         pert_sub, cfg.method, tuple(level_params))
        for trial in range(cfg.trial_count)
    ]
    results = np.vstack(_pool_map(cfg.jobs, _sim_trial, payloads))

    slack = 1.0 / (n + 1) if cfg.method == "split-cp" else 2.0 / (n + 1)
    out_dir = Path(cfg.output_dir) / "coverage_sim"
    out_dir.mkdir(parents=True, exist_ok=True)
    keys = [level_key(cov) for cov in cfg.scheme.coverage_levels]
    lines = ["trial," + ",".join(keys)]
    for trial in range(cfg.trial_count):
        cells = ",".join(repr(float(v)) for v in results[trial])
        lines.append(f"{trial},{cells}")
    (out_dir / "trials.csv").write_text("\n".join(lines) + "\n")

    per_level = {}
    all_ok = True
    summary_lines = [
        "level,mean_coverage,std_error,band_lower,band_upper,within_band"
    ]
    for i, cov in enumerate(cfg.scheme.coverage_levels):
        mean = float(results[:, i].mean())
        if cfg.trial_count > 1:
            se = float(results[:, i].std(ddof=1) / np.sqrt(cfg.trial_count))
        else:
            se = 0.0
        lo_band = float(cov) - 3.0 * se
        hi_band = float(cov) + slack + 3.0 * se
        ok = lo_band <= mean <= hi_band
        all_ok = all_ok and ok
        per_level[keys[i]] = {
            "mean_coverage": mean,
            "std_error": se,
            "band_lower": lo_band,
            "band_upper": hi_band,
            "within_band": ok,
        }
        summary_lines.append(
            f"{keys[i]},{mean!r},{se!r},{lo_band!r},{hi_band!r},{ok}"
        )
    (out_dir / "summary.csv").write_text("\n".join(summary_lines) + "\n")
    stats = {
        "config": cfg.to_dict(),
        "method": cfg.method,
        "calibration_size": n,
        "band_slack": slack,
        "levels": per_level,
        "all_within_band": all_ok,
    }
    write_json(out_dir / "run.json", stats)
    return all_ok, stats
