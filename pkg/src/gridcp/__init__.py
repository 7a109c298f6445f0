"""Conformal calibration and verification for gridded ensemble downscaling.

The library turns ensembles of downscaled fields into per-grid-point quantile
predictions, conformalizes them (symmetric split or asymmetric per-tail
offsets) on a held-out calibration split for finite-sample marginal coverage,
and scores the resulting intervals with the usual verification metrics.
A synthetic generator with closed-form conditional quantiles makes the
coverage guarantees checkable end to end.
"""

from ._backend import available_backends, backend_name
from .conformal import (ConformalOffsets, ConformityScoreGrid, IntervalGridSet,
                        apply_offsets, calibrate_cqr, calibrate_split_cp,
                        conformal_rank, intervals_to_quantiles, raw_intervals)
from .grids import (CoarseField, EnsembleBatch, GridField, PairedDataset,
                    PairedRecord, validate_dataset)
from .levels import (LevelScheme, default_levels, level_fraction, level_key,
                     make_scheme)
from .metrics import (MetricAccumulator, MetricReport, evaluate,
                      interval_score, picp, quantile_score)
from .pipeline import PipelineConfig, load_config
from .quantiles import (QuantileGridSet, SmallEnsembleWarning,
                        compose_residual, constant_quantiles,
                        empirical_quantile, ensemble_to_quantiles, member_rank)
from .storage import (DataError, StoredDataset, read_grid, write_dataset,
                      write_grid)
from .synth import (OracleQuantiles, SynthConfig, oracle_quantiles,
                    synthesize_dataset, synthesize_records)

__version__ = "0.1.0"

__all__ = [
    "available_backends", "backend_name",
    "ConformalOffsets", "ConformityScoreGrid", "IntervalGridSet",
    "apply_offsets", "calibrate_cqr", "calibrate_split_cp", "conformal_rank",
    "intervals_to_quantiles", "raw_intervals",
    "CoarseField", "EnsembleBatch", "GridField", "PairedDataset",
    "PairedRecord", "validate_dataset",
    "LevelScheme", "default_levels", "level_fraction", "level_key",
    "make_scheme",
    "MetricAccumulator", "MetricReport", "evaluate", "interval_score",
    "picp", "quantile_score",
    "PipelineConfig", "load_config",
    "QuantileGridSet", "SmallEnsembleWarning", "compose_residual",
    "constant_quantiles", "empirical_quantile", "ensemble_to_quantiles",
    "member_rank",
    "DataError", "StoredDataset", "read_grid", "write_dataset", "write_grid",
    "OracleQuantiles", "SynthConfig", "oracle_quantiles",
    "synthesize_dataset", "synthesize_records",
    "__version__",
]
