"""Synthetic paired datasets with an analytically known conditional law.

Each record draws a smooth random coarse field Y, lifts it to the fine grid
by cell-centered bilinear interpolation, adds a fixed elevation-correlated
perturbation, and adds skew-normal noise whose scale grows with elevation:

    X = upsample(Y) + pert + sigma * Z,   sigma(i,j) = base_sigma * (1 + gain * elev(i,j))

Z is a standardized skew-normal built from two unit normals as
``delta*|U0| + sqrt(1-delta^2)*U1`` (location 0, scale 1); ``skew`` is the
delta parameter, so the classical shape parameter is a = delta/sqrt(1-delta^2)
and the CDF is F(z) = Phi(z) - 2*T(z, a) with Owen's T function.  Because the
conditional law of X given Y is known in closed form, every calibration claim
downstream can be checked against an exact oracle.

The ensemble emulator reuses the same deterministic part and draws member
noise from the same law with scale multiplied by ``dispersion_factor``; a
factor below 1 yields the under-dispersed sampler whose raw intervals
undercover, which is the regime the conformal machinery is meant to repair.

Records are i.i.d. (hence exchangeable).  All randomness flows through
per-record generators derived from (noise_seed, stream, record_index), so a
dataset is reproducible regardless of generation order or parallelism.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtr, owens_t

from .grids import CoarseField, EnsembleBatch, GridField, PairedDataset, PairedRecord
from .levels import LevelScheme, level_fraction

# Amplitude of the smooth coarse signal relative to base_sigma; keeps the
# large-scale structure visibly above the noise floor.
COARSE_AMPLITUDE = 3.0

# Sub-stream tags for per-record generators.
_STREAM_CODES = {"pair": 0, "ensemble": 1}

_QUANTILE_BISECT_TOL = 1e-10


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings; fine dims are coarse dims times upscale_factor."""

    coarse_dims: tuple[int, int] = (9, 11)
    upscale_factor: int = 8
    elevation_seed: int = 7
    noise_seed: int = 1234
    base_sigma: float = 1.0
    heterosc_gain: float = 1.0
    skew: float = 0.6
    dispersion_factor: float = 0.7
    member_count: int = 39

    def __post_init__(self):
        height, width = self.coarse_dims
        object.__setattr__(self, "coarse_dims", (int(height), int(width)))
        if min(self.coarse_dims) < 1:
            raise ValueError(f"coarse dims must be positive, got {self.coarse_dims}")
        if self.upscale_factor < 1:
            raise ValueError(f"upscale factor must be positive, got {self.upscale_factor}")
        if self.elevation_seed < 0 or self.noise_seed < 0:
            raise ValueError("seeds must be nonnegative integers")
        if not self.base_sigma > 0:
            raise ValueError(f"base_sigma must be positive, got {self.base_sigma}")
        if self.heterosc_gain < 0:
            raise ValueError(f"heterosc_gain must be nonnegative, got {self.heterosc_gain}")
        if not -1.0 < self.skew < 1.0:
            raise ValueError(f"skew must lie in (-1, 1), got {self.skew}")
        if self.dispersion_factor < 0:
            raise ValueError(
                f"dispersion_factor must be nonnegative, got {self.dispersion_factor}"
            )
        if self.member_count < 1:
            raise ValueError(f"member_count must be positive, got {self.member_count}")

    @property
    def fine_dims(self) -> tuple[int, int]:
        return (self.coarse_dims[0] * self.upscale_factor,
                self.coarse_dims[1] * self.upscale_factor)

    def to_dict(self) -> dict:
        return {
            "coarse_dims": list(self.coarse_dims),
            "upscale_factor": self.upscale_factor,
            "elevation_seed": self.elevation_seed,
            "noise_seed": self.noise_seed,
            "base_sigma": self.base_sigma,
            "heterosc_gain": self.heterosc_gain,
            "skew": self.skew,
            "dispersion_factor": self.dispersion_factor,
            "member_count": self.member_count,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(data) - known
        if extra:
            raise ValueError(f"unknown synth config keys: {sorted(extra)}")
        kwargs = dict(data)
        if "coarse_dims" in kwargs:
            kwargs["coarse_dims"] = tuple(kwargs["coarse_dims"])
        return cls(**kwargs)


def record_rng(cfg: SynthConfig, record_index: int, stream: str) -> np.random.Generator:
    """Independent generator for one (record, stream) pair.

    Streams keep the truth noise and the ensemble noise of a record
    independent; the spawn key makes the result order- and
    parallelism-independent.
    """
    code = _STREAM_CODES[stream]
    seq = np.random.SeedSequence(cfg.noise_seed, spawn_key=(code, record_index))
    return np.random.Generator(np.random.PCG64(seq))


def smooth3(arr: np.ndarray) -> np.ndarray:
    """Separable 3-tap binomial smoothing over the last two axes, edge-padded."""
    padded = np.pad(arr, [(0, 0)] * (arr.ndim - 2) + [(1, 1), (1, 1)], mode="edge")
    rows = 0.25 * padded[..., :-2, 1:-1] + 0.5 * padded[..., 1:-1, 1:-1] \
        + 0.25 * padded[..., 2:, 1:-1]
    inner = np.pad(rows, [(0, 0)] * (arr.ndim - 2) + [(0, 0), (1, 1)], mode="edge")
    return 0.25 * inner[..., :, :-2] + 0.5 * inner[..., :, 1:-1] + 0.25 * inner[..., :, 2:]


def _axis_weights(coarse_len: int, factor: int):
    """Cell-centered interpolation stencil for one axis.

    Fine cell i has center (i + 0.5)/factor - 0.5 in coarse coordinates,
    clamped at the edges.  Returns lower/upper source indices and the upper
    weight for every fine index.
    """
    fine = np.arange(coarse_len * factor)
    src = (fine + 0.5) / factor - 0.5
    src = np.clip(src, 0.0, coarse_len - 1.0)
    i0 = np.floor(src).astype(np.int64)
    i0 = np.minimum(i0, coarse_len - 1)
    i1 = np.minimum(i0 + 1, coarse_len - 1)
    w = src - i0
    return i0, i1, w


def bilinear_upsample(values: np.ndarray, factor: int) -> np.ndarray:
    """Cell-centered bilinear upsampling of the last two axes by a factor."""
    values = np.asarray(values, dtype=np.float64)
    r0, r1, wr = _axis_weights(values.shape[-2], factor)
    c0, c1, wc = _axis_weights(values.shape[-1], factor)
    rows = values[..., r0, :] * (1.0 - wr)[:, None] + values[..., r1, :] * wr[:, None]
    return rows[..., :, c0] * (1.0 - wc) + rows[..., :, c1] * wc


def bilinear_upsample_at(values: np.ndarray, factor: int,
                         rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """Upsampled values at selected fine points (rows[k], cols[k]) only.

    Equivalent to ``bilinear_upsample(values, factor)[..., rows, cols]``
    without materializing the fine grid; used by the coverage simulation.
    """
    values = np.asarray(values, dtype=np.float64)
    r0, r1, wr = _axis_weights(values.shape[-2], factor)
    c0, c1, wc = _axis_weights(values.shape[-1], factor)
    r0, r1, wr = r0[rows], r1[rows], wr[rows]
    c0, c1, wc = c0[cols], c1[cols], wc[cols]
    # row interpolation first, then columns, in the same operation order as
    # the full-grid version so the two agree bitwise
    left = values[..., r0, c0] * (1.0 - wr) + values[..., r1, c0] * wr
    right = values[..., r0, c1] * (1.0 - wr) + values[..., r1, c1] * wr
    return left * (1.0 - wc) + right * wc


@lru_cache(maxsize=16)
def elevation_field(cfg: SynthConfig) -> np.ndarray:
    """Fixed smooth pseudo-elevation on the fine grid, scaled to [0, 1]."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(cfg.elevation_seed)))
    white = rng.standard_normal(cfg.coarse_dims)
    fine = bilinear_upsample(smooth3(white), cfg.upscale_factor)
    span = fine.max() - fine.min()
    if span < 1e-12:
        out = np.zeros(cfg.fine_dims)
    else:
        out = (fine - fine.min()) / span
    out.setflags(write=False)
    return out


@lru_cache(maxsize=16)
def sigma_field(cfg: SynthConfig) -> np.ndarray:
    """Heteroscedastic noise scale sigma(i,j) on the fine grid."""
    out = cfg.base_sigma * (1.0 + cfg.heterosc_gain * elevation_field(cfg))
    out.setflags(write=False)
    return out


@lru_cache(maxsize=16)
def elevation_perturbation(cfg: SynthConfig) -> np.ndarray:
    """Deterministic elevation-correlated offset added to the upsampled field."""
    out = 2.0 * cfg.base_sigma * (elevation_field(cfg) - 0.5)
    out.setflags(write=False)
    return out


def deterministic_field(cfg: SynthConfig, coarse) -> np.ndarray:
    """Noise-free fine-scale estimate for a coarse field (the emulator's base)."""
    values = coarse.values if isinstance(coarse, CoarseField) else np.asarray(coarse)
    return bilinear_upsample(values, cfg.upscale_factor) + elevation_perturbation(cfg)


def skew_normal_draws(rng: np.random.Generator, shape, delta: float) -> np.ndarray:
    """Standardized skew-normal variates (location 0, scale 1, delta shape)."""
    u = rng.standard_normal((2,) + tuple(shape))
    return delta * np.abs(u[0]) + math.sqrt(1.0 - delta * delta) * u[1]


def generate_pair(cfg: SynthConfig, rng: np.random.Generator):
    """One i.i.d. (coarse, fine-truth) pair drawn from the generator law."""
    white = rng.standard_normal(cfg.coarse_dims)
    coarse = COARSE_AMPLITUDE * cfg.base_sigma * smooth3(white)
    noise = sigma_field(cfg) * skew_normal_draws(rng, cfg.fine_dims, cfg.skew)
    truth = deterministic_field(cfg, coarse) + noise
    return CoarseField(coarse), GridField(truth)


def emulate_ensemble(cfg: SynthConfig, coarse: CoarseField,
                     rng: np.random.Generator) -> EnsembleBatch:
    """Residual-corrective ensemble around the deterministic estimate.

    Member noise follows the generator law with scale multiplied by
    ``dispersion_factor``; a factor of 1 is a perfectly specified sampler and
    a factor of 0 collapses every member onto the deterministic part.
    """
    det = deterministic_field(cfg, coarse)
    scale = cfg.dispersion_factor * sigma_field(cfg)
    draws = skew_normal_draws(rng, (cfg.member_count,) + cfg.fine_dims, cfg.skew)
    members = tuple(GridField(det + scale * z) for z in draws)
    return EnsembleBatch(members)


def standard_skew_normal_cdf(z, delta: float):
    """CDF of the standardized skew-normal at shape parameter delta."""
    z = np.asarray(z, dtype=np.float64)
    if delta == 0.0:
        out = ndtr(z)
    else:
        a = delta / math.sqrt(1.0 - delta * delta)
        out = ndtr(z) - 2.0 * owens_t(z, a)
    return float(out) if out.ndim == 0 else out


def standard_skew_normal_quantile(gamma, delta: float) -> float:
    """Quantile of the standardized skew-normal by bisection on its CDF."""
    target = float(level_fraction(gamma))
    lo, hi = -13.0, 13.0
    while hi - lo > _QUANTILE_BISECT_TOL:
        mid = 0.5 * (lo + hi)
        if standard_skew_normal_cdf(mid, delta) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


@dataclass(frozen=True, eq=False)
class OracleQuantiles:
    """Closed-form conditional quantiles of the truth given one coarse field.

    The conditional law at (i,j) is det(i,j) + sigma(i,j) * Z with Z the
    standardized skew-normal, so one standardized quantile per level serves
    the whole grid.
    """

    det: np.ndarray
    sigma: np.ndarray
    delta: float

    def standard_quantile(self, gamma) -> float:
        """Quantile of Z by bisection on the closed-form CDF."""
        return standard_skew_normal_quantile(gamma, self.delta)

    def quantile(self, gamma) -> np.ndarray:
        """Exact conditional gamma-quantile grid."""
        return self.det + self.sigma * self.standard_quantile(gamma)

    def cdf(self, values: np.ndarray) -> np.ndarray:
        """Conditional CDF evaluated pointwise at a fine-grid field."""
        z = (np.asarray(values, dtype=np.float64) - self.det) / self.sigma
        return standard_skew_normal_cdf(z, self.delta)


def oracle_quantiles(cfg: SynthConfig, coarse, scheme: LevelScheme | None = None) -> OracleQuantiles:
    """Oracle for the conditional law of the truth given a coarse field.

    The scheme argument is accepted for symmetry with the estimation path but
    the oracle can evaluate any level in (0, 1).
    """
    det = deterministic_field(cfg, coarse)
    return OracleQuantiles(det=det, sigma=sigma_field(cfg).copy(), delta=cfg.skew)


def synthesize_records(cfg: SynthConfig, record_count: int,
                       start_index: int = 0) -> list[PairedRecord]:
    """Records [start_index, start_index + record_count) of the i.i.d. stream."""
    records = []
    for index in range(start_index, start_index + record_count):
        coarse, truth = generate_pair(cfg, record_rng(cfg, index, "pair"))
        ensemble = emulate_ensemble(cfg, coarse, record_rng(cfg, index, "ensemble"))
        records.append(PairedRecord(coarse=coarse, truth=truth, ensemble=ensemble))
    return records


def synthesize_dataset(cfg: SynthConfig, record_count: int, split_tag: str,
                       start_index: int = 0) -> PairedDataset:
    """An i.i.d. synthetic dataset tagged with its split role."""
    return PairedDataset(
        records=tuple(synthesize_records(cfg, record_count, start_index)),
        split_tag=split_tag,
    )
