"""Kernel backend selection and validated dispatch.

The compiled extension is preferred when importable; set ``GRIDCP_BACKEND``
to ``compiled`` or ``python`` to force one (forcing ``compiled`` raises if
the extension is missing).  Both backends satisfy the contract documented in
``_kernels_py`` and produce identical results, so selection only affects
speed.

The public wrappers validate arguments once and dispatch; validation lives
here so the kernels themselves stay branch-free on the hot path.
"""

from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_COMPILED = None
try:
    from . import _kernels as _COMPILED  # type: ignore[no-redef]
except ImportError:
    _COMPILED = None


def available_backends() -> dict:
    """Name -> kernel module for every backend importable here."""
    table = {"python": _kernels_py}
    if _COMPILED is not None:
        table["compiled"] = _COMPILED
    return table


def _select():
    choice = os.environ.get("GRIDCP_BACKEND", "auto").strip().lower()
    if choice in ("", "auto"):
        return ("compiled", _COMPILED) if _COMPILED is not None else ("python", _kernels_py)
    if choice == "python":
        return "python", _kernels_py
    if choice == "compiled":
        if _COMPILED is None:
            raise ImportError(
                "GRIDCP_BACKEND=compiled but the compiled extension is not available"
            )
        return "compiled", _COMPILED
    raise ValueError(f"unknown GRIDCP_BACKEND value: {choice!r}")


_BACKEND_NAME, _KERNELS = _select()


def backend_name() -> str:
    return _BACKEND_NAME


def _as_prob(name: str, value) -> float:
    value = float(value)
    if not 0.0 < value < 1.0:
        raise ValueError(f"{name} must lie strictly between 0 and 1, got {value}")
    return value


def _check_accumulator(name: str, arr: np.ndarray, dtype, size: int):
    if not isinstance(arr, np.ndarray) or arr.dtype != dtype or arr.ndim != 1:
        raise ValueError(f"{name} must be a 1-D {np.dtype(dtype).name} array")
    if arr.shape[0] != size:
        raise ValueError(f"{name} has length {arr.shape[0]}, expected {size}")
    if not (arr.flags.c_contiguous and arr.flags.writeable):
        raise ValueError(f"{name} must be contiguous and writeable")


def order_stats(values: np.ndarray, ranks, kernels=None) -> np.ndarray:
    """Order statistics per column of an (n, p) sample array.

    ``ranks`` are 1-based; row j of the result holds the ranks[j]-th smallest
    value of each column.  Columns containing NaN yield NaN rows.
    """
    values = np.ascontiguousarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"sample array must be 2-D, got shape {values.shape}")
    n = values.shape[0]
    if n < 1:
        raise ValueError("sample array must contain at least one row")
    ranks = np.ascontiguousarray(ranks, dtype=np.int64)
    if ranks.ndim != 1:
        raise ValueError("ranks must be a 1-D integer array")
    if ranks.size and (ranks.min() < 1 or ranks.max() > n):
        raise ValueError(f"order-statistic rank out of range 1..{n}")
    kern = _KERNELS if kernels is None else kernels
    return kern.order_stats(values, ranks)


def interval_accumulate(lower, upper, truth, alpha,
                        cover_sum, cover_cnt, score_sum, width_sum, bounded_cnt,
                        kernels=None):
    """Validated in-place fold of one record's intervals (see _kernels_py)."""
    lower = np.ascontiguousarray(lower, dtype=np.float64).ravel()
    upper = np.ascontiguousarray(upper, dtype=np.float64).ravel()
    truth = np.ascontiguousarray(truth, dtype=np.float64).ravel()
    p = truth.shape[0]
    if lower.shape[0] != p or upper.shape[0] != p:
        raise ValueError("interval bounds and truth must have equal size")
    alpha = _as_prob("alpha", alpha)
    _check_accumulator("cover_sum", cover_sum, np.int64, p)
    _check_accumulator("cover_cnt", cover_cnt, np.int64, p)
    _check_accumulator("score_sum", score_sum, np.float64, p)
    _check_accumulator("width_sum", width_sum, np.float64, p)
    _check_accumulator("bounded_cnt", bounded_cnt, np.int64, p)
    kern = _KERNELS if kernels is None else kernels
    kern.interval_accumulate(lower, upper, truth, alpha,
                             cover_sum, cover_cnt, score_sum, width_sum, bounded_cnt)


def pinball_accumulate(quantile, truth, gamma, qs_sum, qs_cnt, kernels=None):
    """Validated in-place fold of one record's pinball losses (see _kernels_py)."""
    quantile = np.ascontiguousarray(quantile, dtype=np.float64).ravel()
    truth = np.ascontiguousarray(truth, dtype=np.float64).ravel()
    p = truth.shape[0]
    if quantile.shape[0] != p:
        raise ValueError("quantile field and truth must have equal size")
    gamma = _as_prob("gamma", gamma)
    _check_accumulator("qs_sum", qs_sum, np.float64, p)
    _check_accumulator("qs_cnt", qs_cnt, np.int64, p)
    kern = _KERNELS if kernels is None else kernels
    kern.pinball_accumulate(quantile, truth, gamma, qs_sum, qs_cnt)
