"""Normalized third-order correlation maps and derived quantities.

Conventions used throughout:

* delays are integers in pulse periods, ``tau12`` indexes columns and
  ``tau13`` indexes rows, both ascending from ``-tau_max`` to ``+tau_max``;
* the numerator at a delay pair is averaged over the overlap window only
  (no wrap-around), the denominator uses full-record detector means.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .source import DetectionRecord

TAU_MAX = 16
FEATURE_DIM = 32

MAP_MAGIC = b"FLG3"
MAP_VERSION = 1
_MAP_HEADER = struct.Struct("<4sHBB")


class InvalidMapError(ValueError):
    """Raised when a quantity is requested from a map with undefined normalization."""


@dataclass(frozen=True, eq=False)
class CorrelationMap:
    values: np.ndarray
    tau_max: int = TAU_MAX
    valid: bool = True

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        size = 2 * self.tau_max + 1
        if values.shape != (size, size):
            raise ValueError(f"expected a {size}x{size} map, got {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def tau_axis(self) -> np.ndarray:
        return np.arange(-self.tau_max, self.tau_max + 1)

    def at(self, tau12: int, tau13: int) -> float:
        return float(self.values[tau13 + self.tau_max, tau12 + self.tau_max])

    def __eq__(self, other) -> bool:
        if not isinstance(other, CorrelationMap):
            return NotImplemented
        return (
            self.tau_max == other.tau_max
            and self.valid == other.valid
            and np.array_equal(self.values, other.values)
        )


class CriticalPoints(NamedTuple):
    g3_zero: float
    g2_zero_est: float


class CrossSections(NamedTuple):
    """Cuts through a map as functions of tau12."""

    diagonal: np.ndarray  # tau13 = -tau12
    zero: np.ndarray  # tau13 = 0
    equal: np.ndarray  # tau13 = +tau12


def _check_length(n: int, tau_max: int) -> None:
    if tau_max < 0:
        raise ValueError("tau_max must be non-negative")
    if n <= 2 * tau_max:
        raise ValueError(f"record of {n} pulses is too short for tau_max={tau_max}")


def _shift_stack(d: np.ndarray, tau_max: int) -> np.ndarray:
    """Rows ``d(t + tau)`` for tau = -tau_max..tau_max, zero outside the record."""
    padded = np.pad(d.astype(np.float64), tau_max)
    return sliding_window_view(padded, d.shape[0])


def _overlap_lengths(n: int, tau_max: int) -> np.ndarray:
    """Overlap window length for every (tau13, tau12) pair."""
    taus = np.arange(-tau_max, tau_max + 1)
    a = taus[None, :]  # tau12 along columns
    b = taus[:, None]  # tau13 along rows
    hi = np.maximum(0, np.maximum(a, b))
    lo = np.minimum(0, np.minimum(a, b))
    return n - hi + lo


def _mean_product(sums, n: int) -> float:
    # integer product first: exact and independent of detector order
    prod = 1
    for s in sums:
        prod *= int(s)
    return prod / n ** len(sums)


def g3_map(record: DetectionRecord, tau_max: int = TAU_MAX) -> CorrelationMap:
    """Normalized g3(tau12, tau13) of a detection record."""
    n = len(record)
    _check_length(n, tau_max)
    size = 2 * tau_max + 1
    sums = [int(d.sum()) for d in record.streams]
    if 0 in sums:
        return CorrelationMap(np.zeros((size, size)), tau_max, valid=False)

    d1 = record.d1.astype(np.float64)
    s2 = _shift_stack(record.d2, tau_max)
    s3 = _shift_stack(record.d3, tau_max)
    # products of small integers: the matmul sums are exact in float64
    triple = (d1 * s2) @ s3.T  # [tau12, tau13]
    numerator = triple.T / _overlap_lengths(n, tau_max)
    values = numerator / _mean_product(sums, n)
    return CorrelationMap(values, tau_max, valid=True)


def g2_trace(record: DetectionRecord, i: int, j: int, tau_max: int = TAU_MAX) -> np.ndarray:
    """Normalized cross-correlation of detectors ``i`` and ``j`` (1-based) over tau."""
    if i == j or i not in (1, 2, 3) or j not in (1, 2, 3):
        raise ValueError("need two distinct detector indices from {1, 2, 3}")
    n = len(record)
    _check_length(n, tau_max)
    di, dj = record.streams[i - 1], record.streams[j - 1]
    sums = [int(di.sum()), int(dj.sum())]
    if 0 in sums:
        raise InvalidMapError("a detector recorded no photons; normalization undefined")
    pair = _shift_stack(dj, tau_max) @ di.astype(np.float64)
    lengths = n - np.abs(np.arange(-tau_max, tau_max + 1))
    return (pair / lengths) / _mean_product(sums, n)


def zero_arm_mask(tau_max: int = TAU_MAX) -> np.ndarray:
    """Pixels where exactly one of tau12, tau13, tau23 vanishes."""
    taus = np.arange(-tau_max, tau_max + 1)
    a = taus[None, :]
    b = taus[:, None]
    zeros = (a == 0).astype(int) + (b == 0).astype(int) + (a == b).astype(int)
    return zeros == 1


def critical_points(cmap: CorrelationMap) -> CriticalPoints:
    if not cmap.valid:
        raise InvalidMapError("correlation map has zero normalization")
    g3_zero = cmap.at(0, 0)
    g2_est = float(cmap.values[zero_arm_mask(cmap.tau_max)].mean())
    return CriticalPoints(g3_zero, g2_est)


def cross_sections(cmap: CorrelationMap) -> CrossSections:
    idx = np.arange(2 * cmap.tau_max + 1)
    v = cmap.values
    return CrossSections(
        diagonal=v[idx[::-1], idx].copy(),
        zero=v[cmap.tau_max, :].copy(),
        equal=v[idx, idx].copy(),
    )


def preprocess(cmap: CorrelationMap) -> np.ndarray:
    """Truncate to the first 32 delays per axis and rescale into [0, 1] by the maximum."""
    values = np.asarray(cmap.values, dtype=np.float64)
    if values.shape[0] < FEATURE_DIM or values.shape[1] < FEATURE_DIM:
        raise ValueError(f"map of shape {values.shape} is smaller than {FEATURE_DIM}x{FEATURE_DIM}")
    cut = values[:FEATURE_DIM, :FEATURE_DIM]
    peak = cut.max()
    if not peak > 0:
        return np.zeros((FEATURE_DIM, FEATURE_DIM))
    return cut / peak


# -- persistence ------------------------------------------------------------

def write_map(cmap: CorrelationMap, path) -> None:
    with open(path, "wb") as fh:
        fh.write(_MAP_HEADER.pack(MAP_MAGIC, MAP_VERSION, cmap.tau_max, int(cmap.valid)))
        fh.write(cmap.values.astype("<f8").tobytes())


def read_map(path) -> CorrelationMap:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < _MAP_HEADER.size:
        raise ValueError(f"{path}: truncated correlation map header")
    magic, version, tau_max, valid = _MAP_HEADER.unpack_from(data)
    if magic != MAP_MAGIC:
        raise ValueError(f"{path}: not a correlation map (magic {magic!r})")
    if version != MAP_VERSION:
        raise ValueError(f"{path}: unsupported map version {version}")
    size = 2 * tau_max + 1
    if len(data) != _MAP_HEADER.size + 8 * size * size:
        raise ValueError(f"{path}: payload size does not match tau_max={tau_max}")
    values = np.frombuffer(data, dtype="<f8", offset=_MAP_HEADER.size).reshape(size, size)
    return CorrelationMap(values, tau_max, bool(valid))


def write_map_text(cmap: CorrelationMap, path) -> None:
    """Tab-separated grid; first row holds tau12, first column tau13."""
    taus = cmap.tau_axis
    with open(path, "w") as fh:
        fh.write("tau13\\tau12\t" + "\t".join(str(t) for t in taus) + "\n")
        for t13, row in zip(taus, cmap.values):
            fh.write(str(t13) + "\t" + "\t".join(f"{v:.6f}" for v in row) + "\n")


def read_map_text(path) -> CorrelationMap:
    grid = np.loadtxt(path, delimiter="\t", skiprows=1)
    values = grid[:, 1:]
    tau_max = (values.shape[0] - 1) // 2
    return CorrelationMap(values, tau_max, valid=bool(values.any()))
