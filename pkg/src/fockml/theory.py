"""Closed-form zero-delay correlations of Fock/coherent mixtures and a threshold baseline."""

from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from math import factorial

import numpy as np

from .correlator import TAU_MAX, CorrelationMap, zero_arm_mask

TABLE1_QLP = (0.0, 0.25, 0.5, 0.75, 1.0)
TABLE1_FOCK = (1, 2, 3)
QLP_THRESHOLD = 0.5
_P_GRID = np.arange(1001) / 1000.0


class PhotonClass(IntEnum):
    COHERENT = 0
    FOCK1 = 1
    FOCK2 = 2
    FOCK3 = 3

    @property
    def short(self) -> str:
        return ("COH", "F1", "F2", "F3")[self]

    @classmethod
    def fock(cls, n: int) -> "PhotonClass":
        return cls(n)


def label_for(fock_n: int, qlp: float) -> PhotonClass:
    """Coherent below the 0.5 quantum-light threshold, otherwise the Fock level."""
    return PhotonClass.fock(fock_n) if qlp >= QLP_THRESHOLD else PhotonClass.COHERENT


def _coefficient(n: int, k: int) -> float:
    if n < k:
        return 0.0
    return factorial(n) / factorial(n - k) / n**k


def gk_zero(n: int, k: int, p):
    """Zero-delay k-th order correlation of a Fock-n / coherent mixture with Fock weight p.

    Accepts scalar or array ``p``.
    """
    if int(n) != n or n < 1:
        raise ValueError(f"Fock level must be a positive integer, got {n}")
    if k not in (2, 3):
        raise ValueError(f"correlation order must be 2 or 3, got {k}")
    p_arr = np.asarray(p, dtype=np.float64)
    if np.any(p_arr < 0) or np.any(p_arr > 1) or np.any(np.isnan(p_arr)):
        raise ValueError("p must lie in [0, 1]")
    value = _coefficient(int(n), k) * p_arr + (1.0 - p_arr)
    return float(value) if value.ndim == 0 else value


def table1() -> np.ndarray:
    """Array of shape (5, 3, 2): [qlp row, Fock level, (g2(0), g3(0))]."""
    out = np.empty((len(TABLE1_QLP), len(TABLE1_FOCK), 2))
    for i, p in enumerate(TABLE1_QLP):
        for j, n in enumerate(TABLE1_FOCK):
            out[i, j] = gk_zero(n, 2, p), gk_zero(n, 3, p)
    return out


def format_table1() -> str:
    header = "QLP\t" + "\t".join(f"g2(0)|{n}>\tg3(0)|{n}>" for n in TABLE1_FOCK)
    lines = [header]
    for p, row in zip(TABLE1_QLP, table1()):
        cells = "\t".join(f"{g2:.2f}\t{g3:.2f}" for g2, g3 in row)
        lines.append(f"{p:.2f}\t{cells}")
    return "\n".join(lines)


@dataclass(frozen=True)
class BaselineVerdict:
    photon_class: PhotonClass
    qlp_est: float
    residual: float
    fock_n: int


def baseline_classify(g2_zero: float, g3_zero: float) -> BaselineVerdict:
    """Fit (g2(0), g3(0)) against each Fock mixture curve on a 0.001 grid in p."""
    if not (np.isfinite(g2_zero) and np.isfinite(g3_zero)):
        raise ValueError("correlation estimates must be finite")
    best = None
    for n in TABLE1_FOCK:
        res = (g2_zero - gk_zero(n, 2, _P_GRID)) ** 2 + (g3_zero - gk_zero(n, 3, _P_GRID)) ** 2
        i = int(np.argmin(res))
        # strict comparison keeps the smaller n on ties
        if best is None or res[i] < best[2]:
            best = (n, _P_GRID[i], float(res[i]))
    n, p, residual = best
    return BaselineVerdict(label_for(n, p), float(p), residual, n)


def analytic_map(n: int, p: float, tau_max: int = TAU_MAX) -> CorrelationMap:
    """Noiseless map: g3(0) at the center, g2(0) on the zero arms, 1 elsewhere."""
    size = 2 * tau_max + 1
    values = np.ones((size, size))
    values[zero_arm_mask(tau_max)] = gk_zero(n, 2, p)
    values[tau_max, tau_max] = gk_zero(n, 3, p)
    return CorrelationMap(values, tau_max, valid=True)
