"""Photon-state classification from simulated third-order correlation maps."""

from .correlator import CorrelationMap, critical_points, cross_sections, g2_trace, g3_map, preprocess
from .source import DetectionRecord, SourceSpec, simulate
from .theory import PhotonClass, baseline_classify, gk_zero, label_for, table1

__version__ = "0.1.0"

__all__ = [
    "CorrelationMap",
    "DetectionRecord",
    "PhotonClass",
    "SourceSpec",
    "baseline_classify",
    "critical_points",
    "cross_sections",
    "g2_trace",
    "g3_map",
    "gk_zero",
    "label_for",
    "preprocess",
    "simulate",
    "table1",
]
