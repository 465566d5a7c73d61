"""nestlab: principal-nest analysis and parameter scans for S-unimodal maps."""

__version__ = "0.1.0"

from .numerics import Precision, Bracket, LogProduct, bisect_root, accumulate_log_derivative
from .maps import (
    MapInstance,
    OrbitSegment,
    make_instance,
    parse_family_spec,
    evaluate_jet,
    schwarzian,
    verify_s_unimodal,
    iterate_critical_orbit,
    family_velocity,
)

__all__ = [
    "Precision",
    "Bracket",
    "LogProduct",
    "bisect_root",
    "accumulate_log_derivative",
    "MapInstance",
    "OrbitSegment",
    "make_instance",
    "parse_family_spec",
    "evaluate_jet",
    "schwarzian",
    "verify_s_unimodal",
    "iterate_critical_orbit",
    "family_velocity",
]
