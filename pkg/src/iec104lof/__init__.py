"""Outlier detection on IEC 60870-5-104 packet inter-arrival times with LOF."""

__version__ = "0.1.0"

from .detector import (DetectionReport, ValidationResult, WindowConfig, WindowedLOFDetector,
                       detect_windowed, emit_plot_data, partition_windows, validate)
from .features import FeatureSeries, extract_features, split_series, write_series_csv
from .ingest import (Conversation, PacketRecord, ParseStats, parse_csv, parse_pcap,
                     read_labeled_csv, write_csv, write_pcap)
from .injector import AttackScenario, generate_normal, inject, load_scenarios
from .lof import (LocalOutlierFactor, LofModel, NeighborhoodTable, brute_force_lof, distance,
                  fit_lof, k_distance, load_model, reach_dist, save_model, score)

__all__ = [
    "AttackScenario", "Conversation", "DetectionReport", "FeatureSeries", "LocalOutlierFactor",
    "LofModel", "NeighborhoodTable", "PacketRecord", "ParseStats", "ValidationResult",
    "WindowConfig", "WindowedLOFDetector", "brute_force_lof", "detect_windowed", "distance",
    "emit_plot_data", "extract_features", "fit_lof", "generate_normal", "inject", "k_distance",
    "load_model", "load_scenarios", "parse_csv", "parse_pcap", "partition_windows",
    "reach_dist", "read_labeled_csv", "save_model", "score", "split_series", "validate",
    "write_csv", "write_pcap", "write_series_csv",
]
