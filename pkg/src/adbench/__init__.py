"""adbench: metric suite, dataset builder, and reference detection
pipeline for multi-class visual anomaly detection benchmarks."""

__version__ = "0.1.0"

from . import cocoad, curves, datamodel, maskops, metrics, synth  # noqa: F401
