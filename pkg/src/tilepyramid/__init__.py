"""Coarse-to-fine tile analysis of multi-resolution images, with threshold tuning
and distributed execution (simulated and over TCP)."""

__version__ = "0.1.0"

from .engine import (
    CostModel,
    Decision,
    ExecutionTree,
    RunMetrics,
    ThresholdSchedule,
    analyze,
    estimate_time,
    positive_retention,
    project_probabilities,
    run_pyramidal,
    run_reference,
    slowdown_bound,
)
from .predictions import NoisyOracle, PredictionSource, PredictionTable, TableBacked
from .pyramid import GroundTruthPyramid, PyramidGeometry, TileId
from .synth import SynthConfig, synth_pyramid

__all__ = [
    "CostModel",
    "Decision",
    "ExecutionTree",
    "GroundTruthPyramid",
    "NoisyOracle",
    "PredictionSource",
    "PredictionTable",
    "PyramidGeometry",
    "RunMetrics",
    "SynthConfig",
    "TableBacked",
    "ThresholdSchedule",
    "TileId",
    "analyze",
    "estimate_time",
    "positive_retention",
    "project_probabilities",
    "run_pyramidal",
    "run_reference",
    "slowdown_bound",
    "synth_pyramid",
]
