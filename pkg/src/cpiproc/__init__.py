"""Correlation plenoptic imaging: binary SPAD frames to a refocused stack."""

from .correlation import (
    CooccurrenceCounts,
    CorrelationTensor,
    correlate_naive,
    correlate_packed,
    read_gamma,
    write_gamma,
)
from .engine import MemoryBudget, TilePlan, WorkerPolicy, execute_map_reduce, plan_tiles
from .frame_io import DatasetManifest, FrameLayout, Roi, scan_dataset
from .pipeline import RunConfig, run_pipeline
from .refocus import RefocusMap, RefocusSpec, refocus_plane, refocus_stack, sharpness
from .synth import GroundTruth, SceneSpec, generate_dataset

__version__ = "0.1.0"
