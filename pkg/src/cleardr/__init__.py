"""Interpretable multi-grade retinal image grading.

A small convolutional sequencer grades fundus images, and every grading
decision can be explained by back-projecting the grade-specific kernel
responses of the last convolutional layer onto the input plane.  The
per-grade attentive response maps are fused into a single color-coded
map (hue = dominant grade, intensity = response strength).
"""

import os as _os

# CLEARDR_THREADS caps internal parallelism.  The only parallelism in this
# package comes from the BLAS backing numpy, which reads its thread count
# from the environment at import time, so the cap must be exported before
# numpy is imported anywhere in the process.  CLEARDR_THREADS=1 gives
# bitwise-deterministic results.
_threads = _os.environ.get("CLEARDR_THREADS")
if _threads:
    for _var in (
        "OPENBLAS_NUM_THREADS",
        "OMP_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

from . import clear, discovery, ingest, oracles, sequencer, synthetic, tensor_ops
from .errors import (
    CheckpointError,
    ConfigError,
    DomainError,
    IntegrityError,
    NumericalError,
    ShapeError,
    TrainingDivergenceError,
)

__all__ = [
    "tensor_ops",
    "sequencer",
    "discovery",
    "clear",
    "ingest",
    "oracles",
    "synthetic",
    "ShapeError",
    "ConfigError",
    "DomainError",
    "IntegrityError",
    "NumericalError",
    "CheckpointError",
    "TrainingDivergenceError",
]

__version__ = "0.1.0"
