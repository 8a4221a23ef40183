"""Shared report type and input-validation helpers for the detector engines."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .preamble import PreambleConfig


@dataclass
class DetectionReport:
    """Per-pattern synchronization output of one grid.

    prob[k] is the detection probability for hopping pattern k, toa_hat[k]
    the ToA estimate in seconds, cfo_hat[k] the CFO estimate normalized by
    the sampling rate. `detected == (prob >= threshold)` holds for the
    threshold the producing engine was configured with (0.5 by default).
    """

    prob: np.ndarray = field(repr=False)
    toa_hat: np.ndarray = field(repr=False)
    cfo_hat: np.ndarray = field(repr=False)
    detected: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.prob.shape[0]
        for name in ("prob", "toa_hat", "cfo_hat", "detected"):
            arr = getattr(self, name)
            if arr.shape != (n,):
                raise ValueError(f"{name} must be a length-{n} vector")
        if np.any(self.prob < 0) or np.any(self.prob > 1):
            raise ValueError("prob entries must lie in [0, 1]")

    @property
    def n_patterns(self) -> int:
        return self.prob.shape[0]


def check_stream(stream: np.ndarray, config: PreambleConfig) -> np.ndarray:
    """Validate a received sample stream: 1-D complex, full preamble length."""
    stream = np.asarray(stream)
    if stream.ndim != 1 or stream.shape[0] != config.total_samples:
        raise ValueError(f"stream must have shape ({config.total_samples},), "
                         f"got {stream.shape}")
    if not np.iscomplexobj(stream):
        raise ValueError("stream must be complex")
    if not np.all(np.isfinite(stream.real)) or not np.all(np.isfinite(stream.imag)):
        raise ValueError("stream contains non-finite samples")
    return stream


def check_grid(grid: np.ndarray, config: PreambleConfig) -> np.ndarray:
    """Validate a resource grid: [n_fft, 5S] complex with finite entries."""
    grid = np.asarray(grid)
    want = (config.n_fft, config.grid_cols)
    if grid.shape != want:
        raise ValueError(f"grid must have shape {want}, got {grid.shape}")
    if not np.iscomplexobj(grid):
        raise ValueError("grid must be complex")
    if not np.all(np.isfinite(grid.real)) or not np.all(np.isfinite(grid.imag)):
        raise ValueError("grid contains non-finite entries")
    return grid


def check_patterns(patterns: np.ndarray, config: PreambleConfig) -> np.ndarray:
    """Validate an [n_patterns, S] hopping-index array against the config."""
    patterns = np.asarray(patterns)
    if patterns.ndim != 2 or patterns.shape[1] != config.sg_count:
        raise ValueError(f"patterns must be [n_patterns, {config.sg_count}]")
    if patterns.min() < 0 or patterns.max() >= config.n_sc:
        raise ValueError("pattern indices out of [0, n_sc)")
    return patterns
