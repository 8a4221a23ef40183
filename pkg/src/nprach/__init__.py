"""NB-IoT NPRACH link-level simulation and synchronization.

Simulates format-0 preamble transmission over a multipath channel with
carrier frequency offset, and recovers user activity, time of arrival,
and CFO with either a classical differential-correlation detector or a
trained neural synchronizer. A Monte Carlo harness benchmarks both on
paired trials.
"""

from .base import DetectionReport
from .baseline import (BaselineConfig, BaselineSynchronizer, baseline_detect,
                       calibrate_threshold)
from .bench import (ExperimentConfig, MetricsRow, compute_metrics,
                    read_metrics_csv, run_experiment, write_metrics_csv)
from .frontend import demodulate_grid, load_grid, preprocess_grid, save_grid
from .neural import (ModelConfig, NeuralSynchronizer, SynchModel, TrainConfig,
                     infer, load_checkpoint, save_checkpoint, train)
from .preamble import (PreambleConfig, build_all_patterns,
                       build_hopping_pattern, derive_timing)
from .scenario import (ChannelTaps, DelayProfile, ScenarioSample, UserState,
                       compute_taps, freq_response, load_scenario,
                       sample_scenario, save_scenario, snr_of,
                       synthesize_received, toa_of)

__version__ = "0.1.0"

__all__ = [
    "DetectionReport",
    "BaselineConfig", "BaselineSynchronizer", "baseline_detect",
    "calibrate_threshold",
    "ExperimentConfig", "MetricsRow", "compute_metrics", "read_metrics_csv",
    "run_experiment", "write_metrics_csv",
    "demodulate_grid", "load_grid", "preprocess_grid", "save_grid",
    "ModelConfig", "NeuralSynchronizer", "SynchModel", "TrainConfig",
    "infer", "load_checkpoint", "save_checkpoint", "train",
    "PreambleConfig", "build_all_patterns", "build_hopping_pattern",
    "derive_timing",
    "ChannelTaps", "DelayProfile", "ScenarioSample", "UserState",
    "compute_taps", "freq_response", "load_scenario", "sample_scenario",
    "save_scenario", "snr_of", "synthesize_received", "toa_of",
    "__version__",
]
