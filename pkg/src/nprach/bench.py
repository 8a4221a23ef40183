"""Monte Carlo benchmark harness.

An experiment is a sweep over (snr, cfo_max_ppm, p_active) axis points;
each point simulates n_trials random scenarios. Trials are paired: every
detector sees exactly the same grids, with per-trial random streams
derived from (experiment seed, point index, trial index) so results do
not depend on chunking or worker count.

Detection metrics are binned by each user's realized post-channel SNR;
false alarms have no SNR, so the false-alarm columns repeat the point
aggregate in every row. ToA/CFO RMSE covers the truly active users
regardless of detection outcome, avoiding survivor bias.
"""

from __future__ import annotations

import csv
import itertools
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .base import DetectionReport
from .baseline import BaselineConfig, _detect_many
from .frontend import _demodulate_many, _preprocess_many
from .neural import SynchModel, _infer_many
from .preamble import PreambleConfig, build_all_patterns
from .scenario import (DelayProfile, ScenarioSample, _snr_many,
                       _synthesize_many, sample_scenario, toa_of)

BIN_ALL = "all"

CSV_FIELDS = ["detector", "snr_db", "cfo_max_ppm", "p_active", "snr_bin",
              "n_active", "n_missed", "fnr", "n_inactive", "n_false_alarms",
              "fpr", "toa_rmse_us", "cfo_rmse_ppm"]


@dataclass
class MetricsRow:
    """One (detector, axis point, SNR bin) line of the benchmark table.

    snr_db is the axis value (nan when the point draws SNR from a range
    instead of pinning it); snr_bin is the realized-SNR bin, or 'all'.
    """

    detector: str
    snr_bin: str
    n_active: int
    n_missed: int
    fnr: float
    n_inactive: int
    n_false_alarms: int
    fpr: float
    toa_rmse_us: float
    cfo_rmse_ppm: float
    snr_db: float = float("nan")
    cfo_max_ppm: float = float("nan")
    p_active: float = float("nan")


def _ppm_per_norm(config: PreambleConfig) -> float:
    """Cycles-per-sample CFO to oscillator ppm."""
    return config.sample_rate / config.carrier_freq * 1e6


class MetricsAccumulator:
    """Order-independent counters: integer counts plus float64 error sums
    keyed by SNR bin. Merging two accumulators adds them bin-wise."""

    def __init__(self, config: PreambleConfig, bin_width_db: float = 2.0):
        if bin_width_db <= 0:
            raise ValueError("bin_width_db must be positive")
        self.config = config
        self.bin_width_db = bin_width_db
        # lo_db -> [n_active, n_missed, toa_sq_us, cfo_sq_ppm]
        self.bins: dict[float, list] = {}
        self.n_inactive = 0
        self.n_false = 0

    def add(self, scenario: ScenarioSample, snrs: np.ndarray,
            report: DetectionReport) -> None:
        """Fold in one trial; snrs is _snr_many's per-user linear SNR."""
        ppm = _ppm_per_norm(self.config)
        for u, snr in zip(scenario.users, snrs):
            k = u.pattern_id
            if not u.active:
                self.n_inactive += 1
                self.n_false += bool(report.detected[k])
                continue
            lo = self.bin_width_db * math.floor(10.0 * math.log10(snr)
                                                / self.bin_width_db)
            cell = self.bins.setdefault(lo, [0, 0, 0.0, 0.0])
            cell[0] += 1
            cell[1] += not report.detected[k]
            cell[2] += ((report.toa_hat[k] - toa_of(u)) * 1e6) ** 2
            cell[3] += ((report.cfo_hat[k] - u.cfo_norm) * ppm) ** 2

    def merge(self, other: "MetricsAccumulator") -> None:
        for lo, cell in other.bins.items():
            mine = self.bins.setdefault(lo, [0, 0, 0.0, 0.0])
            for i in range(4):
                mine[i] += cell[i]
        self.n_inactive += other.n_inactive
        self.n_false += other.n_false

    def rows(self, detector: str) -> list[MetricsRow]:
        """Finished table: one row per non-empty bin in ascending SNR,
        then the 'all' aggregate."""
        fpr = self.n_false / self.n_inactive if self.n_inactive else float("nan")
        out = []
        tot = [0, 0, 0.0, 0.0]
        for lo in sorted(self.bins):
            cell = self.bins[lo]
            for i in range(4):
                tot[i] += cell[i]
            out.append(self._row(detector, self._label(lo), cell, fpr))
        out.append(self._row(detector, BIN_ALL, tot, fpr))
        return out

    def _label(self, lo: float) -> str:
        return f"{lo:g}..{lo + self.bin_width_db:g}"

    def _row(self, detector, label, cell, fpr) -> MetricsRow:
        n_act, n_miss, toa_sq, cfo_sq = cell
        return MetricsRow(
            detector=detector, snr_bin=label, n_active=n_act, n_missed=n_miss,
            fnr=n_miss / n_act if n_act else float("nan"),
            n_inactive=self.n_inactive, n_false_alarms=self.n_false, fpr=fpr,
            toa_rmse_us=math.sqrt(toa_sq / n_act) if n_act else float("nan"),
            cfo_rmse_ppm=math.sqrt(cfo_sq / n_act) if n_act else float("nan"))


def compute_metrics(trials, config: PreambleConfig, bin_width_db: float = 2.0,
                    detector: str = "detector") -> list[MetricsRow]:
    """Metrics table from an iterable of (scenario, report) pairs."""
    patterns = build_all_patterns(config)
    acc = MetricsAccumulator(config, bin_width_db)
    for scenario, report in trials:
        acc.add(scenario, _snr_many(scenario, patterns, config), report)
    return acc.rows(detector)


# --- detector adapters --------------------------------------------------------
# plain classes (not closures) so worker processes can unpickle them

class BaselineBatchDetector:
    """grids [B, n_fft, 5S] -> reports, via the classical detector."""

    def __init__(self, config: PreambleConfig, patterns: np.ndarray,
                 bl: BaselineConfig):
        self.config = config
        self.patterns = patterns
        self.bl = bl

    def __call__(self, grids: np.ndarray) -> list[DetectionReport]:
        return _detect_many(grids, self.patterns, self.config, self.bl)


class NeuralBatchDetector:
    """grids [B, n_fft, 5S] -> reports, via the neural synchronizer."""

    def __init__(self, config: PreambleConfig, patterns: np.ndarray,
                 model: SynchModel):
        self.config = config
        self.patterns = patterns
        self.model = model

    def __call__(self, grids: np.ndarray) -> list[DetectionReport]:
        feats = _preprocess_many(grids, self.patterns, self.config)
        return _infer_many(self.model, feats, self.patterns, self.config)


# --- experiment runner ---------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    """Sweep axes plus per-point trial budget.

    A None entry in snr_points_db means users draw their SNR from
    snr_range_db (the wide-draw evaluation); a float pins every user's
    drawn SNR to that value, leaving only fading variation.
    """

    snr_points_db: tuple = (None,)
    cfo_max_ppm_points: tuple[float, ...] = (10.0,)
    p_active_points: tuple[float, ...] = (0.5,)
    n_trials: int = 10000
    seed: int = 0
    snr_range_db: tuple[float, float] = (-10.0, 20.0)
    toa_max: float | None = None
    profile: DelayProfile = DelayProfile()
    bin_width_db: float = 2.0
    chunk: int = 256

    def __post_init__(self):
        if self.n_trials < 1 or self.chunk < 1:
            raise ValueError("n_trials and chunk must be >= 1")
        if not (self.snr_points_db and self.cfo_max_ppm_points
                and self.p_active_points):
            raise ValueError("sweep axes must be non-empty")

    def points(self) -> list[tuple]:
        return list(itertools.product(self.snr_points_db,
                                      self.cfo_max_ppm_points,
                                      self.p_active_points))


def resolve_workers(workers: int | None = None) -> int:
    """Explicit argument, else NPRACH_WORKERS, else 1."""
    if workers is None:
        workers = int(os.environ.get("NPRACH_WORKERS", "1"))
    if workers < 1:
        raise ValueError("workers must be >= 1")
    return workers


def _run_chunk(exp: ExperimentConfig, config: PreambleConfig, detectors: dict,
               point_idx: int, point: tuple, lo: int, hi: int
               ) -> dict[str, MetricsAccumulator]:
    snr_pt, cfo_pt, p_pt = point
    snr_range = exp.snr_range_db if snr_pt is None else (snr_pt, snr_pt)
    patterns = build_all_patterns(config)
    scenarios, rngs = [], []
    for trial in range(lo, hi):
        rng = np.random.default_rng(
            np.random.SeedSequence([exp.seed, point_idx, trial]))
        scenarios.append(sample_scenario(rng, config, p_pt, cfo_pt,
                                         exp.toa_max, snr_range, exp.profile))
        rngs.append(rng)
    streams = _synthesize_many(scenarios, patterns, config, rngs)
    grids = _demodulate_many(streams, config, dtype=np.complex64)
    snrs = [_snr_many(sc, patterns, config) for sc in scenarios]
    accs = {}
    for name, detect in detectors.items():
        acc = MetricsAccumulator(config, exp.bin_width_db)
        for scenario, snr, report in zip(scenarios, snrs, detect(grids)):
            acc.add(scenario, snr, report)
        accs[name] = acc
    return accs


def _check_finite(rows: list[MetricsRow], point: tuple) -> None:
    for row in rows:
        bad = (row.n_active and not (math.isfinite(row.fnr)
                                     and math.isfinite(row.toa_rmse_us)
                                     and math.isfinite(row.cfo_rmse_ppm))) \
            or (row.n_inactive and not math.isfinite(row.fpr))
        if bad:
            raise RuntimeError(f"non-finite metrics at point {point}, "
                               f"detector {row.detector!r}, bin {row.snr_bin}")


def run_experiment(exp: ExperimentConfig, detectors: dict,
                   config: PreambleConfig | None = None,
                   workers: int | None = None) -> list[MetricsRow]:
    """Evaluate every detector on the same paired trials at every point.

    detectors maps a name to a batch detector (grids -> reports). Returns
    the concatenated rows; bit-for-bit reproducible for a fixed
    (seed, chunk) regardless of the worker count.
    """
    if config is None:
        config = PreambleConfig()
    workers = resolve_workers(workers)
    rows = []
    for point_idx, point in enumerate(exp.points()):
        spans = [(lo, min(lo + exp.chunk, exp.n_trials))
                 for lo in range(0, exp.n_trials, exp.chunk)]
        args = [(exp, config, detectors, point_idx, point, lo, hi)
                for lo, hi in spans]
        if workers == 1:
            partials = [_run_chunk(*a) for a in args]
        else:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                partials = list(pool.map(_run_chunk, *zip(*args)))
        snr_pt, cfo_pt, p_pt = point
        for name in detectors:
            acc = MetricsAccumulator(config, exp.bin_width_db)
            for part in partials:        # fixed chunk order: deterministic
                acc.merge(part[name])
            point_rows = acc.rows(name)
            for row in point_rows:
                row.snr_db = float("nan") if snr_pt is None else float(snr_pt)
                row.cfo_max_ppm = float(cfo_pt)
                row.p_active = float(p_pt)
            _check_finite(point_rows, point)
            rows.extend(point_rows)
    return rows


# --- CSV ------------------------------------------------------------------------

def _fmt(value) -> str:
    # repr round-trips floats exactly, so write == read back
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metrics_csv(path, rows: list[MetricsRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_FIELDS)
        for row in rows:
            writer.writerow([_fmt(getattr(row, f)) for f in CSV_FIELDS])


def read_metrics_csv(path) -> list[MetricsRow]:
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != CSV_FIELDS:
            raise ValueError(f"unexpected metrics header in {path}")
        for rec in reader:
            out.append(MetricsRow(
                detector=rec["detector"], snr_bin=rec["snr_bin"],
                n_active=int(rec["n_active"]), n_missed=int(rec["n_missed"]),
                fnr=float(rec["fnr"]), n_inactive=int(rec["n_inactive"]),
                n_false_alarms=int(rec["n_false_alarms"]), fpr=float(rec["fpr"]),
                toa_rmse_us=float(rec["toa_rmse_us"]),
                cfo_rmse_ppm=float(rec["cfo_rmse_ppm"]),
                snr_db=float(rec["snr_db"]),
                cfo_max_ppm=float(rec["cfo_max_ppm"]),
                p_active=float(rec["p_active"])))
    return out
