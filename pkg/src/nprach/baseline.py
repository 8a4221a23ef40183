"""Classical synchronizer: differential correlation with an IDFT delay scan.

Per pattern, the detector averages the five symbols of each symbol group,
forms the differential products between consecutive symbol groups (which
move the phase by hop_distance * delay across the hop), de-rotates them
with an intra-group CFO estimate, and scans delay hypotheses with a zero
padded IDFT. The peak magnitude is compared against the within-group
residual noise power times a calibrated threshold.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .base import DetectionReport, check_grid, check_patterns
from .preamble import SYMBOLS_PER_SG, PreambleConfig, build_all_patterns


@dataclass(frozen=True)
class BaselineConfig:
    """Detector knobs. gamma is the detection threshold on the power-ratio
    metric; leave it None until calibrate_threshold has been run."""

    fft_size: int = 256
    gamma: float | None = None
    target_fa: float = 1e-3
    toa_max: float | None = None    # None = one CP duration

    def __post_init__(self):
        if self.fft_size < 16:
            raise ValueError("fft_size must be >= 16")
        if not (0.0 < self.target_fa < 1.0):
            raise ValueError("target_fa must be in (0, 1)")
        if self.gamma is not None and self.gamma <= 0:
            raise ValueError("gamma must be positive")


def _toa_window(config: PreambleConfig, bl: BaselineConfig) -> int:
    """Last delay bin scanned: ToA up to toa_max plus one CP of slack for
    delay spread and the half-sample ambiguity of the hop geometry."""
    toa_max = bl.toa_max if bl.toa_max is not None else config.cp_duration
    q_max = int(np.floor((toa_max + config.cp_duration)
                         * bl.fft_size * config.delta_f))
    if q_max >= bl.fft_size:
        raise ValueError("fft_size too small for the requested ToA window")
    return q_max


def _metrics_many(grids: np.ndarray, patterns: np.ndarray,
                  config: PreambleConfig, bl: BaselineConfig
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched metric: grids [B, n_fft, 5S] -> (metric, toa, cfo), each
    [B, n_patterns]. CFO is in cycles per sample, ToA in seconds."""
    b, s = grids.shape[0], config.sg_count
    n_pat = patterns.shape[0]
    rows = config.sc_offset + patterns                       # [K, S]
    cols = np.arange(s)[None, :]
    yk = grids.reshape(b, config.n_fft, s, SYMBOLS_PER_SG)[:, rows, cols, :]
    z = yk.mean(axis=3)                                      # [B, K, S]

    # intra-SG CFO from lag-1 products of the five identical symbols
    acc = (np.conj(yk[..., :-1]) * yk[..., 1:]).sum(axis=(2, 3))
    fhat = np.angle(acc) / (2.0 * np.pi * config.n_fft)      # [B, K]

    # differential products across hops, CFO-derotated over one SG span
    g = np.conj(z[..., :-1]) * z[..., 1:]
    g = g * np.exp(-2j * np.pi * fhat * config.sg_samples)[..., None]
    # nominal hop distances: every pattern then shares the |d| multiset
    # {1, 6, 1}, so the noise-only peak statistics are pattern-independent
    d = np.mod(patterns[:, 1:] - patterns[:, :-1], bl.fft_size)   # [K, S-1]
    v = np.zeros((b, n_pat, bl.fft_size), dtype=np.complex128)
    k_idx = np.arange(n_pat)
    for m in range(d.shape[1]):       # one bin per row per step: no collisions
        v[:, k_idx, d[:, m]] += g[:, :, m]
    corr = np.abs(np.fft.ifft(v, axis=2)) * bl.fft_size

    q_max = _toa_window(config, bl)
    window = corr[:, :, :q_max + 1]
    q = window.argmax(axis=2)
    peak = np.take_along_axis(window, q[..., None], axis=2)[..., 0]

    # within-SG residual estimates the per-RE noise power, signal removed
    resid = (np.abs(yk - z[..., None]) ** 2).sum(axis=(2, 3)) \
        / (s * (SYMBOLS_PER_SG - 1))
    pbar = (np.abs(z) ** 2).mean(axis=2)
    metric = peak / np.maximum(resid, 1e-9 * pbar + 1e-300)
    toa = q / (bl.fft_size * config.delta_f)
    return metric, toa, fhat


def detection_metric(grid: np.ndarray, patterns: np.ndarray,
                     config: PreambleConfig, bl: BaselineConfig
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Single-grid metric triple (metric, toa, cfo), each [n_patterns]."""
    grid = check_grid(grid, config)
    patterns = check_patterns(patterns, config)
    m, t, f = _metrics_many(grid[None], patterns, config, bl)
    return m[0], t[0], f[0]


def baseline_detect(grid: np.ndarray, patterns: np.ndarray,
                    config: PreambleConfig, bl: BaselineConfig
                    ) -> DetectionReport:
    """Full detection report for one grid; requires a calibrated gamma."""
    if bl.gamma is None:
        raise ValueError("BaselineConfig.gamma is not set; "
                         "run calibrate_threshold first")
    metric, toa, fhat = detection_metric(grid, patterns, config, bl)
    return DetectionReport(prob=metric / (metric + bl.gamma), toa_hat=toa,
                           cfo_hat=fhat, detected=metric >= bl.gamma)


def _detect_many(grids: np.ndarray, patterns: np.ndarray,
                 config: PreambleConfig, bl: BaselineConfig,
                 chunk: int = 512) -> list[DetectionReport]:
    """Batched baseline_detect without the per-grid validation."""
    if bl.gamma is None:
        raise ValueError("BaselineConfig.gamma is not set; "
                         "run calibrate_threshold first")
    reports = []
    for lo in range(0, grids.shape[0], chunk):
        metric, toa, fhat = _metrics_many(grids[lo:lo + chunk], patterns,
                                          config, bl)
        for i in range(metric.shape[0]):
            m = metric[i]
            reports.append(DetectionReport(prob=m / (m + bl.gamma),
                                           toa_hat=toa[i], cfo_hat=fhat[i],
                                           detected=m >= bl.gamma))
    return reports


def calibrate_threshold(config: PreambleConfig, bl: BaselineConfig,
                        n_trials: int = 100000, seed: int = 0,
                        noise_var: float = 1.0, chunk: int = 512) -> float:
    """Empirical threshold for the configured false-alarm target.

    Synthesizes n_trials noise-only grids (circular Gaussian REs, which is
    exactly what the demodulator produces from time-domain noise), pools
    the metric across all patterns, and returns its (1 - target_fa)
    quantile. The metric is scale-free, so noise_var only needs to be
    positive.
    """
    if n_trials < 1000:
        raise ValueError("n_trials too small to place the quantile")
    patterns = build_all_patterns(config)
    rng = np.random.default_rng(seed)
    scale = np.sqrt(noise_var / 2.0)
    shape = (config.n_fft, config.grid_cols)
    pooled = []
    for lo in range(0, n_trials, chunk):
        b = min(chunk, n_trials - lo)
        w = rng.standard_normal((b, *shape, 2))
        grids = scale * (w[..., 0] + 1j * w[..., 1])
        metric, _, _ = _metrics_many(grids, patterns, config, bl)
        pooled.append(metric.ravel())
    return float(np.quantile(np.concatenate(pooled), 1.0 - bl.target_fa))


class BaselineSynchronizer(BaseEstimator):
    """Estimator facade: fit() calibrates the detection threshold against
    simulated noise, predict() maps resource grids to DetectionReports."""

    def __init__(self, preamble: PreambleConfig | None = None,
                 fft_size: int = 256, target_fa: float = 1e-3,
                 toa_max: float | None = None, calib_trials: int = 10000,
                 seed: int = 0, gamma: float | None = None):
        self.preamble = preamble
        self.fft_size = fft_size
        self.target_fa = target_fa
        self.toa_max = toa_max
        self.calib_trials = calib_trials
        self.seed = seed
        self.gamma = gamma

    def fit(self, X=None, y=None):
        """Calibrate gamma from noise-only simulation (X, y are ignored);
        an explicit gamma constructor argument skips the simulation."""
        self.preamble_ = self.preamble if self.preamble is not None else PreambleConfig()
        self.patterns_ = build_all_patterns(self.preamble_)
        base = BaselineConfig(fft_size=self.fft_size, gamma=None,
                              target_fa=self.target_fa, toa_max=self.toa_max)
        gamma = self.gamma if self.gamma is not None else calibrate_threshold(
            self.preamble_, base, n_trials=self.calib_trials, seed=self.seed)
        self.gamma_ = float(gamma)
        self.baseline_ = replace(base, gamma=self.gamma_)
        return self

    def predict(self, X):
        """X: one [n_fft, 5S] grid or a sequence of them."""
        if not hasattr(self, "baseline_"):
            raise NotFittedError("BaselineSynchronizer must be fit before predict")
        single = isinstance(X, np.ndarray) and X.ndim == 2
        grids = [X] if single else list(X)
        stacked = np.stack([check_grid(g, self.preamble_) for g in grids])
        reports = _detect_many(stacked, self.patterns_, self.preamble_,
                               self.baseline_)
        return reports[0] if single else reports
