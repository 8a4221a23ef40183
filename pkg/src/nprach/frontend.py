"""Receiver frontend: resource-grid demodulation and NN feature extraction.

The grid is the N x 5S matrix of per-symbol DFT outputs with the absolute
sample phase retained, so a clean unit-power tone lands as exactly 1.0 on
its own resource elements. Features gather each hopping pattern's REs,
normalize them by the pattern's RMS amplitude, and scatter the normalized
values plus a log-power channel back onto the n_sc x S map.
"""

from __future__ import annotations

import struct

import numpy as np

from .base import check_grid, check_patterns, check_stream
from .preamble import SYMBOLS_PER_SG, PreambleConfig, derive_timing

POWER_EPS = 1e-12


def demodulate_grid(stream: np.ndarray, config: PreambleConfig,
                    dtype=np.complex128) -> np.ndarray:
    """DFT the 5S symbol windows of a stream into the [n_fft, 5S] grid.

    Y[f, 5m+i] = (1/N) sum_n stream[N_{m,i}+n] e^{-j2pi f (N_{m,i}+n)/N}
    with N_{m,i} = m*sg_samples + cp_len + i*N; the e^{-j2pi f N_{m,i}/N}
    factor keeps the absolute phase so tone values do not rotate per SG.
    """
    stream = check_stream(stream, config)
    return _demodulate_many(stream[None, :], config, dtype)[0]


def _demodulate_many(streams: np.ndarray, config: PreambleConfig,
                     dtype=np.complex128) -> np.ndarray:
    """Batched demodulation: [B, total_samples] -> [B, n_fft, 5S]."""
    n = config.n_fft
    starts = derive_timing(config).window_starts.reshape(-1)   # [5S] in col order
    windows = streams[:, starts[:, None] + np.arange(n)[None, :]]
    spec = np.fft.fft(windows, axis=-1) / n
    phase = np.exp(-2j * np.pi * np.outer(starts, np.arange(n)) / n)
    grid = spec * phase[None, :, :]
    return grid.transpose(0, 2, 1).astype(dtype)   # [B, n_fft, cols]


def sg_average(grid: np.ndarray, config: PreambleConfig) -> np.ndarray:
    """Average the 5 symbols of each SG: [n_fft, 5S] -> [n_fft, S]."""
    grid = check_grid(grid, config)
    return grid.reshape(config.n_fft, config.sg_count, SYMBOLS_PER_SG).mean(axis=2)


def preprocess_grid(grid: np.ndarray, patterns: np.ndarray,
                    config: PreambleConfig) -> np.ndarray:
    """Build the [n_sc, S, 3] float32 feature tensor of one grid.

    Per pattern k: gather y_k[m] = sgavg[sc_offset + phi_k[m], m], compute
    p_k = mean_m |y_k[m]|^2, normalize by sqrt(max(p_k, eps)), and scatter
    {Re, Im, ln max(p_k, eps)} back to the pattern's own (subcarrier, SG)
    cells. With the full orthogonal pattern set every cell is written
    exactly once.
    """
    grid = check_grid(grid, config)
    patterns = check_patterns(patterns, config)
    return _preprocess_many(grid[None, :, :], patterns, config)[0]


def _preprocess_many(grids: np.ndarray, patterns: np.ndarray,
                     config: PreambleConfig) -> np.ndarray:
    """Batched features: [B, n_fft, 5S] -> [B, n_sc, S, 3]."""
    b = grids.shape[0]
    s = config.sg_count
    avg = grids.reshape(b, config.n_fft, s, SYMBOLS_PER_SG).mean(axis=3)
    rows = config.sc_offset + patterns                      # [n_pat, S]
    cols = np.arange(s)[None, :]
    gathered = avg[:, rows, cols]                           # [B, n_pat, S]
    power = np.maximum((np.abs(gathered) ** 2).mean(axis=2), POWER_EPS)
    norm = gathered / np.sqrt(power)[:, :, None]
    out = np.zeros((b, config.n_sc, s, 3), dtype=np.float32)
    out[:, patterns, cols, 0] = norm.real.astype(np.float32)
    out[:, patterns, cols, 1] = norm.imag.astype(np.float32)
    out[:, patterns, cols, 2] = np.log(power)[:, :, None].astype(np.float32)
    return out


# --- grid files -------------------------------------------------------------

def save_grid(path, grid: np.ndarray, config: PreambleConfig) -> None:
    """Write a grid as two little-endian uint32 dims plus complex64 data."""
    grid = check_grid(grid, config)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", grid.shape[0], grid.shape[1]))
        fh.write(np.ascontiguousarray(grid, dtype=np.complex64).tobytes())


def load_grid(path) -> np.ndarray:
    """Read a grid file written by save_grid."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise ValueError("grid file too short for its header")
    rows, cols = struct.unpack_from("<II", raw, 0)
    data = np.frombuffer(raw, dtype=np.complex64, offset=8)
    if data.shape[0] != rows * cols:
        raise ValueError(f"grid file payload {data.shape[0]} != {rows}x{cols}")
    return data.reshape(rows, cols).copy()
