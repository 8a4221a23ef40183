"""NPRACH preamble format 0 numerology, timing, and subcarrier hopping.

A preamble is S = 4*n_reps symbol groups (SGs); each SG is one cyclic
prefix followed by 5 identical single-tone OFDM symbols on one of n_sc
subcarriers spaced delta_f = 3.75 kHz apart. The per-SG subcarrier index
follows a deterministic hopping rule that keeps simultaneous users
orthogonal: at every SG position the map from starting subcarrier to
occupied subcarrier is a permutation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SYMBOLS_PER_SG = 5


@dataclass(frozen=True)
class PreambleConfig:
    """Numerology of one NPRACH format-0 transmission.

    Derived quantities (sample_rate, sg_samples, ...) are properties so a
    config is fully determined by the fields below.
    """

    delta_f: float = 3750.0          # subcarrier spacing [Hz]
    n_fft: int = 64                  # DFT size N; baseband rate is N*delta_f
    n_sc: int = 48                   # NPRACH subcarriers
    sc_offset: int = 0               # first occupied subcarrier index
    n_reps: int = 1                  # preamble repetitions (4 SGs each)
    k_users: int = 48                # max simultaneous users K
    carrier_freq: float = 3.4e9      # carrier [Hz], sets the ppm<->Hz scale

    def __post_init__(self):
        if self.delta_f <= 0:
            raise ValueError("delta_f must be positive")
        if self.n_fft < 4 or self.n_fft % 4 != 0:
            raise ValueError("n_fft must be a positive multiple of 4 (format 0 CP = N/4)")
        if not (1 <= self.n_sc <= 48):
            raise ValueError("n_sc must be in [1, 48]")
        if self.sc_offset < 0 or self.sc_offset + self.n_sc > self.n_fft:
            raise ValueError("subcarriers [sc_offset, sc_offset+n_sc) must fit in the FFT")
        if self.n_reps < 1:
            raise ValueError("n_reps must be >= 1")
        if not (1 <= self.k_users <= self.n_sc):
            raise ValueError("k_users must be in [1, n_sc]")
        if self.carrier_freq <= 0:
            raise ValueError("carrier_freq must be positive")

    @property
    def cp_len(self) -> int:
        """Cyclic prefix length in samples (format 0: N/4, 66.7 us)."""
        return self.n_fft // 4

    @property
    def sample_rate(self) -> float:
        """Baseband sampling rate W = N * delta_f [Hz]."""
        return self.n_fft * self.delta_f

    @property
    def sg_count(self) -> int:
        """Number of symbol groups S = 4 * n_reps."""
        return 4 * self.n_reps

    @property
    def sg_samples(self) -> int:
        """Samples per symbol group: CP + 5 symbols."""
        return self.cp_len + SYMBOLS_PER_SG * self.n_fft

    @property
    def total_samples(self) -> int:
        """Samples in the whole preamble."""
        return self.sg_count * self.sg_samples

    @property
    def cp_duration(self) -> float:
        """CP duration [s]; also the maximum unambiguous ToA."""
        return self.cp_len / self.sample_rate

    @property
    def grid_cols(self) -> int:
        """Resource-grid columns: 5 symbols per SG."""
        return SYMBOLS_PER_SG * self.sg_count


@dataclass(frozen=True)
class TimingTable:
    """Sample indices of the demodulation windows.

    window_starts[m, i] is the first sample of symbol i of SG m, i.e.
    m*sg_samples + cp_len + i*n_fft; total covers the full preamble.
    """

    window_starts: np.ndarray = field(repr=False)
    n_fft: int
    total_samples: int

    def __post_init__(self):
        st = self.window_starts
        if st.ndim != 2 or st.shape[1] != SYMBOLS_PER_SG:
            raise ValueError("window_starts must be [S, 5]")
        flat = st.reshape(-1)
        if np.any(flat[1:] - flat[:-1] < self.n_fft):
            raise ValueError("demodulation windows overlap")
        if flat[0] < 0 or flat[-1] + self.n_fft > self.total_samples:
            raise ValueError("windows fall outside the preamble span")


def derive_timing(config: PreambleConfig) -> TimingTable:
    """Build the demodulation timing table for a config.

    The CP of each SG is skipped; the 5 symbol windows of SG m start at
    m*sg_samples + cp_len + i*n_fft for i = 0..4.
    """
    m = np.arange(config.sg_count)[:, None]
    i = np.arange(SYMBOLS_PER_SG)[None, :]
    starts = m * config.sg_samples + config.cp_len + i * config.n_fft
    return TimingTable(window_starts=starts, n_fft=config.n_fft,
                       total_samples=config.total_samples)


@dataclass(frozen=True)
class HoppingPattern:
    """Per-SG subcarrier indices phi[m] of one user, relative to sc_offset."""

    pattern_id: int
    indices: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.indices.ndim != 1:
            raise ValueError("indices must be 1-D")


def _hop_once(n: int, step: int, block: int) -> int:
    # alternate inside a block of the given size: low half hops up, high half down
    return n + step if (n % (2 * step * block)) < step * block else n - step


def build_hopping_pattern(pattern_id: int, config: PreambleConfig) -> HoppingPattern:
    """Deterministic orthogonal hopping for one repetition (4 SGs).

    From starting subcarrier n0: n1 = n0 +- 1 by parity, n2 = n1 +- 6 by
    position within blocks of 12, n3 = n2 +- 1 by parity. Each rule swaps
    disjoint pairs/blocks, so every SG position maps starting subcarriers
    to occupied subcarriers bijectively. The +-6 block shrinks to
    n_sc // 2 for configs too narrow for it.
    """
    if not (0 <= pattern_id < config.n_sc):
        raise ValueError(f"pattern_id {pattern_id} out of range [0, {config.n_sc})")
    if config.n_reps != 1:
        raise NotImplementedError("hopping beyond one repetition (pseudo-random "
                                  "inter-repetition hops) is not supported")
    b = min(6, config.n_sc // 2)
    n0 = pattern_id
    n1 = _hop_once(n0, 1, 1)
    n2 = _hop_once(n1, b, 1) if b > 0 else n1
    n3 = _hop_once(n2, 1, 1)
    indices = np.array([n0, n1, n2, n3], dtype=np.int64)
    if indices.min() < 0 or indices.max() >= config.n_sc:
        # needs n_sc even and divisible by the hop block 2b
        raise ValueError(f"n_sc={config.n_sc} is incompatible with the hopping rule")
    return HoppingPattern(pattern_id, indices)


def build_all_patterns(config: PreambleConfig) -> np.ndarray:
    """Stack all n_sc hopping patterns into an [n_sc, S] index array."""
    rows = [build_hopping_pattern(k, config).indices for k in range(config.n_sc)]
    return np.stack(rows)
