"""Neural synchronizer: detection and ToA/CFO estimation networks.

Two structurally identical networks (one for detection, one for
estimation) share nothing but the input features: a pointwise projection
to C channels, conv_blocks residual units of kernel-3 depthwise separable
convolutions along the subcarrier axis, then per-pattern gathering and an
MLP applied with weights shared across patterns. The detection head is a
sigmoid per pattern; the estimation network carries two separate MLP
heads for ToA (in CP-duration units) and CFO (in subcarrier spacings).

Training minimizes binary cross-entropy on the activity flags plus an
SNR-weighted squared error on the two estimates, simulating a fresh batch
of random scenarios every step.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import autodiff as ad
from .base import DetectionReport, check_grid, check_patterns
from .frontend import _demodulate_many, _preprocess_many, preprocess_grid
from .preamble import PreambleConfig, build_all_patterns
from .scenario import (DelayProfile, _snr_many, _synthesize_many,
                       sample_scenario, toa_of)


@dataclass(frozen=True)
class ModelConfig:
    """Architecture knobs shared by the detection and estimation networks."""

    conv_blocks: int = 3
    channels: int = 128
    kernel: int = 3
    mlp_hidden: tuple[int, ...] = (128, 128)
    detection_threshold: float = 0.5

    def __post_init__(self):
        if self.kernel % 2 != 1:
            raise ValueError("kernel must be odd")
        if self.kernel != 3:
            raise ValueError("only kernel size 3 is implemented")
        if self.conv_blocks < 1 or self.channels < 1:
            raise ValueError("conv_blocks and channels must be >= 1")
        if not self.mlp_hidden or any(h < 1 for h in self.mlp_hidden):
            raise ValueError("mlp_hidden must be a non-empty tuple of widths")
        if not (0.0 < self.detection_threshold < 1.0):
            raise ValueError("detection_threshold must be in (0, 1)")


class SynchModel:
    """Parameter container plus the batched forward pass."""

    N_FEATURES = 3

    def __init__(self, config: ModelConfig, sg_count: int, seed: int = 0):
        self.config = config
        self.sg_count = sg_count
        self._params: dict[str, ad.Parameter] = {}
        rng = np.random.default_rng(seed)
        for net in ("det", "est"):
            self._init_trunk(net, rng)
        flat = sg_count * config.channels
        self._init_mlp("det.mlp", flat, 1, rng)
        self._init_mlp("toa.mlp", flat, 1, rng)
        self._init_mlp("cfo.mlp", flat, 1, rng)

    def _add(self, name: str, data: np.ndarray) -> ad.Parameter:
        p = ad.Parameter(data.astype(np.float32), name=name)
        self._params[name] = p
        return p

    def _init_trunk(self, prefix: str, rng: np.random.Generator):
        c = self.config.channels
        self._add(f"{prefix}.proj.w",
                  rng.normal(0, np.sqrt(2.0 / self.N_FEATURES), (self.N_FEATURES, c)))
        self._add(f"{prefix}.proj.b", np.zeros(c))
        # residual branches start 1/conv_blocks-scale so activations stay
        # O(1) at any depth
        pw_std = np.sqrt(2.0 / c) / self.config.conv_blocks
        for i in range(self.config.conv_blocks):
            self._add(f"{prefix}.block{i}.dw", rng.normal(0, np.sqrt(1.0 / 3.0), (3, c)))
            self._add(f"{prefix}.block{i}.pw", rng.normal(0, pw_std, (c, c)))
            self._add(f"{prefix}.block{i}.b", np.zeros(c))

    def _init_mlp(self, prefix: str, d_in: int, d_out: int, rng: np.random.Generator):
        widths = [d_in, *self.config.mlp_hidden]
        for j in range(len(widths) - 1):
            self._add(f"{prefix}.{j}.w",
                      rng.normal(0, np.sqrt(2.0 / widths[j]), (widths[j], widths[j + 1])))
            self._add(f"{prefix}.{j}.b", np.zeros(widths[j + 1]))
        self._add(f"{prefix}.head.w",
                  rng.normal(0, np.sqrt(1.0 / widths[-1]), (widths[-1], d_out)))
        self._add(f"{prefix}.head.b", np.zeros(d_out))

    def parameters(self, prefix: str | None = None) -> list[ad.Parameter]:
        return [p for n, p in self._params.items()
                if prefix is None or n.startswith(prefix)]

    def param(self, name: str) -> ad.Parameter:
        return self._params[name]

    # --- forward -----------------------------------------------------------

    def _trunk(self, x: ad.Tensor, prefix: str) -> ad.Tensor:
        h = ad.dense(x, self._params[f"{prefix}.proj.w"], self._params[f"{prefix}.proj.b"])
        for i in range(self.config.conv_blocks):
            conv = ad.depthwise_separable_conv1d(h,
                                                 self._params[f"{prefix}.block{i}.dw"],
                                                 self._params[f"{prefix}.block{i}.pw"],
                                                 self._params[f"{prefix}.block{i}.b"])
            h = ad.add(h, ad.relu(conv))
        return h

    def _mlp(self, x: ad.Tensor, prefix: str) -> ad.Tensor:
        h = x
        for j in range(len(self.config.mlp_hidden)):
            h = ad.relu(ad.dense(h, self._params[f"{prefix}.{j}.w"],
                                 self._params[f"{prefix}.{j}.b"]))
        out = ad.dense(h, self._params[f"{prefix}.head.w"],
                       self._params[f"{prefix}.head.b"])
        return ad.reshape(out, out.shape[:-1])    # drop the size-1 head axis

    def _flatten(self, trunk_out: ad.Tensor, patterns: np.ndarray) -> ad.Tensor:
        g = ad.gather_patterns(trunk_out, patterns)          # [K, S, B, C]
        k, s, b, c = g.shape
        return ad.reshape(ad.transpose(g, (0, 2, 1, 3)), (k, b, s * c))

    def forward(self, feats: np.ndarray, patterns: np.ndarray
                ) -> tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
        """feats [B, n_sc, S, 3] -> (probs, toa, cfo), each [n_patterns, B].

        ToA is in CP-duration units, CFO in subcarrier spacings.
        """
        if feats.ndim != 4 or feats.shape[3] != self.N_FEATURES \
                or feats.shape[2] != self.sg_count:
            raise ValueError(f"feats must be [B, n_sc, {self.sg_count}, 3]")
        x = ad.Tensor(np.ascontiguousarray(feats.transpose(1, 2, 0, 3)))
        det = self._flatten(self._trunk(x, "det"), patterns)
        probs = ad.sigmoid(self._mlp(det, "det.mlp"))
        est = self._flatten(self._trunk(x, "est"), patterns)
        toa = self._mlp(est, "toa.mlp")
        cfo = self._mlp(est, "cfo.mlp")
        return probs, toa, cfo


def detection_loss(probs: ad.Tensor, active: np.ndarray) -> ad.Tensor:
    """Clamped binary cross-entropy over patterns, mean over the batch."""
    return ad.bce_loss(probs, active)


def estimation_loss(toa: ad.Tensor, cfo: ad.Tensor, toa_target: np.ndarray,
                    cfo_target: np.ndarray, weight: np.ndarray) -> ad.Tensor:
    """SNR-weighted squared ToA+CFO error of the active users, batch mean.

    weight should be activity * linear snr_of, so inactive users drop out.
    """
    return ad.add(ad.weighted_sq_loss(toa, toa_target, weight),
                  ad.weighted_sq_loss(cfo, cfo_target, weight))


@dataclass(frozen=True)
class TrainConfig:
    """Step-loop knobs; channel parameters mirror sample_scenario's."""

    steps: int = 20000
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    p_active_range: tuple[float, float] = (0.0, 1.0)
    cfo_max_ppm: float = 10.0
    toa_max: float | None = None
    snr_range_db: tuple[float, float] = (-10.0, 20.0)
    profile: DelayProfile = DelayProfile()

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ValueError("steps must be >= 0, batch_size >= 1, lr > 0")
        lo, hi = self.p_active_range
        if not (0.0 <= lo <= hi <= 1.0):
            raise ValueError("p_active_range must be 0 <= lo <= hi <= 1")


@dataclass
class TraceRecord:
    step: int
    loss_detection: float
    loss_estimation: float
    loss_total: float


def make_batch(step: int, tc: TrainConfig, config: PreambleConfig,
               patterns: np.ndarray):
    """Simulate one training batch; per-example seeds derive from
    (seed, step, example) so the stream is reproducible and non-repeating.

    Returns (feats [B, n_sc, S, 3], active, toa_t, cfo_t, weight), the
    targets all [n_patterns, B] float32.
    """
    scenarios, rngs = [], []
    for e in range(tc.batch_size):
        rng = np.random.default_rng(np.random.SeedSequence([tc.seed, step, e]))
        p_active = rng.uniform(*tc.p_active_range)
        scenarios.append(sample_scenario(rng, config, p_active, tc.cfo_max_ppm,
                                         tc.toa_max, tc.snr_range_db, tc.profile))
        rngs.append(rng)
    streams = _synthesize_many(scenarios, patterns, config, rngs)
    grids = _demodulate_many(streams, config, dtype=np.complex64)
    feats = _preprocess_many(grids, patterns, config)

    n_pat, b = patterns.shape[0], tc.batch_size
    active = np.zeros((n_pat, b), dtype=np.float32)
    toa_t = np.zeros((n_pat, b), dtype=np.float32)
    cfo_t = np.zeros((n_pat, b), dtype=np.float32)
    weight = np.zeros((n_pat, b), dtype=np.float32)
    for e, sc in enumerate(scenarios):
        snrs = _snr_many(sc, patterns, config)
        for u, snr in zip(sc.users, snrs):
            k = u.pattern_id
            active[k, e] = u.active
            toa_t[k, e] = toa_of(u) / config.cp_duration
            cfo_t[k, e] = u.cfo_norm * config.n_fft
            weight[k, e] = snr if u.active else 0.0
    return feats, active, toa_t, cfo_t, weight


def train_step(model: SynchModel, opt: ad.Adam, patterns: np.ndarray,
               feats, active, toa_t, cfo_t, weight) -> tuple[float, float]:
    """One forward/backward/update; returns (detection, estimation) losses."""
    probs, toa, cfo = model.forward(feats, patterns)
    l1 = detection_loss(probs, active)
    l2 = estimation_loss(toa, cfo, toa_t, cfo_t, weight)
    total = ad.add(l1, l2)
    v1, v2 = float(l1.data), float(l2.data)
    if not np.isfinite(v1 + v2):
        raise RuntimeError(f"non-finite loss (detection={v1}, estimation={v2})")
    total.backward()
    opt.step()
    return v1, v2


def train(model: SynchModel, tc: TrainConfig, config: PreambleConfig,
          patterns: np.ndarray, log=None) -> list[TraceRecord]:
    """Run the step loop; returns the full loss trace.

    log, if given, is called as log(record) after every step (the CLI uses
    it for progress printing).
    """
    patterns = check_patterns(patterns, config)
    opt = ad.Adam(model.parameters(), lr=tc.lr)
    trace = []
    for step in range(tc.steps):
        batch = make_batch(step, tc, config, patterns)
        try:
            v1, v2 = train_step(model, opt, patterns, *batch)
        except RuntimeError as err:
            raise RuntimeError(f"training aborted at step {step}: {err}") from err
        rec = TraceRecord(step, v1, v2, v1 + v2)
        trace.append(rec)
        if log is not None:
            log(rec)
    return trace


# --- inference ---------------------------------------------------------------

def infer(model: SynchModel, grid: np.ndarray, patterns: np.ndarray,
          config: PreambleConfig) -> DetectionReport:
    """Synchronize one resource grid."""
    feats = preprocess_grid(grid, patterns, config)
    return _infer_many(model, feats[None], patterns, config)[0]


def _infer_many(model: SynchModel, feats: np.ndarray, patterns: np.ndarray,
                config: PreambleConfig, chunk: int = 256) -> list[DetectionReport]:
    """Batched inference on pre-extracted features [B, n_sc, S, 3]."""
    reports = []
    thr = model.config.detection_threshold
    for lo in range(0, feats.shape[0], chunk):
        probs, toa, cfo = model.forward(feats[lo:lo + chunk], patterns)
        p = probs.data.astype(np.float64)
        t = toa.data.astype(np.float64) * config.cp_duration
        f = cfo.data.astype(np.float64) / config.n_fft
        for b in range(p.shape[1]):
            reports.append(DetectionReport(prob=p[:, b], toa_hat=t[:, b],
                                           cfo_hat=f[:, b],
                                           detected=p[:, b] >= thr))
    return reports


# --- checkpoints -------------------------------------------------------------

_CKPT_MAGIC = b"NPCK"
_CKPT_VERSION = 1


def save_checkpoint(path, model: SynchModel) -> None:
    """Serialize config plus parameters, little-endian, float32 raw data."""
    cfg = model.config
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<HHHHH", _CKPT_VERSION, cfg.conv_blocks,
                             cfg.channels, cfg.kernel, model.sg_count))
        fh.write(struct.pack("<H", len(cfg.mlp_hidden)))
        fh.write(struct.pack(f"<{len(cfg.mlp_hidden)}H", *cfg.mlp_hidden))
        fh.write(struct.pack("<d", cfg.detection_threshold))
        params = model.parameters()
        fh.write(struct.pack("<I", len(params)))
        for p in params:
            name = p.name.encode()
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<B", p.data.ndim))
            fh.write(struct.pack(f"<{p.data.ndim}I", *p.data.shape))
            fh.write(np.ascontiguousarray(p.data, dtype=np.float32).tobytes())


class _Reader:
    """Cursor over a byte buffer that fails loudly on truncation."""

    def __init__(self, raw: bytes):
        self.raw = raw
        self.off = 0

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise ValueError("truncated checkpoint")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path, expected: ModelConfig | None = None) -> SynchModel:
    """Rebuild a model from a checkpoint; verifies magic, version, shapes."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.take(4) != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file (bad magic)")
    ver, blocks, channels, kernel, sg_count = rd.unpack("<HHHHH")
    if ver != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {ver}")
    (n_hidden,) = rd.unpack("<H")
    hidden = rd.unpack(f"<{n_hidden}H")
    (threshold,) = rd.unpack("<d")
    cfg = ModelConfig(conv_blocks=blocks, channels=channels, kernel=kernel,
                      mlp_hidden=tuple(hidden), detection_threshold=threshold)
    if expected is not None and cfg != expected:
        raise ValueError(f"checkpoint config {cfg} does not match expected {expected}")

    model = SynchModel(cfg, sg_count=sg_count, seed=0)
    (n_params,) = rd.unpack("<I")
    seen = set()
    for _ in range(n_params):
        (nlen,) = rd.unpack("<H")
        name = rd.take(nlen).decode()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        count = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(rd.take(4 * count), dtype="<f4")
        if name not in model._params:
            raise ValueError(f"checkpoint has unknown parameter {name!r}")
        p = model._params[name]
        if tuple(shape) != p.data.shape:
            raise ValueError(f"shape mismatch for {name!r}: file {tuple(shape)} "
                             f"vs model {p.data.shape}")
        p.data = data.reshape(shape).copy()
        seen.add(name)
    if seen != set(model._params):
        raise ValueError("checkpoint is missing parameters")
    return model


# --- sklearn-style wrapper ----------------------------------------------------

class NeuralSynchronizer(BaseEstimator):
    """Estimator facade: fit() trains (or loads) the model, predict() maps
    resource grids to DetectionReports."""

    def __init__(self, preamble: PreambleConfig | None = None,
                 model_config: ModelConfig | None = None,
                 steps: int = 2000, batch_size: int = 64, lr: float = 1e-3,
                 seed: int = 0, p_active_range: tuple[float, float] = (0.0, 1.0),
                 cfo_max_ppm: float = 10.0, toa_max: float | None = None,
                 snr_range_db: tuple[float, float] = (-10.0, 20.0),
                 profile: DelayProfile | None = None,
                 checkpoint: str | None = None):
        self.preamble = preamble
        self.model_config = model_config
        self.steps = steps
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.p_active_range = p_active_range
        self.cfo_max_ppm = cfo_max_ppm
        self.toa_max = toa_max
        self.snr_range_db = snr_range_db
        self.profile = profile
        self.checkpoint = checkpoint

    def fit(self, X=None, y=None):
        """Train from simulation (X and y are ignored), or load the
        configured checkpoint if one was given."""
        self.preamble_ = self.preamble if self.preamble is not None else PreambleConfig()
        self.patterns_ = build_all_patterns(self.preamble_)
        if self.checkpoint is not None:
            self.model_ = load_checkpoint(self.checkpoint, expected=self.model_config)
            self.trace_ = []
            return self
        cfg = self.model_config if self.model_config is not None else ModelConfig()
        self.model_ = SynchModel(cfg, sg_count=self.preamble_.sg_count, seed=self.seed)
        tc = TrainConfig(steps=self.steps, batch_size=self.batch_size, lr=self.lr,
                         seed=self.seed, p_active_range=self.p_active_range,
                         cfo_max_ppm=self.cfo_max_ppm, toa_max=self.toa_max,
                         snr_range_db=self.snr_range_db,
                         profile=self.profile if self.profile is not None
                         else DelayProfile())
        self.trace_ = train(self.model_, tc, self.preamble_, self.patterns_)
        return self

    def predict(self, X):
        """X: one [n_fft, 5S] grid or a sequence of them."""
        if not hasattr(self, "model_"):
            raise NotFittedError("NeuralSynchronizer must be fit before predict")
        single = isinstance(X, np.ndarray) and X.ndim == 2
        grids = [X] if single else list(X)
        feats = np.stack([preprocess_grid(check_grid(g, self.preamble_),
                                          self.patterns_, self.preamble_)
                          for g in grids])
        reports = _infer_many(self.model_, feats, self.patterns_, self.preamble_)
        return reports[0] if single else reports
