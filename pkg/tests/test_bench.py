"""Benchmark harness: metric accounting, pairing, and reproducibility."""

import math

import numpy as np
import pytest

from nprach.base import DetectionReport
from nprach.baseline import BaselineConfig
from nprach.bench import (BIN_ALL, BaselineBatchDetector, ExperimentConfig,
                          MetricsAccumulator, MetricsRow, NeuralBatchDetector,
                          _check_finite, read_metrics_csv, resolve_workers,
                          run_experiment, write_metrics_csv)
from nprach.neural import ModelConfig, SynchModel
from nprach.preamble import PreambleConfig, build_all_patterns
from nprach.scenario import ScenarioSample, UserState

CFG = PreambleConfig()
PATTERNS = build_all_patterns(CFG)
N_PAT = CFG.n_sc


def _users(active_ids, toa=0.0, cfo_norm=0.0):
    return [UserState(pattern_id=k, active=k in active_ids, power=1.0,
                      toa=toa, cfo_norm=cfo_norm,
                      ray_gains=np.array([1.0 + 0j]),
                      ray_delays=np.array([0.0]))
            for k in range(N_PAT)]


def _report(detected_ids, toa_hat=None, cfo_hat=None):
    det = np.zeros(N_PAT, dtype=bool)
    det[list(detected_ids)] = True
    return DetectionReport(
        prob=det.astype(float),
        toa_hat=np.zeros(N_PAT) if toa_hat is None else toa_hat,
        cfo_hat=np.zeros(N_PAT) if cfo_hat is None else cfo_hat,
        detected=det)


def _single_bin_rows(acc):
    rows = acc.rows("det")
    assert rows[-1].snr_bin == BIN_ALL
    return rows


def test_fnr_counts_missed_active_users():
    # 10 active users all at 10 dB, 9 detected: FNR = 0.1
    acc = MetricsAccumulator(CFG)
    sc = ScenarioSample(users=_users(set(range(10))), noise_var=1.0)
    snrs = np.full(N_PAT, 10.0)
    acc.add(sc, snrs, _report(set(range(9))))
    rows = _single_bin_rows(acc)
    assert rows[0].snr_bin == "10..12"
    assert rows[0].n_active == 10 and rows[0].n_missed == 1
    assert rows[0].fnr == pytest.approx(0.1)
    assert rows[-1].fnr == pytest.approx(0.1)


def test_fpr_counts_false_alarms_over_inactive():
    # 10 active, 38 inactive, one spurious detection: FPR = 1/38 in all rows
    acc = MetricsAccumulator(CFG)
    sc = ScenarioSample(users=_users(set(range(10))), noise_var=1.0)
    acc.add(sc, np.full(N_PAT, 1.0), _report(set(range(10)) | {11}))
    rows = _single_bin_rows(acc)
    for row in rows:
        assert row.n_inactive == 38 and row.n_false_alarms == 1
        assert row.fpr == pytest.approx(1.0 / 38.0)


def test_toa_and_cfo_rmse():
    # two active users with ToA errors 3 us and 4 us: RMSE = sqrt(12.5) us;
    # both with cfo error 1e-3 cycles/sample = 240 Hz = 240/3.4e9*1e6 ppm
    acc = MetricsAccumulator(CFG)
    sc = ScenarioSample(users=_users({0, 1}), noise_var=1.0)
    toa_hat = np.zeros(N_PAT)
    toa_hat[0], toa_hat[1] = 3e-6, -4e-6
    cfo_hat = np.zeros(N_PAT)
    cfo_hat[0] = cfo_hat[1] = 1e-3
    acc.add(sc, np.full(N_PAT, 1.0), _report({0, 1}, toa_hat, cfo_hat))
    rows = _single_bin_rows(acc)
    assert rows[-1].toa_rmse_us == pytest.approx(math.sqrt(12.5))
    assert rows[-1].cfo_rmse_ppm == pytest.approx(240.0 / 3.4e9 * 1e6)


def test_rmse_covers_missed_users_too():
    # the missed user's ToA error still enters the RMSE (no survivor bias)
    acc = MetricsAccumulator(CFG)
    sc = ScenarioSample(users=_users({0, 1}), noise_var=1.0)
    toa_hat = np.zeros(N_PAT)
    toa_hat[0], toa_hat[1] = 3e-6, -4e-6
    acc.add(sc, np.full(N_PAT, 1.0), _report({0}, toa_hat))
    rows = _single_bin_rows(acc)
    assert rows[-1].n_missed == 1
    assert rows[-1].toa_rmse_us == pytest.approx(math.sqrt(12.5))


def test_snr_binning_and_all_row():
    # 0.5 linear = -3.01 dB -> bin -4..-2; 1.0 -> 0..2; 3.5 dB -> 2..4
    acc = MetricsAccumulator(CFG)
    sc = ScenarioSample(users=_users({0, 1, 2}), noise_var=1.0)
    snrs = np.full(N_PAT, 1.0)
    snrs[0], snrs[2] = 0.5, 10 ** 0.35
    acc.add(sc, snrs, _report({0, 1, 2}))
    rows = acc.rows("det")
    assert [r.snr_bin for r in rows] == ["-4..-2", "0..2", "2..4", BIN_ALL]
    assert [r.n_active for r in rows] == [1, 1, 1, 3]


def test_merge_is_order_independent():
    rng = np.random.default_rng(0)
    parts = []
    for k in range(3):
        acc = MetricsAccumulator(CFG)
        ids = set(rng.choice(N_PAT, size=10, replace=False).tolist())
        sc = ScenarioSample(users=_users(ids), noise_var=1.0)
        snrs = rng.uniform(0.1, 30.0, N_PAT)
        hit = set(list(ids)[: 10 - k])
        acc.add(sc, snrs, _report(hit, rng.normal(0, 1e-6, N_PAT)))
        parts.append(acc)
    fwd = MetricsAccumulator(CFG)
    rev = MetricsAccumulator(CFG)
    for p in parts:
        fwd.merge(p)
    for p in reversed(parts):
        rev.merge(p)
    # counts are exact; error sums may differ in the last ulp across orders
    for ra, rb in zip(fwd.rows("det"), rev.rows("det")):
        for field, x in ra.__dict__.items():
            y = getattr(rb, field)
            if isinstance(x, float) and not math.isnan(x):
                assert x == pytest.approx(y, rel=1e-12), field
            elif not (isinstance(x, float) and math.isnan(x)):
                assert x == y, field


def test_check_finite_rejects_nan_rmse():
    row = MetricsRow(detector="d", snr_bin="0..2", n_active=1, n_missed=0,
                     fnr=0.0, n_inactive=0, n_false_alarms=0, fpr=float("nan"),
                     toa_rmse_us=float("nan"), cfo_rmse_ppm=0.0)
    with pytest.raises(RuntimeError, match="non-finite"):
        _check_finite([row], (None, 10.0, 0.5))


def test_experiment_config_validation():
    with pytest.raises(ValueError, match="n_trials"):
        ExperimentConfig(n_trials=0)
    with pytest.raises(ValueError, match="chunk"):
        ExperimentConfig(chunk=0)
    with pytest.raises(ValueError, match="axes"):
        ExperimentConfig(snr_points_db=())


def test_resolve_workers(monkeypatch):
    monkeypatch.delenv("NPRACH_WORKERS", raising=False)
    assert resolve_workers() == 1
    assert resolve_workers(3) == 3
    monkeypatch.setenv("NPRACH_WORKERS", "2")
    assert resolve_workers() == 2
    assert resolve_workers(1) == 1
    with pytest.raises(ValueError, match="workers"):
        resolve_workers(0)


def _small_experiment(n_trials=24, chunk=8):
    return ExperimentConfig(snr_points_db=(10.0,), cfo_max_ppm_points=(5.0,),
                            p_active_points=(0.5,), n_trials=n_trials,
                            seed=7, chunk=chunk)


def _detectors():
    bl = BaselineBatchDetector(CFG, PATTERNS, BaselineConfig(gamma=2.3))
    model = SynchModel(ModelConfig(conv_blocks=1, channels=4,
                                   mlp_hidden=(8,)), sg_count=CFG.sg_count)
    nn = NeuralBatchDetector(CFG, PATTERNS, model)
    return {"baseline": bl, "neural": nn}


def test_run_experiment_pairs_trials_across_detectors():
    rows = run_experiment(_small_experiment(), _detectors(), CFG)
    base = [r for r in rows if r.detector == "baseline"]
    neur = [r for r in rows if r.detector == "neural"]
    # identical grids: same bins, same per-bin activity, same axis labels
    assert [r.snr_bin for r in base] == [r.snr_bin for r in neur]
    assert [r.n_active for r in base] == [r.n_active for r in neur]
    assert [r.n_inactive for r in base] == [r.n_inactive for r in neur]
    assert all(r.snr_db == 10.0 and r.cfo_max_ppm == 5.0 and r.p_active == 0.5
               for r in rows)
    # same detector registered twice produces identical metrics
    bl = _detectors()["baseline"]
    rows2 = run_experiment(_small_experiment(), {"a": bl, "b": bl}, CFG)
    a = [r for r in rows2 if r.detector == "a"]
    b = [r for r in rows2 if r.detector == "b"]
    for ra, rb in zip(a, b):
        assert ra == MetricsRow(**{**rb.__dict__, "detector": "a"})


def test_run_experiment_deterministic_and_worker_invariant():
    det = {"baseline": _detectors()["baseline"]}
    rows1 = run_experiment(_small_experiment(), det, CFG, workers=1)
    rows2 = run_experiment(_small_experiment(), det, CFG, workers=1)
    assert rows1 == rows2
    rows3 = run_experiment(_small_experiment(), det, CFG, workers=2)
    assert rows1 == rows3


def test_fpr_repeated_on_every_row_of_a_point():
    rows = run_experiment(_small_experiment(), _detectors(), CFG)
    for name in ("baseline", "neural"):
        sub = [r for r in rows if r.detector == name]
        assert len({(r.n_inactive, r.n_false_alarms, r.fpr) for r in sub}) == 1


def test_metrics_csv_roundtrip(tmp_path):
    rows = run_experiment(_small_experiment(), _detectors(), CFG)
    # include the range-draw mode so a nan snr_db goes through the file
    nan_row = MetricsRow(detector="baseline", snr_bin=BIN_ALL, n_active=5,
                         n_missed=2, fnr=0.4, n_inactive=3, n_false_alarms=0,
                         fpr=0.0, toa_rmse_us=1.25, cfo_rmse_ppm=0.5)
    rows.append(nan_row)
    path = tmp_path / "metrics.csv"
    write_metrics_csv(path, rows)
    back = read_metrics_csv(path)
    assert len(back) == len(rows)
    for orig, rec in zip(rows, back):
        for field in orig.__dict__:
            x, y = getattr(orig, field), getattr(rec, field)
            if isinstance(x, float) and math.isnan(x):
                assert math.isnan(y)
            else:
                assert x == y, field


def test_read_metrics_csv_rejects_unknown_header(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("detector,snr_db\nbaseline,0\n")
    with pytest.raises(ValueError, match="header"):
        read_metrics_csv(path)
