"""Scenario sampling, channel taps, and time-domain synthesis."""

import numpy as np
import pytest

from nprach.preamble import PreambleConfig, build_all_patterns
from nprach.scenario import (CFO_NORM_CAP, TAP_MARGIN, ChannelTaps,
                             DelayProfile, ScenarioSample, UserState,
                             _snr_many, _synthesize_many, compute_taps,
                             freq_response, generate_user_waveform,
                             load_scenario, sample_scenario, save_scenario,
                             snr_of, synthesize_received, toa_of)

CFG = PreambleConfig()
PATTERNS = build_all_patterns(CFG)


def _user(pattern_id=0, active=True, power=1.0, toa=0.0, cfo_norm=0.0,
          gains=(1.0,), delays=(0.0,)):
    return UserState(pattern_id=pattern_id, active=active, power=power,
                     toa=toa, cfo_norm=cfo_norm,
                     ray_gains=np.asarray(gains, dtype=np.complex128),
                     ray_delays=np.asarray(delays, dtype=np.float64))


def test_toa_of_is_earliest_ray():
    u = _user(toa=1e-5, gains=(1.0, 0.5), delays=(3e-6, 1e-6))
    assert toa_of(u) == pytest.approx(1.1e-5)


def test_taps_single_ray_integer_delay():
    # delay 0: h_l = sinc(l) is a unit impulse at lag 0
    ch = compute_taps(_user(), CFG)
    assert ch.l_min == -TAP_MARGIN and ch.l_max == TAP_MARGIN
    assert ch.taps[TAP_MARGIN] == pytest.approx(1.0)
    mask = np.ones(ch.taps.size, dtype=bool)
    mask[TAP_MARGIN] = False
    np.testing.assert_allclose(ch.taps[mask], 0.0, atol=1e-9)


def test_taps_half_sample_delay():
    # rays at 0 and 0.5 samples with gains 1 and j; sinc(0.5) = 2/pi,
    # sinc(+-1.5) = -2/(3 pi), all checked at the matching lags
    u = _user(gains=(1.0, 1.0j), delays=(0.0, 0.5 / CFG.sample_rate))
    ch = compute_taps(u, CFG)
    i0 = -ch.l_min
    assert ch.taps[i0] == pytest.approx(1.0 + 2j / np.pi)
    assert ch.taps[i0 + 1] == pytest.approx(2j / np.pi, abs=1e-12)
    assert ch.taps[i0 - 1] == pytest.approx(-2j / (3 * np.pi), abs=1e-12)


def test_taps_window_follows_delay_span():
    u = _user(toa=20 / CFG.sample_rate, gains=(1.0, 0.5),
              delays=(0.0, 2.6 / CFG.sample_rate))
    ch = compute_taps(u, CFG)
    assert ch.l_min == -TAP_MARGIN
    assert ch.l_max == int(np.ceil(22.6)) + TAP_MARGIN


def test_taps_capture_99_percent_energy():
    # Parseval for the band-limited series: the untruncated tap energy is
    # sum_pq a_p conj(a_q) sinc(x_p - x_q)
    rng = np.random.default_rng(0)
    profile = DelayProfile()
    for _ in range(200):
        sc = sample_scenario(rng, CFG, p_active=1.0, profile=profile)
        u = sc.users[0]
        ch = compute_taps(u, CFG)
        x = CFG.sample_rate * (u.ray_delays + u.toa)
        full = np.einsum("p,q,pq->", u.ray_gains, u.ray_gains.conj(),
                         np.sinc(x[:, None] - x[None, :])).real
        kept = float(np.sum(np.abs(ch.taps) ** 2))
        assert kept / full >= 0.99


def test_taps_match_analytic_spectrum():
    # IDFT of H(f) on a dense grid reproduces the lag-domain taps
    rng = np.random.default_rng(1)
    m_grid = 8192
    f = np.fft.fftfreq(m_grid)
    for _ in range(20):
        sc = sample_scenario(rng, CFG, p_active=1.0)
        u = sc.users[0]
        h_grid = np.fft.ifft(freq_response(u, f, CFG))
        ch = compute_taps(u, CFG)
        lags = np.arange(ch.l_min, ch.l_max + 1)
        err = np.abs(ch.taps - h_grid[lags % m_grid]).max()
        assert err <= 1e-3


def test_channel_taps_shape_validation():
    with pytest.raises(ValueError, match="length"):
        ChannelTaps(l_min=0, l_max=3, taps=np.zeros(3, dtype=complex))


def test_snr_of_plugins():
    # flat channel (single ray at delay 0): snr = beta |a|^2 / sigma^2
    u = _user(power=4.0)
    assert snr_of(u, PATTERNS[0], 1.0, CFG) == pytest.approx(4.0)
    u = _user(power=4.0, toa=1e-5, gains=(0.5j,))
    assert snr_of(u, PATTERNS[0], 2.0, CFG) == pytest.approx(4.0 * 0.25 / 2.0)
    with pytest.raises(ValueError, match="noise_var"):
        snr_of(u, PATTERNS[0], 0.0, CFG)


def test_snr_many_matches_snr_of():
    sc = sample_scenario(np.random.default_rng(2), CFG, p_active=0.5)
    got = _snr_many(sc, PATTERNS, CFG)
    ref = [snr_of(u, PATTERNS[u.pattern_id], sc.noise_var, CFG)
           for u in sc.users]
    np.testing.assert_allclose(got, ref, rtol=1e-10)


def test_waveform_single_tone():
    # constant pattern on subcarrier 16 of 64: s[n] = sqrt(beta) e^{j pi n / 2}
    s = generate_user_waveform(np.full(4, 16), 4.0, CFG)
    n = np.arange(CFG.total_samples)
    np.testing.assert_allclose(s, 2.0 * np.exp(1j * np.pi * n / 2), atol=1e-9)


def test_waveform_cp_periodicity():
    # the tone phase runs on the global index, so every SG is 64-periodic
    # inside itself and any length-64 window demodulates cleanly
    s = generate_user_waveform(PATTERNS[7], 1.0, CFG)
    for m in range(CFG.sg_count):
        sg = s[m * CFG.sg_samples:(m + 1) * CFG.sg_samples]
        np.testing.assert_allclose(sg[64:], sg[:-64], atol=1e-12)


def test_synthesis_cfo_ramp_on_flat_channel():
    # delta channel: y[n] = e^{j 2 pi f n} s[n] exactly
    f = 0.01
    sc = ScenarioSample(users=[_user(pattern_id=3, cfo_norm=f)], noise_var=1.0)
    y = synthesize_received(sc, PATTERNS, CFG, rng=None)
    s = generate_user_waveform(PATTERNS[3], 1.0, CFG)
    n = np.arange(CFG.total_samples)
    np.testing.assert_allclose(y, np.exp(2j * np.pi * f * n) * s, atol=1e-7)


def test_synthesis_superposition():
    ua = _user(pattern_id=0, power=2.0, toa=1e-5, gains=(0.8, 0.1j),
               delays=(0.0, 2e-7), cfo_norm=0.05)
    ub = _user(pattern_id=9, power=0.5, toa=3e-5, gains=(1.0,), delays=(0.0,),
               cfo_norm=-0.03)
    ya = synthesize_received(ScenarioSample([ua], 1.0), PATTERNS, CFG, rng=None)
    yb = synthesize_received(ScenarioSample([ub], 1.0), PATTERNS, CFG, rng=None)
    yab = synthesize_received(ScenarioSample([ua, ub], 1.0), PATTERNS, CFG,
                              rng=None)
    np.testing.assert_allclose(yab, ya + yb, atol=1e-10)


def test_inactive_users_are_silent():
    u = _user(active=False, power=100.0)
    y = synthesize_received(ScenarioSample([u], 1.0), PATTERNS, CFG, rng=None)
    np.testing.assert_array_equal(y, 0.0)


def test_noise_scaling():
    # sigma^2 per RE means N sigma^2 per time sample
    sc = ScenarioSample(users=[], noise_var=2.0)
    y = synthesize_received(sc, PATTERNS, CFG, rng=np.random.default_rng(0))
    var = np.mean(np.abs(y) ** 2)
    assert var == pytest.approx(CFG.n_fft * 2.0, rel=0.1)


def test_batch_synthesis_matches_single():
    rng = np.random.default_rng(3)
    scenarios = [sample_scenario(rng, CFG, p_active=0.5, cfo_max_ppm=10.0)
                 for _ in range(6)]
    batch = _synthesize_many(scenarios, PATTERNS, CFG, None)
    for b, sc in enumerate(scenarios):
        ref = synthesize_received(sc, PATTERNS, CFG, rng=None)
        scale = max(np.abs(ref).max(), 1.0)
        np.testing.assert_allclose(batch[b], ref, atol=1e-5 * scale)


def test_batch_synthesis_noise_bitwise():
    sc = sample_scenario(np.random.default_rng(4), CFG, p_active=0.0)
    a = synthesize_received(sc, PATTERNS, CFG, rng=np.random.default_rng(42),
                            dtype=np.complex64)
    b = _synthesize_many([sc], PATTERNS, CFG, [np.random.default_rng(42)])
    np.testing.assert_array_equal(a, b[0])


def test_sample_scenario_determinism():
    sa = sample_scenario(123, CFG)
    sb = sample_scenario(123, CFG)
    assert sa.seed == 123
    for ua, ub in zip(sa.users, sb.users):
        assert ua.active == ub.active
        assert ua.power == ub.power and ua.toa == ub.toa
        assert ua.cfo_norm == ub.cfo_norm
        np.testing.assert_array_equal(ua.ray_gains, ub.ray_gains)
        np.testing.assert_array_equal(ua.ray_delays, ub.ray_delays)


def test_sample_scenario_activity_does_not_shift_draws():
    # the rng stream is consumed identically whatever the activity outcome
    off = sample_scenario(7, CFG, p_active=0.0)
    on = sample_scenario(7, CFG, p_active=1.0)
    assert not any(u.active for u in off.users)
    assert all(u.active for u in on.users)
    for ua, ub in zip(off.users, on.users):
        assert ua.power == ub.power and ua.toa == ub.toa
        assert ua.cfo_norm == ub.cfo_norm
        np.testing.assert_array_equal(ua.ray_gains, ub.ray_gains)


def test_sample_scenario_ranges():
    sc = sample_scenario(5, CFG, p_active=1.0, cfo_max_ppm=10.0)
    max_norm = 10e-6 * CFG.carrier_freq / CFG.sample_rate
    assert max_norm == pytest.approx(0.1416667, abs=1e-6)
    for u in sc.users:
        assert 0.0 <= u.toa <= CFG.cp_duration
        assert abs(u.cfo_norm) <= max_norm
        assert 0.1 <= u.power <= 100.0          # -10..20 dB
        assert u.ray_delays[0] == 0.0
    assert sorted(u.pattern_id for u in sc.users) == list(range(48))


def test_sample_scenario_validation():
    with pytest.raises(ValueError, match="p_active"):
        sample_scenario(0, CFG, p_active=1.5)
    with pytest.raises(ValueError, match="toa_max"):
        sample_scenario(0, CFG, toa_max=2 * CFG.cp_duration)
    with pytest.raises(ValueError, match="cfo_max_ppm"):
        sample_scenario(0, CFG, cfo_max_ppm=25.0)   # |norm| 0.354 > 0.3 cap
    with pytest.raises(ValueError, match="snr_range"):
        sample_scenario(0, CFG, snr_range_db=(10.0, -10.0))
    assert CFO_NORM_CAP == pytest.approx(0.3)


def test_user_state_validation():
    with pytest.raises(ValueError, match="power"):
        _user(power=-1.0)
    with pytest.raises(ValueError, match="toa"):
        _user(toa=-1e-6)
    with pytest.raises(ValueError, match="cfo_norm"):
        _user(cfo_norm=0.5)
    with pytest.raises(ValueError, match="matching"):
        _user(gains=(1.0, 2.0), delays=(0.0,))
    with pytest.raises(ValueError, match="delays"):
        _user(gains=(1.0,), delays=(-1e-9,))
    with pytest.raises(ValueError, match="noise_var"):
        ScenarioSample(users=[], noise_var=-1.0)
    with pytest.raises(ValueError, match="n_rays"):
        DelayProfile(n_rays=0)


def test_scenario_dump_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    sc = sample_scenario(rng, CFG, p_active=0.5)
    stream = synthesize_received(sc, PATTERNS, CFG, rng=rng,
                                 dtype=np.complex64)
    path = tmp_path / "scenario.bin"
    save_scenario(path, sc, stream, CFG)
    loaded, lstream, info = load_scenario(path)
    assert info == {"sg_count": 4, "n_fft": 64, "cp_len": 16}
    assert loaded.noise_var == sc.noise_var
    assert len(loaded.users) == len(sc.users)
    for ua, ub in zip(sc.users, loaded.users):
        assert ua.pattern_id == ub.pattern_id and ua.active == ub.active
        assert ua.power == ub.power and ua.toa == ub.toa
        assert ua.cfo_norm == ub.cfo_norm
        np.testing.assert_array_equal(ua.ray_gains, ub.ray_gains)
        np.testing.assert_array_equal(ua.ray_delays, ub.ray_delays)
    np.testing.assert_array_equal(stream, lstream)


def test_scenario_dump_rejects_corruption(tmp_path):
    rng = np.random.default_rng(7)
    sc = sample_scenario(rng, CFG, p_active=0.25)
    stream = synthesize_received(sc, PATTERNS, CFG, rng=rng,
                                 dtype=np.complex64)
    path = tmp_path / "scenario.bin"
    save_scenario(path, sc, stream, CFG)
    raw = path.read_bytes()

    (tmp_path / "magic.bin").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ValueError, match="magic"):
        load_scenario(tmp_path / "magic.bin")

    (tmp_path / "short.bin").write_bytes(raw[:-64])
    with pytest.raises(ValueError, match="does not match"):
        load_scenario(tmp_path / "short.bin")

    bad_ver = raw[:4] + b"\xff\xff" + raw[6:]
    (tmp_path / "ver.bin").write_bytes(bad_ver)
    with pytest.raises(ValueError, match="version"):
        load_scenario(tmp_path / "ver.bin")
