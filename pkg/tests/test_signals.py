import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pqdnet.signals import (ALL_CLASSES, DisturbanceClass, DisturbanceParams, Envelope, Flicker,
                            Harmonics, ImpulsiveTransient, OscillatoryTransient, TimeBase,
                            Waveform, add_awgn, generate_dataset, measure_snr, read_waveforms,
                            sample_params, synthesize, validate_params, write_waveforms)

TB = TimeBase()
T = TB.period
C = DisturbanceClass


def sine(tb=TB):
    return np.sin(tb.omega * tb.times())


def test_timebase_defaults():
    assert TB.n_samples == 640
    assert TB.sample_rate > 1800
    with pytest.raises(ValueError):
        TimeBase(duration=0.215)
    with pytest.raises(ValueError):
        TimeBase(sample_rate=1000)


def test_eighteen_classes():
    assert len(ALL_CLASSES) == 18
    assert [c.index for c in ALL_CLASSES] == list(range(18))
    assert C.parse("v10") is C.V10
    assert C.parse(0) is C.V1
    with pytest.raises(ValueError):
        C.parse("V19")


def test_sag_params_in_table_range():
    for seed in range(50):
        p = sample_params(C.V2, seed)
        assert 0.1 <= p.envelope.alpha <= 0.9
        assert 4 * T - 1e-12 <= p.envelope.t2 - p.envelope.t1 <= 9 * T + 1e-12


def test_oscillatory_frequency_range():
    for seed in range(50):
        assert 300 <= sample_params(C.V6, seed).oscillatory.f_n <= 900


def test_mixed_classes_draw_each_component():
    p = sample_params(C.V18, 3)
    assert p.harmonics and p.oscillatory and p.impulsive and p.envelope.kind == "sag"
    assert p.flicker is None
    p = sample_params(C.V17, 3)
    assert p.flicker and p.impulsive and p.harmonics and p.envelope is None


@settings(max_examples=300, deadline=None)
@given(cls=st.sampled_from(ALL_CLASSES), seed=st.integers(0, 2 ** 32 - 1))
def test_sampled_params_always_valid(cls, seed):
    p = sample_params(cls, seed)
    validate_params(p, TB)
    for part in (p.envelope, p.oscillatory, p.impulsive):
        if part is None:
            continue
        start, stop = (part.t1, part.t2) if isinstance(part, Envelope) else (part.t3, part.t4)
        # events stay clear of the record edges
        assert start > 0 and stop < TB.duration


def test_million_parameter_sets_within_bounds():
    rng = np.random.default_rng(2024)
    for i in range(1_000_000):
        validate_params(sample_params(ALL_CLASSES[i % 18], rng), TB)


def test_long_event_fits_short_record():
    # a 9T event in a 10T record must still fit inside (0, duration)
    rng = np.random.default_rng(0)
    from pqdnet.signals import _place
    t1 = _place(rng, 9 * T, TB)
    assert t1 == pytest.approx(0.5 * T)


def test_pure_harmonic_degenerates_to_sine():
    p = DisturbanceParams(C.V1, harmonics=Harmonics(0, 0, 0, 1.0, 2.0, 3.0))
    w = synthesize(C.V1, p)
    np.testing.assert_array_equal(w.samples, sine())


def test_sag_inside_window():
    p = DisturbanceParams(C.V2, envelope=Envelope("sag", 0.5, 2 * T, 7 * T))
    w = synthesize(C.V2, p)
    t = TB.times()
    inside = (t > 2 * T) & (t < 7 * T)
    np.testing.assert_allclose(w.samples[inside], 0.5 * sine()[inside], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(w.samples[~((t >= 2 * T) & (t < 7 * T))],
                                  sine()[~((t >= 2 * T) & (t < 7 * T))])


def test_swell_raises_amplitude():
    p = DisturbanceParams(C.V3, envelope=Envelope("swell", 0.4, 2 * T, 7 * T))
    w = synthesize(C.V3, p)
    t = TB.times()
    inside = (t >= 2 * T) & (t < 7 * T)
    np.testing.assert_allclose(w.samples[inside], 1.4 * sine()[inside], atol=1e-15)


@pytest.mark.parametrize("cls,kind", [(C.V2, "sag"), (C.V3, "swell"), (C.V4, "interruption")])
def test_envelope_outside_window_is_pure_sine(cls, kind):
    for seed in range(20):
        p = sample_params(cls, seed)
        assert p.envelope.kind == kind
        w = synthesize(cls, p)
        t = TB.times()
        outside = (t < p.envelope.t1) | (t >= p.envelope.t2)
        np.testing.assert_array_equal(w.samples[outside], sine()[outside])


def test_step_is_left_closed():
    # u(0) = 1: the sample exactly at t1 is already inside the event
    t1 = 64 / TB.sample_rate
    p = DisturbanceParams(C.V2, envelope=Envelope("sag", 0.5, t1, t1 + 5 * T))
    w = synthesize(C.V2, p)
    assert w.samples[64] == pytest.approx(0.5 * sine()[64], abs=1e-15)


def test_flicker_zero_crossings():
    p = DisturbanceParams(C.V5, flicker=Flicker(0.4, 0.1))
    w = synthesize(C.V5, p)
    # sin(beta*omega*t) = 0 at t = 0 and t = 0.1 s (sample 320)
    assert w.samples[0] == sine()[0]
    assert w.samples[320] == pytest.approx(sine()[320], abs=1e-15)


def test_impulsive_before_onset_is_sine():
    p = DisturbanceParams(C.V7, impulsive=ImpulsiveTransient(5.0, 0.02, 3 * T, 4 * T))
    w = synthesize(C.V7, p)
    before = TB.times() < 3 * T
    np.testing.assert_array_equal(w.samples[before], sine()[before])
    assert w.samples[np.argmax(TB.times() >= 3 * T)] == pytest.approx(
        sine()[np.argmax(TB.times() >= 3 * T)] + 5.0)


def test_oscillatory_transient_shape():
    o = OscillatoryTransient(0.5, 0.01, 3 * T, 5 * T, 600.0)
    w = synthesize(C.V6, DisturbanceParams(C.V6, oscillatory=o))
    t = TB.times()
    dt = t - o.t3
    expect = sine() + np.where((t >= o.t3) & (t < o.t4),
                               0.5 * np.exp(-dt / 0.01) * np.sin(2 * np.pi * 600 * dt), 0)
    np.testing.assert_allclose(w.samples, expect, atol=1e-12)


def test_mixed_harmonics_sag_composition():
    p = DisturbanceParams(C.V8, harmonics=Harmonics(0, 0, 0, 0, 0, 0),
                          envelope=Envelope("sag", 0.3, 2 * T, 7 * T))
    w = synthesize(C.V8, p)
    t = TB.times()
    inside = (t >= 2 * T) & (t < 7 * T)
    np.testing.assert_allclose(w.samples[inside], 0.7 * sine()[inside], atol=1e-15)


@pytest.mark.parametrize("cls", ALL_CLASSES)
def test_amplitude_bound(cls):
    for seed in range(10):
        p = sample_params(cls, seed)
        w = synthesize(cls, p)
        h = p.harmonics
        carrier = 1 + (h.a3 + h.a5 + h.a7 if h else 0)
        env = 1 + (p.envelope.alpha if p.envelope and p.envelope.kind == "swell" else 0)
        flick = 1 + (p.flicker.alpha_f if p.flicker else 0)
        trans = (p.oscillatory.alpha if p.oscillatory else 0) + (
            p.impulsive.alpha if p.impulsive else 0)
        assert np.max(np.abs(w.samples)) <= carrier * env * flick + trans + 1e-12


def test_synthesize_rejects_bad_params():
    with pytest.raises(ValueError):
        synthesize(C.V2, DisturbanceParams(C.V2, envelope=Envelope("sag", 0.95, T, 6 * T)))
    with pytest.raises(ValueError):
        synthesize(C.V2, DisturbanceParams(C.V2, envelope=Envelope("sag", 0.5, 6 * T, T)))
    with pytest.raises(ValueError):
        synthesize(C.V3, sample_params(C.V2, 0))
    with pytest.raises(ValueError):
        synthesize(C.V1, DisturbanceParams(C.V1))


def test_awgn_variance_unit_sine():
    clean = synthesize(C.V1, DisturbanceParams(C.V1, harmonics=Harmonics(0, 0, 0, 0, 0, 0)))
    assert np.mean(clean.samples ** 2) == pytest.approx(0.5)
    # sigma^2 = 0.5 / 10^(20/10)
    noisy = add_awgn(clean, 20.0, np.random.default_rng(0))
    resid = [np.var(add_awgn(clean, 20.0, s).samples - clean.samples) for s in range(200)]
    assert np.mean(resid) == pytest.approx(0.005, rel=0.02)
    assert noisy.snr_db == 20.0
    assert clean.snr_db is None


def test_awgn_infinite_snr_is_identity():
    clean = synthesize(C.V5, sample_params(C.V5, 1))
    out = add_awgn(clean, math.inf, 0)
    np.testing.assert_array_equal(out.samples, clean.samples)
    assert out.samples is not clean.samples


def test_awgn_does_not_modify_input():
    clean = synthesize(C.V9, sample_params(C.V9, 1))
    before = clean.samples.copy()
    add_awgn(clean, 30, 0)
    np.testing.assert_array_equal(clean.samples, before)


def test_measure_snr_examples():
    assert measure_snr([1.0, 0.0], [1.0, 0.0]) == math.inf
    assert measure_snr([1.0, 0.0], [1.1, 0.0]) == pytest.approx(20.0)
    with pytest.raises(ValueError):
        measure_snr([1.0], [1.0, 2.0])


@pytest.mark.parametrize("target", [20.0, 30.0, 40.0])
def test_awgn_calibration(target):
    clean = synthesize(C.V1, DisturbanceParams(C.V1, harmonics=Harmonics(0, 0, 0, 0, 0, 0)))
    snrs = [measure_snr(clean, add_awgn(clean, target, s)) for s in range(100)]
    assert abs(np.mean(snrs) - target) < 0.3
    # per-seed spread of a 640-sample estimate is ~0.24 dB
    assert all(abs(s - target) < 1.5 for s in snrs)


def test_generate_dataset_counts_and_determinism():
    a = generate_dataset(per_class=3, seed=5)
    assert len(a) == 54
    b = generate_dataset(per_class=3, seed=5)
    for x, y in zip(a, b):
        assert x.id == y.id
        np.testing.assert_array_equal(x.waveform.samples, y.waveform.samples)
    one = generate_dataset(classes=["V1"], per_class=1, seed=5)
    assert len(one) == 1 and one[0].waveform.label is C.V1


def test_noisy_dataset_shares_clean_params():
    clean = generate_dataset(classes=["V4"], per_class=2, seed=9)
    noisy = generate_dataset(classes=["V4"], per_class=2, seed=9, snr_db=30)
    for c, n in zip(clean, noisy):
        assert c.waveform.params == n.waveform.params
        assert abs(measure_snr(c.waveform, n.waveform) - 30) < 1.5


def test_generate_rejects_zero_count():
    with pytest.raises(ValueError):
        generate_dataset(per_class=0)


def test_waveform_invariants():
    p = sample_params(C.V1, 0)
    with pytest.raises(ValueError):
        Waveform(np.zeros(10), TB, C.V1, p)
    with pytest.raises(ValueError):
        Waveform(np.full(640, np.nan), TB, C.V1, p)


def test_waveform_files_roundtrip(tmp_path):
    items = generate_dataset(classes=["V1", "V18"], per_class=2, snr_db=40, seed=1)
    manifest = write_waveforms(items, tmp_path)
    lines = manifest.read_text().splitlines()
    assert len(lines) == 4
    raw = np.fromfile(tmp_path / "V18_1.f64", dtype="<f8")
    np.testing.assert_array_equal(raw, items[-1].waveform.samples)
    back = read_waveforms(tmp_path)
    for a, b in zip(items, back):
        assert a.id == b.id and a.waveform.params == b.waveform.params
        assert a.waveform.snr_db == b.waveform.snr_db
        np.testing.assert_array_equal(a.waveform.samples, b.waveform.samples)
