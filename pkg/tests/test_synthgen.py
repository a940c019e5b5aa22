import numpy as np
import pytest

from sudokusens.synthgen import GeneratorConfig, cross_cell_distance, generate_dataset

SMALL = dict(n_classes=3, attribute_values=(2,), session_length_s=8.0)


def _amplitude_at(x, rate, f):
    """Sine amplitude at frequency f by direct projection (no bin alignment needed)."""
    t = np.arange(len(x)) / rate
    return 2.0 / len(x) * abs(np.sum(x * np.exp(-2j * np.pi * f * t)))


def test_zero_disturbance_same_phase_sessions_identical():
    ds, _ = generate_dataset(GeneratorConfig(**SMALL, disturbance_strength=0.0, random_phase=False))
    a, b = ds.sessions[0], ds.sessions[1]
    assert a.condition == b.condition and a.session_id != b.session_id
    for xa, xb in zip(a.samples[0].signals, b.samples[0].signals):
        np.testing.assert_array_equal(xa, xb)


def test_same_seed_bit_identical():
    cfg = GeneratorConfig(**SMALL)
    d1, _ = generate_dataset(cfg)
    d2, _ = generate_dataset(cfg)
    for s1, s2 in zip(d1.sessions, d2.sessions):
        for x1, x2 in zip(s1.samples[0].signals, s2.samples[0].signals):
            assert x1.tobytes() == x2.tobytes()


def test_different_seed_changes_data():
    d1, _ = generate_dataset(GeneratorConfig(**SMALL, rng_seed=0))
    d2, _ = generate_dataset(GeneratorConfig(**SMALL, rng_seed=1))
    assert not np.array_equal(d1.sessions[0].samples[0].signals[0], d2.sessions[0].samples[0].signals[0])


def test_dominant_peaks_differ_between_classes():
    cfg = GeneratorConfig(**SMALL, disturbance_strength=0.0)
    ds, factors = generate_dataset(cfg)
    rate = cfg.sample_rates[0]
    env = ds.sessions[0].condition[1:]
    peaks = {}
    for s in ds.sessions:
        if s.condition[1:] != env or s.session_id.endswith("r1"):
            continue
        x = s.samples[0].signals[0].astype(np.float64)
        spec = np.abs(np.fft.rfft(x))
        peak_hz = np.argmax(spec) * rate / len(x)
        harmonics = factors.harmonics[s.class_label][0][0]
        # the peak sits on one of this class's harmonics, to within one bin
        assert np.min(np.abs(harmonics - peak_hz)) <= rate / len(x)
        peaks[s.class_label] = peak_hz
    assert len(set(np.round(list(peaks.values()), 3))) == len(peaks)


def test_class_harmonic_sets_distinct_and_filters_positive():
    cfg = GeneratorConfig(n_classes=6, attribute_values=(3, 2))
    _, factors = generate_dataset(GeneratorConfig(**dict(SMALL, n_classes=6, attribute_values=(3, 2))))
    f0s = [per[0][0][0] for per in factors.harmonics.values()]
    assert len(set(f0s)) == len(f0s)
    grid = np.linspace(0, 500, 1001)
    for attr, values in factors.filters.items():
        for value in values:
            for m in range(len(cfg.sample_rates)):
                assert np.all(factors.gain(attr, value, m, grid) > 0)


def test_nyquist_violation_rejected():
    with pytest.raises(ValueError, match="Nyquist"):
        generate_dataset(GeneratorConfig(**SMALL, sample_rates=(1024.0, 128.0)))


@pytest.mark.parametrize("bad", [dict(n_classes=0), dict(disturbance_strength=1.5), dict(attribute_values=(0,))])
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        GeneratorConfig(**bad)


def test_factorization_of_harmonic_amplitudes():
    """Amplitude at each harmonic = class amplitude x environment gain."""
    cfg = GeneratorConfig(n_classes=2, attribute_values=(3,), session_length_s=40.0, disturbance_strength=0.0,
                          sessions_per_cell=1)
    ds, factors = generate_dataset(cfg)
    for s in ds.sessions:
        env_value = s.condition[1]
        for m, rate in enumerate(cfg.sample_rates):
            freqs, amps = factors.harmonics[s.class_label][m]
            x = s.samples[0].signals[m].astype(np.float64)
            measured = np.array([_amplitude_at(x, rate, f) for f in freqs])
            expected = amps * factors.gain("env0", env_value, m, freqs)
            # log-spectrum(class, env) = log-spectrum(class) + log-gain(env)
            np.testing.assert_allclose(np.log(measured), np.log(expected), atol=0.02)


def test_disturbance_trajectories_vary_across_sessions():
    _, factors = generate_dataset(GeneratorConfig(**SMALL, sessions_per_cell=3))
    speeds = [t["speed_mean"] for t in factors.trajectories.values()]
    assert np.var(speeds) > 0
    _, calm = generate_dataset(GeneratorConfig(**SMALL, disturbance_strength=0.0))
    assert {t["speed_mean"] for t in calm.trajectories.values()} == {1.0}


def test_self_distance_zero_without_disturbance():
    ds, _ = generate_dataset(GeneratorConfig(**SMALL, disturbance_strength=0.0, random_phase=False))
    cell = ("class0", ("e0v0",))
    assert cross_cell_distance(ds, cell, cell) == pytest.approx(0.0, abs=1e-6)


def test_distance_symmetric_and_attribute_shift_large():
    ds, _ = generate_dataset(GeneratorConfig(n_classes=2, attribute_values=(3,), sessions_per_cell=4,
                                             session_length_s=8.0))
    a, b = ("class0", ("e0v0",)), ("class0", ("e0v2",))
    assert cross_cell_distance(ds, a, b) == pytest.approx(cross_cell_distance(ds, b, a), rel=1e-12)
    # disjoint pass bands (first and last centre) separate cells more than session-to-session variation
    assert cross_cell_distance(ds, a, b) > cross_cell_distance(ds, a, a)
    assert cross_cell_distance(ds, a, b) > cross_cell_distance(ds, b, b)


def test_empty_cell_rejected():
    ds, _ = generate_dataset(GeneratorConfig(**SMALL))
    ds = ds.with_sessions([s for s in ds.sessions if s.class_label != "class0"])
    with pytest.raises(ValueError, match="empty cell"):
        cross_cell_distance(ds, ("class0", ("e0v0",)), ("class1", ("e0v0",)))
