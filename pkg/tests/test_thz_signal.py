import json

import numpy as np
import pytest

from thztomo import thz_signal as sig
from thztomo.errors import ShapeError

C = sig.C_MM_PS


def dirichlet_sum(g, n_t, dt):
    """Closed form of sum_k exp(-2j pi g k dt) for k = 0..n_t-1."""
    r = np.exp(-2j * np.pi * g * dt)
    if abs(r - 1.0) < 1e-15:
        return complex(n_t)
    return (1.0 - r ** n_t) / (1.0 - r)


def test_default_band_set_values():
    bands = sig.default_band_set()
    freqs = bands.frequencies
    assert len(freqs) == 12
    assert freqs[0] == 0.380
    assert freqs[-1] == 1.229
    assert all(b > a for a, b in zip(freqs, freqs[1:]))


def test_band_set_validation():
    with pytest.raises(ValueError):
        sig.BandSet(frequencies=(0.5, 0.4))
    with pytest.raises(ValueError):
        sig.BandSet(frequencies=(0.0, 1.0))
    with pytest.raises(ValueError):
        sig.BandSet(frequencies=(1.0, 6.0))


def test_default_pulse_shape():
    pulse = sig.ReferencePulse.default()
    assert pulse.samples.size == 1000
    assert pulse.dt == 0.1
    assert np.max(np.abs(pulse.samples)) == 1.0
    # derivative of a Gaussian centered at t0: odd around 20 ps
    t = pulse.times
    mid = np.argmin(np.abs(t - 20.0))
    assert abs(pulse.samples[mid]) < 1e-12


def test_pulse_validation():
    with pytest.raises(ValueError):
        sig.ReferencePulse(samples=np.zeros(100))
    with pytest.raises(ValueError):
        sig.ReferencePulse(samples=np.array([1.0, np.nan]))
    with pytest.raises(ShapeError):
        sig.ReferencePulse(samples=np.ones((4, 4)))


def test_material_validation_and_lookup():
    with pytest.raises(ValueError):
        sig.MaterialProfile(freq_thz=[0.1, 4.0], n=[0.9, 1.2], kappa=[0, 0])
    with pytest.raises(ValueError):
        sig.MaterialProfile(freq_thz=[0.1, 4.0], n=[1.5, 1.5], kappa=[-0.1, 0])
    with pytest.raises(ValueError):
        sig.MaterialProfile(freq_thz=[4.0, 0.1], n=[1.5, 1.5], kappa=[0, 0])
    mat = sig.MaterialProfile(freq_thz=[0.1, 2.0, 4.0], n=[1.5, 1.6, 1.7],
                              kappa=[0.0, 0.01, 0.02])
    n, k, t = mat.lookup(1.05)
    np.testing.assert_allclose(n, 1.55)
    np.testing.assert_allclose(k, 0.005)
    assert t == 0.5 + 0j
    with pytest.raises(ValueError):
        mat.lookup(0.05)
    n_lo, _, _ = mat.lookup(0.05, clamp=True)
    np.testing.assert_allclose(n_lo, 1.5)


def test_material_from_json_roundtrip(tmp_path):
    path = tmp_path / "mat.json"
    path.write_text(json.dumps({
        "freq_thz": [0.1, 4.0], "n": [1.54, 1.54], "kappa": [0.004, 0.024],
        "fresnel_t": [0.4, 0.1],
    }))
    mat = sig.MaterialProfile.from_json(path)
    assert mat.fresnel_t == 0.4 + 0.1j
    np.testing.assert_allclose(mat.n, [1.54, 1.54])
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"freq_thz": [0.1, 4.0], "n": [1.5, 1.5]}))
    with pytest.raises(ValueError):
        sig.MaterialProfile.from_json(bad)


def test_detected_spectrum_zero_thickness_identity():
    mat = sig.MaterialProfile.constant(1.6, 0.02)
    ref = 1.3 - 0.7j
    out = sig.detected_spectrum(ref, mat, 0.0, 1.0)
    assert out == ref * 0.5  # both exponentials are exactly 1


def test_detected_spectrum_kappa_zero_phase_only():
    mat = sig.MaterialProfile.constant(1.7, 0.0)
    ref = 0.8 + 0.1j
    for d in (0.3, 1.7, 4.0):
        out = sig.detected_spectrum(ref, mat, d, 0.9)
        np.testing.assert_allclose(abs(out), abs(ref * 0.5), rtol=1e-12)


def test_detected_spectrum_exponential_law():
    rng = np.random.default_rng(7)
    for _ in range(20):
        d = rng.uniform(0.1, 3.0)
        kappa = rng.uniform(0.001, 0.05)
        f = rng.uniform(0.2, 3.5)
        mat = sig.MaterialProfile.constant(1.5, kappa)
        a1 = abs(sig.detected_spectrum(1.0, mat, d, f)) / 0.5
        a2 = abs(sig.detected_spectrum(1.0, mat, 2 * d, f)) / 0.5
        np.testing.assert_allclose(a2, a1 ** 2, rtol=1e-10)


def test_detected_spectrum_errors():
    mat = sig.default_material()
    with pytest.raises(ValueError):
        sig.detected_spectrum(1.0, mat, -0.1, 1.0)
    with pytest.raises(ValueError):
        sig.detected_spectrum(1.0, mat, 1.0, 5.5)


def test_detected_spectrum_phase_slope():
    # phase is linear in d with slope -n 2 pi f / c, to 1e-9 relative
    rng = np.random.default_rng(3)
    for _ in range(10):
        n = rng.uniform(1.1, 2.2)
        f = rng.uniform(0.3, 3.0)
        d = rng.uniform(0.0, 4.0)
        mat = sig.MaterialProfile.constant(n, 0.01)
        delta = 0.05 / f  # keeps the phase increment well inside (-pi, pi)
        s1 = sig.detected_spectrum(1.0, mat, d, f)
        s2 = sig.detected_spectrum(1.0, mat, d + delta, f)
        slope = np.angle(s2 / s1) / delta
        np.testing.assert_allclose(slope, -n * 2 * np.pi * f / C, rtol=1e-9)


def test_detected_spectrum_monotonic_amplitude():
    mat = sig.MaterialProfile.constant(1.5, 0.02)
    amps = [abs(sig.detected_spectrum(1.0, mat, d, 1.0)) for d in (0, 0.5, 1, 2)]
    assert all(b < a for a, b in zip(amps, amps[1:]))
    mat0 = sig.MaterialProfile.constant(1.5, 0.0)
    amps0 = [abs(sig.detected_spectrum(1.0, mat0, d, 1.0)) for d in (0, 0.5, 1, 2)]
    np.testing.assert_allclose(amps0, amps0[0], rtol=1e-12)


def test_simulate_trace_identity_with_unit_interface():
    pulse = sig.ReferencePulse.default()
    mat = sig.MaterialProfile.constant(1.5, 0.01, fresnel_t=1.0)
    trace = sig.simulate_trace(pulse, mat, 0.0)
    np.testing.assert_allclose(trace.samples, pulse.samples, atol=1e-9)


def test_simulate_trace_group_delay():
    pulse = sig.ReferencePulse.default()
    n = 1.5
    d = 2.0
    mat = sig.MaterialProfile.constant(n, 0.0, fresnel_t=1.0)
    trace = sig.simulate_trace(pulse, mat, d)
    lags = np.arange(-200, 201)
    corr = [np.dot(np.roll(pulse.samples, lag), trace.samples) for lag in lags]
    best = lags[int(np.argmax(corr))] * pulse.dt
    assert abs(best - n * d / C) <= pulse.dt + 1e-12


def test_simulate_trace_timemax_decreasing():
    pulse = sig.ReferencePulse.default()
    mat = sig.MaterialProfile.constant(1.5, 0.02)
    peaks = [sig.time_max(sig.simulate_trace(pulse, mat, d))
             for d in (0.0, 0.5, 1.0, 2.0)]
    assert all(b < a for a, b in zip(peaks, peaks[1:]))


def test_simulate_trace_rejects_negative_thickness():
    pulse = sig.ReferencePulse.default()
    with pytest.raises(ValueError):
        sig.simulate_trace(pulse, sig.default_material(), -1.0)


def test_time_max_basics():
    assert sig.time_max(np.zeros(16)) == 0.0
    imp = np.zeros(16)
    imp[3] = -2.5
    assert sig.time_max(imp) == 2.5
    rng = np.random.default_rng(0)
    trace = rng.normal(size=64)
    for a in (-3.0, 0.5, 2.0):
        np.testing.assert_allclose(sig.time_max(a * trace),
                                   abs(a) * sig.time_max(trace), rtol=1e-12)


def test_extract_band_zero_trace():
    s = sig.extract_band(np.zeros(1000), 0.5, dt=0.1)
    assert s.amplitude == 0.0
    assert s.phase == 0.0


def test_extract_band_on_grid_cosine():
    n_t, dt = 1000, 0.1
    f = 0.52  # 52 bins: on the 10 GHz grid
    k = np.arange(n_t)
    trace = np.cos(2 * np.pi * f * k * dt)
    s = sig.extract_band(trace, f, dt=dt)
    np.testing.assert_allclose(s.amplitude, 1.0, atol=1e-6)


def test_extract_band_delayed_cosine_phase():
    n_t, dt = 1000, 0.1
    f = 0.52
    k = np.arange(n_t)
    for tau in (0.33, 1.7, -2.05):
        trace = np.cos(2 * np.pi * f * (k * dt - tau))
        s = sig.extract_band(trace, f, dt=dt)
        expected = sig.wrap_phase(-2 * np.pi * f * tau)
        assert abs(s.phase - expected) < 1e-6


@pytest.mark.parametrize("f", sig.WATER_BANDS_THZ)
def test_extract_band_closed_form_all_bands(f):
    # off-grid frequencies keep a Dirichlet leakage term; the closed form
    # of the sampled-cosine sum is T/2 + D(2f)/2
    n_t, dt = 1000, 0.1
    k = np.arange(n_t)
    trace = np.cos(2 * np.pi * f * k * dt)
    coef = (2.0 / n_t) * (n_t / 2.0 + dirichlet_sum(2 * f, n_t, dt) / 2.0)
    s = sig.extract_band(trace, f, dt=dt)
    assert abs(s.amplitude - abs(coef)) < 1e-6
    assert abs(sig.wrap_phase(s.phase - np.angle(coef))) < 1e-6


def test_extract_band_sign_flip():
    rng = np.random.default_rng(5)
    trace = rng.normal(size=1000)
    a = sig.extract_band(trace, 0.97, dt=0.1)
    b = sig.extract_band(-trace, 0.97, dt=0.1)
    np.testing.assert_allclose(b.amplitude, a.amplitude, rtol=1e-12)
    assert abs(sig.wrap_phase(b.phase - a.phase - np.pi)) < 1e-9


def test_extract_band_range_errors():
    trace = np.ones(1000)
    for f in (0.0, -1.0, 5.01):
        with pytest.raises(ValueError):
            sig.extract_band(trace, f, dt=0.1)


def test_wrap_phase_half_open():
    assert sig.wrap_phase(np.pi) == np.pi
    assert sig.wrap_phase(-np.pi) == np.pi
    assert sig.wrap_phase(0.0) == 0.0
    np.testing.assert_allclose(sig.wrap_phase(1.5 * np.pi), -0.5 * np.pi)
    arr = sig.wrap_phase(np.array([-np.pi, 3 * np.pi, 0.1]))
    assert np.all(arr > -np.pi) and np.all(arr <= np.pi)


def test_pixelwise_cube_single_and_uniform():
    rng = np.random.default_rng(11)
    trace = rng.normal(size=1000)
    bands = sig.default_band_set()
    cube = sig.pixelwise_cube(trace[None, None, :], bands, dt=0.1)
    for b, f in enumerate(bands.frequencies):
        s = sig.extract_band(trace, f, dt=0.1)
        assert cube.amplitude[0, 0, b] == s.amplitude
        assert cube.phase[0, 0, b] == s.phase
    grid = np.broadcast_to(trace, (3, 4, 1000)).copy()
    cube = sig.pixelwise_cube(grid, bands, dt=0.1)
    assert np.all(cube.amplitude == cube.amplitude[0, 0])
    assert np.all(cube.phase == cube.phase[0, 0])


def test_pixelwise_cube_matches_per_pixel_loop_exactly():
    rng = np.random.default_rng(13)
    grid = rng.normal(size=(4, 4, 500))
    bands = sig.BandSet(frequencies=(0.38, 0.916, 1.229))
    cube = sig.pixelwise_cube(grid, bands, dt=0.1)
    for i in range(4):
        for j in range(4):
            for b, f in enumerate(bands.frequencies):
                s = sig.extract_band(grid[i, j], f, dt=0.1)
                assert cube.amplitude[i, j, b] == s.amplitude
                assert cube.phase[i, j, b] == s.phase


def test_pixelwise_cube_trace_objects_and_errors():
    rng = np.random.default_rng(17)
    bands = sig.BandSet(frequencies=(0.5,))
    rows = [[sig.TimeDomainTrace(rng.normal(size=100), dt=0.1) for _ in range(2)]
            for _ in range(2)]
    cube = sig.pixelwise_cube(rows, bands)
    assert cube.amplitude.shape == (2, 2, 1)
    ragged = [rows[0], rows[1][:1]]
    with pytest.raises(ShapeError):
        sig.pixelwise_cube(ragged, bands)
    mixed = [[sig.TimeDomainTrace(rng.normal(size=100), dt=0.1),
              sig.TimeDomainTrace(rng.normal(size=80), dt=0.1)]]
    with pytest.raises(ShapeError):
        sig.pixelwise_cube(mixed, bands)
    with pytest.raises(ValueError):
        sig.pixelwise_cube(rng.normal(size=(2, 2, 100)), bands)  # dt missing


def test_spectral_cube_validation():
    with pytest.raises(ValueError):
        sig.SpectralCube(amplitude=-np.ones((2, 2, 1)), phase=np.zeros((2, 2, 1)),
                         frequencies=(0.5,))
    with pytest.raises(ValueError):
        sig.SpectralCube(amplitude=np.ones((2, 2, 1)),
                         phase=np.full((2, 2, 1), 4.0), frequencies=(0.5,))
    with pytest.raises(ShapeError):
        sig.SpectralCube(amplitude=np.ones((2, 2, 2)), phase=np.zeros((2, 2, 2)),
                         frequencies=(0.5,))


def test_simulate_traces_batch_matches_scalar_bitwise():
    pulse = sig.ReferencePulse.default(n_samples=500)
    mat = sig.default_material()
    d = np.array([[0.0, 0.7], [1.3, 2.9]])
    batch = sig.simulate_traces(pulse, mat, d)
    for i in range(2):
        for j in range(2):
            single = sig.simulate_trace(pulse, mat, d[i, j])
            assert np.array_equal(batch[i, j], single.samples)
