import numpy as np
import pytest

from rppglab import signals as sg


FS = 30.0


def tone(freq, n=512, fs=FS, phase=0.0):
    t = np.arange(n) / fs
    return sg.Waveform(np.sin(2 * np.pi * freq * t + phase), fs)


def fir_response(taps, freq, fs):
    """Oracle: evaluate the designed filter's frequency response directly."""
    k = np.arange(len(taps))
    return abs(np.sum(taps * np.exp(-2j * np.pi * freq / fs * k)))


def test_bandpass_passes_2hz():
    taps = sg.design_bandpass(FS)
    assert fir_response(taps, 2.0, FS) >= 0.9
    w = tone(2.0)
    out = sg.bandpass(w)
    core = slice(64, -64)  # ignore zero-padded edges
    rms_in = np.sqrt(np.mean(w.samples[core] ** 2))
    rms_out = np.sqrt(np.mean(out.samples[core] ** 2))
    assert rms_out >= 0.9 * rms_in


def test_bandpass_rejects_02hz():
    taps = sg.design_bandpass(FS)
    assert fir_response(taps, 0.2, FS) <= 0.1
    w = tone(0.2)
    out = sg.bandpass(w)
    rms_in = np.sqrt(np.mean(w.samples ** 2))
    rms_out = np.sqrt(np.mean(out.samples ** 2))
    assert rms_out <= 0.1 * rms_in


def test_bandpass_zero_is_zero():
    out = sg.bandpass(sg.Waveform(np.zeros(256), FS))
    assert np.all(out.samples == 0.0)


def test_bandpass_too_short_rejected():
    with pytest.raises(ValueError):
        sg.bandpass(sg.Waveform(np.zeros(64), FS))


def test_bandpass_linearity():
    rng = np.random.default_rng(0)
    x = sg.Waveform(rng.normal(size=300), FS)
    y = sg.Waveform(rng.normal(size=300), FS)
    a, b = 1.7, -0.4
    lhs = sg.bandpass(sg.Waveform(a * x.samples + b * y.samples, FS)).samples
    rhs = a * sg.bandpass(x).samples + b * sg.bandpass(y).samples
    assert np.max(np.abs(lhs - rhs)) < 1e-10


def test_psd_single_tone_peak():
    sp = sg.psd(tone(1.5))
    peak = sp.freqs[np.argmax(sp.power)]
    assert abs(peak - 1.5) <= FS / 512  # within one unpadded bin


def test_psd_white_noise_flat():
    for seed in range(10):
        x = np.random.default_rng(seed).normal(size=512)
        sp = sg.psd(sg.Waveform(x, FS))
        assert sp.power.max() <= 0.2


def test_psd_two_tone_balance():
    x = tone(1.0).samples + tone(2.0).samples
    sp = sg.psd(sg.Waveform(x, FS))
    # oracle: the two tallest local maxima should carry near-equal power
    p = sp.power
    local = (p[1:-1] > p[:-2]) & (p[1:-1] > p[2:])
    idx = np.where(local)[0] + 1
    top2 = idx[np.argsort(p[idx])[-2:]]
    ratio = p[top2[0]] / p[top2[1]]
    assert 0.8 <= ratio <= 1.25
    assert sorted(np.round(sp.freqs[top2], 1)) == [1.0, 2.0]


def test_psd_normalized():
    sp = sg.psd(tone(1.2))
    assert abs(sp.power.sum() - 1.0) < 1e-12


def test_psd_empty_band_rejected():
    with pytest.raises(ValueError):
        sg.psd(tone(1.0), band=(16.0, 20.0))  # beyond Nyquist at 30 Hz


def test_estimate_hr_tone():
    assert abs(sg.estimate_hr(tone(1.2)) - 72.0) <= 1.0


def test_estimate_hr_zero_signal_errors():
    with pytest.raises(sg.DegenerateSignalError):
        sg.estimate_hr(sg.Waveform(np.zeros(256), FS))


def test_pearson_self_and_negation():
    w = tone(1.0)
    neg = sg.Waveform(-w.samples, FS)
    assert sg.pearson(w, w) == pytest.approx(1.0)
    assert sg.pearson(w, neg) == pytest.approx(-1.0)


def test_pearson_quadrature_tones():
    n = 300  # whole periods of 1 Hz at 30 fps
    t = np.arange(n) / FS
    a = sg.Waveform(np.sin(2 * np.pi * t), FS)
    b = sg.Waveform(np.cos(2 * np.pi * t), FS)
    assert abs(sg.pearson(a, b)) < 0.05


def test_pearson_zero_variance_rejected():
    with pytest.raises(sg.DegenerateSignalError):
        sg.pearson(tone(1.0, n=64), sg.Waveform(np.ones(64), FS))


def test_pearson_affine_invariance():
    rng = np.random.default_rng(4)
    a = sg.Waveform(rng.normal(size=200), FS)
    b = sg.Waveform(rng.normal(size=200), FS)
    r0 = sg.pearson(a, b)
    r1 = sg.pearson(a, sg.Waveform(2.5 * b.samples + 7.0, FS))
    assert abs(r0 - r1) < 1e-10


def test_transform_amplitude_zero_annihilates():
    out = sg.transform_signal(tone(1.0), sg.TransformSpec("amplitude", alpha=0.0))
    assert np.all(out.samples == 0.0)


def test_transform_phase_zero_identity():
    w = tone(1.3)
    out = sg.transform_signal(w, sg.TransformSpec("phase", tau=0))
    assert np.array_equal(out.samples, w.samples)


def test_transform_phase_composition():
    w = sg.Waveform(np.random.default_rng(8).normal(size=128), FS)
    t1 = sg.transform_signal(w, sg.TransformSpec("phase", tau=5))
    t12 = sg.transform_signal(t1, sg.TransformSpec("phase", tau=9))
    direct = sg.transform_signal(w, sg.TransformSpec("phase", tau=14))
    assert np.array_equal(t12.samples, direct.samples)


def test_transform_frequency_doubles_hr():
    w = tone(1.0)
    assert abs(sg.estimate_hr(w) - 60.0) <= 1.0
    out = sg.transform_signal(w, sg.TransformSpec("frequency", rho=2.0))
    assert abs(sg.estimate_hr(out) - 120.0) <= 2.0


def test_transform_frequency_scales_hr_within_band():
    w = tone(1.1)
    one_bin_bpm = 60 * FS / 512
    for rho in (0.8, 1.5, 2.0):
        out = sg.transform_signal(w, sg.TransformSpec("frequency", rho=rho))
        assert abs(sg.estimate_hr(out) - rho * sg.estimate_hr(w)) <= one_bin_bpm


def test_transform_rejects_out_of_range():
    with pytest.raises(ValueError):
        sg.transform_signal(tone(1.0), sg.TransformSpec("frequency", rho=4.0))
    with pytest.raises(ValueError):
        sg.transform_signal(tone(1.0, n=64), sg.TransformSpec("phase", tau=64))


def test_spectral_entropy_cases():
    freqs = np.linspace(1.0, 2.0, 32)
    onehot = np.zeros(32)
    onehot[5] = 1.0
    assert sg.spectral_entropy(sg.Spectrum(freqs, onehot, (1, 2))) < 1e-6
    uniform = np.full(32, 1 / 32)
    assert sg.spectral_entropy(sg.Spectrum(freqs, uniform, (1, 2))) == pytest.approx(
        np.log(32), rel=1e-4)


def test_js_divergence_cases():
    freqs = np.linspace(1.0, 2.0, 16)
    p = sg.Spectrum(freqs, np.full(16, 1 / 16), (1, 2))
    assert sg.js_divergence(p, p) == pytest.approx(0.0, abs=1e-12)
    onehot = np.zeros(16)
    onehot[0] = 1.0
    q = sg.Spectrum(freqs, onehot, (1, 2))
    val = sg.js_divergence(p, q)
    assert 0.0 < val <= np.log(2) + 1e-9


def test_js_mismatched_bins_rejected():
    p = sg.Spectrum(np.linspace(1, 2, 8), np.full(8, 1 / 8), (1, 2))
    q = sg.Spectrum(np.linspace(1, 3, 8), np.full(8, 1 / 8), (1, 3))
    with pytest.raises(ValueError):
        sg.js_divergence(p, q)


def test_waveform_csv_round_trip(tmp_path):
    w = sg.Waveform(np.random.default_rng(3).normal(size=100), FS)
    path = tmp_path / "wave.csv"
    sg.write_waveform_csv(w, path)
    back = sg.read_waveform_csv(path)
    assert np.array_equal(back.samples, w.samples)
    assert back.sample_rate == pytest.approx(FS, rel=1e-6)


def test_waveform_csv_rejects_garbage(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("nope\n1,2\n")
    with pytest.raises(ValueError):
        sg.read_waveform_csv(path)
