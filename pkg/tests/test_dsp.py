import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sesr.dsp import (
    ComplexSpectrogram,
    Spectrogram,
    StftConfig,
    UtteranceTooShort,
    Waveform,
    crop_or_pad,
    istft,
    load_spectrogram,
    magnitude,
    read_wav,
    save_spectrogram,
    stft,
    write_wav,
)

CFG = StftConfig()


def dft_frames_oracle(x, cfg):
    """Frame-by-frame direct DFT, written independently of the vectorized path."""
    win, hop, n_fft = cfg.win_length, cfg.hop_length, cfg.fft_size
    left = (win - hop) // 2
    right = (win - hop) - left
    padded = np.concatenate([np.zeros(left), x, np.zeros(right)])
    w = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)  # periodic Hann
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(win)[None, :]
    basis = np.exp(-2j * np.pi * k * n / n_fft)
    rows = []
    start = 0
    while start + win <= len(padded):
        rows.append(basis @ (padded[start : start + win] * w))
        start += hop
    return np.array(rows)


def test_config_sample_counts():
    assert (CFG.win_length, CFG.hop_length, CFG.n_bins) == (400, 160, 257)


def test_three_seconds_gives_300_by_257():
    w = Waveform(np.random.default_rng(0).standard_normal(48000))
    assert stft(w).shape == (300, 257)


@pytest.mark.parametrize("n", [400, 401, 559, 560, 16000, 47999, 48000, 48001])
def test_frame_count_formula(n):
    w = Waveform(np.ones(n))
    left, right = CFG.pad
    assert stft(w).shape[0] == 1 + (n + left + right - CFG.win_length) // CFG.hop_length


def test_too_short():
    with pytest.raises(UtteranceTooShort, match="too short"):
        stft(Waveform(np.zeros(399)))


def test_zero_waveform():
    c = stft(Waveform(np.zeros(16000)))
    assert not np.any(c.values)


def test_sine_peak_bin():
    t = np.arange(16000) / 16000
    x = np.sin(2 * np.pi * 1000 * t)
    c = stft(Waveform(x))
    mid = c.values[20:-20]
    assert np.all(np.argmax(np.abs(mid), axis=1) == round(1000 / (16000 / 512)))
    np.testing.assert_allclose(c.values, dft_frames_oracle(x, CFG), atol=1e-9)


def test_stft_matches_direct_dft_on_noise():
    x = np.random.default_rng(3).standard_normal(5000)
    np.testing.assert_allclose(stft(Waveform(x)).values, dft_frames_oracle(x, CFG), atol=1e-9)


def test_sample_rate_mismatch():
    with pytest.raises(ValueError):
        stft(Waveform(np.zeros(8000), 8000), CFG)


def test_waveform_rejects_nan():
    with pytest.raises(ValueError):
        Waveform(np.array([0.0, np.nan]))


def test_magnitude_examples():
    c = ComplexSpectrogram(np.full((1, 257), 3 + 4j))
    assert magnitude(c).values[0, 0] == 5.0
    assert not np.any(magnitude(ComplexSpectrogram(np.zeros((2, 257), complex))).values)


def test_magnitude_matches_scalar_loop():
    rng = np.random.default_rng(1)
    z = rng.standard_normal((4, 257)) + 1j * rng.standard_normal((4, 257))
    got = magnitude(ComplexSpectrogram(z)).values
    for i in range(4):
        for j in range(257):
            assert got[i, j] == pytest.approx((z[i, j].real ** 2 + z[i, j].imag ** 2) ** 0.5, abs=1e-12)


def test_magnitude_zero_iff_entry_zero():
    z = np.array([[0, 1e-300 + 0j, 1j, 0]], dtype=complex)
    m = magnitude(ComplexSpectrogram(z)).values
    assert np.array_equal(m == 0, z == 0)


def test_crop_identity_and_idempotence():
    s = Spectrogram(np.random.default_rng(0).random((300, 257)))
    assert crop_or_pad(s, 300, np.random.default_rng(1)) is s
    once = crop_or_pad(Spectrogram(np.random.default_rng(0).random((600, 257))), 300)
    assert crop_or_pad(once, 300).values is once.values


def test_crop_deterministic_with_seed():
    s = Spectrogram(np.arange(600 * 257, dtype=float).reshape(600, 257))
    a = crop_or_pad(s, 300, np.random.default_rng(5))
    b = crop_or_pad(s, 300, np.random.default_rng(5))
    assert a.shape == (300, 257)
    np.testing.assert_array_equal(a.values, b.values)
    start = int(np.random.default_rng(5).integers(0, 301))
    np.testing.assert_array_equal(a.values, s.values[start : start + 300])


def test_center_crop_without_rng():
    s = Spectrogram(np.arange(600)[:, None] * np.ones((1, 257)))
    assert crop_or_pad(s, 300).values[0, 0] == 150


def test_pad_short_input():
    s = Spectrogram(np.ones((100, 257)))
    out = crop_or_pad(s, 300)
    assert out.shape == (300, 257)
    assert np.all(out.values[:100] == 1) and not np.any(out.values[100:])


def _roundtrip(x):
    c = stft(Waveform(x))
    return istft(magnitude(c), c, length=len(x)).samples


def test_istft_roundtrip_interior():
    x = np.random.default_rng(2).standard_normal(48000) * 0.1
    y = _roundtrip(x)
    assert np.max(np.abs(y[400:-400] - x[400:-400])) < 1e-6


def test_istft_roundtrip_snr():
    x = np.random.default_rng(4).standard_normal(16000)
    y = _roundtrip(x)
    interior = slice(400, -400)
    residual = np.sum((y[interior] - x[interior]) ** 2)
    assert 10 * np.log10(np.sum(x[interior] ** 2) / residual) > 60


@settings(max_examples=25, deadline=None)
@given(n=st.integers(801, 6000), seed=st.integers(0, 2**31 - 1))
def test_istft_roundtrip_property(n, seed):
    x = np.random.default_rng(seed).uniform(-1, 1, n)
    y = _roundtrip(x)
    assert np.max(np.abs(y[400:-400] - x[400:-400])) < 1e-6


def test_istft_zero_magnitude():
    c = stft(Waveform(np.random.default_rng(0).standard_normal(8000)))
    y = istft(Spectrogram(np.zeros(c.shape)), c)
    assert not np.any(y.samples)


def test_istft_default_length_is_frames_times_hop():
    c = stft(Waveform(np.random.default_rng(0).standard_normal(48000)))
    assert len(istft(magnitude(c), c)) == 48000


def test_istft_shape_mismatch():
    c = stft(Waveform(np.zeros(8000)))
    with pytest.raises(ValueError):
        istft(Spectrogram(np.zeros((3, 257))), c)


def test_no_normalization_linear_scaling():
    x = np.random.default_rng(0).standard_normal(8000)
    a = magnitude(stft(Waveform(x))).values
    b = magnitude(stft(Waveform(3.0 * x))).values
    np.testing.assert_allclose(b, 3.0 * a, rtol=1e-12)


def test_wav_roundtrip_and_downmix(tmp_path):
    from scipy.io import wavfile

    x = np.random.default_rng(0).uniform(-0.5, 0.5, 1600)
    write_wav(tmp_path / "a.wav", Waveform(x))
    np.testing.assert_allclose(read_wav(tmp_path / "a.wav").samples, x, atol=1e-7)

    stereo = np.stack([np.full(100, 16384, np.int16), np.zeros(100, np.int16)], axis=1)
    wavfile.write(tmp_path / "s.wav", 16000, stereo)
    np.testing.assert_allclose(read_wav(tmp_path / "s.wav").samples, 0.25)
    with pytest.raises(ValueError):
        read_wav(tmp_path / "s.wav", downmix=False)


def test_wav_resampled_on_ingest(tmp_path):
    from scipy.io import wavfile

    wavfile.write(tmp_path / "8k.wav", 8000, np.zeros(8000, np.float32))
    w = read_wav(tmp_path / "8k.wav")
    assert w.sample_rate == 16000 and len(w) == 16000


def test_spectrogram_binary_export(tmp_path):
    s = magnitude(stft(Waveform(np.random.default_rng(0).standard_normal(4000))))
    save_spectrogram(tmp_path / "x.f32", s, utt_id="u1")
    back = load_spectrogram(tmp_path / "x.f32")
    assert back.shape == s.shape and back.config == s.config
    np.testing.assert_array_equal(back.values, s.values.astype(np.float32))
