import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ser_forge.audio import AudioClip
from ser_forge.errors import BadStats, ConfigError, DegenerateFilter, TooShort, TooSmall
from ser_forge.features import (MelSpectrogram, SpectrogramConfig, SpectrogramFrontend, hann_window,
                                hz_to_mel, log_mel, mel_filterbank, mel_to_hz, n_patches,
                                normalize_spectrogram, normalize_waveform, patchify, stft_power)

LN_FLOOR = np.log(1e-10)


@pytest.mark.parametrize("x,expected", [([1, 1, 1, 1], [0, 0, 0, 0]), ([-1, 1], [-1, 1]), ([0, 2], [-1, 1])])
def test_normalize_waveform_examples(x, expected):
    np.testing.assert_allclose(normalize_waveform(np.array(x, float)), expected)


@given(arrays(np.float64, st.integers(2, 400), elements=st.floats(-1, 1)))
def test_normalize_waveform_moments(x):
    out = normalize_waveform(AudioClip(x, 16000))
    if np.all(out == 0):
        return
    assert abs(out.mean()) <= 1e-9
    assert abs(out.var() - 1) <= 1e-6


def test_hann_endpoints_are_zero():
    w = hann_window(400)
    assert w[0] == 0.0 and w[-1] == pytest.approx(0.0, abs=1e-15)


def test_frame_count_for_five_seconds():
    assert stft_power(np.zeros(80000)).shape == (257, 498)


def test_zero_input_gives_zero_power():
    assert not np.any(stft_power(np.zeros(1000)))


def test_impulse_spectrum_is_flat():
    # an impulse at sample 0 sits under hann[0]; its DFT is the constant hann[0]
    x = np.zeros(400)
    x[0] = 1.0
    cfg = SpectrogramConfig()
    power = stft_power(x, cfg)
    np.testing.assert_allclose(power[:, 0], hann_window(400)[0] ** 2)
    # shifting the impulse to the window centre gives a flat |hann[c]|**2
    x = np.zeros(400)
    x[200] = 1.0
    np.testing.assert_allclose(stft_power(x, cfg)[:, 0], hann_window(400)[200] ** 2, rtol=1e-12)


def test_short_waveform():
    with pytest.raises(TooShort):
        stft_power(np.zeros(399))


def test_parseval_against_segment_energy():
    cfg = SpectrogramConfig()
    x = np.random.default_rng(3).standard_normal(16000)
    power = stft_power(x, cfg)
    # one-sided spectrum: interior bins stand for two conjugate bins
    weights = np.full(power.shape[0], 2.0)
    weights[0] = weights[-1] = 1.0
    total = float(weights @ power.sum(axis=1))
    w = hann_window(cfg.window_length)
    n_frames = (len(x) - cfg.window_length) // cfg.hop + 1
    energy = sum(np.sum((x[t * cfg.hop:t * cfg.hop + cfg.window_length] * w) ** 2) for t in range(n_frames))
    assert abs(total - cfg.fft_size * energy) / (cfg.fft_size * energy) <= 1e-6


def test_mel_scale_points():
    assert hz_to_mel(700.0) == pytest.approx(2595 * np.log10(2))
    assert hz_to_mel(700.0) == pytest.approx(781.17, abs=5e-3)
    assert hz_to_mel(0.0) == 0.0


@given(st.floats(0, 20000))
def test_mel_round_trip(f):
    assert mel_to_hz(hz_to_mel(f)) == pytest.approx(f, rel=1e-9, abs=1e-9)


def test_default_filterbank_coverage():
    cfg = SpectrogramConfig()
    fb = mel_filterbank(cfg, 16000)
    assert fb.shape == (128, 257)
    assert np.all(fb.max(axis=1) > 0)
    bin_hz = np.arange(257) * 16000 / 512
    edges = mel_to_hz(np.linspace(0, hz_to_mel(8000), 130))
    interior = (bin_hz > edges[1]) & (bin_hz < edges[-2])
    sums = fb[:, interior].sum(axis=0)
    assert np.all(sums > 0) and np.all(sums <= 2)


def test_filter_rows_are_unimodal():
    fb = mel_filterbank(SpectrogramConfig(), 16000)
    for row in fb:
        nz = row[row > 0]
        peak = int(np.argmax(nz))
        assert np.all(np.diff(nz[:peak + 1]) >= 0) and np.all(np.diff(nz[peak:]) <= 0)


def test_too_many_mel_bins():
    with pytest.raises(DegenerateFilter):
        mel_filterbank(SpectrogramConfig(mel_bins=256), 16000)


def test_invalid_config():
    with pytest.raises(ConfigError):
        SpectrogramConfig(hop=500).validate()
    with pytest.raises(ConfigError):
        SpectrogramConfig(f_max=9000).validate(16000)


def test_zero_power_is_floor():
    fb = mel_filterbank()
    spec = log_mel(np.zeros((257, 498)), fb)
    assert spec.values.shape == (128, 512)
    np.testing.assert_array_equal(spec.values, LN_FLOOR)
    assert LN_FLOOR == pytest.approx(-23.0259, abs=1e-4)


def test_padding_columns():
    spec = log_mel(np.ones((257, 498)), mel_filterbank())
    assert np.all(spec.values[:, -14:] == LN_FLOOR)
    assert np.all(spec.values[:, :498] > LN_FLOOR)


def test_truncation():
    assert log_mel(np.ones((4, 20)), np.eye(4), target_frames=8).values.shape == (4, 8)


def test_log_inverts_exp():
    power = np.exp(np.arange(1.0, 5.0))[:, None]
    np.testing.assert_allclose(log_mel(power, np.eye(4), target_frames=None).values[:, 0], [1, 2, 3, 4])


def test_normalize_spectrogram():
    spec = MelSpectrogram(np.array([[0.0, 2.0]]))
    np.testing.assert_array_equal(normalize_spectrogram(spec, 1.0, 1.0).values, [[-1, 1]])
    np.testing.assert_array_equal(normalize_spectrogram(spec, 0.0, 1.0).values, spec.values)
    np.testing.assert_array_equal(normalize_spectrogram(MelSpectrogram(np.full((2, 2), 3.5)), 3.5, 2.0).values, 0)
    with pytest.raises(BadStats):
        normalize_spectrogram(spec, 0.0, 0.0)


def test_patch_counts():
    seq = patchify(np.zeros((128, 512)))
    assert (seq.n_freq_patches, seq.n_time_patches, len(seq.patches)) == (12, 50, 600)
    assert n_patches(128, 512) == 600


def test_single_patch_is_identity():
    grid = np.arange(256.0).reshape(16, 16)
    seq = patchify(grid)
    np.testing.assert_array_equal(seq.patches, grid.reshape(1, 256))


def test_overlapping_patches_order():
    grid = np.arange(26 * 26.0).reshape(26, 26)
    seq = patchify(grid)
    assert len(seq.patches) == 4
    # time-major: (t0, f0), (t0, f1), (t1, f0), (t1, f1)
    expected = [grid[f:f + 16, t:t + 16].ravel() for t in (0, 10) for f in (0, 10)]
    np.testing.assert_array_equal(seq.patches, expected)
    # neighbours share a 6-cell band
    np.testing.assert_array_equal(grid[10:16, :16], seq.patches[1].reshape(16, 16)[:6])


def test_too_small_grid():
    with pytest.raises(TooSmall):
        patchify(np.zeros((15, 100)))


@settings(max_examples=30)
@given(st.integers(16, 60), st.integers(16, 60), st.integers(1, 16))
def test_patch_count_formula(mel, frames, stride):
    seq = patchify(np.zeros((mel, frames)), 16, stride)
    assert len(seq.patches) == ((mel - 16) // stride + 1) * ((frames - 16) // stride + 1)


def test_frontend_deterministic():
    clip = AudioClip(np.random.default_rng(7).uniform(-0.5, 0.5, 80000), 16000)
    front = SpectrogramFrontend()
    a, b = patchify(front(clip)), patchify(front(clip))
    assert a.patches.tobytes() == b.patches.tobytes()
    assert front.filterbank.flags.writeable is False


def test_frontend_rate_mismatch():
    with pytest.raises(ConfigError):
        SpectrogramFrontend()(AudioClip(np.zeros(8000), 8000))
