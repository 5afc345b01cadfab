"""Model-input representations: normalized waveforms and patchified log-mel grids."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .audio import AudioClip
from .errors import BadStats, ConfigError, DegenerateFilter, TooShort, TooSmall

PATCH_SIZE = 16
PATCH_STRIDE = 10


@dataclass(frozen=True)
class SpectrogramConfig:
    window_length: int = 400
    hop: int = 160
    fft_size: int = 512
    mel_bins: int = 128
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = 1e-10
    target_frames: int = 512

    def validate(self, sample_rate: int | None = None) -> "SpectrogramConfig":
        if not 0 < self.hop <= self.window_length:
            raise ConfigError(f"need 0 < hop <= window_length, got hop={self.hop}")
        if self.fft_size < self.window_length:
            raise ConfigError("fft_size must be >= window_length")
        if self.mel_bins < 2:
            raise ConfigError("mel_bins must be >= 2")
        if not self.f_min < self.f_max:
            raise ConfigError("f_min must be below f_max")
        if sample_rate is not None and self.f_max > sample_rate / 2:
            raise ConfigError(f"f_max={self.f_max} exceeds Nyquist for {sample_rate} Hz")
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.target_frames < 1:
            raise ConfigError("target_frames must be positive")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MelSpectrogram:
    values: np.ndarray  # [mel_bins, frames]

    def __post_init__(self):
        if self.values.ndim != 2:
            raise ValueError("MelSpectrogram values must be 2-D")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("MelSpectrogram values must be finite")

    @property
    def mel_bins(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class PatchSequence:
    patches: np.ndarray  # [n_patches, patch * patch]
    n_freq_patches: int
    n_time_patches: int

    def __len__(self):
        return self.patches.shape[0]


def normalize_waveform(clip: AudioClip | np.ndarray) -> np.ndarray:
    """Zero-mean, unit (population) variance; constant input maps to zeros."""
    x = np.asarray(clip.samples if isinstance(clip, AudioClip) else clip, dtype=np.float64)
    if x.shape[0] < 2:
        raise TooShort("waveform normalization needs at least two samples")
    centered = x - x.mean()
    std = np.sqrt(np.mean(centered * centered))
    if std == 0.0 or std < 1e-12 * max(1.0, np.abs(x).max()):
        return np.zeros_like(x)
    return centered / std


def hann_window(length: int) -> np.ndarray:
    """Symmetric Hann window (both endpoints exactly zero)."""
    return np.hanning(length)


def stft_power(waveform, cfg: SpectrogramConfig = SpectrogramConfig()) -> np.ndarray:
    """Power spectrogram ``|DFT(hann * segment)|**2`` with shape [fft_size//2 + 1, frames].

    The forward DFT is unnormalized.
    """
    x = np.asarray(waveform, dtype=np.float64)
    if x.shape[0] < cfg.window_length:
        raise TooShort(f"waveform of {x.shape[0]} samples is shorter than one "
                       f"{cfg.window_length}-sample window")
    segments = sliding_window_view(x, cfg.window_length)[::cfg.hop]
    spectrum = np.fft.rfft(segments * hann_window(cfg.window_length), n=cfg.fft_size, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return power.T


def hz_to_mel(freq):
    return 2595.0 * np.log10(1.0 + np.asarray(freq, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: SpectrogramConfig = SpectrogramConfig(), sample_rate: int = 16000) -> np.ndarray:
    """Triangular mel filters, shape [mel_bins, fft_size//2 + 1].

    Filter ``i`` rises linearly from edge ``i`` to its peak at edge ``i+1``
    and falls to zero at edge ``i+2``, with edges uniformly spaced on the mel
    scale. A filter narrower than the FFT bin spacing can miss every bin; it
    then collapses onto the single bin nearest its center. Two filters
    collapsing onto the same bin cannot be told apart and raise
    DegenerateFilter.
    """
    cfg.validate(sample_rate)
    n_bins = cfg.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / cfg.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.mel_bins + 2))

    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))

    collapsed = {}
    for i in np.flatnonzero(~np.any(fb > 0.0, axis=1)):
        nearest = int(np.argmin(np.abs(bin_hz - edges[i + 1])))
        if nearest in collapsed:
            raise DegenerateFilter(
                f"mel filters {collapsed[nearest]} and {i} both collapse onto FFT bin {nearest}; "
                f"reduce mel_bins or raise fft_size")
        collapsed[nearest] = i
        fb[i, nearest] = 1.0
    return fb


def log_mel(power: np.ndarray, fb: np.ndarray, log_floor: float = 1e-10,
            target_frames: int | None = 512) -> MelSpectrogram:
    """Natural-log mel energies, padded with ``ln(log_floor)`` or truncated to ``target_frames``."""
    if fb.shape[1] != power.shape[0]:
        raise ValueError(f"filterbank expects {fb.shape[1]} FFT bins, power grid has {power.shape[0]}")
    values = np.log(np.maximum(fb @ power, log_floor))
    if target_frames is not None:
        frames = values.shape[1]
        if frames < target_frames:
            pad = np.full((values.shape[0], target_frames - frames), np.log(log_floor))
            values = np.concatenate([values, pad], axis=1)
        else:
            values = values[:, :target_frames]
    return MelSpectrogram(values)


def normalize_spectrogram(spec: MelSpectrogram, mean: float, std: float) -> MelSpectrogram:
    if not std > 0:
        raise BadStats(f"spectrogram std must be positive, got {std}")
    return MelSpectrogram((spec.values - mean) / std)


def patchify(spec: MelSpectrogram | np.ndarray, patch: int = PATCH_SIZE,
             stride: int = PATCH_STRIDE) -> PatchSequence:
    """Cut a [mel_bins, frames] grid into overlapping ``patch`` x ``patch`` blocks.

    Patches are ordered time-major (every frequency patch of time index 0
    first) and each block is flattened row-major with frequency as rows.
    """
    grid = spec.values if isinstance(spec, MelSpectrogram) else np.asarray(spec)
    patches, n_freq, n_time = patchify_batch(grid[None], patch, stride)
    return PatchSequence(patches[0], n_freq, n_time)


def patchify_batch(grids: np.ndarray, patch: int = PATCH_SIZE, stride: int = PATCH_STRIDE):
    """Batched :func:`patchify` over grids of shape [B, mel_bins, frames]."""
    _, n_mel, n_frames = grids.shape
    if n_mel < patch or n_frames < patch:
        raise TooSmall(f"{n_mel}x{n_frames} grid is smaller than one {patch}x{patch} patch")
    n_freq = (n_mel - patch) // stride + 1
    n_time = (n_frames - patch) // stride + 1
    windows = sliding_window_view(grids, (patch, patch), axis=(1, 2))[:, ::stride, ::stride]
    windows = windows[:, :n_freq, :n_time].transpose(0, 2, 1, 3, 4)
    return windows.reshape(grids.shape[0], n_freq * n_time, patch * patch), n_freq, n_time


def n_patches(mel_bins: int, frames: int, patch: int = PATCH_SIZE, stride: int = PATCH_STRIDE) -> int:
    return ((mel_bins - patch) // stride + 1) * ((frames - patch) // stride + 1)


class SpectrogramFrontend:
    """Clip -> log-mel grid with a cached filterbank for one sample rate."""

    def __init__(self, cfg: SpectrogramConfig = SpectrogramConfig(), sample_rate: int = 16000):
        self.cfg = cfg.validate(sample_rate)
        self.sample_rate = sample_rate
        self.filterbank = mel_filterbank(cfg, sample_rate)
        self.filterbank.setflags(write=False)

    def __call__(self, clip: AudioClip) -> MelSpectrogram:
        if clip.sample_rate != self.sample_rate:
            raise ConfigError(f"frontend built for {self.sample_rate} Hz, clip is {clip.sample_rate} Hz")
        power = stft_power(clip.samples, self.cfg)
        return log_mel(power, self.filterbank, self.cfg.log_floor, self.cfg.target_frames)
