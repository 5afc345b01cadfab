"""WAV parsing, resampling and fixed-length conditioning of mono clips."""

from __future__ import annotations

import io
import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyAudio, ParseError, UnsupportedFormat

TARGET_RATE = 16000
TARGET_SECONDS = 5.0

_FORMAT_PCM = 0x0001
_FORMAT_FLOAT = 0x0003
_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform in [-1, 1] with its sample rate."""

    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1:
            raise ValueError("AudioClip samples must be one-dimensional")
        if not np.all(np.isfinite(arr)):
            raise ValueError("AudioClip samples must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration(self) -> float:
        return len(self) / self.sample_rate


def _iter_chunks(data: bytes):
    pos = 12
    while pos < len(data):
        if pos + 8 > len(data):
            raise ParseError("truncated chunk header")
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        yield chunk_id, body, size
        pos = body + size + (size & 1)


def parse_wav(data: bytes, source_id: str = "") -> AudioClip:
    """Decode a RIFF/WAVE byte string into a mono clip.

    Integer PCM is scaled by its full-scale value (2**(bits-1), 8-bit is
    unsigned around 128); float data is clamped to [-1, 1]. Channels are
    averaged.
    """
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise ParseError("not a RIFF/WAVE container")

    fmt = None
    payload = None
    for chunk_id, body, size in _iter_chunks(data):
        if chunk_id == b"fmt ":
            if size < 16 or body + size > len(data):
                raise ParseError("truncated fmt chunk")
            tag, channels, rate, _, block_align, bits = struct.unpack_from("<HHIIHH", data, body)
            if tag == _FORMAT_EXTENSIBLE:
                if size < 40:
                    raise ParseError("truncated WAVE_FORMAT_EXTENSIBLE header")
                (tag,) = struct.unpack_from("<H", data, body + 24)
            fmt = (tag, channels, rate, block_align, bits)
        elif chunk_id == b"data":
            if body + size > len(data):
                raise ParseError("data chunk truncated")
            payload = data[body:body + size]
            break

    if fmt is None:
        raise ParseError("missing fmt chunk")
    if payload is None:
        raise ParseError("missing data chunk")

    tag, channels, rate, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise ParseError(f"invalid header: channels={channels} rate={rate}")
    if tag not in (_FORMAT_PCM, _FORMAT_FLOAT):
        raise UnsupportedFormat(f"format tag 0x{tag:04x} is neither PCM nor IEEE float")
    width = bits // 8
    if bits % 8 or block_align != width * channels:
        raise ParseError(f"inconsistent block alignment for {bits}-bit x {channels}")
    if len(payload) % block_align:
        raise ParseError("data chunk is not a whole number of frames")

    if tag == _FORMAT_FLOAT:
        if bits == 32:
            raw = np.frombuffer(payload, dtype="<f4").astype(np.float64)
        elif bits == 64:
            raw = np.frombuffer(payload, dtype="<f8").astype(np.float64)
        else:
            raise UnsupportedFormat(f"{bits}-bit float")
        raw = np.nan_to_num(raw, nan=0.0, posinf=1.0, neginf=-1.0)
    elif bits == 8:
        raw = (np.frombuffer(payload, dtype=np.uint8).astype(np.float64) - 128.0) / 128.0
    elif bits == 16:
        raw = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif bits == 24:
        b = np.frombuffer(payload, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
        ints = b[:, 0] | (b[:, 1] << 8) | (b[:, 2] << 16)
        ints = np.where(ints >= 1 << 23, ints - (1 << 24), ints)
        raw = ints.astype(np.float64) / float(1 << 23)
    elif bits == 32:
        raw = np.frombuffer(payload, dtype="<i4").astype(np.float64) / float(1 << 31)
    else:
        raise UnsupportedFormat(f"{bits}-bit PCM")

    mono = raw.reshape(-1, channels).mean(axis=1)
    return AudioClip(np.clip(mono, -1.0, 1.0), rate, source_id)


def read_wav(path) -> AudioClip:
    path = Path(path)
    return parse_wav(path.read_bytes(), source_id=str(path))


def to_wav_bytes(clip: AudioClip) -> bytes:
    """Serialize as 16-bit little-endian PCM mono."""
    ints = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(clip.sample_rate)
        w.writeframes(ints.tobytes())
    return buf.getvalue()


def write_wav(clip: AudioClip, path) -> None:
    Path(path).write_bytes(to_wav_bytes(clip))


def resample(clip: AudioClip, target_rate: int) -> AudioClip:
    """Linear-interpolation resampling to ``target_rate``.

    Not band-limited; aliasing above the new Nyquist is not suppressed.
    """
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == clip.sample_rate:
        return clip
    n_in = len(clip)
    n_out = int(round(n_in * target_rate / clip.sample_rate))
    positions = np.arange(n_out) * (clip.sample_rate / target_rate)
    out = np.interp(positions, np.arange(n_in), clip.samples)
    return AudioClip(out, target_rate, clip.source_id)


def fix_length(clip: AudioClip, target_seconds: float = TARGET_SECONDS) -> AudioClip:
    """Zero-pad at the end or keep the leading segment so the clip lasts exactly ``target_seconds``."""
    if len(clip) == 0:
        raise EmptyAudio(f"cannot condition empty clip {clip.source_id!r}")
    if target_seconds <= 0:
        raise ValueError("target_seconds must be positive")
    n = int(round(target_seconds * clip.sample_rate))
    if n == len(clip):
        return clip
    if n < len(clip):
        out = clip.samples[:n]
    else:
        out = np.zeros(n)
        out[:len(clip)] = clip.samples
    return AudioClip(out, clip.sample_rate, clip.source_id)


def condition(clip: AudioClip, rate: int = TARGET_RATE,
              seconds: float = TARGET_SECONDS) -> AudioClip:
    """Resample then fix length: the standard model-input preparation."""
    return fix_length(resample(clip, rate), seconds)


def load_conditioned(path, rate: int = TARGET_RATE, seconds: float = TARGET_SECONDS) -> AudioClip:
    return condition(read_wav(path), rate, seconds)
