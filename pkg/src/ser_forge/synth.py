"""Synthetic emotional-speech corpora with a controllable domain shift.

Each class is a harmonic tone whose fundamental is ``domain_base * ratio**i``
and whose loudness is modulated at a class-specific rate, buried in noise of
the domain's colour at the domain's SNR. ``i`` is the label's position in the
canonical six-label order, so a 4-class source corpus and a 6-class target
corpus share the class-index structure (same modulation rate per emotion)
while their pitch register and noise differ.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, to_wav_bytes
from .data import SHEMO6, SRC4, DatasetManifest, LabelSet, Record
from .errors import ConfigError

DEFAULT_AM_RATES = (2.0, 3.5, 5.0, 6.5, 8.0, 9.5)


@dataclass(frozen=True)
class SynthSpec:
    labels: tuple = SHEMO6
    per_class: int = 40
    domain_base: float = 160.0
    ratio: float = 1.15
    am_rates: tuple = DEFAULT_AM_RATES
    am_depth: float = 0.8
    snr_db: float = 6.0
    noise_color: str = "pink"
    duration_range: tuple = (1.0, 6.0)
    sample_rate: int = 16000
    pitch_jitter: float = 0.03
    max_harmonic_hz: float = 4000.0
    peak: float = 0.5
    prefix: str = "tgt"

    def validate(self) -> "SynthSpec":
        if not self.labels or len(set(self.labels)) != len(self.labels):
            raise ConfigError("labels must be non-empty and unique")
        if self.per_class < 1:
            raise ConfigError("per_class must be positive")
        if self.domain_base <= 0 or self.ratio <= 1.0:
            raise ConfigError("domain_base must be positive and ratio > 1")
        if self.sample_rate != 16000:
            raise ConfigError("synthetic corpora are generated at 16000 Hz")
        lo, hi = self.duration_range
        if not 0 < lo <= hi:
            raise ConfigError(f"bad duration_range {self.duration_range}")
        if self.noise_color not in ("white", "pink"):
            raise ConfigError("noise_color must be 'white' or 'pink'")
        if not 0.0 <= self.am_depth <= 1.0:
            raise ConfigError("am_depth must lie in [0, 1]")
        if max(self.class_index(c) for c in self.labels) >= len(self.am_rates):
            raise ConfigError(f"need an AM rate for every class index, have {len(self.am_rates)}")
        if self.domain_base * self.ratio ** max(self.class_index(c) for c in self.labels) >= self.max_harmonic_hz:
            raise ConfigError("highest fundamental exceeds max_harmonic_hz")
        return self

    def class_index(self, label: str) -> int:
        return SHEMO6.index(label) if label in SHEMO6 else list(self.labels).index(label)

    def fundamental(self, label: str) -> float:
        return self.domain_base * self.ratio ** self.class_index(label)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("labels", "am_rates", "duration_range"):
            if key in d:
                d[key] = tuple(d[key])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown synth spec fields: {sorted(unknown)}")
        return cls(**d)


SOURCE_DOMAIN = SynthSpec(labels=SRC4, domain_base=110.0, snr_db=10.0, noise_color="white", prefix="src")
TARGET_DOMAIN = SynthSpec()


def domain_spec(name: str, **overrides) -> SynthSpec:
    base = {"src": SOURCE_DOMAIN, "tgt": TARGET_DOMAIN}.get(name.lower())
    if base is None:
        raise ConfigError(f"unknown domain {name!r}; expected 'src' or 'tgt'")
    return SynthSpec.from_dict({**base.to_dict(), **overrides})


def _noise(rng: np.random.Generator, n: int, color: str) -> np.ndarray:
    white = rng.standard_normal(n)
    if color == "white":
        return white
    spectrum = np.fft.rfft(white)
    freqs = np.arange(spectrum.shape[0], dtype=np.float64)
    freqs[0] = 1.0
    pink = np.fft.irfft(spectrum / np.sqrt(freqs), n=n)
    return pink / pink.std()


def synth_clip(spec: SynthSpec, label: str, index: int, seed: int) -> AudioClip:
    """One utterance; fully determined by (spec, label, index, seed)."""
    ci = spec.class_index(label)
    rng = np.random.default_rng([seed, ci, index, int(spec.domain_base * 1000)])
    sr = spec.sample_rate
    duration = rng.uniform(*spec.duration_range)
    n = int(round(duration * sr))
    t = np.arange(n) / sr

    f0 = spec.fundamental(label) * (1.0 + rng.uniform(-spec.pitch_jitter, spec.pitch_jitter))
    n_harm = int(spec.max_harmonic_hz // f0)
    phases = rng.uniform(0, 2 * np.pi, n_harm)
    tone = np.zeros(n)
    for h in range(1, n_harm + 1):
        tone += np.sin(2 * np.pi * h * f0 * t + phases[h - 1]) / h

    am = spec.am_rates[ci]
    envelope = 1.0 + spec.am_depth * np.sin(2 * np.pi * am * t + rng.uniform(0, 2 * np.pi))
    voiced = tone * envelope
    ramp = min(n // 2, int(0.01 * sr))
    if ramp:
        fade = np.linspace(0.0, 1.0, ramp)
        voiced[:ramp] *= fade
        voiced[-ramp:] *= fade[::-1]

    signal_power = np.mean(voiced ** 2)
    noise = _noise(rng, n, spec.noise_color) * np.sqrt(signal_power / 10 ** (spec.snr_db / 10))
    mix = voiced + noise
    mix *= spec.peak / np.abs(mix).max()
    return AudioClip(mix, sr, f"{spec.prefix}_s{seed}_{label}_{index:04d}")


def synth_corpus(spec: SynthSpec, seed: int, out_dir) -> DatasetManifest:
    """Write ``per_class`` WAVs per label plus ``manifest.csv`` and ``synth_spec.json`` into ``out_dir``.

    Files are named ``{prefix}_s{seed}_{label}_{index}.wav`` so corpora made
    with different seeds never collide. Rows are ordered label-major.
    """
    spec.validate()
    out_dir = Path(out_dir)
    (out_dir / "wav").mkdir(parents=True, exist_ok=True)
    records = []
    for label in spec.labels:
        for i in range(spec.per_class):
            clip = synth_clip(spec, label, i, seed)
            rel = Path("wav") / f"{clip.source_id}.wav"
            (out_dir / rel).write_bytes(to_wav_bytes(clip))
            speaker = f"{spec.prefix}_spk{i % 10:02d}"
            records.append(Record(clip.source_id, rel.as_posix(), label, speaker, "F" if i % 10 < 4 else "M"))
    manifest = DatasetManifest(records, LabelSet(spec.labels), out_dir)
    manifest.save(out_dir / "manifest.csv")
    (out_dir / "synth_spec.json").write_text(
        json.dumps({"seed": seed, **spec.to_dict()}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest
