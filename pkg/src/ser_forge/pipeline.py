"""From manifests to model-ready feature sets."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .audio import TARGET_RATE, TARGET_SECONDS, AudioClip, condition, read_wav
from .data import DatasetManifest
from .errors import BadStats, ConfigError, EmptySplit
from .features import (PATCH_SIZE, PATCH_STRIDE, SpectrogramConfig, SpectrogramFrontend,
                       normalize_waveform, patchify_batch)
from .model import PATHWAYS


def worker_count() -> int:
    """Thread cap from ``SER_FORGE_THREADS`` (default 1)."""
    try:
        return max(1, int(os.environ.get("SER_FORGE_THREADS", "1")))
    except ValueError:
        return 1


@dataclass
class FeatureSet:
    """Stacked per-utterance inputs for one pathway.

    ``inputs`` holds normalized waveforms [N, samples] for ``raw_audio`` and
    normalized log-mel grids [N, mel_bins, frames] for ``spectrogram``; the
    latter are cut into patches per batch.
    """

    pathway: str
    inputs: np.ndarray
    labels: np.ndarray
    ids: list
    patch_size: int = PATCH_SIZE
    patch_stride: int = PATCH_STRIDE

    def __len__(self):
        return self.inputs.shape[0]

    def batch(self, idx) -> np.ndarray:
        x = self.inputs[np.asarray(idx)]
        if self.pathway == "spectrogram":
            x, _, _ = patchify_batch(x, self.patch_size, self.patch_stride)
            return np.ascontiguousarray(x, dtype=np.float32)
        return x

    def subset(self, idx) -> "FeatureSet":
        idx = np.asarray(idx)
        return FeatureSet(self.pathway, self.inputs[idx], self.labels[idx],
                          [self.ids[i] for i in idx], self.patch_size, self.patch_stride)


def mel_statistics(grids: np.ndarray, log_floor: float = 1e-10) -> tuple[float, float]:
    """Global mean and population std of a stack of log-mel grids.

    Cells sitting at ``ln(log_floor)`` (zero padding and digital silence) are
    left out: with 1-6 s clips padded to 5 s they make up about a third of
    the grid and would otherwise set the scale on their own.
    """
    g = np.asarray(grids, dtype=np.float64)
    g = g[g > np.log(log_floor)]
    if g.size == 0:
        raise BadStats("every log-mel cell is at the floor; no statistics to fit")
    std = float(g.std())
    if not std > 0:
        raise BadStats("log-mel cells above the floor are constant")
    return float(g.mean()), std


class Featurizer:
    """Clip -> pathway input, with the frontend statistics needed for spectrograms."""

    def __init__(self, pathway: str, spectrogram_config: SpectrogramConfig | None = None,
                 stats: tuple | None = None, sample_rate: int = TARGET_RATE, seconds: float = TARGET_SECONDS):
        if pathway not in PATHWAYS:
            raise ConfigError(f"unknown pathway {pathway!r}")
        self.pathway = pathway
        self.sample_rate = sample_rate
        self.seconds = seconds
        self.stats = None if stats is None else (float(stats[0]), float(stats[1]))
        self.spectrogram_config = spectrogram_config or SpectrogramConfig()
        self._frontend = SpectrogramFrontend(self.spectrogram_config, sample_rate) if pathway == "spectrogram" else None

    def condition(self, clip: AudioClip) -> AudioClip:
        return condition(clip, self.sample_rate, self.seconds)

    def raw(self, clip: AudioClip) -> np.ndarray:
        """Un-normalized representation: waveform or log-mel grid."""
        clip = self.condition(clip)
        if self.pathway == "raw_audio":
            return normalize_waveform(clip).astype(np.float32)
        return self._frontend(clip).values

    def finish(self, raw: np.ndarray) -> np.ndarray:
        if self.pathway == "raw_audio":
            return raw
        if self.stats is None:
            raise ConfigError("spectrogram features need corpus mean/std statistics")
        mean, std = self.stats
        if not std > 0:
            raise ConfigError(f"bad spectrogram std {std}")
        return ((raw - mean) / std).astype(np.float32)

    def __call__(self, clip: AudioClip) -> np.ndarray:
        return self.finish(self.raw(clip))


def featurize_records(manifest: DatasetManifest, records, featurizer: Featurizer,
                      fit_stats: bool = False) -> FeatureSet:
    """Load and featurize ``records``; with ``fit_stats`` the spectrogram statistics come from them."""
    if not records:
        raise EmptySplit("no records to featurize")

    def load(rec):
        return featurizer.raw(read_wav(manifest.audio_file(rec)))

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            raws = list(pool.map(load, records))  # map preserves submission order
    else:
        raws = [load(r) for r in records]
    stacked = np.stack(raws)
    if fit_stats and featurizer.pathway == "spectrogram":
        featurizer.stats = mel_statistics(stacked, featurizer.spectrogram_config.log_floor)
    inputs = np.stack([featurizer.finish(r) for r in stacked]).astype(np.float32)
    labels = np.array([r.label for r in records])
    return FeatureSet(featurizer.pathway, inputs, labels, [r.utterance_id for r in records])


def featurize_split(manifest: DatasetManifest, split: str, featurizer: Featurizer,
                    fit_stats: bool = False) -> FeatureSet:
    records = manifest.subset(split)
    if not records:
        raise EmptySplit(f"split {split!r} is empty")
    return featurize_records(manifest, records, featurizer, fit_stats)
