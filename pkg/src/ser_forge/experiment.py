"""Desk-scale analogues of the two fine-tuning experiments.

``scratch`` protocol: train each pathway from random initialization on the
6-class target corpus and report test accuracy.

``transfer`` protocol: train on the 4-class source corpus, swap the head to
the 6 target labels, measure zero-shot target accuracy, then fine-tune on the
target corpus for a fixed epoch budget next to a scratch model given the same
budget and seed.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DatasetManifest, load_manifest, split
from .evaluation import evaluate_features
from .features import SpectrogramConfig
from .model import ModelConfig, init_model
from .pipeline import Featurizer, featurize_split
from .synth import SynthSpec, domain_spec, synth_corpus
from .training import Checkpoint, TrainConfig, head_swap, train

log = logging.getLogger(__name__)


@dataclass
class Corpus:
    name: str
    manifest: DatasetManifest

    @property
    def labels(self) -> tuple:
        return self.manifest.label_set.names


@dataclass
class SplitFeatures:
    train: object
    val: object
    test: object
    stats: tuple | None


def prepare_corpus(spec: SynthSpec, seed: int, out_dir, split_seed: int = 0) -> Corpus:
    """Generate (or reuse) a synthetic corpus and write its split manifest."""
    out_dir = Path(out_dir)
    split_path = out_dir / "manifest_split.csv"
    if split_path.exists() and (out_dir / "synth_spec.json").exists():
        saved = json.loads((out_dir / "synth_spec.json").read_text())
        if saved == {"seed": seed, **spec.to_dict()}:
            return Corpus(spec.prefix, load_manifest(split_path, spec.labels))
    synth_corpus(spec, seed, out_dir)
    manifest = split(load_manifest(out_dir / "manifest.csv", spec.labels), seed=split_seed)
    manifest.save(split_path)
    return Corpus(spec.prefix, manifest)


def load_features(corpus: Corpus, pathway: str, model_cfg: ModelConfig | None = None,
                  spectrogram_config: SpectrogramConfig | None = None) -> SplitFeatures:
    """Featurize train/val/test; spectrogram statistics are fitted on the train split only."""
    featurizer = Featurizer(pathway, spectrogram_config)
    parts = [featurize_split(corpus.manifest, "train", featurizer, fit_stats=True),
             featurize_split(corpus.manifest, "val", featurizer),
             featurize_split(corpus.manifest, "test", featurizer)]
    if model_cfg is not None:
        for p in parts:
            p.patch_size, p.patch_stride = model_cfg.patch_size, model_cfg.patch_stride
    return SplitFeatures(*parts, featurizer.stats)


def _model_config(pathway: str, n_classes: int, seed: int, overrides: dict) -> ModelConfig:
    return ModelConfig(pathway=pathway, n_classes=n_classes, seed=seed, **overrides).validate()


@dataclass
class ExperimentConfig:
    pathways: tuple = ("raw_audio", "spectrogram")
    seeds: tuple = (0, 1, 2, 3, 4)
    corpus_seed: int = 0
    split_seed: int = 0
    target: SynthSpec = field(default_factory=lambda: domain_spec("tgt", per_class=50))
    source: SynthSpec = field(default_factory=lambda: domain_spec("src", per_class=50))
    train: TrainConfig = field(default_factory=TrainConfig)
    stage1_seed: int = 0
    stage2_epochs: int = 1
    model_overrides: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"pathways": list(self.pathways), "seeds": list(self.seeds), "corpus_seed": self.corpus_seed,
                "split_seed": self.split_seed, "target": self.target.to_dict(), "source": self.source.to_dict(),
                "train": self.train.to_dict(), "stage1_seed": self.stage1_seed,
                "stage2_epochs": self.stage2_epochs, "model_overrides": dict(self.model_overrides)}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        out = cls()
        if "target" in d:
            out.target = SynthSpec.from_dict(d.pop("target"))
        if "source" in d:
            out.source = SynthSpec.from_dict(d.pop("source"))
        if "train" in d:
            out.train = TrainConfig(**d.pop("train"))
        for key, value in d.items():
            if not hasattr(out, key):
                raise KeyError(f"unknown experiment field {key!r}")
            setattr(out, key, tuple(value) if key in ("pathways", "seeds") else value)
        return out


def run_scratch(corpus: Corpus, feats: SplitFeatures, pathway: str, seed: int, train_cfg: TrainConfig,
                model_overrides: dict | None = None, spectrogram_config=None, **train_kwargs) -> dict:
    """Random init -> train on ``corpus`` -> test metrics."""
    cfg = _model_config(pathway, len(corpus.labels), seed, model_overrides or {})
    start = time.perf_counter()
    result = train(init_model(cfg, corpus.labels), feats.train, feats.val, replace(train_cfg, seed=seed),
                   frontend_stats=feats.stats, spectrogram_config=spectrogram_config,
                   dataset_id=corpus.name, **train_kwargs)
    metrics, cm = evaluate_features(result.checkpoint.to_model(), feats.test)
    return {"pathway": pathway, "seed": seed, "result": result, "metrics": metrics, "confusion": cm,
            "seconds": time.perf_counter() - start}


def run_transfer(stage1: Checkpoint, target: Corpus, feats: SplitFeatures, seed: int, train_cfg: TrainConfig,
                 epochs: int, spectrogram_config=None) -> dict:
    """Head swap to the target labels, zero-shot test accuracy, then a fixed-budget fine-tune."""
    swapped = head_swap(stage1, target.labels, seed=seed)
    zero_shot, _ = evaluate_features(swapped.to_model(), feats.test)
    result = train(swapped.to_model(), feats.train, feats.val, replace(train_cfg, seed=seed, epochs=epochs),
                   frontend_stats=feats.stats, spectrogram_config=spectrogram_config,
                   provenance=swapped.training_provenance, dataset_id=target.name, epoch_budget_exact=True)
    metrics, cm = evaluate_features(result.checkpoint.to_model(), feats.test)
    return {"seed": seed, "swapped": swapped, "zero_shot": zero_shot, "result": result,
            "metrics": metrics, "confusion": cm}


def scratch_protocol(cfg: ExperimentConfig, work_dir, pathways=None, seeds=None) -> list[dict]:
    target = prepare_corpus(cfg.target, cfg.corpus_seed, Path(work_dir) / "target", cfg.split_seed)
    rows = []
    for pathway in pathways or cfg.pathways:
        mcfg = _model_config(pathway, len(target.labels), 0, cfg.model_overrides)
        feats = load_features(target, pathway, mcfg)
        for seed in seeds or cfg.seeds:
            run = run_scratch(target, feats, pathway, seed, cfg.train, cfg.model_overrides)
            rows.append({"pathway": pathway, "seed": seed, "test_accuracy": run["metrics"].accuracy,
                         "test_balanced_accuracy": run["metrics"].balanced_accuracy,
                         "test_macro_f1": run["metrics"].macro_f1,
                         "best_val_accuracy": run["result"].best_val_accuracy,
                         "epochs": len(run["result"].history), "seconds": run["seconds"]})
            log.info("scratch %s seed %d test acc %.3f", pathway, seed, rows[-1]["test_accuracy"])
    return rows


def transfer_protocol(cfg: ExperimentConfig, work_dir, pathways=None, seeds=None) -> list[dict]:
    work_dir = Path(work_dir)
    source = prepare_corpus(cfg.source, cfg.corpus_seed, work_dir / "source", cfg.split_seed)
    target = prepare_corpus(cfg.target, cfg.corpus_seed, work_dir / "target", cfg.split_seed)
    rows = []
    for pathway in pathways or cfg.pathways:
        mcfg = _model_config(pathway, len(target.labels), 0, cfg.model_overrides)
        src_feats = load_features(source, pathway, mcfg)
        stage1 = run_scratch(source, src_feats, pathway, cfg.stage1_seed, cfg.train, cfg.model_overrides)
        tgt_feats = load_features(target, pathway, mcfg)
        for seed in seeds or cfg.seeds:
            tr = run_transfer(stage1["result"].checkpoint, target, tgt_feats, seed, cfg.train, cfg.stage2_epochs)
            sc = run_scratch(target, tgt_feats, pathway, seed, replace(cfg.train, epochs=cfg.stage2_epochs),
                             cfg.model_overrides, epoch_budget_exact=True)
            rows.append({"pathway": pathway, "seed": seed,
                         "stage1_val_accuracy": stage1["result"].best_val_accuracy,
                         "stage1_test_accuracy": stage1["metrics"].accuracy,
                         "zero_shot_accuracy": tr["zero_shot"].accuracy,
                         "transfer_val_accuracy": tr["result"].best_val_accuracy,
                         "scratch_val_accuracy": sc["result"].best_val_accuracy,
                         "transfer_test_accuracy": tr["metrics"].accuracy,
                         "scratch_test_accuracy": sc["metrics"].accuracy})
            log.info("transfer %s seed %d: zero-shot %.3f, val %.3f vs %.3f", pathway, seed,
                     rows[-1]["zero_shot_accuracy"], rows[-1]["transfer_val_accuracy"],
                     rows[-1]["scratch_val_accuracy"])
    return rows


def summarize(scratch_rows: list[dict], transfer_rows: list[dict]) -> dict:
    summary = {}
    for pathway in sorted({r["pathway"] for r in scratch_rows + transfer_rows}):
        s = [r for r in scratch_rows if r["pathway"] == pathway]
        t = [r for r in transfer_rows if r["pathway"] == pathway]
        entry = {}
        if s:
            entry["scratch_mean_test_accuracy"] = float(np.mean([r["test_accuracy"] for r in s]))
        if t:
            entry["zero_shot_mean_accuracy"] = float(np.mean([r["zero_shot_accuracy"] for r in t]))
            entry["transfer_mean_test_accuracy"] = float(np.mean([r["transfer_test_accuracy"] for r in t]))
            entry["budget_scratch_mean_test_accuracy"] = float(np.mean([r["scratch_test_accuracy"] for r in t]))
            entry["transfer_wins_or_ties_on_val"] = int(sum(r["transfer_val_accuracy"] >= r["scratch_val_accuracy"]
                                                            for r in t))
        summary[pathway] = entry
    return summary


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """Both protocols; writes ``report.json`` (no timestamps or timings, so reruns are byte-identical)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scratch_rows = scratch_protocol(cfg, out_dir / "corpora")
    transfer_rows = transfer_protocol(cfg, out_dir / "corpora")
    report = {"config": cfg.to_dict(),
              "scratch": [{k: v for k, v in r.items() if k != "seconds"} for r in scratch_rows],
              "transfer": transfer_rows,
              "summary": summarize(scratch_rows, transfer_rows)}
    (out_dir / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return report
