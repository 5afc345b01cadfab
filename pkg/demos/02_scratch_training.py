"""Train both pathways from scratch on the synthetic six-emotion corpus.

Run: python3 demos/02_scratch_training.py [workdir]
Takes a few minutes per pathway on one CPU core.
"""

import logging
import sys
from pathlib import Path

from ser_forge.experiment import ExperimentConfig, load_features, prepare_corpus, run_scratch

logging.basicConfig(level=logging.INFO, format="%(message)s")
work = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_runs")

# %% 50 clips per emotion, split 80/10/10 -> 240 / 30 / 30
cfg = ExperimentConfig()
target = prepare_corpus(cfg.target, cfg.corpus_seed, work / "target")
print(target.manifest.split_counts())

# %% default model and optimizer: d 64, 2 layers, Adam 1e-3, batch 8, patience 5
for pathway in ("spectrogram", "raw_audio"):
    feats = load_features(target, pathway)
    run = run_scratch(target, feats, pathway, seed=0, train_cfg=cfg.train)
    res, m = run["result"], run["metrics"]
    print(f"{pathway}: best epoch {res.best_epoch}, val {res.best_val_accuracy:.3f}, "
          f"test {m.accuracy:.3f} ({run['seconds']:.0f} s)")
    print(run["confusion"].to_text())
