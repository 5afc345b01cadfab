"""Two-stage transfer: learn four emotions in one domain, then six in another.

Stage 1 trains on the source corpus (110 Hz voices, white noise). The head
is swapped for a fresh six-way layer, which scores near chance on the target
corpus (160 Hz voices, pink noise). Stage 2 fine-tunes on the target and is
compared with a scratch model given the same epoch budget.

Run: python3 demos/03_transfer.py [pathway] [workdir]
"""

import logging
import sys
from dataclasses import replace
from pathlib import Path

from ser_forge.experiment import ExperimentConfig, load_features, prepare_corpus, run_scratch, run_transfer

logging.basicConfig(level=logging.WARNING)
pathway = sys.argv[1] if len(sys.argv) > 1 else "spectrogram"
work = Path(sys.argv[2] if len(sys.argv) > 2 else "demo_runs")
cfg = ExperimentConfig()

source = prepare_corpus(cfg.source, cfg.corpus_seed, work / "source")
target = prepare_corpus(cfg.target, cfg.corpus_seed, work / "target")

# %% stage 1
stage1 = run_scratch(source, load_features(source, pathway), pathway, cfg.stage1_seed, cfg.train)
print(f"stage 1 ({'/'.join(source.labels)}): test {stage1['metrics'].accuracy:.3f}")

# %% swap the head, score zero-shot, fine-tune; a scratch run gets the same budget
feats = load_features(target, pathway)
budget = cfg.stage2_epochs
for seed in cfg.seeds:
    tr = run_transfer(stage1["result"].checkpoint, target, feats, seed, cfg.train, budget)
    sc = run_scratch(target, feats, pathway, seed, replace(cfg.train, epochs=budget), epoch_budget_exact=True)
    print(f"seed {seed}: zero-shot {tr['zero_shot'].accuracy:.3f} | "
          f"val transfer {tr['result'].best_val_accuracy:.3f} vs scratch {sc['result'].best_val_accuracy:.3f} | "
          f"test {tr['metrics'].accuracy:.3f} vs {sc['metrics'].accuracy:.3f}")
print("provenance:", [p["event"] for p in tr["result"].checkpoint.training_provenance])
