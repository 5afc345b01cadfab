import json

import numpy as np
import pytest

from ser_forge import container
from ser_forge.cli import EXIT_IO, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, build_parser, main
from ser_forge.training import load_checkpoint

TINY_MODEL = ["--d-model", "8", "--n-layers", "1", "--n-heads", "2", "--ff-dim", "8", "--conv-channels", "4",
              "--dropout", "0"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.json"
    spec.write_text(json.dumps({"per_class": 3, "duration_range": [1.0, 1.5]}))
    assert main(["synth", "--spec", str(spec), "--seed", "0", "--out", str(root / "tgt")]) == EXIT_OK
    assert main(["synth", "--domain", "src", "--per-class", "3", "--out", str(root / "src")]) == EXIT_OK
    for name, labels in (("tgt", "SHEMO6"), ("src", "SRC4")):
        assert main(["split", "--manifest", str(root / name / "manifest.csv"), "--labels", labels,
                     "--out", str(root / name / "split.csv")]) == EXIT_OK
    return root


def train_args(corpus, out, *extra, name="tgt", labels="SHEMO6"):
    return ["train", "--manifest", str(corpus / name / "split.csv"), "--labels", labels, "--epochs", "1",
            "--out", str(out), *TINY_MODEL, *extra]


def test_split_prints_counts_and_is_reproducible(corpus, tmp_path, capsys):
    rows = ["utterance_id,audio_path,label,speaker_id,gender,split"]
    rows += [f"u{i},w/{i}.wav,anger,,," for i in range(3000)]
    (tmp_path / "m.csv").write_text("\n".join(rows) + "\n")
    for out in ("a.csv", "b.csv"):
        assert main(["split", "--manifest", str(tmp_path / "m.csv"), "--out", str(tmp_path / out)]) == EXIT_OK
    assert "train 2400 val 300 test 300" in capsys.readouterr().out
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_missing_manifest_is_usage_error(tmp_path, capsys):
    assert main(["split", "--manifest", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o.csv")]) == EXIT_USAGE
    assert "not found" in capsys.readouterr().err


def test_bad_flags_are_usage_errors(tmp_path):
    assert main(["frobnicate"]) == EXIT_USAGE
    assert main(["split", "--manifest"]) == EXIT_USAGE


def test_synth_writes_corpus(corpus):
    assert len(list((corpus / "tgt" / "wav").glob("*.wav"))) == 18
    assert (corpus / "tgt" / "manifest.csv").exists()


def test_train_eval_predict(corpus, tmp_path, capsys):
    run = tmp_path / "run"
    assert main(train_args(corpus, run, "--pathway", "raw_audio")) == EXIT_OK
    ckpt = load_checkpoint(run / "checkpoint.serf")
    assert ckpt.label_set[0] == "anger" and ckpt.model_config.n_classes == 6
    assert len(json.loads((run / "history.json").read_text())) == 1
    assert json.loads((run / "run_config.json").read_text())["model"]["d_model"] == 8

    assert main(["eval", "--checkpoint", str(run / "checkpoint.serf"), "--manifest",
                 str(corpus / "tgt" / "split.csv"), "--out", str(tmp_path / "ev")]) == EXIT_OK
    metrics = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert 0.0 <= metrics["accuracy"] <= 1.0 and metrics["n_examples"] == 3
    assert (tmp_path / "ev" / "confusion.txt").read_text().startswith("true\\pred")

    capsys.readouterr()
    wav = next((corpus / "tgt" / "wav").glob("*anger*.wav"))
    assert main(["predict", "--checkpoint", str(run / "checkpoint.serf"), "--wav", str(wav)]) == EXIT_OK
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] in ckpt.label_set and len(lines) == 7
    probs = [float(line.split()[-1]) for line in lines[1:]]
    assert sum(probs) == pytest.approx(1.0, abs=1e-3)


def test_train_with_config_file(corpus, tmp_path):
    cfg = {"model": {"pathway": "spectrogram", "d_model": 8, "n_layers": 1, "n_heads": 2, "ff_dim": 8,
                     "dropout": 0.0},
           "train": {"epochs": 1, "batch_size": 4}, "manifest": str(corpus / "tgt" / "split.csv"),
           "out": str(tmp_path / "run")}
    (tmp_path / "c.json").write_text(json.dumps(cfg))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--batch-size", "2"]) == EXIT_OK
    saved = json.loads((tmp_path / "run" / "run_config.json").read_text())
    assert saved["train"]["batch_size"] == 2
    ckpt = load_checkpoint(tmp_path / "run" / "checkpoint.serf")
    assert ckpt.model_config.pathway == "spectrogram" and ckpt.frontend_stats is not None


def test_config_validation_errors(corpus, tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"epochz": 3}}))
    assert main(["train", "--config", str(tmp_path / "c.json"), "--manifest",
                 str(corpus / "tgt" / "split.csv"), "--out", str(tmp_path / "r")]) == EXIT_USAGE
    assert "epochz" in capsys.readouterr().err
    assert main(train_args(corpus, tmp_path / "r", "--batch-size", "0")) == EXIT_USAGE
    assert main(train_args(corpus, tmp_path / "r", "--n-heads", "3")) == EXIT_USAGE


def test_zero_learning_rate_keeps_initial_weights(corpus, tmp_path):
    assert main(train_args(corpus, tmp_path / "a", "--lr", "0", "--seed", "4")) == EXIT_OK
    assert main(train_args(corpus, tmp_path / "b", "--lr", "0", "--seed", "4", "--epochs", "2")) == EXIT_OK
    a = load_checkpoint(tmp_path / "a" / "checkpoint.serf").parameters
    b = load_checkpoint(tmp_path / "b" / "checkpoint.serf").parameters
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_divergence_exits_3(corpus, tmp_path):
    assert main(train_args(corpus, tmp_path / "r", "--lr", "1e39")) == EXIT_NUMERIC


def test_runs_are_byte_identical(corpus, tmp_path):
    for out in ("a", "b"):
        assert main(train_args(corpus, tmp_path / out, "--epochs", "2")) == EXIT_OK
        assert main(["eval", "--checkpoint", str(tmp_path / out / "checkpoint.serf"), "--manifest",
                     str(corpus / "tgt" / "split.csv"), "--out", str(tmp_path / out / "ev")]) == EXIT_OK
    for name in ("checkpoint.serf", "history.json", "run_config.json", "ev/metrics.json", "ev/confusion.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


def test_swap_head_and_fine_tune(corpus, tmp_path):
    src = tmp_path / "src"
    assert main(train_args(corpus, src, name="src", labels="SRC4")) == EXIT_OK
    ckpt = src / "checkpoint.serf"
    # fine-tuning a 4-class head on 6-class data needs an explicit head swap
    assert main(train_args(corpus, tmp_path / "x", "--init-from", str(ckpt))) == EXIT_USAGE
    for out in ("s1.serf", "s2.serf"):
        assert main(["swap-head", "--checkpoint", str(ckpt), "--labels", "SHEMO6", "--seed", "1",
                     "--out", str(tmp_path / out)]) == EXIT_OK
    assert (tmp_path / "s1.serf").read_bytes() == (tmp_path / "s2.serf").read_bytes()
    before, after = load_checkpoint(ckpt), load_checkpoint(tmp_path / "s1.serf")
    assert len(after.training_provenance) == len(before.training_provenance) + 1
    assert after.label_set == tuple(sorted(after.label_set)) and len(after.label_set) == 6
    tuned = tmp_path / "tuned"
    args = ["train", "--init-from", str(tmp_path / "s1.serf"), "--labels", "SHEMO6", "--manifest",
            str(corpus / "tgt" / "split.csv"), "--epochs", "1", "--out", str(tuned)]
    assert main(args) == EXIT_OK
    assert [p["event"] for p in load_checkpoint(tuned / "checkpoint.serf").training_provenance] == \
        ["train", "head_swap", "train"]
    assert main(["swap-head", "--checkpoint", str(tmp_path / "missing.serf"), "--labels", "SHEMO6",
                 "--out", str(tmp_path / "z.serf")]) == EXIT_USAGE


def test_eval_label_mismatch_is_usage_error(corpus, tmp_path):
    assert main(train_args(corpus, tmp_path / "src", name="src", labels="SRC4")) == EXIT_OK
    assert main(["eval", "--checkpoint", str(tmp_path / "src" / "checkpoint.serf"), "--manifest",
                 str(corpus / "tgt" / "split.csv"), "--out", str(tmp_path / "ev")]) == EXIT_USAGE


def test_corrupt_checkpoint_is_io_error(corpus, tmp_path):
    bad = tmp_path / "bad.serf"
    bad.write_bytes(b"SERF\x01\x00\x00\x00garbage")
    wav = next((corpus / "tgt" / "wav").glob("*.wav"))
    assert main(["predict", "--checkpoint", str(bad), "--wav", str(wav)]) == EXIT_IO


def test_featurize(corpus, tmp_path):
    wav = next((corpus / "tgt" / "wav").glob("*.wav"))
    assert main(["featurize", "--wav", str(wav), "--out", str(tmp_path / "f.serf")]) == EXIT_OK
    header, tensors = container.read(tmp_path / "f.serf")
    assert header["kind"] == "features" and tensors["log_mel"].shape == (128, 512)
    assert header["normalized"] is False
    assert main(["featurize", "--wav", str(wav), "--stats", "-5", "4", "--mel-bins", "64",
                 "--out", str(tmp_path / "g.serf")]) == EXIT_OK
    _, g = container.read(tmp_path / "g.serf")
    assert g["log_mel"].shape == (64, 512)
    assert main(["featurize", "--wav", str(wav), "--pathway", "raw_audio", "--out", str(tmp_path / "w.serf")]) == 0
    _, w = container.read(tmp_path / "w.serf")
    assert w["waveform"].shape == (80000,) and abs(float(np.mean(w["waveform"]))) < 1e-4
    assert main(["featurize", "--wav", str(wav), "--mel-bins", "256", "--out", str(tmp_path / "h.serf")]) == 2


@pytest.mark.parametrize("command", ["split", "synth", "featurize", "train", "swap-head", "eval", "predict",
                                     "run-experiment"])
def test_help_lists_defaults(command, capsys):
    assert main([command, "--help"]) == EXIT_OK
    text = capsys.readouterr().out
    assert "(default: None)" not in text
    expected = {"split": ["(default: 0)", "SHEMO6", "0.8, 0.1, 0.1"], "train": ["(default: 0.001)", "(default: 8)",
                "(default: 5)", "(default: 30)", "(default: 64)", "(default: 0.1)", "(default: 400)"],
                "synth": ["(default: 40)", "(default: tgt)"], "eval": ["(default: test)"],
                "swap-head": ["(default: 0)"]}.get(command, [])
    for needle in expected:
        assert needle in text, needle


def test_every_subcommand_is_registered():
    sub = next(a for a in build_parser()._actions if a.dest == "command")
    assert set(sub.choices) == {"split", "synth", "featurize", "train", "swap-head", "eval", "predict",
                                "run-experiment"}
