"""Fine-tuning: cross-entropy + Adam, best-validation checkpoints, head swaps."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import container
from .autodiff import Tensor
from .errors import ConfigError, DivergenceError, EmptySplit, LabelError, ParseError
from .features import SpectrogramConfig
from .model import (EmotionModel, ModelConfig, head_shapes, init_array, parameter_shapes,
                    with_head)

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    early_stop_patience: int = 5
    selection_metric: str = "accuracy"
    class_weighting: bool = False

    def validate(self) -> "TrainConfig":
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate must be non-negative")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        if self.selection_metric != "accuracy":
            raise ConfigError("only 'accuracy' model selection is supported")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


# -- objective and optimizer ---------------------------------------------------

def cross_entropy(logits: Tensor, labels, weights=None) -> Tensor:
    """``-ln softmax(logits)[label]``, averaged over a batch."""
    n_classes = logits.shape[-1]
    idx = np.atleast_1d(np.asarray(labels))
    if idx.size and (idx.min() < 0 or idx.max() >= n_classes):
        raise LabelError(f"label index out of range for {n_classes} classes: {idx.tolist()}")
    return ad.cross_entropy(logits, idx, weights)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, cfg: TrainConfig, t: int):
    """One bias-corrected Adam update, in place on ``params`` (name -> array).

    Parameters without a gradient are left untouched.
    """
    if t < 1:
        raise ValueError("Adam step index starts at 1")
    b1, b2, lr = cfg.adam_beta1, cfg.adam_beta2, cfg.learning_rate
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, g in grads.items():
        if g is None:
            continue
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
        with np.errstate(over="ignore"):  # overflow is caught by the finiteness check
            p -= (lr * update).astype(p.dtype, copy=False)
    state.step = t
    return params, state


# -- checkpoints ---------------------------------------------------------------

@dataclass(eq=False)
class Checkpoint:
    model_config: ModelConfig
    parameters: dict
    label_set: tuple
    frontend_stats: tuple | None = None
    spectrogram_config: SpectrogramConfig | None = None
    training_provenance: list = field(default_factory=list)
    format_version: int = container.FORMAT_VERSION

    def __post_init__(self):
        self.label_set = tuple(self.label_set)
        if len(self.label_set) != self.model_config.n_classes:
            raise LabelError(f"{len(self.label_set)} labels for a {self.model_config.n_classes}-class head")
        expected = parameter_shapes(self.model_config)
        if list(expected) != list(self.parameters):
            raise ConfigError("checkpoint parameter names do not match its model config")
        for name, shape in expected.items():
            if tuple(self.parameters[name].shape) != shape:
                raise ConfigError(f"{name}: expected {shape}, found {self.parameters[name].shape}")

    @classmethod
    def from_model(cls, model: EmotionModel, **extra) -> "Checkpoint":
        params = {k: np.array(v.data, dtype=np.float32, copy=True) for k, v in model.params.items()}
        return cls(model.config, params, model.label_set, **extra)

    def to_model(self) -> EmotionModel:
        params = {k: Tensor(np.array(v, dtype=np.float32, copy=True), requires_grad=True)
                  for k, v in self.parameters.items()}
        return EmotionModel(self.model_config, params, self.label_set)

    def header(self) -> dict:
        return {
            "kind": CHECKPOINT_KIND,
            "model_config": self.model_config.to_dict(),
            "label_set": list(self.label_set),
            "frontend_stats": None if self.frontend_stats is None else [float(s) for s in self.frontend_stats],
            "spectrogram_config": None if self.spectrogram_config is None else self.spectrogram_config.to_dict(),
            "training_provenance": self.training_provenance,
        }

    def to_bytes(self) -> bytes:
        return container.encode(self.header(), self.parameters, self.format_version)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        header, tensors = container.decode(data)
        if header.get("kind") != CHECKPOINT_KIND:
            raise ParseError(f"not a checkpoint (kind={header.get('kind')!r})")
        try:
            stats = header["frontend_stats"]
            spec = header["spectrogram_config"]
            return cls(ModelConfig.from_dict(header["model_config"]), tensors, tuple(header["label_set"]),
                       None if stats is None else tuple(stats),
                       None if spec is None else SpectrogramConfig(**spec),
                       list(header["training_provenance"]))
        except (KeyError, TypeError) as exc:
            raise ParseError(f"incomplete checkpoint header: {exc}") from None

    def equals(self, other: "Checkpoint") -> bool:
        """Field-wise equality with bit-exact tensor comparison."""
        if self.header() != other.header() or list(self.parameters) != list(other.parameters):
            return False
        return all(self.parameters[k].tobytes() == other.parameters[k].tobytes() for k in self.parameters)


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    Path(path).write_bytes(ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes())


def head_swap(ckpt: Checkpoint, new_labels, seed: int = 0) -> Checkpoint:
    """Keep every backbone tensor bit-exactly; draw a fresh head for ``new_labels``.

    The head is always re-initialized, even when the labels are unchanged.
    """
    new_labels = tuple(new_labels)
    if not new_labels:
        raise LabelError("new label set is empty")
    if len(set(new_labels)) != len(new_labels):
        raise LabelError(f"duplicate labels in {list(new_labels)}")
    if len(new_labels) < 2:
        raise LabelError("a classification head needs at least two labels")
    cfg = replace(ckpt.model_config, n_classes=len(new_labels))
    rng = np.random.default_rng(seed)
    head = {name: init_array(name, shape, rng) for name, shape in head_shapes(cfg.d_model, cfg.n_classes).items()}
    params = {name: (head[name] if name in head else ckpt.parameters[name].copy())
              for name in parameter_shapes(cfg)}
    provenance = list(ckpt.training_provenance) + [{
        "event": "head_swap", "from_labels": list(ckpt.label_set), "to_labels": list(new_labels), "seed": seed}]
    return Checkpoint(cfg, params, new_labels, ckpt.frontend_stats, ckpt.spectrogram_config, provenance)


# -- training loop -------------------------------------------------------------

@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: list
    best_epoch: int
    best_val_accuracy: float

    def history_json(self) -> str:
        return json.dumps(self.history, indent=2) + "\n"


def label_indices(names, label_set) -> np.ndarray:
    lookup = {n: i for i, n in enumerate(label_set)}
    try:
        return np.array([lookup[n] for n in names], dtype=np.int64)
    except KeyError as exc:
        raise LabelError(f"label {exc.args[0]!r} is not in the model's label set {list(label_set)}") from None


def predict_indices(model: EmotionModel, features, batch_size: int = 16) -> np.ndarray:
    """Eval-mode argmax; ties go to the lowest class index."""
    preds = []
    for start in range(0, len(features), batch_size):
        idx = np.arange(start, min(start + batch_size, len(features)))
        preds.append(np.argmax(model.logits(features.batch(idx)), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def _check_finite(model: EmotionModel, where: str):
    for name, t in model.params.items():
        if not np.all(np.isfinite(t.data)):
            raise DivergenceError(f"non-finite values in {name} {where}")


def train(model: EmotionModel, train_set, val_set, cfg: TrainConfig = TrainConfig(), *,
          frontend_stats=None, spectrogram_config=None, provenance=(), dataset_id: str = "train",
          epoch_budget_exact: bool = False) -> TrainResult:
    """Mini-batch Adam fine-tuning with best-validation model selection.

    The input model is not modified. Each epoch shuffles with seed
    ``cfg.seed + epoch``; training stops after ``early_stop_patience`` epochs
    without a validation-accuracy improvement unless ``epoch_budget_exact``.
    """
    cfg.validate()
    if len(train_set) == 0:
        raise EmptySplit("training split is empty")
    if len(val_set) == 0:
        raise EmptySplit("validation split is empty")
    y_train = label_indices(train_set.labels, model.label_set)
    y_val = label_indices(val_set.labels, model.label_set)

    model = model.copy()
    weights = None
    if cfg.class_weighting:
        counts = np.bincount(y_train, minlength=len(model.label_set)).astype(np.float64)
        weights = np.where(counts > 0, counts.sum() / np.maximum(counts, 1) / len(counts), 0.0)
    state = AdamState()
    history, best_acc, best_epoch, best_params, stale = [], -1.0, 0, None, 0
    names = list(model.params)

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(train_set))
        drop_rng = np.random.default_rng([cfg.seed, epoch])
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            logits = model.forward(train_set.batch(idx), train=True, rng=drop_rng)
            loss = cross_entropy(logits, y_train[idx], weights)
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            ad.backward(loss)
            adam_step({n: model.params[n].data for n in names},
                      {n: model.params[n].grad for n in names}, state, cfg, state.step + 1)
            _check_finite(model, f"after step {state.step} (epoch {epoch})")
            losses.append(loss.item() * len(idx))
        model.zero_grad()
        val_acc = float(np.mean(predict_indices(model, val_set) == y_val))
        train_loss = float(np.sum(losses) / len(order))
        history.append({"epoch": epoch, "train_loss": train_loss, "val_accuracy": val_acc})
        log.info("epoch %d loss %.4f val_acc %.4f", epoch, train_loss, val_acc)
        if val_acc > best_acc:
            best_acc, best_epoch, stale = val_acc, epoch, 0
            best_params = {n: model.params[n].data.copy() for n in names}
        else:
            stale += 1
            if stale >= cfg.early_stop_patience and not epoch_budget_exact:
                break

    for n in names:
        model.params[n].data = best_params[n]
    record = {"event": "train", "dataset": dataset_id, "epochs": len(history),
              "best_epoch": best_epoch, "best_val_accuracy": best_acc,
              "final_train_loss": history[-1]["train_loss"]}
    ckpt = Checkpoint.from_model(model, frontend_stats=frontend_stats, spectrogram_config=spectrogram_config,
                                 training_provenance=list(provenance) + [record])
    return TrainResult(ckpt, history, best_epoch, best_acc)


def init_from(ckpt: Checkpoint) -> EmotionModel:
    """Model initialized from a checkpoint (fine-tuning start point)."""
    return ckpt.to_model()


def retarget(model: EmotionModel, label_set) -> EmotionModel:
    """Reorder head rows to follow ``label_set`` (a permutation of the model's labels)."""
    label_set = tuple(label_set)
    if sorted(label_set) != sorted(model.label_set):
        raise LabelError("retarget only permutes an existing label set")
    order = [model.label_set.index(n) for n in label_set]
    head = {"head.weight": model.params["head.weight"].data[order],
            "head.bias": model.params["head.bias"].data[order]}
    return with_head(model, head, label_set)
