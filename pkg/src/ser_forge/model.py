"""Raw-waveform and spectrogram transformer classifiers at desk scale.

Both pathways share the same pre-norm transformer encoder and linear head:

* ``raw_audio``: strided conv feature encoder -> linear projection ->
  learned positions -> encoder -> mean pool -> head.
* ``spectrogram``: linear patch embedding -> class token prepended ->
  learned positions -> encoder -> class token -> head.

Parameters live in a flat, ordered ``name -> Tensor`` map so they can be
serialized, swapped and gradient-checked without any module machinery.
Linear weights are stored ``[out, in]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .audio import AudioClip
from .autodiff import Tensor
from .errors import ConfigError, TokenOverflow, TooShort
from .features import PATCH_SIZE, PATCH_STRIDE, PatchSequence, n_patches, normalize_waveform

PATHWAYS = ("raw_audio", "spectrogram")
INIT_STD = 0.02
DEFAULT_INPUT_SAMPLES = 80000  # 5 s at 16 kHz
DEFAULT_MEL_BINS = 128
DEFAULT_FRAMES = 512


def conv_output_length(length: int, kernels, strides) -> int:
    for k, s in zip(kernels, strides):
        if length < k:
            raise TooShort(f"sequence of length {length} shorter than kernel {k}")
        length = (length - k) // s + 1
    return length


@dataclass(frozen=True)
class ModelConfig:
    pathway: str
    n_classes: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 128
    conv_channels: int = 32
    conv_strides: tuple = (5, 2, 2, 2, 2, 2, 2)
    conv_kernels: tuple = (10, 3, 3, 3, 3, 2, 2)
    patch_size: int = PATCH_SIZE
    patch_stride: int = PATCH_STRIDE
    max_tokens: int | None = None
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_strides", tuple(int(s) for s in self.conv_strides))
        object.__setattr__(self, "conv_kernels", tuple(int(k) for k in self.conv_kernels))
        if self.max_tokens is None:
            object.__setattr__(self, "max_tokens", self._default_max_tokens())

    def _default_max_tokens(self) -> int:
        # exactly what a 5 s / 16 kHz input needs under the default frontend
        if self.pathway == "raw_audio":
            try:
                return conv_output_length(DEFAULT_INPUT_SAMPLES, self.conv_kernels, self.conv_strides)
            except TooShort:
                return 1
        try:
            return 1 + n_patches(DEFAULT_MEL_BINS, DEFAULT_FRAMES, self.patch_size, self.patch_stride)
        except ValueError:
            return 1

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def validate(self) -> "ModelConfig":
        if self.pathway not in PATHWAYS:
            raise ConfigError(f"pathway must be one of {PATHWAYS}, got {self.pathway!r}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        for name in ("d_model", "n_layers", "n_heads", "ff_dim", "conv_channels", "max_tokens",
                     "patch_size", "patch_stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if len(self.conv_strides) != len(self.conv_kernels) or not self.conv_kernels:
            raise ConfigError("conv_strides and conv_kernels must be non-empty and equally long")
        if min(self.conv_kernels) < 1 or min(self.conv_strides) < 1:
            raise ConfigError("conv kernels and strides must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_strides"] = list(self.conv_strides)
        d["conv_kernels"] = list(self.conv_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """Ordered parameter name -> shape map; a pure function of the config."""
    d, shapes = cfg.d_model, {}
    if cfg.pathway == "raw_audio":
        c_in = 1
        for i, k in enumerate(cfg.conv_kernels):
            shapes[f"conv.{i}.weight"] = (cfg.conv_channels, c_in, k)
            shapes[f"conv.{i}.norm.gain"] = (cfg.conv_channels,)
            shapes[f"conv.{i}.norm.bias"] = (cfg.conv_channels,)
            c_in = cfg.conv_channels
        shapes["proj.weight"] = (d, cfg.conv_channels)
        shapes["proj.bias"] = (d,)
    else:
        shapes["patch.weight"] = (d, cfg.patch_size * cfg.patch_size)
        shapes["patch.bias"] = (d,)
        shapes["cls_token"] = (d,)
    shapes["pos_embed"] = (cfg.max_tokens, d)
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        shapes[p + "ln1.gain"] = (d,)
        shapes[p + "ln1.bias"] = (d,)
        shapes[p + "attn.qkv.weight"] = (3 * d, d)
        shapes[p + "attn.qkv.bias"] = (3 * d,)
        shapes[p + "attn.out.weight"] = (d, d)
        shapes[p + "attn.out.bias"] = (d,)
        shapes[p + "ln2.gain"] = (d,)
        shapes[p + "ln2.bias"] = (d,)
        shapes[p + "ffn.fc1.weight"] = (cfg.ff_dim, d)
        shapes[p + "ffn.fc1.bias"] = (cfg.ff_dim,)
        shapes[p + "ffn.fc2.weight"] = (d, cfg.ff_dim)
        shapes[p + "ffn.fc2.bias"] = (d,)
    shapes.update(head_shapes(d, cfg.n_classes))
    return shapes


def head_shapes(d_model: int, n_classes: int) -> dict[str, tuple]:
    return {"head.weight": (n_classes, d_model), "head.bias": (n_classes,)}


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(s) for s in parameter_shapes(cfg).values())


def init_array(name: str, shape: tuple, rng: np.random.Generator) -> np.ndarray:
    """Norm gains start at 1, biases at 0, conv kernels at He-normal, every other tensor at N(0, 0.02**2).

    Each conv layer feeds a layer norm, so its kernel is scale-invariant and
    Adam moves it by about lr / |w| per step. At 0.02 that is a 5% random walk
    per step, which can pin the raw pathway at chance for most of the epoch
    budget. He scaling, sqrt(2 / fan_in), keeps the step relative to the kernel small.
    """
    if name.endswith(".gain"):
        return np.ones(shape, dtype=np.float32)
    if name.endswith(".bias"):
        return np.zeros(shape, dtype=np.float32)
    std = math.sqrt(2.0 / math.prod(shape[1:])) if name.startswith("conv.") else INIT_STD
    return (rng.standard_normal(shape) * std).astype(np.float32)


@dataclass
class EmotionModel:
    config: ModelConfig
    params: dict[str, Tensor]
    label_set: tuple = field(default=())
    attention_maps: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        self.label_set = tuple(self.label_set)
        if not self.label_set:
            self.label_set = tuple(f"class_{i}" for i in range(self.config.n_classes))
        if len(self.label_set) != self.config.n_classes:
            raise ConfigError(f"{len(self.label_set)} labels for a {self.config.n_classes}-class head")
        expected = parameter_shapes(self.config)
        if list(expected) != list(self.params):
            raise ConfigError("parameter names do not match the config")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {self.params[name].shape}")

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "EmotionModel":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=v.requires_grad)
                  for k, v in self.params.items()}
        return EmotionModel(self.config, params, self.label_set)

    def copy(self) -> "EmotionModel":
        return self.astype(next(iter(self.params.values())).dtype)

    def forward(self, inputs, train: bool = False, rng=None) -> Tensor:
        return forward(self.params, inputs, self.config, train=train, rng=rng,
                       attention_sink=self.attention_maps)

    def logits(self, inputs) -> np.ndarray:
        """Eval-mode logits as a plain array; no graph is recorded."""
        params = {k: Tensor(v.data) for k, v in self.params.items()}
        return forward(params, inputs, self.config, train=False).data


def init_model(cfg: ModelConfig, label_set=()) -> EmotionModel:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    params = {name: Tensor(init_array(name, shape, rng), requires_grad=True)
              for name, shape in parameter_shapes(cfg).items()}
    return EmotionModel(cfg, params, tuple(label_set))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    return ad.add(ad.matmul(x, ad.transpose(weight)), bias)


def conv_encode(params: dict, waveform: Tensor, cfg: ModelConfig) -> Tensor:
    """[B, L] normalized waveforms -> [B, frames, d_model] tokens.

    Each layer is conv1d -> layer norm over channels -> gelu, computed
    channels-last.
    """
    x = ad.reshape(waveform, waveform.shape + (1,))
    for i, stride in enumerate(cfg.conv_strides):
        if x.shape[1] < cfg.conv_kernels[i]:
            raise TooShort(f"waveform too short for conv layer {i}: {x.shape[1]} < {cfg.conv_kernels[i]}")
        x = ad.conv1d_channels_last(x, params[f"conv.{i}.weight"], stride)
        x = ad.layer_norm(x, params[f"conv.{i}.norm.gain"], params[f"conv.{i}.norm.bias"])
        x = ad.gelu(x)
    return linear(x, params["proj.weight"], params["proj.bias"])


def patch_embed(params: dict, patches: Tensor, cfg: ModelConfig) -> Tensor:
    """[B, N, patch**2] -> [B, 1 + N, d_model]: shared projection plus a leading class token."""
    batch, count, _ = patches.shape
    if count + 1 > cfg.max_tokens:
        raise TokenOverflow(f"{count} patches + class token exceed max_tokens={cfg.max_tokens}")
    tokens = linear(patches, params["patch.weight"], params["patch.bias"])
    cls = ad.broadcast_to(ad.reshape(params["cls_token"], (1, 1, cfg.d_model)), (batch, 1, cfg.d_model))
    return ad.concat([cls, tokens], axis=1)


def add_positions(params: dict, tokens: Tensor, cfg: ModelConfig) -> Tensor:
    count = tokens.shape[1]
    if count > cfg.max_tokens:
        raise TokenOverflow(f"{count} tokens exceed max_tokens={cfg.max_tokens}")
    return ad.add(tokens, params["pos_embed"][:count])


def self_attention(params: dict, prefix: str, x: Tensor, cfg: ModelConfig, attention_sink=None) -> Tensor:
    batch, count, d = x.shape
    heads, dh = cfg.n_heads, cfg.head_dim
    qkv = linear(x, params[prefix + "qkv.weight"], params[prefix + "qkv.bias"])
    qkv = ad.transpose(ad.reshape(qkv, (batch, count, 3, heads, dh)), (2, 0, 3, 1, 4))
    q, k, v = qkv[0], qkv[1], qkv[2]
    # scaling q is cheaper than scaling the [T, T] score matrix
    scores = ad.matmul(ad.scale(q, 1.0 / math.sqrt(dh)), ad.transpose(k, (0, 1, 3, 2)))
    weights = ad.softmax(scores)
    if attention_sink is not None:
        attention_sink.append(weights.data)
    out = ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3))
    out = ad.reshape(out, (batch, count, d))
    return linear(out, params[prefix + "out.weight"], params[prefix + "out.bias"])


def encode(params: dict, tokens: Tensor, cfg: ModelConfig, train: bool = False, rng=None,
           attention_sink=None) -> Tensor:
    """Pre-norm blocks: ``x += MHSA(LN(x)); x += FFN(LN(x))``."""
    if tokens.shape[1] > cfg.max_tokens:
        raise TokenOverflow(f"{tokens.shape[1]} tokens exceed max_tokens={cfg.max_tokens}")
    x = tokens
    for layer in range(cfg.n_layers):
        p = f"blocks.{layer}."
        h = ad.layer_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        h = self_attention(params, p + "attn.", h, cfg, attention_sink)
        x = ad.add(x, ad.dropout(h, cfg.dropout, rng, train))
        h = ad.layer_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        h = linear(h, params[p + "ffn.fc1.weight"], params[p + "ffn.fc1.bias"])
        h = linear(ad.gelu(h), params[p + "ffn.fc2.weight"], params[p + "ffn.fc2.bias"])
        x = ad.add(x, ad.dropout(h, cfg.dropout, rng, train))
    return x


def classify(params: dict, tokens: Tensor, cfg: ModelConfig) -> Tensor:
    """Mean-pool (raw audio) or take the class token (spectrogram), then the linear head."""
    pooled = ad.mean(tokens, axis=1) if cfg.pathway == "raw_audio" else tokens[:, 0]
    return linear(pooled, params["head.weight"], params["head.bias"])


def embed(params: dict, inputs, cfg: ModelConfig) -> Tensor:
    x = inputs if isinstance(inputs, Tensor) else Tensor(inputs)
    if cfg.pathway == "raw_audio":
        if x.ndim != 2:
            raise ConfigError(f"raw_audio pathway expects [B, samples] waveforms, got {x.shape}")
        return conv_encode(params, x, cfg)
    if x.ndim != 3 or x.shape[2] != cfg.patch_size ** 2:
        raise ConfigError(f"spectrogram pathway expects [B, N, {cfg.patch_size ** 2}] patches, got {x.shape}")
    return patch_embed(params, x, cfg)


def forward(params: dict, inputs, cfg: ModelConfig, train: bool = False, rng=None,
            attention_sink=None) -> Tensor:
    """Batched logits [B, n_classes] for waveforms [B, L] or patches [B, N, 256]."""
    if train and cfg.dropout > 0 and rng is None:
        raise ValueError("train-mode forward with dropout needs an rng")
    if attention_sink is not None:
        attention_sink.clear()
    x = add_positions(params, embed(params, inputs, cfg), cfg)
    x = ad.dropout(x, cfg.dropout, rng, train)
    x = encode(params, x, cfg, train, rng, attention_sink)
    return classify(params, x, cfg)


def as_model_input(item, cfg: ModelConfig) -> np.ndarray:
    """Turn a single AudioClip / PatchSequence / array into a batch of one."""
    if isinstance(item, AudioClip):
        if cfg.pathway != "raw_audio":
            raise ConfigError("AudioClip input requires the raw_audio pathway")
        return normalize_waveform(item).astype(np.float32)[None]
    if isinstance(item, PatchSequence):
        if cfg.pathway != "spectrogram":
            raise ConfigError("PatchSequence input requires the spectrogram pathway")
        return item.patches.astype(np.float32)[None]
    arr = np.asarray(item, dtype=np.float32)
    want = 1 if cfg.pathway == "raw_audio" else 2
    return arr[None] if arr.ndim == want else arr


def with_head(model: EmotionModel, head: dict[str, np.ndarray], label_set) -> EmotionModel:
    """Copy of ``model`` whose head is replaced by ``head`` arrays for ``label_set``."""
    cfg = replace(model.config, n_classes=len(label_set))
    params = {}
    for name in parameter_shapes(cfg):
        src = head[name] if name.startswith("head.") else model.params[name].data
        params[name] = Tensor(np.array(src, copy=True), requires_grad=True)
    return EmotionModel(cfg, params, tuple(label_set))
