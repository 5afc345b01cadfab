import numpy as np
import pytest

from ser_forge import autodiff as ad
from ser_forge.audio import AudioClip
from ser_forge.autodiff import Tensor, grad_check
from ser_forge.errors import ConfigError, TokenOverflow, TooShort
from ser_forge.features import SpectrogramFrontend, patchify
from ser_forge.model import (EmotionModel, ModelConfig, as_model_input, conv_output_length, encode, forward,
                             init_model, parameter_count, parameter_shapes, self_attention)
from ser_forge.training import retarget

COMPOSED_TOL = 1e-2


def toy_config(pathway: str, **kw) -> ModelConfig:
    base = dict(d_model=8, n_layers=1, n_heads=2, ff_dim=8, conv_channels=4, conv_kernels=(4, 3),
                conv_strides=(2, 2), patch_size=4, patch_stride=4, max_tokens=8, dropout=0.0)
    base.update(kw)
    return ModelConfig(pathway, 3, **base)


def toy_input(cfg: ModelConfig, batch: int = 2, seed: int = 0) -> np.ndarray:
    rng = np.random.default_rng(seed)
    if cfg.pathway == "raw_audio":
        return rng.standard_normal((batch, 20))
    return rng.standard_normal((batch, 3, cfg.patch_size ** 2))


# -- shape algebra ---------------------------------------------------------------

def test_conv_length_formula():
    assert conv_output_length(80000, (10, 3, 3, 3, 3, 2, 2), (5, 2, 2, 2, 2, 2, 2)) == 249
    with pytest.raises(TooShort):
        conv_output_length(5, (10,), (5,))


def test_default_max_tokens():
    assert ModelConfig("raw_audio", 6).max_tokens == 249
    assert ModelConfig("spectrogram", 6).max_tokens == 601


@pytest.mark.parametrize("pathway,count", [("raw_audio", 102534), ("spectrogram", 122310)])
def test_parameter_count(pathway, count):
    cfg = ModelConfig(pathway, 6)
    assert parameter_count(cfg) == count
    model = init_model(cfg)
    assert sum(t.data.size for t in model.params.values()) == count


def test_parameter_count_by_hand():
    # head 6 * 64 + 6, two blocks of (2 LN + qkv + out + ffn), 601 positions
    block = 4 * 64 + (3 * 64 * 64 + 3 * 64) + (64 * 64 + 64) + (128 * 64 + 128) + (64 * 128 + 64)
    spectro = (64 * 256 + 64) + 64 + 601 * 64 + 2 * block + (6 * 64 + 6)
    assert parameter_count(ModelConfig("spectrogram", 6)) == spectro


def test_raw_pathway_on_five_seconds():
    cfg = ModelConfig("raw_audio", 6)
    model = init_model(cfg)
    x = as_model_input(AudioClip(np.random.default_rng(0).uniform(-0.5, 0.5, 80000), 16000), cfg)
    assert model.logits(x).shape == (1, 6)
    assert len(model.attention_maps) == 0
    model.forward(x)
    assert model.attention_maps[0].shape == (1, 4, 249, 249)


def test_spectrogram_pathway_token_count():
    clip = AudioClip(np.random.default_rng(1).uniform(-0.5, 0.5, 80000), 16000)
    seq = patchify(SpectrogramFrontend()(clip))
    assert seq.patches.shape == (600, 256)
    model = init_model(ModelConfig("spectrogram", 6))
    out = model.forward(as_model_input(seq, model.config))
    assert out.shape == (1, 6)
    assert model.attention_maps[-1].shape == (1, 4, 601, 601)


def test_token_overflow():
    cfg = toy_config("spectrogram", max_tokens=3)
    with pytest.raises(TokenOverflow):
        init_model(cfg).logits(toy_input(cfg))


def test_wrong_input_kind():
    raw = init_model(toy_config("raw_audio"))
    with pytest.raises(ConfigError):
        as_model_input(patchify(np.zeros((16, 16))), raw.config)
    with pytest.raises(ConfigError):
        raw.logits(np.zeros((1, 2, 3)))


@pytest.mark.parametrize("kw", [dict(d_model=10, n_heads=4), dict(dropout=1.0), dict(conv_strides=(2,))])
def test_invalid_configs(kw):
    with pytest.raises(ConfigError):
        toy_config("raw_audio", **kw).validate()


# -- init ------------------------------------------------------------------------

def test_init_statistics_and_determinism():
    a, b = init_model(ModelConfig("spectrogram", 6)), init_model(ModelConfig("spectrogram", 6))
    assert all(a.params[k].data.tobytes() == b.params[k].data.tobytes() for k in a.params)
    w = a.params["pos_embed"].data
    assert w.dtype == np.float32
    assert abs(w.std() - 0.02) < 0.001
    assert np.all(a.params["blocks.0.ln1.gain"].data == 1)
    assert np.all(a.params["head.bias"].data == 0)
    raw = init_model(ModelConfig("raw_audio", 6))
    # conv kernels are He-scaled: fan_in 1 * 10 for the first layer, 32 * 3 for the second
    assert abs(raw.params["conv.0.weight"].data.std() - np.sqrt(2 / 10)) < 0.03
    assert abs(raw.params["conv.1.weight"].data.std() - np.sqrt(2 / 96)) < 0.005
    assert abs(raw.params["proj.weight"].data.std() - 0.02) < 0.002
    c = init_model(ModelConfig("spectrogram", 6, seed=1))
    assert not np.array_equal(c.params["pos_embed"].data, w)


def test_parameter_names_are_ordered_and_checked():
    cfg = toy_config("raw_audio")
    names = list(parameter_shapes(cfg))
    assert names[0] == "conv.0.weight" and names[-2:] == ["head.weight", "head.bias"]
    model = init_model(cfg)
    params = dict(model.params)
    params["head.bias"] = Tensor(np.zeros(4, np.float32))
    with pytest.raises(ConfigError):
        EmotionModel(cfg, params)


# -- attention and blocks ---------------------------------------------------------

def test_attention_rows_sum_to_one():
    cfg = toy_config("spectrogram")
    model = init_model(cfg)
    model.forward(toy_input(cfg))
    for w in model.attention_maps:
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_single_token_attention_is_value_path():
    cfg = toy_config("spectrogram")
    params = init_model(cfg).params
    x = Tensor(np.random.default_rng(2).standard_normal((1, 1, 8)).astype(np.float32))
    sink = []
    out = self_attention(params, "blocks.0.attn.", x, cfg, sink)
    np.testing.assert_array_equal(sink[0], 1.0)
    wq = params["blocks.0.attn.qkv.weight"].data
    bq = params["blocks.0.attn.qkv.bias"].data
    v = x.data[0, 0] @ wq[16:].T + bq[16:]
    expected = v @ params["blocks.0.attn.out.weight"].data.T + params["blocks.0.attn.out.bias"].data
    np.testing.assert_allclose(out.data[0, 0], expected, rtol=1e-5, atol=1e-7)


def test_identical_tokens_get_uniform_attention():
    cfg = toy_config("spectrogram")
    params = init_model(cfg).params
    row = np.random.default_rng(3).standard_normal(8)
    sink = []
    self_attention(params, "blocks.0.attn.", Tensor(np.tile(row, (1, 5, 1))), cfg, sink)
    np.testing.assert_allclose(sink[0], 0.2, atol=1e-12)


def test_zero_branches_are_identity():
    # with zero output projections both residual branches add nothing
    cfg = toy_config("spectrogram", n_layers=2)
    params = dict(init_model(cfg).params)
    for layer in range(2):
        for name in ("attn.out.weight", "attn.out.bias", "ffn.fc2.weight", "ffn.fc2.bias"):
            key = f"blocks.{layer}.{name}"
            params[key] = Tensor(np.zeros_like(params[key].data))
    x = np.random.default_rng(4).standard_normal((2, 5, 8)).astype(np.float32)
    np.testing.assert_array_equal(encode(params, Tensor(x), cfg).data, x)


def test_dropout_zero_train_equals_eval():
    cfg = toy_config("raw_audio", dropout=0.0)
    model = init_model(cfg)
    x = toy_input(cfg).astype(np.float32)
    train = model.forward(x, train=True, rng=np.random.default_rng(0)).data
    np.testing.assert_array_equal(train, model.logits(x))


def test_dropout_needs_rng_and_changes_output():
    cfg = toy_config("raw_audio", dropout=0.5)
    model = init_model(cfg)
    x = toy_input(cfg).astype(np.float32)
    with pytest.raises(ValueError):
        model.forward(x, train=True)
    a = model.forward(x, train=True, rng=np.random.default_rng(0)).data
    assert not np.allclose(a, model.logits(x))


def test_eval_is_deterministic():
    cfg = ModelConfig("raw_audio", 6, dropout=0.1)
    model = init_model(cfg)
    x = np.random.default_rng(0).standard_normal((2, 4000)).astype(np.float32)
    assert model.logits(x).tobytes() == model.logits(x).tobytes()


def test_zero_head_outputs_bias():
    cfg = toy_config("spectrogram")
    model = init_model(cfg)
    model.params["head.weight"].data[:] = 0
    model.params["head.bias"].data[:] = [0.5, -1.0, 2.0]
    np.testing.assert_array_equal(model.logits(toy_input(cfg)), [[0.5, -1.0, 2.0]] * 2)


def test_batch_rows_are_independent():
    cfg = toy_config("raw_audio")
    model = init_model(cfg)
    x = toy_input(cfg, batch=3).astype(np.float32)
    together = model.logits(x)
    alone = np.concatenate([model.logits(x[i:i + 1]) for i in range(3)])
    np.testing.assert_allclose(together, alone, rtol=1e-5, atol=1e-7)


def test_label_permutation_permutes_logits():
    cfg = toy_config("spectrogram")
    model = init_model(cfg, ("a", "b", "c"))
    model.params["head.bias"].data[:] = [0.1, 0.2, 0.3]
    x = toy_input(cfg)
    permuted = retarget(model, ("c", "a", "b"))
    np.testing.assert_array_equal(permuted.logits(x), model.logits(x)[:, [2, 0, 1]])


# -- gradients -------------------------------------------------------------------

def test_gradient_reaches_every_parameter():
    for pathway in ("raw_audio", "spectrogram"):
        cfg = toy_config(pathway)
        model = init_model(cfg)
        out = model.forward(toy_input(cfg).astype(np.float32))
        ad.backward(ad.cross_entropy(out, np.array([0, 2])))
        for name, t in model.params.items():
            if name == "pos_embed":
                used = 4  # both toy inputs give four tokens
                assert np.any(t.grad[:used]) and not np.any(t.grad[used:]), name
            else:
                assert t.grad is not None and np.any(t.grad), name


@pytest.mark.parametrize("pathway", ["raw_audio", "spectrogram"])
def test_full_pathway_grad_check(pathway):
    cfg = toy_config(pathway, dropout=0.2)
    names = list(parameter_shapes(cfg))
    rng = np.random.default_rng(7)
    # larger-than-default init keeps every gradient well above round-off
    init = [rng.uniform(0.5, 1.5, s) if n.endswith("gain") else rng.standard_normal(s) * 0.5
            for n, s in parameter_shapes(cfg).items()]
    x = toy_input(cfg, seed=8)

    def f(inputs, *leaves):
        logits = forward(dict(zip(names, leaves)), inputs, cfg, train=True, rng=np.random.default_rng(3))
        return ad.cross_entropy(logits, np.array([1, 2]))

    assert grad_check(lambda *leaves: f(Tensor(x), *leaves), init) <= COMPOSED_TOL
    # the input itself is differentiable as well
    assert grad_check(lambda inp: f(inp, *[Tensor(a) for a in init]), [x]) <= COMPOSED_TOL
