"""A walk through the two input pathways on one synthetic clip.

Run: python3 demos/01_frontend_tour.py
"""

import numpy as np

from ser_forge.audio import condition
from ser_forge.features import SpectrogramFrontend, hz_to_mel, patchify
from ser_forge.model import ModelConfig, as_model_input, init_model
from ser_forge.synth import domain_spec, synth_clip

# %% one "anger" clip from the target domain, 1-6 s long
spec = domain_spec("tgt")
clip = synth_clip(spec, "anger", index=0, seed=0)
print(f"{clip.source_id}: {len(clip) / clip.sample_rate:.2f} s, f0 ~ {spec.fundamental('anger'):.0f} Hz")

# %% every input is conditioned to 5 s at 16 kHz (zero-padded or truncated)
fixed = condition(clip)
print("conditioned samples:", len(fixed))

# %% spectrogram pathway: 25 ms hann frames every 10 ms, 128 mel bands, ln power
front = SpectrogramFrontend()
mel = front(fixed)
print("log-mel grid:", mel.values.shape, "(498 frames padded to 512)")
print("mel(700 Hz) =", round(float(hz_to_mel(700.0)), 2))
floor = np.log(1e-10)
print(f"cells at the ln(1e-10) floor: {np.mean(mel.values == floor):.0%}")

# %% 16x16 patches with stride 10 -> 12 x 50 = 600 tokens, plus one class token
seq = patchify(mel.values)
print("patches:", seq.patches.shape, "grid", (seq.n_freq_patches, seq.n_time_patches))

# %% raw pathway: the strided conv stack turns 80000 samples into 249 frames
raw = init_model(ModelConfig("raw_audio", 6))
raw.forward(as_model_input(fixed, raw.config))
print("raw encoder tokens:", raw.attention_maps[0].shape[-1])

spectro = init_model(ModelConfig("spectrogram", 6))
spectro.forward(as_model_input(seq, spectro.config))
print("spectrogram encoder tokens:", spectro.attention_maps[0].shape[-1])
