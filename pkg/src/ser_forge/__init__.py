"""Speech emotion recognition on a small numpy autodiff stack.

Two pathways share one transformer encoder: a convolutional raw-waveform
frontend and a log-mel patch frontend. Training, head swaps for cross-corpus
transfer, evaluation and a synthetic two-domain corpus generator are included.
"""

from .audio import AudioClip, condition, parse_wav, read_wav, resample, write_wav
from .data import SHEMO6, SRC4, DatasetManifest, LabelSet, load_manifest, split
from .errors import DivergenceError, SerForgeError
from .evaluation import ConfusionMatrix, Metrics, compute_metrics, confusion, evaluate
from .features import SpectrogramConfig, SpectrogramFrontend
from .model import EmotionModel, ModelConfig, init_model
from .pipeline import FeatureSet, Featurizer, featurize_split
from .synth import SynthSpec, domain_spec, synth_corpus
from .training import Checkpoint, TrainConfig, head_swap, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
