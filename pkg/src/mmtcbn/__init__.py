"""Multimodal translation with a text-modulated convolutional image network."""
import os as _os

# bound BLAS threads before numpy is first imported
if "MMT_THREADS" in _os.environ:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["MMT_THREADS"])

from . import numcore
from .bleu import bleu
from .config import VARIANTS, ModelConfig, desk_config, resnet50_config, variant_config
from .data import Batch, BPEModel, TextPipeline, Vocabulary, bpe_apply, bpe_learn, synth_corpus
from .errors import *  # noqa: F401,F403
from .model import MMTModel
from .training import Adam, Pipelines, Trainer, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
