"""Glancing Transformer: glancing language model training for parallel sequence transduction."""

from .config import ExperimentConfig, default_config
from .data import SentencePair, SynthTaskSpec, bleu, generate_corpus, repetition_ratio
from .decode import DecodeConfig, DecodeResult, decode_corpus
from .errors import CheckpointError, ConfigError, ContractError, DimensionError, GlatError
from .glm import GlancingConfig
from .model import ModelConfig, ModelParams, init_params

__version__ = "0.1.0"
