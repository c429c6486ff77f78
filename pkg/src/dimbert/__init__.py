"""Vision-language transformer with disentangled visual/textual attention projections.

A numpy reverse-mode autodiff engine, a procedural scene world, the
multimodal encoder with BLM and S2SLM masked-language objectives, caption
decoding, referring-expression grounding, and a training/evaluation harness.
"""

from .config import MODES, ModelConfig
from .decoding import GenerationConfig, beam_decode, greedy_decode
from .transformer import DiMBERT
from .trainer import Checkpoint, RunConfig, average_checkpoints, load_checkpoint, save_checkpoint
from .vocab import Special, Vocabulary
from .world import WorldConfig, default_vocabulary, generate_corpus

__version__ = "0.1.0"

__all__ = [
    "MODES",
    "ModelConfig",
    "GenerationConfig",
    "beam_decode",
    "greedy_decode",
    "DiMBERT",
    "Checkpoint",
    "RunConfig",
    "average_checkpoints",
    "load_checkpoint",
    "save_checkpoint",
    "Special",
    "Vocabulary",
    "WorldConfig",
    "default_vocabulary",
    "generate_corpus",
]
