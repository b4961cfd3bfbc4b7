"""Align audio tokens with frozen text and vision-text embedding spaces.

Lightweight adapters and attention poolers map audio-encoder tokens into a
text-encoder sequence space and a vision-language vector space, trained
with MSE against caption encodings from frozen (here: stub) encoders.
"""

from .alignment import AlignmentModel, ConditioningPair, ModelConfig, alignment_loss, forward
from .augmentation import (AudioTransformSpec, CaptionRules, apply_gain, apply_pitch_shift, apply_reverb, mix,
                           compose_captions, transform_caption, volume_label)
from .config import ExperimentConfig, TrainingConfig, load_config
from .encoders import AudioClip, EmbeddingArchive, EncoderConfig, FrozenEncoders
from .errors import SoundAlignError
from .evaluation import RetrievalReport, evaluate_retrieval, mix_probe, mix_probe_grid, volume_probe
from .training import Checkpoint, Corpus, generate_synthetic_corpus, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"

__all__ = [
    "AlignmentModel", "AudioClip", "AudioTransformSpec", "CaptionRules", "Checkpoint", "ConditioningPair",
    "Corpus", "EmbeddingArchive", "EncoderConfig", "ExperimentConfig", "FrozenEncoders", "ModelConfig",
    "RetrievalReport", "SoundAlignError", "TrainingConfig", "alignment_loss", "apply_gain", "apply_pitch_shift",
    "apply_reverb", "compose_captions", "evaluate_retrieval", "forward", "generate_synthetic_corpus",
    "load_checkpoint", "load_config", "mix", "mix_probe", "mix_probe_grid", "save_checkpoint", "train",
    "transform_caption", "volume_label", "volume_probe",
]
