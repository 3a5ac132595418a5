"""Self-supervised pretraining with utterance-wise distinction boosting for small keyword spotters."""

from .features import SynthCorpusSpec, compute_lfbe, synthesize_corpus
from .model import EncoderModel, ModelConfig, count_params
from .trainer import TrainConfig, finetune, pretrain

__version__ = "0.1.0"
__all__ = [
    "SynthCorpusSpec", "compute_lfbe", "synthesize_corpus",
    "EncoderModel", "ModelConfig", "count_params",
    "TrainConfig", "finetune", "pretrain",
]
