import numpy as np
import pytest

from tssl.features import SynthCorpusSpec, stack_frames, synthesize_corpus
from tssl.model import ModelConfig
from tssl.trainer import TrainConfig

TOY_MODEL = ModelConfig(d_model=16, n_heads=2, ffn_dim=24, conv_channels=(2, 4, 4))


def toy_train(**kw) -> TrainConfig:
    base = dict(method="apc", epochs_pretrain=2, epochs_uwdb=2, epochs_finetune=2, batch_size=8,
                steps_per_epoch=4, apc_shift=2, codebook_size=8, utt_codebook_size=8, seed=3)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def toy_corpus():
    utts = synthesize_corpus(SynthCorpusSpec(num_classes=2, utterances_per_class=16, utterance_sec=0.2,
                                             seed=1, noise_level=0.3))
    return stack_frames(utts), np.array([u.label for u in utts])
