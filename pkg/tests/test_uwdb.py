import math

import numpy as np
import pytest
import torch

from tssl.model import EncoderModel
from tssl.quantizer import Quantizer
from tssl.uwdb import (Booster, UwdbConfig, anchor, combined_loss, pool_tap, utt_loss, utterance_embed)

from conftest import TOY_MODEL


def test_pool_tap_examples():
    blocks = [torch.zeros(1, 2, 2), torch.tensor([[[1.0, 3.0], [3.0, 1.0]]]), torch.zeros(1, 2, 2)]
    assert pool_tap(blocks, 2).tolist() == [[2.0, 2.0]]
    const = torch.tensor([0.5, -1.0]).expand(1, 7, 2)
    assert torch.equal(pool_tap([const], 1), torch.tensor([[0.5, -1.0]]))
    with pytest.raises(ValueError):
        pool_tap(blocks, 4)


def test_config_validation():
    with pytest.raises(ValueError):
        UwdbConfig(alpha=1.5)
    with pytest.raises(ValueError):
        UwdbConfig(tap_layer=0)


def _codebook(v=32, d=8, seed=0):
    torch.manual_seed(seed)
    return Quantizer(d, d, v).double()


def test_anchor_pair_structure():
    cb = _codebook()
    u2 = torch.randn(5, 8, dtype=torch.float64)
    q, pair = anchor(u2, cb, train_mode=True, generator=torch.Generator().manual_seed(0))
    assert pair.negatives.shape == (5, 31, 8)
    for b in range(5):
        k = pair.index[b].item()
        assert torch.equal(pair.positive[b], cb.entries[0, k])
        assert torch.equal(pair.negatives[b], torch.cat([cb.entries[0, :k], cb.entries[0, k + 1:]]))


def test_anchor_eval_mode_argmax():
    cb = _codebook(v=8)
    with torch.no_grad():
        cb.logits_proj.weight.zero_()
        cb.logits_proj.bias.zero_()
        cb.logits_proj.bias[5] = 3.0
    _, pair = anchor(torch.randn(3, 8, dtype=torch.float64), cb, train_mode=False)
    assert pair.index.tolist() == [5, 5, 5]


def test_identical_embeddings_identical_anchors():
    cb = _codebook()
    u = torch.randn(1, 8, dtype=torch.float64).expand(4, 8)
    _, pair = anchor(u, cb, train_mode=False)
    assert len(set(pair.index.tolist())) == 1


def _orthogonal_setup(v, pos_sim, neg_sim):
    """Codebook whose entry 0 has cosine ``pos_sim`` with u1 and all others ``neg_sim``."""
    d = 4
    cb = Quantizer(d, d, v).double()
    u1 = torch.tensor([[1.0, 0, 0, 0]], dtype=torch.float64)

    def vec(c):
        return torch.tensor([c, math.sqrt(1 - c * c), 0, 0], dtype=torch.float64)

    with torch.no_grad():
        cb.entries[0] = vec(neg_sim)
        cb.entries[0, 0] = vec(pos_sim)
        cb.logits_proj.weight.zero_()
        cb.logits_proj.bias.zero_()
        cb.logits_proj.bias[0] = 10.0
    q = cb(torch.zeros(1, d, dtype=torch.float64), train_mode=False)
    return u1, q, cb


def test_utt_loss_equal_similarities():
    u1, q, cb = _orthogonal_setup(32, 0.2, 0.2)
    assert utt_loss(u1, q, cb, 0.1, beta=0.0).item() == pytest.approx(math.log(32), abs=1e-9)
    assert math.log(32) == pytest.approx(3.4657, abs=1e-4)


def test_utt_loss_separated():
    u1, q, cb = _orthogonal_setup(32, 1.0, -1.0)
    val = utt_loss(u1, q, cb, 0.1, beta=0.0).item()
    assert val == pytest.approx(math.log1p(31 * math.exp(-20)), rel=1e-6)
    assert val == pytest.approx(6.4e-8, rel=0.05)


def test_utt_loss_zero_embedding_finite():
    cb = _codebook()
    q = cb(torch.randn(2, 8, dtype=torch.float64), train_mode=False)
    val = utt_loss(torch.zeros(2, 8, dtype=torch.float64), q, cb, beta=0.0)
    # every similarity is 0, so the infoNCE part is log V
    assert torch.isfinite(val)
    assert val.item() == pytest.approx(math.log(32), abs=1e-9)


def test_combined_loss_examples():
    assert combined_loss(2.0, 1.0, 0.9) == pytest.approx(1.9, abs=1e-15)
    a, b = torch.tensor(1.234, dtype=torch.float64), torch.tensor(9.87, dtype=torch.float64)
    assert torch.equal(combined_loss(a, b, 1.0), a)
    rng = np.random.default_rng(0)
    for _ in range(100):
        x, y, al = rng.normal(), rng.normal(), rng.uniform()
        assert combined_loss(x, y, al) == pytest.approx(al * x + (1 - al) * y, abs=1e-12)
        # linear in each argument
        assert combined_loss(x + 1, y, al) - combined_loss(x, y, al) == pytest.approx(al, abs=1e-12)
        assert combined_loss(x, y + 1, al) - combined_loss(x, y, al) == pytest.approx(1 - al, abs=1e-12)


def test_booster_freezes_copy():
    torch.manual_seed(0)
    base = EncoderModel(TOY_MODEL).double()
    b = Booster(base, UwdbConfig(codebook_size=8)).double()
    assert all(not p.requires_grad for p in b.frozen.parameters())
    assert b.frozen is not base
    feats = torch.randn(2, 12, 64, dtype=torch.float64)
    u2 = b.frozen_embedding(feats, "none")
    assert not u2.requires_grad
    # updating the trainable model leaves the frozen copy, and u2, unchanged
    with torch.no_grad():
        for p in base.parameters():
            p.add_(1.0)
    assert torch.equal(b.frozen_embedding(feats, "none"), u2)
    assert torch.allclose(u2, utterance_embed(b.frozen, feats, 2, "none"))


def test_utterance_embed_uses_mask():
    torch.manual_seed(0)
    m = EncoderModel(TOY_MODEL).double()
    feats = torch.randn(1, 12, 64, dtype=torch.float64)
    mask = torch.zeros(1, 12, dtype=torch.bool)
    mask[0, :6] = True
    assert not torch.equal(utterance_embed(m, feats), utterance_embed(m, feats, mask=mask))
