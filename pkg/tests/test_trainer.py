import csv
import io
import json

import numpy as np
import pytest
import torch

from tssl import checkpoint as ckpt
from tssl.numerics import NumericalError
from tssl.trainer import (TrainConfig, attention_for, batch_indices, finetune, lr_at, pretrain,
                          pretext_forward)

from conftest import TOY_MODEL, toy_train


def test_lr_schedule():
    cfg = TrainConfig()
    assert lr_at(cfg, 3) == pytest.approx(8.5737e-4, abs=1e-8)
    for e in range(30):
        assert lr_at(cfg, e) == 1e-3 * 0.95**e


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(method="bogus")
    with pytest.raises(ValueError):
        TrainConfig(lr0=0)
    with pytest.raises(ValueError):
        TrainConfig(lr_decay_per_epoch=1.5)
    with pytest.raises(ValueError):
        TrainConfig(freeze_mode="all")
    cfg = TrainConfig(method="cl+")
    assert cfg.uwdb and cfg.base_method == "cl"
    assert attention_for("apc+") == "causal" and attention_for("mpc") == "none"


def test_batch_indices_deterministic_and_cover_data():
    a = batch_indices(10, 4, 5, seed=1, epoch=0)
    b = batch_indices(10, 4, 5, seed=1, epoch=0)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
    # the first 10 draws are a permutation of the data
    assert sorted(np.concatenate(a)[:8].tolist()) == sorted(set(np.concatenate(a)[:8].tolist()))
    assert not all(np.array_equal(x, y) for x, y in zip(a, batch_indices(10, 4, 5, seed=1, epoch=1)))


def scalar_adam(grads, lr, w0, b1=0.9, b2=0.999, eps=1e-8):
    """Textbook Adam on a single float, independent of torch."""
    w, m, v = w0, 0.0, 0.0
    for t, g_fn in enumerate(grads, start=1):
        g = g_fn(w)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        w = w - lr * mhat / (vhat**0.5 + eps)
    return w


def test_adam_matches_scalar_reference():
    w = torch.tensor([2.0], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.Adam([w], lr=1e-3, betas=(0.9, 0.999), eps=1e-8)
    for _ in range(50):
        opt.zero_grad()
        ((w - 0.5) ** 2 * 3.0).sum().backward()
        opt.step()
    ref = scalar_adam([lambda x: 6.0 * (x - 0.5)] * 50, 1e-3, 2.0)
    assert abs(w.item() - ref) < 1e-12


@pytest.mark.parametrize("method", ["apc", "mpc", "cl"])
def test_pretext_losses_finite(method, toy_corpus):
    frames, _ = toy_corpus
    from tssl.trainer import build_model

    cfg = toy_train(method=method, precision="float64")
    m = build_model(TOY_MODEL, cfg, frames)
    loss, blocks = pretext_forward(m, torch.from_numpy(frames[:4]), cfg, 0)
    assert torch.isfinite(loss) and len(blocks) == 3


def test_pretrain_deterministic(tmp_path, toy_corpus):
    frames, _ = toy_corpus
    cfg = toy_train(precision="float64")
    _, a = pretrain(cfg, frames, TOY_MODEL, tmp_path / "a")
    _, b = pretrain(cfg, frames, TOY_MODEL, tmp_path / "b")
    assert (tmp_path / "a/log.csv").read_bytes() == (tmp_path / "b/log.csv").read_bytes()
    assert ckpt.file_digest(a.checkpoints[-1]) == ckpt.file_digest(b.checkpoints[-1])
    rows = list(csv.DictReader(io.StringIO((tmp_path / "a/log.csv").read_text())))
    assert list(rows[0]) == ["epoch", "step", "loss", "lr"]
    assert [int(r["epoch"]) for r in rows] == sorted(int(r["epoch"]) for r in rows)
    assert (tmp_path / "a/timing.csv").exists()
    assert sorted(p.name for p in (tmp_path / "a").glob("ckpt-epoch-*.bin")) == ["ckpt-epoch-0.bin",
                                                                                "ckpt-epoch-1.bin"]
    assert json.loads((tmp_path / "a/config.json").read_text())["train"]["seed"] == 3


def test_pretrain_seed_changes_run(toy_corpus):
    frames, _ = toy_corpus
    _, a = pretrain(toy_train(precision="float64"), frames, TOY_MODEL)
    _, b = pretrain(toy_train(precision="float64", seed=4), frames, TOY_MODEL)
    assert a.epoch_means() != b.epoch_means()


def test_apc_loss_decreases(toy_corpus):
    frames, _ = toy_corpus
    _, run = pretrain(toy_train(steps_per_epoch=25, lr0=3e-3), frames, TOY_MODEL)
    first, second = run.epoch_means()
    assert second < first


def test_two_step_lineage_and_audit(tmp_path, toy_corpus):
    frames, _ = toy_corpus
    m, run = pretrain(toy_train(method="mpc+", audit_frozen=True), frames, TOY_MODEL, tmp_path)
    step1 = tmp_path / "step1" / "ckpt-epoch-1.bin"
    assert run.lineage == [ckpt.file_digest(step1)]
    assert run.audit["frozen_grad_max_abs"] == 0.0 and run.audit["frozen_unchanged"] == 1.0
    meta, records = ckpt.load(run.checkpoints[-1])
    assert meta["kind"] == "uwdb"
    assert all(ro for n, (_, ro) in records.items() if n.startswith("lwt2."))
    assert not any(ro for n, (_, ro) in records.items() if not n.startswith("lwt2."))
    header = (tmp_path / "log.csv").read_text().splitlines()[0]
    assert header == "epoch,step,loss,lr,loss_s3rl,loss_utt"
    # the uwdb checkpoint loads as a plain encoder (trainable tower)
    enc, _ = ckpt.load_model(run.checkpoints[-1])
    assert torch.equal(enc.decoder.weight, m.decoder.weight.float())


def test_step1_method_must_match(tmp_path, toy_corpus):
    frames, _ = toy_corpus
    _, r = pretrain(toy_train(method="mpc"), frames, TOY_MODEL, tmp_path / "mpc")
    with pytest.raises(ValueError, match="step-1"):
        pretrain(toy_train(method="apc+"), frames, TOY_MODEL, tmp_path / "x", step1_checkpoint=r.checkpoints[-1])


def test_nonfinite_loss_aborts(toy_corpus):
    frames, _ = toy_corpus
    bad = frames.copy()
    bad[5, 3, 7] = np.nan
    with pytest.raises(NumericalError, match="step 0"):
        pretrain(toy_train(batch_size=32), bad, TOY_MODEL)


def test_finetune_frozen_encoder(tmp_path, toy_corpus):
    frames, labels = toy_corpus
    _, r = pretrain(toy_train(), frames, TOY_MODEL, tmp_path / "pt")
    before, _ = ckpt.load_model(r.checkpoints[-1], classifier_classes=2)
    model, run = finetune(toy_train(freeze_mode="encoder_frozen"), frames, labels, 2, r.checkpoints[-1],
                          out_dir=tmp_path / "ft")
    after = dict(model.named_parameters())
    for n, p in before.named_parameters():
        if not n.startswith("classifier."):
            assert torch.equal(p, after[n]), n
    assert not torch.equal(before.classifier.weight, after["classifier.weight"])
    assert run.lineage == [ckpt.file_digest(r.checkpoints[-1])]


def test_finetune_scratch_learns_separable_toy(toy_corpus):
    frames, labels = toy_corpus
    _, run = finetune(toy_train(epochs_finetune=10, steps_per_epoch=8, lr0=3e-3), frames, labels, 2)
    assert run.metrics["train_accuracy"][-1] > 0.95


def test_finetune_label_checks(toy_corpus):
    frames, labels = toy_corpus
    with pytest.raises(ValueError):
        finetune(toy_train(), frames, labels + 5, 2)


def test_finetune_class_count_mismatch(tmp_path, toy_corpus):
    frames, labels = toy_corpus
    _, r = finetune(toy_train(epochs_finetune=1), frames, labels, 2, out_dir=tmp_path)
    with pytest.raises(ValueError, match="class count"):
        finetune(toy_train(epochs_finetune=1), frames, labels, 3, r.checkpoints[-1])
