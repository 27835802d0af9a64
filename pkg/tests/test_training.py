import copy
import math

import numpy as np
import pytest
import torch

from litehtr.curriculum import DatasetManifest
from litehtr.evaluation import evaluate_dataset
from litehtr.model import PRESETS, build_model, load_checkpoint, save_checkpoint
from litehtr.training import (
    TrainConfig,
    TrainingError,
    apply_freeze,
    cross_entropy_loss,
    load_samples,
    pool_manifests,
    prepare_rtl,
    split_manifest,
    table3_ladder,
    train_stage,
    transfer_finetune,
)
from litehtr.vocab import build_vocabulary, encode_transcript


@pytest.fixture(scope="module")
def block_vocab(tiny_block_dataset):
    return build_vocabulary(tiny_block_dataset.transcripts())


@pytest.fixture()
def tiny_trained(tiny_block_dataset, block_vocab):
    model = build_model(PRESETS["tiny"], block_vocab, seed=0)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=2, seed=0)
    return train_stage(model, tiny_block_dataset, cfg)


# ---- loss -----------------------------------------------------------------


def test_loss_one_hot_limit():
    targets = torch.tensor([[0, 2, 1]])
    logits = torch.full((1, 3, 4), -100.0)
    for i, t in enumerate(targets[0]):
        logits[0, i, t] = 100.0
    loss = cross_entropy_loss(logits, targets, pad_id=4)
    assert float(loss) < 1e-6


def test_loss_uniform_is_log_nb_class():
    logits = torch.zeros(1, 5, 7)
    targets = torch.randint(0, 7, (1, 5))
    loss = cross_entropy_loss(logits, targets, pad_id=7)
    assert abs(float(loss) - math.log(7)) < 1e-6


def test_loss_pad_positions_ignored():
    torch.manual_seed(0)
    logits = torch.randn(1, 3, 5)
    targets = torch.tensor([[0, 4, 2]])
    base = float(cross_entropy_loss(logits, targets, pad_id=5))
    padded_logits = torch.cat([logits, torch.randn(1, 2, 5)], dim=1)
    padded_targets = torch.cat([targets, torch.full((1, 2), 5)], dim=1)
    assert abs(float(cross_entropy_loss(padded_logits, padded_targets, pad_id=5)) - base) < 1e-6


def test_loss_all_pad_rejected():
    with pytest.raises(TrainingError, match="all-pad"):
        cross_entropy_loss(torch.zeros(1, 2, 3), torch.full((1, 2), 3), pad_id=3)


def test_loss_rejects_out_of_range_targets():
    with pytest.raises(TrainingError):
        cross_entropy_loss(torch.zeros(1, 1, 3), torch.tensor([[9]]), pad_id=3)


# ---- train_stage ----------------------------------------------------------


def test_lr_zero_leaves_parameters(tiny_block_dataset, block_vocab):
    model = build_model(PRESETS["tiny"], block_vocab, seed=1)
    before = copy.deepcopy(model.state_dict())
    cfg = TrainConfig(learning_rate=0.0, batch_size=4, max_epochs=2, seed=0)
    model, _ = train_stage(model, tiny_block_dataset, cfg)
    after = model.state_dict()
    for k in before:
        assert torch.equal(before[k], after[k]), k


def test_fixed_seed_reproducible_history(tiny_block_dataset, block_vocab):
    histories = []
    for _ in range(2):
        model = build_model(PRESETS["tiny"], block_vocab, seed=3)
        cfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=3, seed=3)
        _, h = train_stage(model, tiny_block_dataset, cfg)
        histories.append([(e.epoch, e.train_loss, e.val_cer) for e in h.epochs])
    assert histories[0] == histories[1]


def test_training_reduces_loss(tiny_block_dataset, block_vocab):
    model = build_model(PRESETS["tiny"], block_vocab, seed=0)
    cfg = TrainConfig(learning_rate=1e-3, batch_size=4, max_epochs=12, seed=0)
    _, h = train_stage(model, tiny_block_dataset, cfg)
    assert h.epochs[-1].train_loss < h.epochs[0].train_loss


def test_empty_manifest_rejected(block_vocab):
    model = build_model(PRESETS["tiny"], block_vocab, seed=0)
    with pytest.raises(TrainingError, match="empty"):
        train_stage(model, DatasetManifest(), TrainConfig())


def test_early_stopping_halts_near_best(tiny_block_dataset, block_vocab):
    model = build_model(PRESETS["tiny"], block_vocab, seed=0)
    val = DatasetManifest(list(tiny_block_dataset.records[:2]))
    cfg = TrainConfig(learning_rate=0.0, batch_size=4, max_epochs=50,
                      early_stop_patience=3, seed=0)
    _, h = train_stage(model, tiny_block_dataset, cfg, val=val)
    # lr 0: no improvement ever, so training stops after `patience` epochs
    last = h.epochs[-1].epoch
    assert last - h.best_epoch <= 3
    assert len(h.epochs) <= 5


# ---- config ---------------------------------------------------------------


def test_train_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(learning_rate=-1.0)
    with pytest.raises(TrainingError):
        TrainConfig(early_stop_patience=0)


def test_transfer_default_lr():
    cfg = TrainConfig.transfer_default()
    assert cfg.learning_rate == 1e-5
    assert cfg.mode == "transfer"


# ---- freeze ladder --------------------------------------------------------


def test_ladder_structure():
    rungs = table3_ladder(PRESETS["lite"])
    assert len(rungs) == 6
    names = [n for n, _ in rungs]
    assert names[0] == "fc_embed" and names[-1] == "full"
    # cumulative: each rung is a superset of the previous
    for (_, a), (_, b) in zip(rungs, rungs[1:]):
        assert set(a) < set(b)
    assert set(rungs[-1][1]) == {
        "output_head", "embedding",
        "decoder_layer[1]", "decoder_layer[0]",
        "encoder_layer[1]", "encoder_layer[0]",
        "backbone", "projection_1x1",
    }
    # decoder unfreezes last-to-first, before any encoder layer
    assert "decoder_layer[1]" in rungs[1][1] and "decoder_layer[0]" not in rungs[1][1]
    assert "encoder_layer[1]" in rungs[3][1] and "encoder_layer[0]" not in rungs[3][1]


def test_apply_freeze_unknown_group(block_vocab):
    model = build_model(PRESETS["tiny"], block_vocab, seed=0)
    with pytest.raises(TrainingError, match="unknown group"):
        apply_freeze(model, ["nope"])


def test_transfer_freeze_isolation(tiny_trained, tiny_block_dataset, block_vocab):
    source, _ = tiny_trained
    cfg = TrainConfig.transfer_default(learning_rate=1e-3, batch_size=4,
                                       max_epochs=2, seed=7)
    model, _ = transfer_finetune(
        source, block_vocab, tiny_block_dataset, ["output_head", "embedding"], cfg
    )
    groups = model.parameter_groups()
    src_groups = source.parameter_groups()
    for gname, params in groups.items():
        src = dict(src_groups[gname])
        for name, p in params:
            if gname in ("output_head", "embedding"):
                continue
            assert torch.equal(p, src[name]), f"{gname}/{name} changed"
    # the trainable groups did move
    assert not torch.equal(
        dict(groups["output_head"])["output_head.weight"],
        dict(src_groups["output_head"])["output_head.weight"],
    )


def test_transfer_full_ladder_updates_everything(tiny_trained, tiny_block_dataset, block_vocab):
    source, _ = tiny_trained
    rungs = table3_ladder(source.config)
    cfg = TrainConfig.transfer_default(learning_rate=1e-2, batch_size=4,
                                       max_epochs=1, seed=8)
    model, _ = transfer_finetune(
        source, block_vocab, tiny_block_dataset, rungs[-1][1], cfg
    )
    for (gname, params), (_, src_params) in zip(
        model.parameter_groups().items(), source.parameter_groups().items()
    ):
        changed = any(
            not torch.equal(p, sp) for (_, p), (_, sp) in zip(params, src_params)
        )
        assert changed, f"group {gname} did not update under the full rung"


# ---- RTL ------------------------------------------------------------------


def test_prepare_rtl_involution(tiny_block_dataset, tmp_path):
    once = prepare_rtl(tiny_block_dataset, tmp_path / "one")
    twice = prepare_rtl(once, tmp_path / "two")
    assert len(once) == len(twice) == len(tiny_block_dataset)
    for orig, back in zip(tiny_block_dataset, twice):
        with open(orig.image_path, "rb") as a, open(back.image_path, "rb") as b:
            assert a.read() == b.read()
        assert orig.transcript == back.transcript


def test_prepare_rtl_resize(tiny_block_dataset, tmp_path):
    out = prepare_rtl(tiny_block_dataset, tmp_path / "r", resize_to=(512, 2048))
    from litehtr.imaging import load_image

    img = load_image(out.records[0].image_path)
    assert (img.height, img.width) == (512, 2048)


# ---- splits and pooling ---------------------------------------------------


def test_split_stable_and_disjoint(tiny_block_dataset):
    a_train, a_val = split_manifest(tiny_block_dataset, 0.25, seed=1)
    b_train, b_val = split_manifest(tiny_block_dataset, 0.25, seed=1)
    assert a_train.records == b_train.records and a_val.records == b_val.records
    assert len(a_train) + len(a_val) == len(tiny_block_dataset)
    paths = {r.image_path for r in a_train} | {r.image_path for r in a_val}
    assert len(paths) == len(tiny_block_dataset)


def test_split_order_independent(tiny_block_dataset):
    shuffled = DatasetManifest(list(reversed(tiny_block_dataset.records)))
    a_train, _ = split_manifest(tiny_block_dataset, 0.25, seed=2)
    b_train, _ = split_manifest(shuffled, 0.25, seed=2)
    assert {r.image_path for r in a_train} == {r.image_path for r in b_train}


def test_pool_manifests(tiny_block_dataset):
    pooled = pool_manifests(tiny_block_dataset, tiny_block_dataset)
    assert len(pooled) == 2 * len(tiny_block_dataset)


# ---- checkpoint round trip through evaluation ------------------------------


def test_checkpoint_preserves_validation_cer(tiny_trained, tiny_block_dataset, tmp_path):
    model, _ = tiny_trained
    report_a = evaluate_dataset(model, tiny_block_dataset, batch_size=4)
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    model2 = load_checkpoint(path)
    report_b = evaluate_dataset(model2, tiny_block_dataset, batch_size=4)
    assert report_a.corpus_cer == report_b.corpus_cer
    assert [s.cer for s in report_a.samples] == [s.cer for s in report_b.samples]
