"""Desk-scale experiment drivers: curriculum-vs-scratch and the transfer
unfreezing ladder.

Real handwriting corpora cannot be bundled, so these experiments run on
procedurally generated documents. They reproduce the published trends
(curriculum ordering beats from-scratch; deeper unfreezing helps transfer)
rather than the published error magnitudes.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

from .curriculum import (
    CurriculumStageSpec,
    DatasetManifest,
    GlyphStyle,
    TextPool,
    build_stage_dataset,
    make_line_pool,
)
from .evaluation import evaluate_dataset
from .model import Model, ModelConfig, build_model
from .training import (
    TrainConfig,
    TrainHistory,
    pool_manifests,
    table3_ladder,
    train_from_scratch,
    train_stage,
    transfer_finetune,
)
from .vocab import Vocabulary, build_vocabulary


@dataclass
class SyntheticTask:
    """Generated curriculum stages plus a held-out test set of target-domain
    pages, all drawn with one glyph style."""

    s1: DatasetManifest
    s2: DatasetManifest
    s3: DatasetManifest
    test: DatasetManifest
    vocab: Vocabulary
    style: GlyphStyle


def build_synthetic_task(
    out_dir,
    alphabet: str = "abcdefghij",
    s1_count: int = 500,
    s2_count: int = 500,
    s3_count: int = 300,
    test_count: int = 60,
    s1_size: tuple[int, int] = (128, 128),
    page_size: tuple[int, int] = (256, 256),
    page_lines: tuple[int, int] = (3, 6),
    words_per_line: tuple[int, int] = (1, 2),
    word_len: tuple[int, int] = (2, 4),
    style: GlyphStyle = GlyphStyle(height=24),
    seed: int = 0,
) -> SyntheticTask:
    """Scaled-down stage geometry: small word blocks for stage 1, multi-line
    pages for stage 2, and target pages (same distribution, disjoint seeds)
    for stage 3 and the held-out test set."""
    words = TextPool.synthetic_words(alphabet, 60, word_len, seed=seed, style=style)
    lines = make_line_pool(words, 200, words_per_line, seed=seed + 1)
    s1_spec = CurriculumStageSpec("s1", s1_count, s1_size, (1, 3), (1, 2), seed=seed + 10)
    s2_spec = CurriculumStageSpec("s2", s2_count, page_size, page_lines, seed=seed + 20)
    s3_spec = CurriculumStageSpec("s2", s3_count, page_size, page_lines, seed=seed + 30)
    test_spec = CurriculumStageSpec("s2", test_count, page_size, page_lines, seed=seed + 40)
    s1 = build_stage_dataset(s1_spec, words, os.path.join(out_dir, "s1"))
    s2 = build_stage_dataset(s2_spec, lines, os.path.join(out_dir, "s2"))
    s3 = build_stage_dataset(s3_spec, lines, os.path.join(out_dir, "s3"))
    test = build_stage_dataset(test_spec, lines, os.path.join(out_dir, "test"))
    vocab = build_vocabulary(
        s1.transcripts() + s2.transcripts() + s3.transcripts() + test.transcripts()
    )
    return SyntheticTask(s1, s2, s3, test, vocab, style)


def run_curriculum_arm(
    task: SyntheticTask,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    stage_steps: tuple[int, int, int],
) -> tuple[Model, float]:
    """S1 -> S2 -> S3 with a fixed step budget per stage; returns the final
    model and its held-out test CER."""
    model = build_model(model_cfg, task.vocab, seed=cfg.seed)
    for manifest, steps in zip((task.s1, task.s2, task.s3), stage_steps):
        stage_cfg = replace(cfg, max_steps=steps, max_epochs=10**6)
        model, _ = train_stage(model, manifest, stage_cfg)
    return model, evaluate_dataset(model, task.test, cfg.batch_size).corpus_cer


def run_from_scratch_arm(
    task: SyntheticTask,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    total_steps: int,
) -> tuple[Model, float]:
    """The FS baseline: pooled stage data, single stage, equal step budget."""
    pooled = pool_manifests(task.s1, task.s2, task.s3)
    fs_cfg = replace(cfg, max_steps=total_steps, max_epochs=10**6, val_fraction=0.0)
    model, _ = train_from_scratch(model_cfg, task.vocab, pooled, fs_cfg)
    return model, evaluate_dataset(model, task.test, cfg.batch_size).corpus_cer


def run_transfer_ladder(
    source: Model,
    target_train: DatasetManifest,
    target_test: DatasetManifest,
    cfg: TrainConfig,
    rungs: list[tuple[str, list[str]]] | None = None,
) -> list[tuple[str, float, Model]]:
    """Fine-tune the source model on the target domain once per rung, each
    rung independently from the source weights; returns (rung, test CER,
    model) rows in ladder order."""
    if rungs is None:
        rungs = table3_ladder(source.config)
    target_vocab = build_vocabulary(
        target_train.transcripts() + target_test.transcripts()
    )
    rows = []
    for name, groups in rungs:
        model, _ = transfer_finetune(source, target_vocab, target_train, groups, cfg)
        rows.append((name, evaluate_dataset(model, target_test, cfg.batch_size).corpus_cer, model))
    return rows
