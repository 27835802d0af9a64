"""Command-line pipeline driver.

Commands: synth | train | transfer | eval | infer | dump-config.

Configuration is a flat key=value text file; command-line flags win over the
file, which wins over built-in defaults. The MSDOCTR_SEED environment
variable supplies the seed when neither a flag nor the config names one.
Every command is deterministic given (config, seed): rerunning with the
same inputs reproduces its outputs.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training
divergence.
"""

from __future__ import annotations

import json
import os
import shutil
import sys

import click

from .curriculum import (
    CurriculumStageSpec,
    DatasetManifest,
    GenerationError,
    GlyphStyle,
    TextPool,
    build_stage_dataset,
    make_line_pool,
    stage_defaults,
)
from .evaluation import evaluate_dataset
from .experiments import run_transfer_ladder
from .imaging import ImagingError, flip_horizontal, load_image
from .model import (
    PRESETS,
    ModelError,
    batch_to_tensors,
    build_model,
    greedy_decode,
    load_checkpoint,
    save_checkpoint,
)
from .training import (
    TrainConfig,
    TrainingError,
    pool_manifests,
    prepare_rtl,
    split_manifest,
    table3_ladder,
    train_stage,
)
from .imaging import pad_batch
from .vocab import VocabularyError, build_vocabulary, decode_tokens

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGENCE = 4

DEFAULTS: dict[str, str] = {
    "model.preset": "lite",
    "train.learning_rate": "0.0001",
    "train.transfer_learning_rate": "0.00001",
    "train.batch_size.small_images": "8",
    "train.batch_size.large_images": "2",
    "train.max_epochs": "100",
    "train.early_stop_patience": "10",
    "train.val_fraction": "0.02",
    "synth.alphabet": "abcdefghijklmnopqrstuvwxyz",
    "synth.words_per_pool": "500",
    "synth.glyph_height": "32",
    "synth.style_variant": "0",
    "synth.word_len": "2-5",
    "s1.count": "50000",
    "s1.image_size": "256x256",
    "s1.lines": "1-4",
    "s1.words_per_line": "1-4",
    "s2.count": "78000",
    "s2.image_size": "1024x1024",
    "s2.lines": "3-14",
    "rtl.resize": "512x2048",
    "seed": "0",
}


class ConfigError(Exception):
    pass


def load_config(path: str | None, overrides: tuple[str, ...]) -> dict[str, str]:
    cfg = dict(DEFAULTS)
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                for lineno, line in enumerate(f, 1):
                    line = line.strip()
                    if not line or line.startswith("#"):
                        continue
                    if "=" not in line:
                        raise ConfigError(f"{path}:{lineno}: expected key=value")
                    key, value = line.split("=", 1)
                    cfg[key.strip()] = value.strip()
        except OSError as e:
            raise ConfigError(str(e)) from e
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        cfg[key.strip()] = value.strip()
    return cfg


def resolve_seed(flag: int | None, cfg: dict[str, str]) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("MSDOCTR_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as e:
            raise ConfigError(f"MSDOCTR_SEED must be an integer, got {env!r}") from e
    return int(cfg["seed"])


def parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError as e:
        raise ConfigError(f"expected HxW size, got {text!r}") from e


def parse_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = text.split("-")
        return int(lo), int(hi)
    except ValueError as e:
        raise ConfigError(f"expected LO-HI range, got {text!r}") from e


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guarded(fn):
    """Map domain exceptions to the documented exit codes."""

    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except ConfigError as e:
            _fail(EXIT_CONFIG, str(e))
        except TrainingError as e:
            code = EXIT_DIVERGENCE if "divergent" in str(e) else EXIT_DATA
            _fail(code, str(e))
        except (VocabularyError, GenerationError, ImagingError, ModelError) as e:
            _fail(EXIT_DATA, str(e))
        except (OSError, json.JSONDecodeError) as e:
            _fail(EXIT_DATA, str(e))

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _train_config(cfg: dict[str, str], seed: int, image_size: tuple[int, int], **overrides) -> TrainConfig:
    large = image_size[0] * image_size[1] > 512 * 512
    batch_key = "train.batch_size.large_images" if large else "train.batch_size.small_images"
    kw = dict(
        learning_rate=float(cfg["train.learning_rate"]),
        batch_size=int(cfg[batch_key]),
        max_epochs=int(cfg["train.max_epochs"]),
        early_stop_patience=int(cfg["train.early_stop_patience"]),
        val_fraction=float(cfg["train.val_fraction"]),
        seed=seed,
    )
    kw.update(overrides)
    return TrainConfig(**kw)


@click.group()
def main():
    """Full-page handwriting recognition: synthesis, curriculum training,
    transfer fine-tuning, evaluation and inference."""


common_options = [
    click.option("--config", "config_path", type=click.Path(), default=None,
                 help="flat key=value config file"),
    click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE",
                 help="override a config key (flags still win)"),
    click.option("--seed", type=int, default=None,
                 help="global seed (falls back to MSDOCTR_SEED, then config)"),
]


def with_common(fn):
    for opt in reversed(common_options):
        fn = opt(fn)
    return fn


@main.command("dump-config")
@with_common
@_guarded
def dump_config(config_path, overrides, seed):
    """Print the effective configuration as key=value lines."""
    cfg = load_config(config_path, overrides)
    cfg["seed"] = str(resolve_seed(seed, cfg))
    for key in sorted(cfg):
        click.echo(f"{key}={cfg[key]}")


@main.command()
@with_common
@click.option("--stage", type=click.Choice(["s1", "s2", "s3"]), required=True)
@click.option("--count", type=int, default=None, help="records to generate (stage default if omitted)")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None,
              help="s3: real page manifest to pass through")
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guarded
def synth(config_path, overrides, seed, stage, count, manifest_path, out_dir):
    """Generate a curriculum stage dataset (s1/s2) or pass through a real
    page manifest (s3)."""
    cfg = load_config(config_path, overrides)
    seed = resolve_seed(seed, cfg)
    os.makedirs(out_dir, exist_ok=True)
    if stage == "s3":
        if manifest_path is None:
            raise ConfigError("--stage s3 requires --manifest with real page data")
        manifest = DatasetManifest.load(manifest_path)
        for rec in manifest:
            if not os.path.exists(rec.image_path):
                raise GenerationError(f"missing image: {rec.image_path}")
        out_path = os.path.join(out_dir, "s3.jsonl")
        manifest.save(out_path)
        click.echo(f"wrote {len(manifest)} records to {out_path}")
        return
    spec = CurriculumStageSpec(
        stage,
        count if count is not None else int(cfg[f"{stage}.count"]),
        parse_size(cfg[f"{stage}.image_size"]),
        parse_range(cfg[f"{stage}.lines"]),
        parse_range(cfg.get("s1.words_per_line", "1-4")),
        seed,
    )
    style = GlyphStyle(height=int(cfg["synth.glyph_height"]),
                       variant=int(cfg["synth.style_variant"]))
    words = TextPool.synthetic_words(cfg["synth.alphabet"],
                                     int(cfg["synth.words_per_pool"]),
                                     word_len=parse_range(cfg["synth.word_len"]),
                                     seed=seed, style=style)
    pool = words if stage == "s1" else make_line_pool(
        words, 2000, parse_range(cfg["s1.words_per_line"]), seed=seed + 1
    )
    manifest = build_stage_dataset(spec, pool, out_dir)
    click.echo(f"wrote {len(manifest)} records to {os.path.join(out_dir, stage + '.jsonl')}")


def _load_manifests(paths: dict[str, str | None], required: list[str]) -> dict[str, DatasetManifest]:
    out = {}
    for name in required:
        if paths.get(name) is None:
            raise ConfigError(f"--{name} manifest is required for this mode")
        out[name] = DatasetManifest.load(paths[name])
    return out


@main.command()
@with_common
@click.option("--mode", type=click.Choice(["curriculum", "from_scratch"]), default="curriculum")
@click.option("--preset", type=click.Choice(sorted(PRESETS)), default=None)
@click.option("--s1", "s1_path", type=click.Path(exists=False), default=None)
@click.option("--s2", "s2_path", type=click.Path(exists=False), default=None)
@click.option("--s3", "s3_path", type=click.Path(exists=False), default=None)
@click.option("--lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guarded
def train(config_path, overrides, seed, mode, preset, s1_path, s2_path, s3_path,
          lr, batch_size, max_epochs, out_dir):
    """Curriculum training (s1 -> s2 -> s3 checkpoints) or the from-scratch
    baseline on the pooled stage data."""
    cfg = load_config(config_path, overrides)
    seed = resolve_seed(seed, cfg)
    preset = preset or cfg["model.preset"]
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}")
    os.makedirs(out_dir, exist_ok=True)
    manifests = _load_manifests(
        {"s1": s1_path, "s2": s2_path, "s3": s3_path}, ["s1", "s2", "s3"]
    )
    vocab = build_vocabulary(
        [t for m in manifests.values() for t in m.transcripts()]
    )
    model = build_model(PRESETS[preset], vocab, seed=seed)
    flag_overrides = {}
    if lr is not None:
        flag_overrides["learning_rate"] = lr
    if batch_size is not None:
        flag_overrides["batch_size"] = batch_size
    if max_epochs is not None:
        flag_overrides["max_epochs"] = max_epochs

    def stage_cfg(manifest):
        size = _manifest_image_size(manifest)
        return _train_config(cfg, seed, size, **flag_overrides)

    histories = {}
    if mode == "curriculum":
        for name in ("s1", "s2", "s3"):
            manifest = manifests[name]
            tc = stage_cfg(manifest)
            tr, val = split_manifest(manifest, tc.val_fraction, seed)
            if len(val) == 0 or len(tr) == 0:
                tr, val = manifest, None
            model, histories[name] = train_stage(model, tr, tc, val)
            save_checkpoint(model, os.path.join(out_dir, f"{name}.ckpt"))
    else:
        pooled = pool_manifests(*manifests.values())
        tc = stage_cfg(pooled)
        tr, val = split_manifest(pooled, tc.val_fraction, seed)
        if len(val) == 0 or len(tr) == 0:
            tr, val = pooled, None
        model, histories["fs"] = train_stage(model, tr, tc, val)
        save_checkpoint(model, os.path.join(out_dir, "fs.ckpt"))
    _write_histories(histories, os.path.join(out_dir, "history.jsonl"))
    click.echo(f"training complete; checkpoints under {out_dir}")


def _manifest_image_size(manifest: DatasetManifest) -> tuple[int, int]:
    from PIL import Image

    with Image.open(manifest.records[0].image_path) as im:
        return im.height, im.width


def _write_histories(histories, path):
    with open(path, "w", encoding="utf-8") as f:
        for stage, h in histories.items():
            for e in h.epochs:
                f.write(json.dumps({
                    "stage": stage, "epoch": e.epoch,
                    "train_loss": e.train_loss, "val_cer": e.val_cer,
                    "wall_time": e.wall_time,
                }) + "\n")


@main.command()
@with_common
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True,
              help="source model checkpoint")
@click.option("--manifest", "train_path", type=click.Path(), required=True,
              help="target-domain training manifest")
@click.option("--test-manifest", "test_path", type=click.Path(), default=None,
              help="target-domain test manifest (defaults to a held-out split)")
@click.option("--ladder", type=click.Choice(["all"]), default=None,
              help="run every unfreezing rung")
@click.option("--rung", "rung_name", default=None,
              help="run a single named rung (see the ladder report)")
@click.option("--rtl", is_flag=True, help="horizontally flip target images first")
@click.option("--rtl-resize", default=None, metavar="HxW",
              help="resize flipped images (config rtl.resize if omitted a value)")
@click.option("--lr", type=float, default=None)
@click.option("--max-epochs", type=int, default=None)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guarded
def transfer(config_path, overrides, seed, ckpt_path, train_path, test_path,
             ladder, rung_name, rtl, rtl_resize, lr, max_epochs, out_dir):
    """Transfer fine-tuning on a target script, one rung or the full
    unfreezing ladder; emits per-rung checkpoints and a CER report."""
    cfg = load_config(config_path, overrides)
    seed = resolve_seed(seed, cfg)
    if (ladder is None) == (rung_name is None):
        raise ConfigError("pass exactly one of --ladder all or --rung NAME")
    os.makedirs(out_dir, exist_ok=True)
    source = load_checkpoint(ckpt_path)
    train_manifest = DatasetManifest.load(train_path)
    if test_path is not None:
        test_manifest = DatasetManifest.load(test_path)
    else:
        train_manifest, test_manifest = split_manifest(train_manifest, 0.2, seed)
        if len(test_manifest) == 0 or len(train_manifest) == 0:
            raise ConfigError("target manifest too small to split; pass --test-manifest")
    if rtl:
        size = parse_size(rtl_resize) if rtl_resize else None
        train_manifest = prepare_rtl(train_manifest, os.path.join(out_dir, "rtl_train"), size)
        test_manifest = prepare_rtl(test_manifest, os.path.join(out_dir, "rtl_test"), size)
    rungs = table3_ladder(source.config)
    if rung_name is not None:
        chosen = [r for r in rungs if r[0] == rung_name]
        if not chosen:
            raise ConfigError(
                f"unknown rung {rung_name!r}; available: {', '.join(n for n, _ in rungs)}"
            )
        rungs = chosen
    size = _manifest_image_size(train_manifest)
    tc = _train_config(
        cfg, seed, size,
        learning_rate=lr if lr is not None else float(cfg["train.transfer_learning_rate"]),
        mode="transfer",
        **({"max_epochs": max_epochs} if max_epochs is not None else {}),
    )
    rows = run_transfer_ladder(source, train_manifest, test_manifest, tc, rungs)
    report_path = os.path.join(out_dir, "ladder.jsonl")
    with open(report_path, "w", encoding="utf-8") as f:
        for name, cer_value, model in rows:
            save_checkpoint(model, os.path.join(out_dir, f"{name}.ckpt"))
            f.write(json.dumps({"rung": name, "cer": cer_value}) + "\n")
            click.echo(f"{name}\t{cer_value:.4f}")
    click.echo(f"ladder report: {report_path}")


@main.command("eval")
@with_common
@click.option("--manifest", "manifest_path", type=click.Path(), required=True)
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True)
@click.option("--out", "out_dir", type=click.Path(), required=True)
@_guarded
def eval_cmd(config_path, overrides, seed, manifest_path, ckpt_path, out_dir):
    """Greedy-decode a manifest and report per-sample and corpus CER."""
    cfg = load_config(config_path, overrides)
    os.makedirs(out_dir, exist_ok=True)
    model = load_checkpoint(ckpt_path)
    manifest = DatasetManifest.load(manifest_path)
    report = evaluate_dataset(model, manifest)
    report.to_jsonl(os.path.join(out_dir, "cer_report.jsonl"))
    summary = report.summary()
    with open(os.path.join(out_dir, "cer_report.txt"), "w", encoding="utf-8") as f:
        f.write(summary + "\n")
    click.echo(summary)


@main.command()
@with_common
@click.option("--image", "image_path", type=click.Path(), required=True)
@click.option("--ckpt", "ckpt_path", type=click.Path(), required=True)
@click.option("--rtl", is_flag=True, help="flip the image before decoding")
@_guarded
def infer(config_path, overrides, seed, image_path, ckpt_path, rtl):
    """Transcribe one page image to stdout."""
    model = load_checkpoint(ckpt_path)
    img = load_image(image_path, channels=model.config.input_channels)
    if rtl:
        img = flip_horizontal(img)
    batch = pad_batch([img])
    images_t, mask = batch_to_tensors(batch)
    memory, memory_pad = model.encode(images_t, mask)
    (seq,) = greedy_decode(model, memory, memory_pad)
    click.echo(decode_tokens(seq, model.vocab))


if __name__ == "__main__":
    main()
