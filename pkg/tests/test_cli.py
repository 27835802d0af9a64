import json
import os

import pytest
from click.testing import CliRunner

from litehtr.cli import main

SYNTH_ARGS = [
    "--set", "synth.alphabet=abc",
    "--set", "synth.glyph_height=16",
    "--set", "synth.word_len=2-3",
    "--set", "s1.lines=1-2",
    "--set", "s1.words_per_line=1-1",
]


@pytest.fixture(scope="module")
def runner():
    return CliRunner()


@pytest.fixture(scope="module")
def workdir(tmp_path_factory, runner):
    """Synthesize micro datasets and train a tiny curriculum once."""
    root = tmp_path_factory.mktemp("cli")
    r = runner.invoke(main, ["synth", "--stage", "s1", "--count", "8", "--seed", "2",
                             "--out", str(root / "s1"),
                             "--set", "s1.image_size=64x64", *SYNTH_ARGS])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["synth", "--stage", "s2", "--count", "8", "--seed", "3",
                             "--out", str(root / "s2"),
                             "--set", "s2.image_size=128x128",
                             "--set", "s2.lines=3-4", *SYNTH_ARGS])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["train", "--mode", "curriculum", "--preset", "tiny",
                             "--s1", str(root / "s1" / "s1.jsonl"),
                             "--s2", str(root / "s2" / "s2.jsonl"),
                             "--s3", str(root / "s2" / "s2.jsonl"),
                             "--max-epochs", "2", "--batch-size", "4", "--seed", "1",
                             "--out", str(root / "run")])
    assert r.exit_code == 0, r.output
    return root


def test_dump_config_defaults(runner):
    r = runner.invoke(main, ["dump-config"])
    assert r.exit_code == 0
    lines = dict(l.split("=", 1) for l in r.output.strip().splitlines())
    assert lines["train.learning_rate"] == "0.0001"
    assert lines["train.transfer_learning_rate"] == "0.00001"
    assert lines["model.preset"] == "lite"
    assert lines["s1.count"] == "50000"
    assert lines["s2.count"] == "78000"


def test_config_file_and_flag_precedence(runner, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("model.preset=large\nseed=5\n# comment\n")
    r = runner.invoke(main, ["dump-config", "--config", str(cfg)])
    assert "model.preset=large" in r.output
    assert "seed=5" in r.output
    r = runner.invoke(main, ["dump-config", "--config", str(cfg), "--set", "model.preset=tiny"])
    assert "model.preset=tiny" in r.output


def test_env_seed_fallback(runner, monkeypatch):
    monkeypatch.setenv("MSDOCTR_SEED", "123")
    r = runner.invoke(main, ["dump-config"])
    assert "seed=123" in r.output
    r = runner.invoke(main, ["dump-config", "--seed", "9"])
    assert "seed=9" in r.output


def test_bad_config_exit_code(runner, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("not a key value line\n")
    r = runner.invoke(main, ["dump-config", "--config", str(cfg)])
    assert r.exit_code == 2


def test_bad_override_exit_code(runner):
    r = runner.invoke(main, ["dump-config", "--set", "oops"])
    assert r.exit_code == 2


def test_synth_rerun_identical(runner, tmp_path):
    out = tmp_path / "d"
    args = ["synth", "--stage", "s1", "--count", "4", "--seed", "7",
            "--out", str(out), "--set", "s1.image_size=96x96", *SYNTH_ARGS]
    assert runner.invoke(main, args).exit_code == 0
    first = {p: (out / "images" / p).read_bytes() for p in os.listdir(out / "images")}
    manifest_first = (out / "s1.jsonl").read_bytes()
    assert runner.invoke(main, args).exit_code == 0
    for p, blob in first.items():
        assert (out / "images" / p).read_bytes() == blob
    assert (out / "s1.jsonl").read_bytes() == manifest_first


def test_synth_s3_passthrough(runner, workdir, tmp_path):
    out = tmp_path / "s3"
    r = runner.invoke(main, ["synth", "--stage", "s3",
                             "--manifest", str(workdir / "s2" / "s2.jsonl"),
                             "--out", str(out)])
    assert r.exit_code == 0, r.output
    assert (out / "s3.jsonl").exists()
    r = runner.invoke(main, ["synth", "--stage", "s3", "--out", str(tmp_path / "x")])
    assert r.exit_code == 2  # --manifest required


def test_train_curriculum_outputs(workdir):
    for name in ("s1.ckpt", "s2.ckpt", "s3.ckpt", "history.jsonl"):
        assert (workdir / "run" / name).exists()
    stages = {json.loads(l)["stage"] for l in (workdir / "run" / "history.jsonl").read_text().splitlines()}
    assert stages == {"s1", "s2", "s3"}


def test_train_from_scratch(runner, workdir, tmp_path):
    out = tmp_path / "fs"
    r = runner.invoke(main, ["train", "--mode", "from_scratch", "--preset", "tiny",
                             "--s1", str(workdir / "s1" / "s1.jsonl"),
                             "--s2", str(workdir / "s2" / "s2.jsonl"),
                             "--s3", str(workdir / "s2" / "s2.jsonl"),
                             "--max-epochs", "1", "--batch-size", "4",
                             "--out", str(out)])
    assert r.exit_code == 0, r.output
    assert (out / "fs.ckpt").exists()


def test_train_missing_manifest_is_config_error(runner, tmp_path):
    r = runner.invoke(main, ["train", "--mode", "curriculum", "--preset", "tiny",
                             "--out", str(tmp_path / "o")])
    assert r.exit_code == 2


def test_train_unknown_preset(runner, tmp_path, workdir):
    r = runner.invoke(main, ["train", "--set", "model.preset=nope",
                             "--s1", str(workdir / "s1" / "s1.jsonl"),
                             "--s2", str(workdir / "s2" / "s2.jsonl"),
                             "--s3", str(workdir / "s2" / "s2.jsonl"),
                             "--out", str(tmp_path / "o")])
    assert r.exit_code == 2


def test_eval_reports(runner, workdir, tmp_path):
    out = tmp_path / "ev"
    r = runner.invoke(main, ["eval", "--manifest", str(workdir / "s2" / "s2.jsonl"),
                             "--ckpt", str(workdir / "run" / "s3.ckpt"),
                             "--out", str(out)])
    assert r.exit_code == 0, r.output
    assert "corpus CER" in r.output
    records = [json.loads(l) for l in (out / "cer_report.jsonl").read_text().splitlines()]
    assert records[-1]["sample_id"] == "__corpus__"
    assert len(records) == 8 + 1


def test_eval_missing_ckpt_exit_code(runner, workdir, tmp_path):
    r = runner.invoke(main, ["eval", "--manifest", str(workdir / "s2" / "s2.jsonl"),
                             "--ckpt", str(tmp_path / "none.ckpt"),
                             "--out", str(tmp_path / "o")])
    assert r.exit_code == 3


def test_transfer_single_rung(runner, workdir, tmp_path):
    out = tmp_path / "tr"
    r = runner.invoke(main, ["transfer", "--ckpt", str(workdir / "run" / "s3.ckpt"),
                             "--manifest", str(workdir / "s2" / "s2.jsonl"),
                             "--rung", "fc_embed", "--max-epochs", "1",
                             "--out", str(out)])
    assert r.exit_code == 0, r.output
    assert (out / "fc_embed.ckpt").exists()
    rows = [json.loads(l) for l in (out / "ladder.jsonl").read_text().splitlines()]
    assert rows[0]["rung"] == "fc_embed"


def test_transfer_requires_ladder_or_rung(runner, workdir, tmp_path):
    r = runner.invoke(main, ["transfer", "--ckpt", str(workdir / "run" / "s3.ckpt"),
                             "--manifest", str(workdir / "s2" / "s2.jsonl"),
                             "--out", str(tmp_path / "o")])
    assert r.exit_code == 2
    r = runner.invoke(main, ["transfer", "--ckpt", str(workdir / "run" / "s3.ckpt"),
                             "--manifest", str(workdir / "s2" / "s2.jsonl"),
                             "--rung", "bogus", "--out", str(tmp_path / "o")])
    assert r.exit_code == 2


def test_infer_stdout(runner, workdir):
    manifest = (workdir / "s2" / "s2.jsonl").read_text().splitlines()
    image = json.loads(manifest[0])["image_path"]
    r = runner.invoke(main, ["infer", "--image", image,
                             "--ckpt", str(workdir / "run" / "s3.ckpt")])
    assert r.exit_code == 0
    r_rtl = runner.invoke(main, ["infer", "--image", image, "--rtl",
                                 "--ckpt", str(workdir / "run" / "s3.ckpt")])
    assert r_rtl.exit_code == 0
