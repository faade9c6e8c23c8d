import json
import struct

import pytest
from click.testing import CliRunner

from cli import cli
from conftest import TINY
from datagen import load_manifest
from models import Split


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def tiny_config_file(tmp_dir):
    path = tmp_dir / "tiny.json"
    path.write_text(json.dumps(TINY))
    return path


def invoke(runner, *args):
    return runner.invoke(cli, [str(a) for a in args])


class TestPipeline:
    def test_datagen_train_enhance_eval(self, runner, tiny_config_file, tmp_dir, runtime_settings):
        """Test the four commands chained on the tiny config."""
        corpus, run, enh, ev = (tmp_dir / n for n in ("corpus", "run", "enh", "eval"))

        result = invoke(runner, "datagen", "--config", tiny_config_file, "--out", corpus)
        assert result.exit_code == 0, result.output
        assert (corpus / "manifest.json").exists()
        assert (corpus / "resolved_config.json").exists()

        result = invoke(runner, "train", "--config", tiny_config_file, "--manifest", corpus, "--out", run)
        assert result.exit_code == 0, result.output
        assert (run / "checkpoint.hshd").exists()

        result = invoke(runner, "enhance", "--checkpoint", run / "checkpoint.hshd", "--manifest", corpus, "--out", enh)
        assert result.exit_code == 0, result.output
        assert (enh / "scores.csv").exists()
        assert "Enhancement" in result.output

        result = invoke(runner, "eval", "--manifest", corpus, "--enhanced", enh, "--out", ev)
        assert result.exit_code == 0, result.output
        assert (ev / "table_si_sdr.csv").exists()
        assert "NC accuracy" in result.output

        events = [json.loads(line) for line in open(runtime_settings.log_path)]
        assert [e["command"] for e in events if e["event"] == "start"] == ["datagen", "train", "enhance", "eval"]
        assert sum(e["event"] == "epoch" for e in events) == 2

    def test_default_output_dir(self, runner, tiny_config_file, runtime_settings):
        """Test outputs land under the configured output directory."""
        result = invoke(runner, "datagen", "--config", tiny_config_file, "--seed", 3)
        assert result.exit_code == 0, result.output
        manifest = load_manifest(f"{runtime_settings.output_dir}/datagen")
        assert manifest.seed == 3


class TestExitCodes:
    def test_missing_config(self, runner, tmp_dir, runtime_settings):
        result = invoke(runner, "datagen", "--config", tmp_dir / "absent.json")
        assert result.exit_code == 3
        assert "Error" in result.output

    def test_bad_schema(self, runner, tmp_dir, runtime_settings):
        path = tmp_dir / "bad.json"
        path.write_text(json.dumps({"train": {"epochs": 0}}))
        result = invoke(runner, "datagen", "--config", path)
        assert result.exit_code == 4

    def test_missing_manifest(self, runner, tiny_config_file, tmp_dir, runtime_settings):
        result = invoke(runner, "train", "--config", tiny_config_file, "--manifest", tmp_dir / "nope")
        assert result.exit_code == 3

    def test_missing_checkpoint(self, runner, tmp_dir, runtime_settings):
        result = invoke(runner, "enhance", "--checkpoint", tmp_dir / "x.hshd", "--manifest", tmp_dir)
        assert result.exit_code == 3

    def test_empty_split_and_version(self, runner, tiny_config_file, tmp_dir, runtime_settings):
        corpus, run = tmp_dir / "corpus", tmp_dir / "run"
        assert invoke(runner, "datagen", "--config", tiny_config_file, "--out", corpus).exit_code == 0
        assert invoke(runner, "train", "--config", tiny_config_file, "--manifest", corpus, "--out", run).exit_code == 0

        manifest = load_manifest(corpus)
        manifest.records = [r for r in manifest.records if r.split is not Split.unseen]
        seen_only = corpus / "manifest-seen.json"
        seen_only.write_text(manifest.model_dump_json())
        result = invoke(
            runner, "enhance", "--checkpoint", run / "checkpoint.hshd", "--manifest", seen_only, "--split", "unseen"
        )
        assert result.exit_code == 6

        blob = bytearray((run / "checkpoint.hshd").read_bytes())
        struct.pack_into("<I", blob, 4, 99)
        (run / "future.hshd").write_bytes(bytes(blob))
        result = invoke(runner, "enhance", "--checkpoint", run / "future.hshd", "--manifest", corpus)
        assert result.exit_code == 5

        events = [json.loads(line) for line in open(runtime_settings.log_path)]
        errors = [e for e in events if e["event"] == "error"]
        assert errors[-1]["payload"]["exit_code"] == 6

    def test_unknown_axis(self, runner, runtime_settings):
        result = invoke(runner, "sweep", "--axis", "dropout")
        assert result.exit_code == 2
