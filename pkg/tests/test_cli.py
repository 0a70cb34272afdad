import json
from pathlib import Path

import pandas as pd
import pytest

from src.data import dataset_hash
from src.main import EXIT_CONFIG, EXIT_CONFIG_FILE, EXIT_OK, main

CIRCULAR = str(Path(__file__).resolve().parent.parent / "config" / "circular.yaml")


def _images(root: Path) -> int:
    return len(list(root.glob("*/images/*.png")))


@pytest.fixture
def trained_run(config_file, tmp_path):
    run_dir = tmp_path / "run"
    assert main(["train", "--config", str(config_file), "--out", str(run_dir)]) == EXIT_OK
    return run_dir


class TestGenerate:
    """Test the synthetic dataset command."""

    def test_counts(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert main(["generate", "--config", CIRCULAR, "--out", str(out),
                     "--set", "data.image_size=16", "--set", "data.augment.crop=12",
                     "--set", "data.augment.resize_to=16"]) == EXIT_OK
        assert _images(out) == 54
        assert (out / "splits.yaml").exists()
        assert "Wrote 54 images" in capsys.readouterr().out

    def test_same_seed_same_content(self, config_file, tmp_path):
        roots = [tmp_path / "a", tmp_path / "b"]
        for root in roots:
            assert main(["generate", "--config", str(config_file), "--out", str(root)]) == EXIT_OK
        for domain in ("source", "target"):
            assert dataset_hash(str(roots[0] / domain)) == dataset_hash(str(roots[1] / domain))

    def test_refuses_overwrite(self, config_file, tmp_path):
        out = tmp_path / "data"
        assert main(["generate", "--config", str(config_file), "--out", str(out)]) == EXIT_OK
        assert main(["generate", "--config", str(config_file), "--out", str(out)]) == EXIT_CONFIG
        assert main(["generate", "--config", str(config_file), "--out", str(out),
                     "--force"]) == EXIT_OK

    def test_default_output_root(self, config_file, tmp_path, monkeypatch):
        monkeypatch.setenv("CADASEG_OUT_ROOT", str(tmp_path / "root"))
        monkeypatch.setattr("src.config._settings", None)
        assert main(["generate", "--config", str(config_file)]) == EXIT_OK
        assert _images(tmp_path / "root" / "data_circular_0") == 21

    def test_missing_config(self, tmp_path, capsys):
        missing = tmp_path / "absent.yaml"
        assert main(["generate", "--config", str(missing)]) == EXIT_CONFIG_FILE
        assert str(missing) in capsys.readouterr().err

    def test_broken_config(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("data: {kind: circular\n")
        assert main(["generate", "--config", str(path)]) == EXIT_CONFIG_FILE


class TestTrain:
    """Test training runs from the command line."""

    def test_run_directory(self, trained_run):
        manifest = json.loads((trained_run / "manifest.json").read_text())
        assert manifest["status"] == "completed"
        assert manifest["config"]["method"] == "cs_cada"
        assert manifest["dataset_hash"]
        assert (trained_run / "checkpoints" / "final.pt").exists()
        assert (trained_run / "checkpoints" / "best.pt").exists()
        assert (trained_run / "train.log").exists()
        history = pd.read_csv(trained_run / "history.csv")
        assert len(history) == 4
        metrics = json.loads((trained_run / "metrics.json").read_text())
        assert metrics["method"] == "cs_cada"
        assert "average" in metrics["classes"]

    def test_iters_override(self, config_file, tmp_path):
        run_dir = tmp_path / "run"
        assert main(["train", "--config", str(config_file), "--out", str(run_dir),
                     "--iters", "2", "--method", "baseline_target"]) == EXIT_OK
        assert len(pd.read_csv(run_dir / "history.csv")) == 2

    def test_deterministic_history(self, config_file, tmp_path):
        for name in ("a", "b"):
            assert main(["train", "--config", str(config_file), "--out", str(tmp_path / name),
                         "--seed", "5"]) == EXIT_OK
        assert (tmp_path / "a" / "history.csv").read_bytes() == \
            (tmp_path / "b" / "history.csv").read_bytes()

    def test_class_mismatch_is_semantic_error(self, config_file, tmp_path):
        code = main(["train", "--config", str(config_file), "--out", str(tmp_path / "run"),
                     "--set", "arch.n_classes=2"])
        assert code == EXIT_CONFIG
        assert not (tmp_path / "run" / "history.csv").exists()

    def test_invalid_value_is_semantic_error(self, config_file, tmp_path):
        assert main(["train", "--config", str(config_file), "--out", str(tmp_path / "run"),
                     "--set", "schedule.lr0=-1"]) == EXIT_CONFIG

    def test_ingested_mask_class_out_of_range(self, config_file, tmp_path, capsys):
        data = tmp_path / "data"
        assert main(["generate", "--config", str(config_file), "--out", str(data)]) == EXIT_OK
        code = main(["train", "--config", str(config_file), "--out", str(tmp_path / "run"),
                     "--set", f"data.root={data}", "--set", "arch.n_classes=2"])
        assert code == EXIT_CONFIG
        assert ">= 2" in capsys.readouterr().err

    def test_refuses_overwrite(self, trained_run, config_file):
        assert main(["train", "--config", str(config_file), "--out", str(trained_run)]) == EXIT_CONFIG


class TestPipeline:
    """Test source training, fine-tuning, evaluation and reporting chained by paths."""

    def test_finetune_chain(self, config_file, tmp_path):
        source_run = tmp_path / "source"
        assert main(["train", "--config", str(config_file), "--out", str(source_run),
                     "--method", "baseline_source"]) == EXIT_OK
        tuned = tmp_path / "tuned"
        assert main(["finetune", "--config", str(config_file), "--checkpoint", str(source_run),
                     "--scope", "all", "--out", str(tuned)]) == EXIT_OK
        assert (tuned / "finetuned.pt").exists()
        metrics = json.loads((tuned / "metrics.json").read_text())
        assert metrics["method"] == "finetune_all"

    def test_evaluate(self, trained_run, config_file):
        args = ["evaluate", "--config", str(config_file), "--checkpoint", str(trained_run),
                "--label", "cs_cada"]
        assert main(args) == EXIT_CONFIG
        assert main(args + ["--force"]) == EXIT_OK
        metrics = json.loads((trained_run / "metrics.json").read_text())
        assert metrics["method"] == "cs_cada"

    def test_missing_checkpoint(self, config_file, tmp_path):
        assert main(["evaluate", "--config", str(config_file), "--checkpoint",
                     str(tmp_path / "none.pt")]) == EXIT_CONFIG

    def test_report(self, trained_run, tmp_path):
        out = tmp_path / "report"
        assert main(["report", str(trained_run), "--out", str(out), "--overlays"]) == EXIT_OK
        frame = pd.read_csv(out / "report.csv")
        assert frame["method"].unique().tolist() == ["cs_cada"]
        assert (out / "run_losses.png").exists()
        overlays = sorted((out / "overlays" / "run").glob("*.png"))
        assert len(overlays) == 3 * 2

    def test_report_without_metrics(self, tmp_path):
        empty = tmp_path / "empty"
        empty.mkdir()
        assert main(["report", str(empty), "--out", str(tmp_path / "report")]) == EXIT_CONFIG
