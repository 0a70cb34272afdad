from pathlib import Path

import pytest
from pydantic import ValidationError

from src.config import (
    ExperimentConfig,
    Settings,
    load_experiment_config,
    parse_assignments,
)
from src.errors import ConfigFileError
from src.models import Method

CONFIG_DIR = Path(__file__).resolve().parent.parent / "config"


class TestLoadExperimentConfig:
    """Test YAML experiment files."""

    def test_load(self, file_config):
        assert file_config.method == Method.CS_CADA
        assert file_config.seed == 3
        assert file_config.arch.widths == [4, 8]
        assert file_config.batch_layout.n_target_unlabeled == 2
        # unspecified sections fall back to defaults
        assert file_config.loss.lambda1 == 1.0
        assert file_config.loss.lambda2 == 0.1
        assert file_config.mean_teacher.ema_decay == 0.99

    def test_overrides(self, config_file):
        config = load_experiment_config(str(config_file),
                                        {"schedule.k_max": 10, "loss.tau": 0.5, "method": "dsbn_only"})
        assert config.schedule.k_max == 10
        assert config.loss.tau == 0.5
        assert config.method == Method.DSBN_ONLY

    def test_missing_file(self, tmp_path):
        path = tmp_path / "nope.yaml"
        with pytest.raises(ConfigFileError, match="nope.yaml"):
            load_experiment_config(str(path))

    def test_invalid_yaml(self, tmp_path):
        path = tmp_path / "broken.yaml"
        path.write_text("method: [cs_cada\n")
        with pytest.raises(ConfigFileError):
            load_experiment_config(str(path))

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigFileError, match="mapping"):
            load_experiment_config(str(path))

    def test_out_of_range(self, config_file):
        with pytest.raises(ValidationError):
            load_experiment_config(str(config_file), {"schedule.lr0": -1.0})

    def test_unknown_method(self, config_file):
        with pytest.raises(ValidationError):
            load_experiment_config(str(config_file), {"method": "magic"})

    @pytest.mark.parametrize("name", ["circular.yaml", "tubular.yaml", "cardiac_full.yaml",
                                      "vessel_full.yaml"])
    def test_shipped_configs(self, name):
        config = load_experiment_config(str(CONFIG_DIR / name))
        assert config.arch.n_classes >= 2


class TestExperimentConfig:
    """Test config helpers."""

    def test_defaults(self):
        config = ExperimentConfig()
        assert config.schedule.lr0 == 5e-4
        assert config.schedule.lr_step == 1000
        assert tuple(config.optim.betas) == (0.9, 0.999)
        assert config.dsbn.momentum == 0.9

    def test_get(self, file_config):
        assert file_config.get("schedule.k_max") == 4
        assert file_config.get("data.augment.crop") == 12
        assert file_config.get("data.missing", "fallback") == "fallback"
        assert file_config.get("seed.deeper", 7) == 7

    def test_with_overrides(self, file_config):
        changed = file_config.with_overrides({"seed": 11, "train.validate_every": 1})
        assert changed.seed == 11
        assert changed.train.validate_every == 1
        assert file_config.seed == 3

    def test_cs_cada_needs_every_pool(self, tiny_config_dict):
        tiny_config_dict["batch_layout"]["n_target_unlabeled"] = 0
        with pytest.raises(ValidationError):
            ExperimentConfig.model_validate(tiny_config_dict)
        tiny_config_dict["method"] = "dsbn_only"
        assert ExperimentConfig.model_validate(tiny_config_dict).batch_layout.n_target_unlabeled == 0

    @pytest.mark.parametrize("augment", [{"crop": 12, "resize_to": 32}, {"crop": 20, "resize_to": 16}])
    def test_augment_must_keep_image_scale(self, tiny_config_dict, augment):
        tiny_config_dict["data"]["augment"].update(augment)
        with pytest.raises(ValidationError, match="data.image_size"):
            ExperimentConfig.model_validate(tiny_config_dict)

    def test_augment_scale_ignored_when_disabled(self, tiny_config_dict):
        tiny_config_dict["data"]["augment"] = {"enabled": False, "crop": 56, "resize_to": 64}
        assert ExperimentConfig.model_validate(tiny_config_dict).data.image_size == 16

    def test_crop_without_resize(self, tiny_config_dict):
        tiny_config_dict["data"]["augment"]["resize_to"] = None
        assert ExperimentConfig.model_validate(tiny_config_dict).data.augment.crop == 12

    def test_snapshot_round_trip(self, file_config):
        assert ExperimentConfig.model_validate(file_config.snapshot()) == file_config


class TestParseAssignments:

    def test_scalars(self):
        parsed = parse_assignments(["schedule.k_max=20", "loss.tau=0.2", "data.root=./x",
                                    "train.show_progress=true"])
        assert parsed == {"schedule.k_max": 20, "loss.tau": 0.2, "data.root": "./x",
                          "train.show_progress": True}

    def test_malformed(self):
        with pytest.raises(ValueError):
            parse_assignments(["schedule.k_max"])


class TestSettings:
    """Test environment settings."""

    def test_env_prefix(self, monkeypatch, tmp_path):
        monkeypatch.setenv("CADASEG_OUT_ROOT", str(tmp_path))
        monkeypatch.setenv("CADASEG_LOG_LEVEL", "debug")
        settings = Settings()
        assert settings.out_root == str(tmp_path)
        assert settings.log_level == "debug"

    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("CADASEG_OUT_ROOT", raising=False)
        assert Settings(_env_file=None).out_root == "./runs"
