import pytest
import torch

from src.config import ExperimentConfig, load_experiment_config
from src.data import generate_synthetic_domains
from src.models import ArchSpec, SyntheticStyle
from src.network import build_model

SOURCE_STYLE = SyntheticStyle(background_level=0.15, foreground_contrast=0.7, noise_sigma=0.03,
                              blur_radius=0.0, texture_seed=1)
TARGET_STYLE = SyntheticStyle(background_level=0.75, foreground_contrast=-0.45, noise_sigma=0.06,
                              blur_radius=1.0, texture_seed=2)


@pytest.fixture
def tiny_arch():
    """Depth-1 network with 3 classes."""
    return ArchSpec(widths=[4, 8], n_classes=3, projection_hidden=16, projection_dim=8)


@pytest.fixture
def tiny_model(tiny_arch):
    return build_model(tiny_arch, seed=0)


@pytest.fixture
def small_datasets():
    """Circular task, 16 x 16 images."""
    return generate_synthetic_domains("circular", SOURCE_STYLE, TARGET_STYLE,
                                      counts=(6, 4, 6, 2, 3), seed=0, size=16)


@pytest.fixture
def tiny_config_dict():
    return {
        "method": "cs_cada",
        "seed": 0,
        "data": {
            "kind": "circular",
            "counts": [6, 4, 6, 2, 3],
            "image_size": 16,
            "augment": {"enabled": True, "crop": 12, "resize_to": 16},
        },
        "arch": {"widths": [4, 8], "n_classes": 3, "projection_hidden": 16, "projection_dim": 8},
        "batch_layout": {"n_source_labeled": 2, "n_target_labeled": 2, "n_target_unlabeled": 2},
        "schedule": {"k_max": 4, "lr0": 5e-4, "lr_decay": 0.95, "lr_step": 1000},
        "train": {"validate_every": 2, "finetune_iterations": 2, "finetune_batch_size": 2},
    }


@pytest.fixture
def tiny_config(tiny_config_dict):
    return ExperimentConfig.model_validate(tiny_config_dict)


@pytest.fixture
def config_file(tmp_path):
    """Create a test experiment file."""
    path = tmp_path / "experiment.yaml"
    path.write_text("""
method: cs_cada
seed: 3
data:
  kind: circular
  counts: [6, 4, 6, 2, 3]
  image_size: 16
  augment:
    enabled: true
    crop: 12
    resize_to: 16
arch:
  widths: [4, 8]
  n_classes: 3
  projection_hidden: 16
  projection_dim: 8
batch_layout:
  n_source_labeled: 2
  n_target_labeled: 2
  n_target_unlabeled: 2
schedule:
  k_max: 4
train:
  validate_every: 2
  finetune_iterations: 2
  finetune_batch_size: 2
""")
    return path


@pytest.fixture
def file_config(config_file):
    return load_experiment_config(str(config_file))


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)
    yield
