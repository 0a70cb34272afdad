import os

import pytest
import torch

from src.network import build_checkpoint, restore_checkpoint
from src.store import CheckpointStore, DiskStore, InMemoryStore


def _checkpoint(model, iteration=0):
    return build_checkpoint(model, iteration=iteration, method="cs_cada")


class TestInMemoryStore:
    """Test in-memory checkpoint storage."""

    def test_set_get(self, tiny_model):
        store = InMemoryStore()
        assert store.set("best", _checkpoint(tiny_model, 5))
        assert store.exists("best")
        assert store.get("best")["iteration"] == 5

    def test_missing_key(self):
        assert InMemoryStore().get("best") is None

    def test_stored_copy_is_detached(self, tiny_model):
        """Later changes to the model or the returned dict do not reach the store."""
        store = InMemoryStore()
        checkpoint = _checkpoint(tiny_model)
        store.set("best", checkpoint)
        checkpoint["state"]["inc.conv1.weight"].add_(1.0)
        fetched = store.get("best")
        fetched["iteration"] = 99
        assert torch.equal(store.get("best")["state"]["inc.conv1.weight"],
                           tiny_model.inc.conv1.weight.detach())
        assert store.get("best")["iteration"] == 0

    def test_delete_and_keys(self, tiny_model):
        store = InMemoryStore()
        store.set("final", _checkpoint(tiny_model))
        store.set("best", _checkpoint(tiny_model))
        assert store.keys() == ["best", "final"]
        assert store.delete("best")
        assert not store.delete("best")
        assert store.keys() == ["final"]


class TestDiskStore:
    """Test checkpoint archives on disk."""

    def test_round_trip(self, tiny_model, tmp_path):
        store = DiskStore(str(tmp_path / "checkpoints"))
        store.set("best", _checkpoint(tiny_model, 3))
        assert (tmp_path / "checkpoints" / "best.pt").exists()
        student, _ = restore_checkpoint(store.get("best"))
        for k, v in tiny_model.state_dict().items():
            assert torch.equal(student.state_dict()[k], v)

    def test_keys(self, tiny_model, tmp_path):
        store = DiskStore(str(tmp_path))
        store.set("final", _checkpoint(tiny_model))
        assert store.keys() == ["final"]
        assert store.delete("final")
        assert store.get("final") is None


class TestCheckpointStore:
    """Test the disk store with its in-memory fallback."""

    def test_default_is_memory(self):
        store = CheckpointStore()
        assert not store.persistent
        assert store.path_of("best") is None

    def test_disk(self, tiny_model, tmp_path):
        store = CheckpointStore(str(tmp_path / "ckpt"))
        assert store.persistent
        store.set("best", _checkpoint(tiny_model))
        assert store.path_of("best") == str(tmp_path / "ckpt" / "best.pt")

    @pytest.mark.skipif(os.name != "posix" or os.geteuid() == 0,
                        reason="permission bits are not enforced")
    def test_unwritable_directory_falls_back(self, tiny_model, tmp_path):
        locked = tmp_path / "locked"
        locked.mkdir()
        locked.chmod(0o500)
        try:
            store = CheckpointStore(str(locked / "ckpt"))
            assert not store.persistent
            assert store.set("best", _checkpoint(tiny_model))
            assert store.exists("best")
        finally:
            locked.chmod(0o700)
