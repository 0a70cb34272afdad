import copy
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, Dict, List, Optional

import torch

logger = logging.getLogger(__name__)


class StoreBackend(ABC):
    """Abstract checkpoint backend."""

    @abstractmethod
    def get(self, key: str) -> Optional[Dict[str, Any]]:
        """Get a checkpoint, or None."""

    @abstractmethod
    def set(self, key: str, value: Dict[str, Any]) -> bool:
        """Store a checkpoint under key."""

    @abstractmethod
    def delete(self, key: str) -> bool:
        """Delete a checkpoint."""

    @abstractmethod
    def exists(self, key: str) -> bool:
        """Check if key is stored."""

    @abstractmethod
    def keys(self) -> List[str]:
        """List stored keys."""


class InMemoryStore(StoreBackend):
    """Checkpoints kept as deep copies in process memory."""

    def __init__(self):
        self._data: Dict[str, Dict[str, Any]] = {}

    def get(self, key: str) -> Optional[Dict[str, Any]]:
        value = self._data.get(key)
        return copy.deepcopy(value) if value is not None else None

    def set(self, key: str, value: Dict[str, Any]) -> bool:
        self._data[key] = copy.deepcopy(value)
        return True

    def delete(self, key: str) -> bool:
        if key in self._data:
            del self._data[key]
            return True
        return False

    def exists(self, key: str) -> bool:
        return key in self._data

    def keys(self) -> List[str]:
        return sorted(self._data)


class DiskStore(StoreBackend):
    """Checkpoints written as ``<directory>/<key>.pt`` archives."""

    def __init__(self, directory: str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        probe = self.directory / ".write_probe"
        # Raises OSError on read-only locations
        probe.write_bytes(b"")
        probe.unlink()

    def _path(self, key: str) -> Path:
        return self.directory / f"{key}.pt"

    def get(self, key: str) -> Optional[Dict[str, Any]]:
        path = self._path(key)
        if not path.exists():
            return None
        return torch.load(path, map_location="cpu")

    def set(self, key: str, value: Dict[str, Any]) -> bool:
        try:
            torch.save(value, self._path(key))
            return True
        except OSError as e:
            logger.error("Checkpoint write failed for %s: %s", key, e)
            return False

    def delete(self, key: str) -> bool:
        path = self._path(key)
        if path.exists():
            path.unlink()
            return True
        return False

    def exists(self, key: str) -> bool:
        return self._path(key).exists()

    def keys(self) -> List[str]:
        return sorted(p.stem for p in self.directory.glob("*.pt"))


class CheckpointStore:
    """Checkpoint store on disk with fallback to memory."""

    def __init__(self, directory: Optional[str] = None):
        if directory is not None:
            try:
                self._backend: StoreBackend = DiskStore(directory)
            except OSError as e:
                logger.warning("Checkpoint directory %s unusable (%s), keeping checkpoints in memory",
                               directory, e)
                self._backend = InMemoryStore()
        else:
            self._backend = InMemoryStore()

    @property
    def persistent(self) -> bool:
        return isinstance(self._backend, DiskStore)

    def path_of(self, key: str) -> Optional[str]:
        """File path of a stored checkpoint, None for in-memory stores."""
        if isinstance(self._backend, DiskStore):
            return str(self._backend._path(key))
        return None

    def get(self, key: str) -> Optional[Dict[str, Any]]:
        return self._backend.get(key)

    def set(self, key: str, value: Dict[str, Any]) -> bool:
        return self._backend.set(key, value)

    def delete(self, key: str) -> bool:
        return self._backend.delete(key)

    def exists(self, key: str) -> bool:
        return self._backend.exists(key)

    def keys(self) -> List[str]:
        return self._backend.keys()
