import hashlib
import io
import json
import os
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterable, Optional, Union

import numpy as np
from PIL import Image

from common.errors import ArtifactMissingError, ManifestLockedError
from common.std_ext import NullObject

MANIFEST_KEY = "manifest.json"
LOCK_KEY = "manifest.lock"


def body_as_dict(payload: bytes) -> Dict:
    text = payload.decode("utf-8")
    if not text:
        return {}
    return json.loads(text)


def sha256_of(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


class ArtifactStore:
    """Keyed artifact access inside one output directory, plus the run manifest."""

    generic_key_error_msg = "No such artifact"
    generic_lock_error_msg = "Output directory is locked by another command"

    def __init__(
        self,
        root: Union[str, Path],
        logger=None,
        no_such_key_msg=generic_key_error_msg,
        locked_msg=generic_lock_error_msg,
    ):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        if logger is None:
            logger = NullObject()
        self.logger = logger
        self.no_such_key_msg = no_such_key_msg
        self.locked_msg = locked_msg

    def path(self, key: str) -> Path:
        path = self.root / key
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    def exists(self, key: str) -> bool:
        return (self.root / key).is_file()

    # ------------------ reads ------------------

    def try_get_object(self, key: str) -> bytes:
        try:
            return (self.root / key).read_bytes()
        except FileNotFoundError as e:
            raise ArtifactMissingError(f"{self.no_such_key_msg}: {key} in {self.root}") from e

    def try_get_json(self, key: str) -> Dict:
        return body_as_dict(self.try_get_object(key))

    def load_array(self, key: str) -> np.ndarray:
        return np.load(io.BytesIO(self.try_get_object(key)), allow_pickle=False)

    def load_png(self, key: str) -> np.ndarray:
        with Image.open(io.BytesIO(self.try_get_object(key))) as image:
            return np.asarray(image.convert("RGB"))

    def head_object(self, key: str) -> Dict:
        path = self.root / key
        if not path.is_file():
            raise ArtifactMissingError(f"{self.no_such_key_msg}: {key} in {self.root}")
        return {"key": key, "size": path.stat().st_size, "sha256": sha256_of(path)}

    # ------------------ writes ------------------

    def save_bytes(self, key: str, payload: bytes) -> Path:
        path = self.path(key)
        path.write_bytes(payload)
        self.logger.debug("Wrote artifact", extra={"key": key, "bytes": len(payload)})
        return path

    # body must be JSON-serializable
    def try_save_object(self, key: str, body) -> Path:
        return self.save_bytes(key, (json.dumps(body, indent=2, sort_keys=True) + "\n").encode("utf-8"))

    def save_text(self, key: str, text: str) -> Path:
        return self.save_bytes(key, text.encode("utf-8"))

    def save_array(self, key: str, array: np.ndarray) -> Path:
        buffer = io.BytesIO()
        np.save(buffer, np.ascontiguousarray(array), allow_pickle=False)
        return self.save_bytes(key, buffer.getvalue())

    def save_png(self, key: str, image: Union[Image.Image, np.ndarray]) -> Path:
        if isinstance(image, np.ndarray):
            image = Image.fromarray(np.asarray(image, dtype=np.uint8))
        buffer = io.BytesIO()
        image.save(buffer, format="PNG")
        return self.save_bytes(key, buffer.getvalue())

    # ------------------ manifest ------------------

    def _lock_is_stale(self, lock_path: Path) -> bool:
        """True when the lockfile names a process that no longer exists."""
        try:
            pid = int(lock_path.read_text(encoding="ascii").strip())
        except (OSError, ValueError):
            return False
        if pid == os.getpid():
            return False
        try:
            os.kill(pid, 0)
        except ProcessLookupError:
            return True
        except PermissionError:
            pass
        return False

    def _acquire(self, lock_path: Path) -> int:
        try:
            return os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            if not self._lock_is_stale(lock_path):
                raise ManifestLockedError(f"{self.locked_msg}: {lock_path}") from e
        self.logger.warning("Removing stale lock", extra={"lock": str(lock_path)})
        lock_path.unlink(missing_ok=True)
        try:
            return os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError as e:
            raise ManifestLockedError(f"{self.locked_msg}: {lock_path}") from e

    @contextmanager
    def lock(self):
        lock_path = self.root / LOCK_KEY
        fd = self._acquire(lock_path)
        try:
            os.write(fd, str(os.getpid()).encode("ascii"))
            os.close(fd)
            yield self
        finally:
            lock_path.unlink(missing_ok=True)

    def read_manifest(self) -> Dict:
        if not self.exists(MANIFEST_KEY):
            return {"artifacts": {}, "stage_seeds": {}}
        return self.try_get_json(MANIFEST_KEY)

    def update_manifest(
        self,
        stage: str,
        keys: Iterable[str],
        root_seed: Optional[int] = None,
        stage_seeds: Optional[Dict[str, int]] = None,
        config: Optional[Dict] = None,
    ) -> Dict:
        keys = list(keys)
        manifest = self.read_manifest()
        if root_seed is not None:
            manifest["root_seed"] = root_seed
        if stage_seeds is not None:
            manifest["stage_seeds"] = dict(stage_seeds)
        if config is not None:
            manifest["config"] = config
        artifacts = manifest.setdefault("artifacts", {})
        for key in keys:
            entry = self.head_object(key)
            artifacts[key] = {"stage": stage, "sha256": entry["sha256"], "size": entry["size"]}
        self.try_save_object(MANIFEST_KEY, manifest)
        self.logger.info("Updated manifest", extra={"stage": stage, "artifacts": sorted(keys)})
        return manifest
