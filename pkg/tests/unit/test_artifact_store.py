import hashlib
import json
import os
from unittest.mock import MagicMock, patch

import numpy as np
import pytest

from common.errors import ArtifactMissingError, ManifestLockedError
from dbgc.artifact_store import LOCK_KEY, MANIFEST_KEY, ArtifactStore


@pytest.fixture
def store(tmp_path):
    return ArtifactStore(tmp_path / "out")


def test_missing_artifact(store):
    with pytest.raises(ArtifactMissingError) as error:
        store.try_get_object("graph.json")
    assert "graph.json" in str(error.value)


def test_custom_missing_message(tmp_path):
    store = ArtifactStore(tmp_path, no_such_key_msg="Run segment first")
    with pytest.raises(ArtifactMissingError, match="Run segment first"):
        store.head_object("segmentation.bin")


def test_json_is_written_sorted_and_indented(store):
    path = store.try_save_object("metrics.json", {"oa": 0.5, "aa": 0.25})
    assert path.read_text() == '{\n  "aa": 0.25,\n  "oa": 0.5\n}\n'
    assert store.try_get_json("metrics.json") == {"oa": 0.5, "aa": 0.25}


def test_array_round_trip(store):
    array = np.arange(12, dtype=np.uint8).reshape(3, 4)
    store.save_array("ground_truth.npy", array)
    loaded = store.load_array("ground_truth.npy")
    assert loaded.dtype == np.uint8
    np.testing.assert_array_equal(loaded, array)


def test_png_round_trip(store):
    rgb = np.random.default_rng(0).integers(0, 256, size=(5, 6, 3), dtype=np.uint8)
    store.save_png("pauli_rgb.png", rgb)
    np.testing.assert_array_equal(store.load_png("pauli_rgb.png"), rgb)


def test_head_object_reports_digest(store):
    store.save_bytes("blob.bin", b"abc")
    assert store.head_object("blob.bin") == {
        "key": "blob.bin",
        "size": 3,
        "sha256": hashlib.sha256(b"abc").hexdigest(),
    }


def test_lock_is_exclusive_and_released(store):
    with store.lock():
        assert store.exists(LOCK_KEY)
        with pytest.raises(ManifestLockedError):
            with store.lock():
                pass
    assert not store.exists(LOCK_KEY)


def test_lock_is_released_on_error(store):
    with pytest.raises(RuntimeError):
        with store.lock():
            raise RuntimeError("boom")
    assert not store.exists(LOCK_KEY)


def test_lock_left_by_a_dead_process_is_replaced(store):
    store.save_text(LOCK_KEY, "424242")
    with patch("dbgc.artifact_store.os.kill", side_effect=ProcessLookupError):
        with store.lock():
            assert store.try_get_object(LOCK_KEY) == str(os.getpid()).encode("ascii")
    assert not store.exists(LOCK_KEY)


def test_lock_held_by_a_live_process_is_kept(store):
    store.save_text(LOCK_KEY, "424242")
    with patch("dbgc.artifact_store.os.kill", return_value=None):
        with pytest.raises(ManifestLockedError):
            with store.lock():
                pass
    assert store.try_get_object(LOCK_KEY) == b"424242"


def test_unreadable_lock_is_kept(store):
    store.save_text(LOCK_KEY, "")
    with pytest.raises(ManifestLockedError):
        with store.lock():
            pass


def test_empty_manifest(store):
    assert store.read_manifest() == {"artifacts": {}, "stage_seeds": {}}


def test_manifest_records_stage_digests_and_seeds(store):
    store.save_bytes("features.npy", b"123")
    store.update_manifest("prepare", ["features.npy"], root_seed=7, stage_seeds={"scene": 1}, config={"seed": 7})
    store.save_bytes("graph.json", b"{}")
    manifest = store.update_manifest("segment", (key for key in ["graph.json"]))

    assert manifest["root_seed"] == 7
    assert manifest["stage_seeds"] == {"scene": 1}
    assert manifest["config"] == {"seed": 7}
    assert manifest["artifacts"]["features.npy"]["stage"] == "prepare"
    assert manifest["artifacts"]["graph.json"] == {
        "stage": "segment",
        "sha256": hashlib.sha256(b"{}").hexdigest(),
        "size": 2,
    }
    assert json.loads((store.root / MANIFEST_KEY).read_text()) == manifest


def test_manifest_entry_requires_the_artifact(store):
    with pytest.raises(ArtifactMissingError):
        store.update_manifest("prepare", ["features.npy"])


def test_writes_are_logged(tmp_path):
    logger = MagicMock()
    ArtifactStore(tmp_path, logger=logger).save_text("a.txt", "hello")
    logger.debug.assert_called_once_with("Wrote artifact", extra={"key": "a.txt", "bytes": 5})
