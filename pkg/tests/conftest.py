import json
import os
from unittest.mock import patch

import numpy as np
import pytest
import torch

from dbgc.config import CnnConfig, FusionConfig, GraphMAEConfig, SceneSpec
from dbgc.graphmae import build_graphmae, encode_and_broadcast
from dbgc.polsar_data import extract_features, make_split, normalize_features, pauli_rgb, synth_scene
from dbgc.superpixel import slic_segment
from dbgc.supergraph import build_graph


@pytest.fixture
def mock_env():
    """Environment without output-directory overrides and a quiet log level."""
    with patch.dict(os.environ, {"LOG_LEVEL": "WARNING"}):
        os.environ.pop("DBGC_OUT_DIR", None)
        yield


@pytest.fixture(scope="session")
def small_scene():
    spec = SceneSpec(height=24, width=24, n_classes=3, looks=4, n_regions=6)
    return synth_scene(spec, seed=7)


@pytest.fixture(scope="session")
def small_features(small_scene):
    coh, _ = small_scene
    return normalize_features(extract_features(coh))


@pytest.fixture(scope="session")
def small_ground_truth(small_scene):
    return small_scene[1]


@pytest.fixture(scope="session")
def small_split(small_ground_truth):
    return make_split(small_ground_truth, per_class=8, seed=3)


@pytest.fixture(scope="session")
def small_segmentation(small_scene):
    coh, _ = small_scene
    return slic_segment(pauli_rgb(coh), k_target=16)


@pytest.fixture(scope="session")
def small_graph(small_features, small_segmentation):
    return build_graph(small_features, small_segmentation)


@pytest.fixture
def tiny_graphmae_config():
    return GraphMAEConfig(head_dim=2, heads=2, encoder_layers=2, epochs=5, dtype="float64", seed=0)


@pytest.fixture
def tiny_cnn_config():
    return CnnConfig(patch_size=5, channels=(3, 4, 4, 4), dtype="float64")


@pytest.fixture
def tiny_fusion_config():
    return FusionConfig(alpha=0.5, epochs=3, lr=1e-2, batch_size=8, seed=0)


@pytest.fixture
def small_fs_map(small_graph, small_segmentation, tiny_graphmae_config):
    model = build_graphmae(tiny_graphmae_config)
    return encode_and_broadcast(small_graph, model, small_segmentation)


@pytest.fixture
def tiny_pipeline_config(tmp_path):
    """Desk-scale pipeline settings small enough for unit tests."""
    return {
        "seed": 5,
        "output_dir": str(tmp_path / "out"),
        "data": {"kind": "synthetic", "scene": {"height": 16, "width": 16, "n_classes": 2, "n_regions": 4}},
        "superpixel": {"k_target": 8},
        "graphmae": {"head_dim": 2, "heads": 2, "encoder_layers": 2, "epochs": 3},
        "cnn": {"patch_size": 5, "channels": [2, 2, 2, 2]},
        "fusion": {"epochs": 2, "batch_size": 4},
        "split": {"per_class": 5},
    }


@pytest.fixture
def tiny_config_file(tmp_path, tiny_pipeline_config):
    path = tmp_path / "config.json"
    path.write_text(json.dumps(tiny_pipeline_config), encoding="utf-8")
    return path


@pytest.fixture(autouse=True)
def _restore_torch_rng():
    state = torch.random.get_rng_state()
    yield
    torch.random.set_rng_state(state)


@pytest.fixture
def hermitian_psd():
    """Random Hermitian PSD matrices A A^H of the given leading shape."""

    def make(rng, shape):
        a = rng.standard_normal(shape + (3, 3)) + 1j * rng.standard_normal(shape + (3, 3))
        return a @ np.conj(np.swapaxes(a, -1, -2))

    return make
