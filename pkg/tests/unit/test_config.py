import json
import os
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest
from pydantic import ValidationError

from common.config import log_level, output_dir_override
from dbgc.cli import build_cli, build_parser
from dbgc.config import (
    DataSourceConfig,
    GraphMAEConfig,
    HermitianMatrix,
    PipelineConfig,
    SceneSpec,
    SuperpixelConfig,
)

CONFIG_DIR = Path(__file__).resolve().parents[2] / "configs"


@patch.dict(os.environ, {"LOG_LEVEL": "debug"})
def test_log_level_from_environment():
    assert log_level() == "DEBUG"


def test_log_level_default():
    with patch.dict(os.environ, {}, clear=True):
        assert log_level() == "INFO"


@pytest.mark.parametrize("value,expected", [("/tmp/run", "/tmp/run"), ("  ", None), ("", None)])
def test_output_dir_override(value, expected):
    with patch.dict(os.environ, {"DBGC_OUT_DIR": value}):
        assert output_dir_override() == expected


def test_defaults_follow_published_settings():
    config = PipelineConfig()
    assert config.graphmae.heads == 4
    assert config.graphmae.encoder_layers == 4
    assert config.graphmae.gamma == 3.0
    assert config.graphmae.epochs == 400
    assert config.graphmae.embedding_dim == 64
    assert config.fusion.alpha == 0.4
    assert config.fusion.epochs == 250
    assert config.split.per_class == 111
    assert config.cnn.patch_size == 15


@pytest.mark.parametrize(
    "data",
    [
        {"sead": 3},
        {"graphmae": {"epoch": 5}},
        {"fusion": {"alfa": 0.5}},
        {"superpixel": {"k": 10}},
        {"cnn": {"patch": 7}},
        {"split": {"per_klass": 3}},
        {"data": {"scene": {"classes": 3}}},
        {"data": {"dir": "x"}},
    ],
)
def test_unknown_keys_are_rejected(data):
    with pytest.raises(ValidationError, match="Extra inputs are not permitted"):
        PipelineConfig.model_validate(data)


def test_misspelled_section_key_fails_the_command(mock_env, tmp_path, capsys):
    path = tmp_path / "typo.json"
    path.write_text(json.dumps({"output_dir": str(tmp_path / "out"), "graphmae": {"epoch": 5}}))
    args = build_parser().parse_args(["pretrain", "--config", str(path)])
    assert build_cli()(args) == 2
    assert "graphmae.epoch" in capsys.readouterr().err



@pytest.mark.parametrize(
    "section,values",
    [
        ("graphmae", {"ratio": 1.5}),
        ("graphmae", {"gamma": 0.5}),
        ("fusion", {"alpha": -0.1}),
        ("cnn", {"patch_size": 8}),
        ("split", {"per_class": 0}),
        ("superpixel", {"k_target": 0}),
    ],
)
def test_out_of_range_values(section, values):
    with pytest.raises(ValidationError):
        PipelineConfig.model_validate({section: values})


def test_directory_source_needs_a_path():
    with pytest.raises(ValidationError):
        DataSourceConfig(kind="directory")


def test_scene_needs_as_many_regions_as_classes():
    with pytest.raises(ValidationError):
        SceneSpec(n_classes=5, n_regions=3)


def test_scene_covariance_count_must_match():
    identity = HermitianMatrix.from_numpy(np.eye(3))
    with pytest.raises(ValidationError):
        SceneSpec(n_classes=2, n_regions=2, covariances=[identity])


def test_hermitian_matrix_round_trip():
    matrix = np.array([[2, 1j, 0], [-1j, 3, 0.5], [0, 0.5, 1]], dtype=np.complex128)
    np.testing.assert_array_equal(HermitianMatrix.from_numpy(matrix).to_numpy(), matrix)


def test_hermitian_matrix_must_be_three_by_three():
    with pytest.raises(ValidationError):
        HermitianMatrix(real=[[1, 0], [0, 1]])


@pytest.mark.parametrize("k_target,expected", [(None, 164), (50, 50)])
def test_resolve_k_target(k_target, expected):
    assert SuperpixelConfig(k_target=k_target).resolve_k_target(128, 128) == expected


def test_resolve_k_target_is_at_least_one():
    assert SuperpixelConfig(pixels_per_superpixel=1e6).resolve_k_target(4, 4) == 1


def test_embedding_dim():
    assert GraphMAEConfig(head_dim=3, heads=5).embedding_dim == 15


@pytest.mark.parametrize("name", ["synthetic.json", "flevoland.json"])
def test_shipped_configs_validate(name):
    data = json.loads((CONFIG_DIR / name).read_text(encoding="utf-8"))
    config = PipelineConfig.model_validate(data)
    assert config.graphmae.embedding_dim == 64
