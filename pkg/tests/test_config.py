import json
from pathlib import Path

import pytest

from utils.config import ExperimentConfig, config_hash, load_config, validate_config, with_updates
from utils.exceptions import ConfigValidationError


def test_defaults_are_valid():
    config = load_config({})
    assert isinstance(config, ExperimentConfig)
    assert config.trains
    assert config.feature_dim == config.train.feature_dim


def test_zero_dataset_size_is_rejected():
    with pytest.raises(ConfigValidationError) as info:
        load_config({"dataset_size": 0})
    assert any(v.startswith("dataset_size") for v in info.value.violations)


def test_every_field_violation_is_listed():
    with pytest.raises(ConfigValidationError) as info:
        load_config({"dataset_size": 0, "mdp": {"gamma": 1.0}, "lspe": {"k_iters": 0}})
    locations = {v.split(":")[0] for v in info.value.violations}
    assert {"dataset_size", "mdp.gamma", "lspe.k_iters"} <= locations


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigValidationError, match="bogus"):
        load_config({"mdp": {"bogus": 1}})


def test_cross_field_violations_are_listed_together():
    document = {
        "mdp": {"kind": "tabular", "num_states": 2, "num_actions": 2},
        "features": {"kind": "low-rank-truth"},
        "baselines": {"ablations": ["no-design"]},
        "seeds": [1, 1],
    }
    with pytest.raises(ConfigValidationError) as info:
        load_config(document)
    text = "\n".join(info.value.violations)
    assert "low-rank-truth" in text
    assert "ablations need" in text
    assert "duplicate seeds" in text


def test_low_rank_dimension_cannot_exceed_pairs():
    with pytest.raises(ConfigValidationError, match="feature_dim"):
        load_config({"mdp": {"num_states": 2, "num_actions": 2, "feature_dim": 5}})


def test_training_needs_two_batches():
    with pytest.raises(ConfigValidationError, match="batch_size"):
        load_config({"dataset_size": 100, "train": {"batch_size": 64}})
    assert load_config({"dataset_size": 100, "features": {"kind": "one-hot"}}).dataset_size == 100


def test_direction_count_must_cover_the_axes():
    with pytest.raises(ConfigValidationError, match="n_probes"):
        load_config({"features": {"kind": "one-hot"}, "mdp": {"num_states": 4, "num_actions": 2},
                     "diagnostics": {"n_probes": 10}})


def test_hash_ignores_output_location():
    a = load_config({"output_dir": "a"})
    b = load_config({"output_dir": "b"})
    assert config_hash(a) == config_hash(b)
    assert len(config_hash(a)) == 16
    assert config_hash(a) != config_hash(load_config({"dataset_size": 3000}))


def test_hash_ignores_key_order():
    first = load_config({"mdp": {"num_states": 10, "gamma": 0.8}, "seeds": [0, 1]})
    second = load_config({"seeds": [0, 1], "mdp": {"gamma": 0.8, "num_states": 10}})
    assert config_hash(first) == config_hash(second)


def test_loading_from_a_file(tmp_path):
    path = tmp_path / "config.json"
    path.write_text(json.dumps({"name": "from-file", "lspe": {"k_iters": 7}}))
    config = load_config(path)
    assert config.name == "from-file"
    assert config.lspe.k_iters == 7


@pytest.mark.parametrize("content,message", [(None, "no such file"), ("{not json", "not valid JSON"), ("[1]", "object")])
def test_bad_files(tmp_path, content, message):
    path = tmp_path / "config.json"
    if content is not None:
        path.write_text(content)
    with pytest.raises(ConfigValidationError, match=message):
        load_config(path)


def test_with_updates_revalidates():
    config = validate_config({})
    updated = with_updates(config, {"lspe.k_iters": 9, "train.design_weight": 0.5})
    assert updated.lspe.k_iters == 9
    assert updated.train.design_weight == 0.5
    assert config.lspe.k_iters == 50
    with pytest.raises(ConfigValidationError):
        with_updates(config, {"dataset_size": -1})


@pytest.mark.parametrize("path", sorted(Path(__file__).resolve().parent.parent.joinpath("configs").glob("*.json")))
def test_shipped_configs_are_valid(path):
    assert load_config(path).seeds
