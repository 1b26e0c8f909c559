import json

import pytest

from controls.settingsmanager import DEFAULTS, ExperimentConfig, SettingsManager
from modules.errors import ConfigError
from modules.sampler import sampling_distribution


def test_default_settings_load():
    config = SettingsManager.load()
    assert config["schema_version"] == 1
    model = config.model_config(vocab_size=50)
    assert (model.d_model, model.n_heads, model.d_ff, model.prefix_length) == (64, 4, 256, 32)
    assert config.source_plan().batches_per_epoch == 48
    assert config.target_plan().epochs == 10


def test_fingerprint_is_stable_and_short(settings_file):
    first = SettingsManager.load(settings_file)
    second = SettingsManager.load(settings_file)
    assert first.fingerprint == second.fingerprint
    assert len(first.fingerprint) == 16
    assert int(first.fingerprint, 16) >= 0


def test_missing_keys_take_defaults(settings_file):
    config = SettingsManager.load(settings_file)
    assert config["sampler"]["delta"] == DEFAULTS["sampler"]["delta"]
    assert config["source"]["tasks"] == DEFAULTS["source"]["tasks"]
    assert config.source_plan().batches_per_epoch == 2
    assert config.target_plan().eval_limit is None


def test_unknown_key_names_its_path():
    with pytest.raises(ConfigError, match="'model.bogus'"):
        ExperimentConfig({"schema_version": 1, "model": {"bogus": 1}})
    with pytest.raises(ConfigError, match="'data.jsonl.0.extra'"):
        ExperimentConfig({"schema_version": 1, "data": {"jsonl": [
            {"task_id": "x", "kind": "summarization", "source_language": "alpha",
             "path": "x.jsonl", "extra": True}]}})


def test_schema_version_is_required():
    with pytest.raises(ConfigError):
        ExperimentConfig({"seeds": [0]})
    with pytest.raises(ConfigError):
        ExperimentConfig({"schema_version": 2})


@pytest.mark.parametrize("document", [
    {"seeds": []},
    {"sampler": {"delta": 0}},
    {"model": {"d_model": 30, "n_heads": 4}},
    {"source": {"batches_per_epoch": 1}},
    {"data": {"kinds": ["poetry"]}},
    {"data": {"train": 0}},
    {"data": {"train": {"alpha": 5}}},
    {"data": {"train": {"alpha": 5, "beta": 5, "gamma": 5}}},
    {"data": {"train": {"alpha": 5, "beta": True}}},
])
def test_invalid_values(document):
    with pytest.raises(ConfigError):
        ExperimentConfig({"schema_version": 1, **document})


def test_overrides_change_the_fingerprint(settings_file, tmp_path):
    config = SettingsManager.load(settings_file)
    moved = config.with_overrides(output_dir=tmp_path / "elsewhere", seeds=[4])
    assert moved.seeds == [4]
    assert moved.output_dir == tmp_path / "elsewhere"
    assert moved.fingerprint != config.fingerprint
    assert config.with_overrides().fingerprint == config.fingerprint


def test_vocab_size_comes_from_the_vocabulary(settings_file):
    config = SettingsManager.load(settings_file)
    assert config.model_config(vocab_size=77).vocab_size == 77
    with pytest.raises(ConfigError):
        config.model_config()
    fixed = ExperimentConfig({"schema_version": 1, "model": {"vocab_size": 40}})
    assert fixed.model_config(vocab_size=77).vocab_size == 40


def test_save_then_load(settings_file, tmp_path):
    config = SettingsManager.load(settings_file)
    path = SettingsManager.save(config, tmp_path / "copy" / "settings.json")
    assert json.loads(path.read_text(encoding="utf-8"))["seeds"] == [0, 1]
    assert SettingsManager.load(path).fingerprint == config.fingerprint


def test_bad_files(tmp_path):
    with pytest.raises(ConfigError):
        SettingsManager.load(tmp_path / "missing.json")
    broken = tmp_path / "broken.json"
    broken.write_text("{", encoding="utf-8")
    with pytest.raises(ConfigError):
        SettingsManager.load(broken)


def test_default_corpora_are_unequal_in_size():
    config = SettingsManager.load()
    assert config.train_size("alpha", "summarization") == 800
    assert config.train_size("alpha", "classification") == 400
    assert config.train_size("beta", "classification") == 120
    sizes = [config.train_size(*task_id.split("-")) for task_id in config["source"]["tasks"]]
    assert sizes[0] != sizes[1]
    probabilities = sampling_distribution(sizes, config["sampler"]["delta"])
    small, large = sizes.index(min(sizes)), sizes.index(max(sizes))
    assert probabilities[small] > min(sizes) / sum(sizes)
    assert probabilities[large] < max(sizes) / sum(sizes)


def test_train_sizes_accept_one_number_or_per_task_entries():
    assert ExperimentConfig({"schema_version": 1,
                             "data": {"train": 50}}).train_size("beta", "translation") == 50
    config = ExperimentConfig({"schema_version": 1, "data": {
        "train": {"alpha": 30, "beta": 10, "beta-translation": 20}}})
    assert config.train_size("beta", "translation") == 20
    assert config.train_size("beta", "summarization") == 10
    assert config.train_size("alpha", "translation") == 30
