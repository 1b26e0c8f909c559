# ---------------------------------------------------
# settingsmanager.py - SettingsManager Class
# ---------------------------------------------------
# Loads the experiment configuration from a json file
# (config/settings.json by default), rejects unknown
# keys with their dotted path, fills in defaults and
# exposes the typed pieces the commands work with:
# the model config, the source and target training
# plans, the data recipe and the run seeds. Every
# artifact embeds the fingerprint computed here.
# ---------------------------------------------------

import json
import logging
from dataclasses import fields
from pathlib import Path

from modules.errors import ConfigError
from modules.model import ModelConfig
from modules.seeding import fingerprint
from modules.tasks import KINDS, task_id_for
from modules.trainer import SourceTrainPlan, TargetPlan

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

# Defaults of every section; a key missing here is an unknown key
DEFAULTS = {
    "schema_version": SCHEMA_VERSION,
    "output_dir": "runs",
    "seeds": [0, 1, 2, 3, 4],
    "model": {"vocab_size": 0, "d_model": 64, "n_heads": 4, "n_encoder_layers": 2,
              "n_decoder_layers": 2, "d_ff": 256, "max_source_len": 64,
              "max_target_len": 64, "prefix_length": 32, "dropout_rate": 0.1},
    "prefix": {"reparameterize": True, "hidden_size": 64},
    "sampler": {"delta": 1.0},
    "data": {"seed": 7, "languages": ["alpha", "beta"], "kinds": list(KINDS),
             "train": {"alpha": 800, "beta": 120, "alpha-classification": 400},
             "dev": 60, "test": 60, "jsonl": []},
    "pretrain": {"steps": 300, "batch_size": 16, "learning_rate": 1e-3,
                 "mask_rate": 0.15, "seed": 11},
    "source": {"tasks": ["alpha-summarization", "alpha-classification"],
               "epochs": 2, "batches_per_epoch": 48, "batch_size": 16,
               "learning_rate": 5e-4, "visit_policy": "shuffled", "order": None},
    "target": {"task": "beta-classification", "train_size": 300, "epochs": 10,
               "batch_size": 16, "learning_rate": 1e-4, "eval_limit": None},
    "suites": {"low_resource_task": "beta-summarization",
               "low_resource_rates": [0.05, 0.1, 0.2], "orders": None,
               "kind_epochs": True},
}

JSONL_KEYS = ("task_id", "kind", "source_language", "target_language", "path")

# Keys whose object values replace the default instead of merging with it
FREE_FORM = ("data.train",)


def _merge(defaults, document, path=""):
    """ Overlays document on defaults; unknown keys are a ConfigError. """
    if not isinstance(document, dict):
        raise ConfigError(f"{path or 'config'} must be an object")
    merged = {}
    for key, value in document.items():
        dotted = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown configuration key {dotted!r}")
        if isinstance(defaults[key], dict) and dotted not in FREE_FORM:
            merged[key] = _merge(defaults[key], value, dotted)
        else:
            merged[key] = value
    for key, value in defaults.items():
        if key not in merged:
            merged[key] = json.loads(json.dumps(value))
    return merged


class ExperimentConfig:

    def __init__(self, document):
        """
        Validated experiment configuration. document is the raw json
        object; it must carry the current schema_version.
        """
        if not isinstance(document, dict) or "schema_version" not in document:
            raise ConfigError("configuration is missing 'schema_version'")
        if document["schema_version"] != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {document['schema_version']!r}, "
                              f"expected {SCHEMA_VERSION}")
        self.data = _merge(DEFAULTS, document)
        self._validate()

    def _validate(self):
        seeds = self.data["seeds"]
        if not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
            raise ConfigError(f"seeds must be a non-empty list of integers >= 0, got {seeds}")
        if self.data["sampler"]["delta"] <= 0:
            raise ConfigError(f"sampler.delta must be > 0, got {self.data['sampler']['delta']}")
        data = self.data["data"]
        for kind in data["kinds"]:
            if kind not in KINDS:
                raise ConfigError(f"data.kinds: unknown task kind {kind!r}")
        self._validate_train_sizes(data)
        for index, entry in enumerate(data["jsonl"]):
            unknown = set(entry) - set(JSONL_KEYS)
            if unknown:
                raise ConfigError(f"unknown configuration key "
                                  f"'data.jsonl.{index}.{sorted(unknown)[0]}'")
            for key in ("task_id", "kind", "source_language", "path"):
                if key not in entry:
                    raise ConfigError(f"data.jsonl.{index} is missing {key!r}")
        if self.data["target"]["train_size"] is not None and self.data["target"]["train_size"] < 1:
            raise ConfigError("target.train_size must be >= 1")
        # Surface model and plan errors at load time
        self.model_config(vocab_size=max(self.data["model"]["vocab_size"], 1))
        self.source_plan().validate(max(len(self.data["source"]["tasks"]), 1))
        self.target_plan().validate()

    def _validate_train_sizes(self, data):
        sizes = data["train"]
        if not isinstance(sizes, dict):
            sizes = {None: sizes}
        known = set(data["languages"]) | {task_id_for(language, kind)
                                          for language in data["languages"]
                                          for kind in data["kinds"]}
        for key, size in sizes.items():
            if key is not None and key not in known:
                raise ConfigError(f"unknown configuration key 'data.train.{key}'")
            if isinstance(size, bool) or not isinstance(size, int) or size < 1:
                raise ConfigError(f"data.train sizes must be integers >= 1, got {size!r}")
        for language in data["languages"]:
            for kind in data["kinds"]:
                if self.train_size(language, kind) is None:
                    raise ConfigError(f"data.train has no size for "
                                      f"{task_id_for(language, kind)}")

    def train_size(self, language, kind):
        """ Train split size of a generated corpus; a task id entry beats its language. """
        sizes = self.data["data"]["train"]
        if isinstance(sizes, int):
            return sizes
        return sizes.get(task_id_for(language, kind), sizes.get(language))

    def __getitem__(self, key):
        return self.data[key]

    @property
    def output_dir(self):
        return Path(self.data["output_dir"])

    @property
    def seeds(self):
        return list(self.data["seeds"])

    @property
    def fingerprint(self):
        return fingerprint(self.data)

    def to_dict(self):
        return json.loads(json.dumps(self.data))

    def with_overrides(self, *, output_dir=None, seeds=None):
        """ Copy with CLI overrides applied (before fingerprinting). """
        document = self.to_dict()
        if output_dir is not None:
            document["output_dir"] = str(output_dir)
        if seeds is not None:
            document["seeds"] = list(seeds)
        return ExperimentConfig(document)

    def model_config(self, *, vocab_size=None):
        """ ModelConfig of this experiment; vocab_size 0 needs the vocab size. """
        model = dict(self.data["model"])
        if vocab_size is not None and model["vocab_size"] == 0:
            model["vocab_size"] = vocab_size
        if model["vocab_size"] == 0:
            raise ConfigError("model.vocab_size is 0 and no vocabulary size was given")
        model["prefix_hidden_size"] = self.data["prefix"]["hidden_size"]
        return ModelConfig(**model).validate()

    def source_plan(self, **overrides):
        values = {name: self.data["source"][name] for name in
                  ("epochs", "batches_per_epoch", "batch_size", "learning_rate",
                   "visit_policy")}
        order = self.data["source"]["order"]
        values["order"] = tuple(order) if order else None
        values["delta"] = self.data["sampler"]["delta"]
        values.update(overrides)
        return SourceTrainPlan(**values)

    def target_plan(self, **overrides):
        names = [f.name for f in fields(TargetPlan)]
        values = {name: self.data["target"][name] for name in names}
        values.update(overrides)
        return TargetPlan(**values)


class SettingsManager:

    # File Path of the settings config
    BASE_PATH = Path(__file__).resolve().parent.parent
    settings_path = BASE_PATH / "config/settings.json"

    @staticmethod
    def get_settings_data(path=None):
        """ Loads the raw settings document from a json file. """
        path = Path(path) if path else SettingsManager.settings_path
        if not path.exists():
            raise ConfigError(f"configuration file {path} does not exist")
        with open(path, encoding="utf-8") as file:
            try:
                return json.loads(file.read())
            except json.JSONDecodeError as e:
                raise ConfigError(f"{path} is not valid json: {e}") from e

    @staticmethod
    def load(path=None):
        """ Loads and validates the experiment configuration. """
        config = ExperimentConfig(SettingsManager.get_settings_data(path))
        logger.info("Loaded configuration %s (fingerprint %s)",
                    path or SettingsManager.settings_path, config.fingerprint)
        return config

    @staticmethod
    def save(config, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(config.to_dict(), indent=1) + "\n", encoding="utf-8")
        return path
