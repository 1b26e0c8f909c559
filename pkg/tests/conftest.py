import json

import pytest

from modules.checkpoint import snapshot
from modules.model import ModelConfig, init_backbone
from modules.tasks import build_vocab, generate_minilang_corpus

TINY_MODEL = {"d_model": 16, "n_heads": 2, "n_encoder_layers": 1, "n_decoder_layers": 1,
              "d_ff": 32, "max_source_len": 64, "max_target_len": 64, "prefix_length": 4,
              "dropout_rate": 0.1, "prefix_hidden_size": 16}


def make_config(vocab_size, **overrides):
    return ModelConfig(vocab_size=vocab_size, **{**TINY_MODEL, **overrides}).validate()


@pytest.fixture(scope="session")
def corpora():
    """ Encoded tiny corpora keyed by task id, plus their shared vocabulary. """
    raw = [generate_minilang_corpus("alpha", "summarization", 24, 6, 6, seed=3),
           generate_minilang_corpus("alpha", "classification", 24, 6, 6, seed=3),
           generate_minilang_corpus("beta", "classification", 24, 6, 6, seed=3)]
    vocab = build_vocab(raw)
    return vocab, {corpus.task.task_id: corpus.encode_with(vocab) for corpus in raw}


@pytest.fixture(scope="session")
def vocab(corpora):
    return corpora[0]


@pytest.fixture
def config(vocab):
    return make_config(len(vocab))


@pytest.fixture(scope="session")
def base(corpora):
    vocab, _ = corpora
    return snapshot(init_backbone(make_config(len(vocab)), seed=5),
                    provenance="base-pretrained")


@pytest.fixture
def settings_file(tmp_path):
    """ A tiny experiment configuration writing under tmp_path/runs. """
    document = {
        "schema_version": 1,
        "output_dir": str(tmp_path / "runs"),
        "seeds": [0, 1],
        "model": {"vocab_size": 0, "d_model": 16, "n_heads": 2, "n_encoder_layers": 1,
                  "n_decoder_layers": 1, "d_ff": 32, "max_source_len": 64,
                  "max_target_len": 64, "prefix_length": 4, "dropout_rate": 0.1},
        "prefix": {"reparameterize": True, "hidden_size": 16},
        "data": {"seed": 7, "train": 12, "dev": 4, "test": 4},
        "pretrain": {"steps": 3, "batch_size": 4},
        "source": {"epochs": 1, "batches_per_epoch": 2, "batch_size": 4},
        "target": {"task": "beta-classification", "train_size": 8, "epochs": 1,
                   "batch_size": 4},
        "suites": {"low_resource_task": "beta-summarization",
                   "low_resource_rates": [0.5], "kind_epochs": False},
    }
    path = tmp_path / "settings.json"
    path.write_text(json.dumps(document), encoding="utf-8")
    return path
