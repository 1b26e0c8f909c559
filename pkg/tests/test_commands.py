import json

import pytest

from controls.commands import (Workspace, cmd_gen_data, cmd_pretrain_base, cmd_specify_target,
                               cmd_train_source, cmd_verify, load_data, parse_order)
from controls.progress import Progress
from controls.settingsmanager import SettingsManager
from controls.suites import arm_name, cmd_suite, paired_summary, steps_to_reach
from main import main
from modules.checkpoint import load_prefix
from modules.errors import ConfigError, DataError
from modules.reports import TrainReport


def cli(settings_file, *argv):
    return main(["--config", str(settings_file), "--quiet", "--log-level", "WARNING", *argv])


@pytest.fixture
def prepared(settings_file):
    """ Config with generated corpora and a pretrained base backbone. """
    config = SettingsManager.load(settings_file)
    cmd_gen_data(config)
    cmd_pretrain_base(config)
    return config


def test_command_line_round(settings_file, tmp_path, capsys):
    root = tmp_path / "runs"
    assert cli(settings_file, "gen-data") == 0
    assert (root / "data" / "beta-classification" / "train.jsonl").exists()
    assert cli(settings_file, "gen-data") == 2
    assert cli(settings_file, "gen-data", "--force") == 0

    assert cli(settings_file, "pretrain-base") == 0
    assert (root / "base" / "backbone.json").exists()

    assert cli(settings_file, "train-source", "--preset", "cross-task", "--name", "xt") == 0
    prefix, meta = load_prefix(root / "source" / "xt" / "prefix.json")
    assert prefix.provenance == "source-trained"
    assert not prefix.reparameterized
    assert meta["tasks"] == ["alpha-summarization", "alpha-classification"]

    prefix_path = str(root / "source" / "xt" / "prefix.json")
    assert cli(settings_file, "specify-target", "--prefix", prefix_path, "--rate", "0.5",
               "--name", "low") == 0
    report = TrainReport.read(root / "target" / "low" / "report.json")
    assert report.extra["n_train"] == 4
    assert report.extra["prefix_provenance"] == "source-trained"
    assert "low-resource" in report.tags

    assert cli(settings_file, "specify-target", "--random-prefix", "--name", "rnd") == 0
    assert "ablation-random" in TrainReport.read(root / "target" / "rnd" / "report.json").tags

    capsys.readouterr()
    assert cli(settings_file, "evaluate", "--backbone", str(root / "target" / "rnd" / "backbone.json"),
               "--prefix", str(root / "target" / "rnd" / "prefix.json"), "--split", "dev") == 0
    assert "beta-classification" in capsys.readouterr().out

    assert cli(settings_file, "verify") == 0


def test_prefix_length_mismatch_exits_with_config_code(prepared, settings_file, tmp_path):
    path = cmd_train_source(prepared, name="xt")
    document = json.loads(settings_file.read_text(encoding="utf-8"))
    document["model"]["prefix_length"] = 6
    longer = tmp_path / "longer.json"
    longer.write_text(json.dumps(document), encoding="utf-8")
    assert cli(longer, "specify-target", "--prefix", str(path)) == 2


def test_specify_target_needs_one_prefix_source(prepared):
    with pytest.raises(ConfigError):
        cmd_specify_target(prepared)
    with pytest.raises(ConfigError):
        cmd_specify_target(prepared, prefix_path="x.json", random_prefix=True)


def test_train_source_order_is_recorded(prepared):
    path = cmd_train_source(prepared, order="alpha-classification,alpha-summarization",
                            name="ordered")
    report = TrainReport.read(path.parent / "report.json")
    assert report.extra["order"] == ["alpha-classification", "alpha-summarization"]
    assert [s["task_id"] for s in report.extra["switches"]] == \
        ["alpha-classification", "alpha-summarization"]
    with pytest.raises(ConfigError):
        cmd_train_source(prepared, order="alpha-summarization")


def test_exit_codes(settings_file, tmp_path):
    assert cli(settings_file, "pretrain-base") == 3
    bogus = tmp_path / "bogus.json"
    bogus.write_text(json.dumps({"schema_version": 1, "model": {"bogus": 1}}),
                     encoding="utf-8")
    assert cli(bogus, "verify") == 2


def test_verify_spots_truncated_corpora(prepared):
    assert cmd_verify(prepared) > 0
    train = Workspace(prepared.output_dir).corpus_dir("alpha-summarization") / "train.jsonl"
    lines = train.read_text(encoding="utf-8").splitlines(keepends=True)
    train.write_text("".join(lines[:-1]), encoding="utf-8")
    with pytest.raises(DataError) as caught:
        cmd_verify(prepared)
    assert caught.value.exit_code == 3


def test_loaded_data_matches_the_manifests(prepared):
    vocab, corpora = load_data(prepared)
    assert len(corpora) == 6
    assert all(corpus.vocab_checksum == vocab.checksum() for corpus in corpora.values())
    assert corpora["alpha-translation"].task.target_language == "beta"


def test_ablation_suite_is_reproducible(prepared):
    path = cmd_suite(prepared, "ablation")
    first = path.read_bytes()
    runs = sorted((path.parent / "runs").glob("**/report.json"))
    reports = [run.read_bytes() for run in runs]
    cmd_suite(prepared, "ablation")
    assert path.read_bytes() == first
    assert [run.read_bytes() for run in runs] == reports
    summary = json.loads(first)["summary"]
    assert summary["arm"] == "SumCLS2CLS"
    assert len(summary["deltas"]) == 2


def test_order_suite(prepared):
    path = cmd_suite(prepared, "order")
    summary = json.loads(path.read_bytes())["summary"]
    assert [row["order"] for row in summary["rows"]] == \
        ["alpha-summarization,alpha-classification", "alpha-classification,alpha-summarization"]
    assert (path.parent / "summary.txt").read_text(encoding="utf-8").startswith("Task order")
    reports = sorted((path.parent / "runs").glob("**/report.json"))
    assert len(reports) == 8
    assert {TrainReport.read(p).config_fingerprint for p in reports} == {prepared.fingerprint}
    assert cmd_verify(prepared) >= 8


def test_suite_helpers():
    assert arm_name(["summarization", "classification"], "classification") == "SumCLS2CLS"
    assert arm_name(["translation"], "summarization") == "Trans2Sum"
    assert parse_order(" a, b ,c ") == ["a", "b", "c"]
    summary = paired_summary([0.6, 0.4, 0.5], [0.5, 0.5, 0.5], [0, 1, 2])
    assert summary["wins"] == 1 and summary["ties"] == 1
    assert summary["mean_delta"] == pytest.approx(0.0)

    report = TrainReport(config_fingerprint="f", seeds={})
    for epoch in (1, 1, 2, 2):
        report.add_step(epoch=epoch, task_id="t", loss=1.0)
    report.add_metric(epoch=1, task_id="t", metric_name="dev_loss", value=2.0)
    report.add_metric(epoch=2, task_id="t", metric_name="dev_loss", value=1.0)
    assert steps_to_reach(report, 1.5) == 4
    assert steps_to_reach(report, 0.5) is None


def test_progress_bar_closes_when_done():
    progress = Progress(disable=True)
    progress(left="Target epoch 1/1", center="beta-classification", right="loss 1.0",
             value=0.5)
    assert progress._bar is not None
    progress.update_progress(left="done", value=1.0)
    assert progress._bar is None


def test_source_sampling_follows_the_configured_sizes(settings_file):
    document = json.loads(settings_file.read_text(encoding="utf-8"))
    document["data"]["train"] = {"alpha": 16, "alpha-classification": 8, "beta": 6}
    settings_file.write_text(json.dumps(document), encoding="utf-8")
    config = SettingsManager.load(settings_file)
    cmd_gen_data(config)
    cmd_pretrain_base(config)
    _, corpora = load_data(config)
    assert len(corpora["alpha-summarization"].train) == 16
    assert len(corpora["alpha-classification"].train) == 8
    assert len(corpora["beta-translation"].train) == 6

    path = cmd_train_source(config, name="sized")
    sampling = TrainReport.read(path.parent / "report.json").extra["sampling"]
    assert sampling["alpha-classification"] > 8 / 24
    assert sampling["alpha-summarization"] < 16 / 24
    assert sum(sampling.values()) == pytest.approx(1.0)


def test_verify_spots_reordered_report_steps(prepared):
    report_path = Workspace(prepared.output_dir).base_path.parent / "report.json"
    document = json.loads(report_path.read_text(encoding="utf-8"))
    document["steps"][1]["step"] = 1
    report_path.write_text(json.dumps(document), encoding="utf-8")
    with pytest.raises(DataError, match="1 problem"):
        cmd_verify(prepared)
