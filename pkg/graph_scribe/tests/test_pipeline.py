import json
from unittest.mock import patch

import numpy
import pytest

from graph_scribe import _config
from graph_scribe import _pipeline
from graph_scribe import _settings
from graph_scribe import dataset
from graph_scribe import model
from graph_scribe import training
from graph_scribe._utilities import read_json
from graph_scribe._utilities import ValidationError


def _smoke_config(tmp_path, **overrides):
    overrides = {"output_directory": str(tmp_path / "build"), **overrides}
    return _config.load_config(
        _settings._smoke_tutorial_directory / "config.json", overrides=overrides, environment={}
    )


def _write_regular_dataset(directory):
    """Five users and five items, every node of degree three"""
    directory.mkdir(parents=True, exist_ok=True)
    users = directory / "users.jsonl"
    items = directory / "items.jsonl"
    interactions = directory / "interactions.tsv"
    users.write_text(
        "".join(json.dumps({"id": f"u{user}", "description": f"user{user}"}) + "\n" for user in range(5)),
        encoding="utf-8",
    )
    items.write_text(
        "".join(json.dumps({"id": f"i{item}", "description": f"item{item}"}) + "\n" for item in range(5)),
        encoding="utf-8",
    )
    interactions.write_text(
        "".join(f"u{user}\ti{(user + offset) % 5}\n" for user in range(5) for offset in range(3)),
        encoding="utf-8",
    )
    return users, items, interactions


def test_cmd_prepare(tmp_path, capsys):
    config = _smoke_config(tmp_path)
    paths = _pipeline.cmd_prepare(config)
    assert "Prepared 10 users, 10 items, 35 interactions (split 12/12/11)" in capsys.readouterr().out
    manifest = read_json(paths["manifest"])
    assert manifest["stage"] == "prepare"
    assert manifest["seed"] == 0
    assert sorted(manifest["artifacts"]) == sorted(
        [
            _settings._users_artifact,
            _settings._items_artifact,
            _settings._interactions_artifact,
            _settings._index_artifact,
            _settings._split_artifact,
        ]
    )
    assert manifest["upstream"] == {}
    assert manifest["config"]["llm"]["api_key"] is None


def test_cmd_prepare_requires_dataset(tmp_path):
    config = _config.load_config(overrides={"output_directory": str(tmp_path)}, environment={})
    with pytest.raises(ValidationError, match="dataset 'users' path is required"):
        _pipeline.cmd_prepare(config)


def test_verify_manifest_missing(tmp_path):
    config = _smoke_config(tmp_path)
    with pytest.raises(ValidationError, match="Run the 'prepare' subcommand first"):
        _pipeline.cmd_infer(config)


def test_verify_manifest_modified_artifact(tmp_path):
    config = _smoke_config(tmp_path)
    paths = _pipeline.cmd_prepare(config)
    paths["split"].write_text(paths["split"].read_text() + "\n", encoding="utf-8")
    with pytest.raises(ValidationError, match="was modified after the 'prepare' stage"):
        _pipeline.cmd_infer(config)


def test_verify_manifest_regenerated_upstream(tmp_path):
    config = _smoke_config(tmp_path)
    _pipeline.cmd_prepare(config)
    _pipeline.cmd_infer(config)
    reseeded = _smoke_config(tmp_path, seed=1)
    _pipeline.cmd_prepare(reseeded)
    with pytest.raises(ValidationError, match="Upstream stage 'prepared' changed"):
        _pipeline.cmd_encode(reseeded)


def test_cmd_infer(tmp_path, capsys):
    config = _smoke_config(tmp_path)
    _pipeline.cmd_prepare(config)
    paths = _pipeline.cmd_infer(config)
    directory = tmp_path / "build" / _settings._layers_directory / "convolutional"
    for layer in (1, 2, 3):
        assert (directory / _settings._layer_artifact.format(layer=layer)).is_file()
    report = read_json(paths[_settings._token_report_artifact])
    assert report["strategy"] == "convolutional"
    assert len(report["node_visits"]) == 2
    assert "Wrote 3 'convolutional' description layer(s)" in capsys.readouterr().out
    assert list(read_json(paths["manifest"])["upstream"]) == [_settings._prepare_directory]


def test_cmd_infer_settings_guard(tmp_path):
    config = _smoke_config(tmp_path)
    _pipeline.cmd_prepare(config)
    _pipeline.cmd_infer(config)
    changed = _smoke_config(tmp_path, **{"propagation.neighbor_cap": 2})
    with pytest.raises(ValidationError, match="different inference settings"):
        _pipeline.cmd_infer(changed)


def test_cmd_infer_fewer_layers(tmp_path):
    config = _smoke_config(tmp_path)
    _pipeline.cmd_prepare(config)
    _pipeline.cmd_infer(config)
    directory = tmp_path / "build" / _settings._layers_directory / "convolutional"
    first = (directory / "layer_2.jsonl").read_bytes()

    shallow = _smoke_config(tmp_path, **{"propagation.num_layers": 2})
    paths = _pipeline.cmd_infer(shallow)
    assert not (directory / "layer_3.jsonl").exists()
    assert (directory / "layer_2.jsonl").read_bytes() == first
    assert "layer_3.jsonl" not in read_json(paths["manifest"])["artifacts"]


def test_cmd_train_requires_encode(tmp_path):
    config = _smoke_config(tmp_path)
    _pipeline.cmd_prepare(config)
    with pytest.raises(ValidationError, match="Run the 'encode' subcommand first"):
        _pipeline.cmd_train(config)


def test_cmd_train_evaluate_mf(tmp_path, capsys):
    config = _smoke_config(tmp_path, variant="mf")
    _pipeline.cmd_prepare(config)
    train_paths = _pipeline.cmd_train(config)
    manifest = read_json(train_paths["manifest"])
    assert list(manifest["artifacts"]) == [_settings._params_artifact]
    assert manifest["logs"] == [_settings._history_artifact]
    assert len(train_paths["history"].read_text().splitlines()) >= 1

    paths = _pipeline.cmd_evaluate(config)
    metrics = read_json(paths["metrics"])
    assert metrics["variant"] == "mf"
    assert metrics["seeds"] == [0, 1]
    assert 0.0 <= metrics["map"] <= 1.0
    assert "layer_similarity" not in paths
    subgroups = read_json(paths["subgroups"])
    assert [group["name"] for group in subgroups["groups"]] == ["G1", "G2"]
    assert "MAP@5" in capsys.readouterr().out


def test_cmd_evaluate_scores(tmp_path):
    config = _smoke_config(tmp_path)
    _pipeline.cmd_prepare(config)
    data, split = dataset.load_prepared(tmp_path / "build" / _settings._prepare_directory)
    scores = tmp_path / "scores.tsv"
    scores.write_text(
        "".join(f"{data.user_ids[user]}\t{data.item_ids[item]}\t1.0\n" for user, item in split.test),
        encoding="utf-8",
    )
    paths = _pipeline.cmd_evaluate(config, scores=scores)
    metrics = read_json(paths["metrics"])
    assert metrics["variant"] == "scores"
    assert metrics["map"] == pytest.approx(1.0)
    assert metrics["ndcg"] == pytest.approx(1.0)

    retrain = _smoke_config(tmp_path, **{"evaluation.retrain": True})
    with pytest.raises(ValidationError, match="Retraining is unavailable"):
        _pipeline.cmd_evaluate(retrain, scores=scores)


def test_cmd_evaluate_small_subgroups(tmp_path, caplog):
    config = _smoke_config(tmp_path, **{"evaluation.num_groups": 50})
    _pipeline.cmd_prepare(config)
    data, split = dataset.load_prepared(tmp_path / "build" / _settings._prepare_directory)
    scores = tmp_path / "scores.tsv"
    scores.write_text(f"{data.user_ids[0]}\t{data.item_ids[0]}\t1.0\n", encoding="utf-8")
    with caplog.at_level("WARNING"):
        paths = _pipeline.cmd_evaluate(config, scores=scores)
    subgroups = read_json(paths["subgroups"])
    assert subgroups["groups"] == []
    assert "at least 50 users" in subgroups["skipped"]
    assert "Skipping the subgroup analysis" in caplog.text


def test_cmd_token_report(tmp_path, capsys):
    users, items, interactions = _write_regular_dataset(tmp_path / "data")
    config = _config.load_config(
        overrides={
            "output_directory": str(tmp_path / "build"),
            "dataset.users": str(users),
            "dataset.items": str(items),
            "dataset.interactions": str(interactions),
            "propagation.num_layers": 3,
        },
        environment={},
    )
    _pipeline.cmd_prepare(config)
    paths = _pipeline.cmd_token_report(config)
    assert "Node visits with 3 layer(s): convolutional 60, plain 130" in capsys.readouterr().out
    record = read_json(paths["token_report"])
    assert record["estimates"]["convolutional"]["node_visits"] == [30, 30]
    assert record["estimates"]["plain"]["node_visits"] == [10, 30, 90]
    assert record["realized"] == {}


def test_cmd_token_report_realized(tmp_path):
    config = _smoke_config(tmp_path)
    _pipeline.cmd_prepare(config)
    _pipeline.cmd_infer(config)
    record = read_json(_pipeline.cmd_token_report(config)["token_report"])
    assert list(record["realized"]) == ["convolutional"]


def test_cmd_sft_export(tmp_path):
    config = _smoke_config(tmp_path)
    _pipeline.cmd_prepare(config)
    paths = _pipeline.cmd_sft_export(config)
    lines = paths["sft_pairs"].read_text(encoding="utf-8").splitlines()
    assert len(lines) == 2 * 12
    record = json.loads(lines[0])
    assert set(record) == {"query", "answer", "direction"}
    assert read_json(paths["manifest"])["stage"] == "sft-export"


def test_cmd_train_divergence_keeps_checkpoint(tmp_path):
    config = _smoke_config(tmp_path, variant="mf")
    _pipeline.cmd_prepare(config)
    directory = tmp_path / "build" / _settings._train_directory / "mf"
    with patch("graph_scribe.training.loss_and_gradients", return_value=(float("nan"), {})):
        with pytest.raises(training.TrainingDivergedError, match="last good parameters are saved") as err:
            _pipeline.cmd_train(config)
    assert err.value.exit_code == _settings._exit_internal
    saved = model.load_params(directory / _settings._params_artifact)
    assert saved.variant == "mf"
    assert numpy.isfinite(saved.user_embeddings).all()
    assert (directory / _settings._history_artifact).read_text() == ""
    assert not (directory / _settings._manifest_artifact).exists()
    with pytest.raises(ValidationError, match="Run the 'train' subcommand first"):
        _pipeline.cmd_evaluate(config)
