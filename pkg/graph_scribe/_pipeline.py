"""Subcommand implementations. Every stage writes its artifacts plus a ``manifest.json``.

A manifest records the stage name, the configuration snapshot, the seed, the SHA-256 of every artifact the stage
produced, and the SHA-256 of every upstream manifest it consumed. Stages verify upstream manifests before reading, so
modified or regenerated upstream artifacts are reported instead of silently mixed.

.. code-block:: text

   <output_directory>/
       prepared/                 users.jsonl items.jsonl interactions.tsv index.tsv split.tsv
       layers/<strategy>/        layer_<l>.jsonl token_report.json llm_cache.json (remote backend)
       text/<strategy>/          user_text.npy item_text.npy
       train/<variant>/          params.bin history.jsonl
       evaluate/<variant>/       metrics.json subgroups.json layer_similarity.json
       token_report/             token_report.json
       sft/                      sft_pairs.jsonl
       sweep/                    layer_sweep.json
"""

import typing
import logging
import pathlib
import dataclasses

from graph_scribe import _settings
from graph_scribe import dataset as dataset_module
from graph_scribe import llm_gateway
from graph_scribe import conv_inference
from graph_scribe import text_encoder
from graph_scribe import model
from graph_scribe import training
from graph_scribe import evaluation
from graph_scribe._config import PipelineConfig
from graph_scribe._utilities import file_hash
from graph_scribe._utilities import read_json
from graph_scribe._utilities import write_json
from graph_scribe._utilities import write_jsonl
from graph_scribe._utilities import BackendError
from graph_scribe._utilities import ValidationError


_logger = logging.getLogger(__name__)


def _stage_directory(config: PipelineConfig, *parts: str) -> pathlib.Path:
    return config.output_directory.joinpath(*parts)


def _write_manifest(
    directory: pathlib.Path,
    stage: str,
    config: PipelineConfig,
    artifacts: typing.Dict[str, pathlib.Path],
    upstream: typing.Sequence[pathlib.Path] = (),
    logs: typing.Dict[str, pathlib.Path] = None,
) -> pathlib.Path:
    """Write ``manifest.json``. Log artifacts are listed by name only because they hold wall clock times."""
    manifest = {
        "stage": stage,
        "seed": config.seed,
        "config": config.snapshot(),
        "artifacts": {name: file_hash(path) for name, path in sorted(artifacts.items())},
        "upstream": {
            str(path.parent.relative_to(config.output_directory)): file_hash(path) for path in upstream
        },
        "logs": sorted(path.name for path in (logs or {}).values()),
    }
    return write_json(directory / _settings._manifest_artifact, manifest)


def verify_manifest(directory: pathlib.Path, config: PipelineConfig, stage: str) -> pathlib.Path:
    """Check a stage's artifacts and recorded upstream manifests against the files on disk

    :returns: the manifest path

    :raises ValidationError: missing manifest, missing or modified artifact, or regenerated upstream stage
    """
    path = directory / _settings._manifest_artifact
    if not path.is_file():
        raise ValidationError(f"Could not find '{path}'. Run the '{stage}' subcommand first")
    manifest = read_json(path)
    for name, expected in manifest.get("artifacts", {}).items():
        artifact = directory / name
        if not artifact.is_file() or file_hash(artifact) != expected:
            raise ValidationError(
                f"Artifact '{artifact}' is missing or was modified after the '{stage}' stage. Rerun '{stage}'"
            )
    for relative, expected in manifest.get("upstream", {}).items():
        upstream = config.output_directory / relative / _settings._manifest_artifact
        if not upstream.is_file() or file_hash(upstream) != expected:
            raise ValidationError(
                f"Upstream stage '{relative}' changed after '{directory}' was produced. Rerun '{stage}'"
            )
    return path


def _artifact_names(paths: typing.Dict[str, pathlib.Path]) -> typing.Dict[str, pathlib.Path]:
    return {path.name: path for path in paths.values()}


def _load_prepared(config: PipelineConfig):
    directory = _stage_directory(config, _settings._prepare_directory)
    manifest = verify_manifest(directory, config, "prepare")
    data, split = dataset_module.load_prepared(directory)
    return data, split, manifest


def cmd_prepare(config: PipelineConfig) -> typing.Dict[str, pathlib.Path]:
    """Validate the dataset, split it with the pipeline seed, and write the prepared artifacts"""
    for name in ("users", "items", "interactions"):
        if getattr(config, name) is None:
            raise ValidationError(f"The dataset '{name}' path is required. Set 'dataset.{name}' or '--{name}'")
    data = dataset_module.load_dataset(config.users, config.items, config.interactions)
    split = dataset_module.split_dataset(data, config.seed)
    directory = _stage_directory(config, _settings._prepare_directory)
    paths = dataset_module.save_prepared(data, split, directory)
    manifest = _write_manifest(directory, "prepare", config, _artifact_names(paths))
    print(
        f"Prepared {data.num_users} users, {data.num_items} items, {data.num_interactions} interactions "
        f"(split {'/'.join(str(size) for size in split.sizes())}) in '{directory}'"
    )
    return {**paths, "manifest": manifest}


def _layers_directory(config: PipelineConfig, strategy: str) -> pathlib.Path:
    return _stage_directory(config, _settings._layers_directory, strategy)


def _propagation_record(config: PipelineConfig) -> dict:
    record = dataclasses.asdict(config.propagation)
    record["llm_backend"] = config.llm.backend
    record["llm_model"] = config.llm.model
    if config.propagation.strategy == "convolutional":
        record.pop("num_layers")
    return record


def _check_resumable(directory: pathlib.Path, config: PipelineConfig) -> None:
    """Refuse to mix checkpoints produced with different inference settings"""
    path = directory / _settings._propagation_record
    record = _propagation_record(config)
    if path.is_file() and read_json(path) != record:
        raise ValidationError(
            f"Description layers in '{directory}' were produced with different inference settings. "
            "Remove the directory or choose another output directory"
        )
    write_json(path, record)


def cmd_infer(
    config: PipelineConfig,
    gateway: typing.Optional[llm_gateway.LLMGateway] = None,
) -> typing.Dict[str, pathlib.Path]:
    """Materialize the description layers of the configured strategy over the train graph. Resumable."""
    data, split, prepared_manifest = _load_prepared(config)
    strategy = config.propagation.strategy
    directory = _layers_directory(config, strategy)
    directory.mkdir(parents=True, exist_ok=True)
    _check_resumable(directory, config)
    if gateway is None:
        cache_path = directory / _settings._llm_cache_artifact if config.llm.backend == "remote" else None
        gateway = llm_gateway.LLMGateway(config.llm, cache_path=cache_path)
    graph = dataset_module.build_graph(data, split.train)
    try:
        layers, report = conv_inference.infer(
            data, config.propagation, gateway=gateway, checkpoint_directory=directory, graph=graph
        )
    except BackendError as err:
        raise BackendError(
            f"{err}\nCompleted layers and nodes are checkpointed in '{directory}'. Rerun 'infer' to resume"
        )
    finally:
        gateway.save_cache()
    # Drop deeper layers left by an earlier, longer run
    for path in directory.glob("layer_*.jsonl"):
        suffix = path.name[len("layer_") : -len(".jsonl")]
        if suffix.isdigit() and int(suffix) > layers.num_layers:
            path.unlink()
    report_path = conv_inference.write_token_report(report, directory / _settings._token_report_artifact)
    artifacts = {
        path.name: path
        for path in (
            directory / _settings._layer_artifact.format(layer=layer) for layer in range(1, layers.num_layers + 1)
        )
    }
    artifacts[report_path.name] = report_path
    manifest = _write_manifest(directory, "infer", config, artifacts, upstream=[prepared_manifest])
    print(
        f"Wrote {layers.num_layers} '{strategy}' description layer(s) with {report.backend_calls} backend call(s) "
        f"to '{directory}'"
    )
    return {**artifacts, "manifest": manifest}


def _text_directory(config: PipelineConfig, strategy: str) -> pathlib.Path:
    return _stage_directory(config, _settings._text_directory, strategy)


def cmd_encode(
    config: PipelineConfig,
    encoder: typing.Optional[text_encoder.TextEncoder] = None,
) -> typing.Dict[str, pathlib.Path]:
    """Embed every description layer of the configured strategy"""
    strategy = config.propagation.strategy
    layers_directory = _layers_directory(config, strategy)
    layers_manifest = verify_manifest(layers_directory, config, "infer")
    layers = conv_inference.load_layers(layers_directory)
    encoder = encoder if encoder is not None else text_encoder.TextEncoder(config.encoder)
    table = text_encoder.encode_layers(layers, encoder=encoder)
    directory = _text_directory(config, strategy)
    paths = table.save(directory)
    manifest = _write_manifest(directory, "encode", config, _artifact_names(paths), upstream=[layers_manifest])
    print(f"Encoded {layers.num_layers} layer(s) into {table.dimension}-dimensional embeddings in '{directory}'")
    return {**paths, "manifest": manifest}


def _load_text_table(config: PipelineConfig, variant: str, num_layers: typing.Optional[int] = None):
    """Text table of the variant's strategy, truncated to ``num_layers`` when the strategy is prefix consistent"""
    strategy = _settings._variant_strategy[variant]
    if strategy is None:
        return None, None
    directory = _text_directory(config, strategy)
    manifest = verify_manifest(directory, config, "encode")
    table = text_encoder.TextTable.load(directory)
    num_layers = num_layers if num_layers is not None else config.propagation.num_layers
    if table.num_layers == num_layers:
        return table, manifest
    if strategy == "plain" or table.num_layers < num_layers:
        raise ValidationError(
            f"Text embeddings in '{directory}' hold {table.num_layers} layer(s). Variant '{variant}' needs "
            f"{num_layers}. Rerun 'infer' and 'encode' with '--num-layers {num_layers}'"
        )
    return table.truncate(num_layers), manifest


def _train_directory(config: PipelineConfig, variant: str) -> pathlib.Path:
    return _stage_directory(config, _settings._train_directory, variant)


def _train(config: PipelineConfig, data, split, table, seed: int) -> training.TrainResult:
    train_config = dataclasses.replace(config.train, seed=seed)
    graph = dataset_module.build_graph(data, split.train)
    if config.variant == "mf":
        return training.train_mf_baseline(data, split, train_config, dimension=config.encoder.dimension, graph=graph)
    return training.train(data, split, table, train_config, variant=config.variant, graph=graph)


def cmd_train(config: PipelineConfig) -> typing.Dict[str, pathlib.Path]:
    """Train the configured variant and write the best checkpoint and the epoch history

    On divergence the last good parameters and the finished epochs are written before the error propagates. No
    manifest is written, so downstream stages refuse the partial checkpoint.

    :raises graph_scribe.training.TrainingDivergedError: non-finite loss or parameters
    """
    data, split, prepared_manifest = _load_prepared(config)
    table, text_manifest = _load_text_table(config, config.variant)
    directory = _train_directory(config, config.variant)
    try:
        result = _train(config, data, split, table, config.seed)
    except training.TrainingDivergedError as err:
        (directory / _settings._manifest_artifact).unlink(missing_ok=True)
        params_path = model.save_params(err.params, directory / _settings._params_artifact)
        write_jsonl(directory / _settings._history_artifact, err.history)
        raise training.TrainingDivergedError(
            f"{err}\nThe last good parameters are saved in '{params_path}'", params=err.params, history=err.history
        )
    params_path = model.save_params(result.params, directory / _settings._params_artifact)
    history_path = write_jsonl(directory / _settings._history_artifact, result.history)
    upstream = [prepared_manifest] + ([text_manifest] if text_manifest is not None else [])
    manifest = _write_manifest(
        directory,
        "train",
        config,
        {params_path.name: params_path},
        upstream=upstream,
        logs={history_path.name: history_path},
    )
    print(
        f"Trained variant '{config.variant}' for {len(result.history)} epoch(s), best epoch {result.best_epoch}, "
        f"checkpoint '{params_path}'"
    )
    return {"params": params_path, "history": history_path, "manifest": manifest}


def cmd_evaluate(
    config: PipelineConfig,
    scores: typing.Optional[typing.Union[str, pathlib.Path]] = None,
) -> typing.Dict[str, pathlib.Path]:
    """Evaluate the trained variant, or an external score table, on the test split"""
    data, split, prepared_manifest = _load_prepared(config)
    upstream = [prepared_manifest]
    table = None
    scorer_factory = None
    if scores is not None:
        label = "scores"
        scorer = evaluation.TableScorer.from_tsv(scores, data)
        if config.evaluation.retrain:
            raise ValidationError("Retraining is unavailable when evaluating an external score table")
    else:
        label = config.variant
        train_directory = _train_directory(config, config.variant)
        upstream.append(verify_manifest(train_directory, config, "train"))
        params = model.load_params(train_directory / _settings._params_artifact)
        table, _ = _load_text_table(config, config.variant, params.num_layers if config.variant != "mf" else None)
        graph = dataset_module.build_graph(data, split.train)
        scorer = evaluation.EmbeddingScorer(training.final_embeddings(params, graph, table))

        def scorer_factory(seed: int) -> evaluation.EmbeddingScorer:
            result = _train(config, data, split, table, seed)
            return evaluation.EmbeddingScorer(training.final_embeddings(result.params, result.graph, table))

    report = evaluation.evaluate(scorer, data, split, config.evaluation, scorer_factory=scorer_factory)
    directory = _stage_directory(config, _settings._evaluate_directory, label)
    metrics = report.to_dict(ids=data.user_ids)
    metrics.update(variant=label, seed=config.seed, retrain=config.evaluation.retrain)
    artifacts = {"metrics": write_json(directory / _settings._metrics_artifact, metrics)}
    try:
        subgroups = evaluation.subgroup_analysis(report, data, config.evaluation.num_groups).to_dict()
    except ValidationError as err:
        _logger.warning("Skipping the subgroup analysis: %s", err)
        subgroups = {"groups": [], "skipped": str(err)}
    artifacts["subgroups"] = write_json(directory / _settings._subgroups_artifact, subgroups)
    if table is not None:
        profile = evaluation.layer_similarity_profile(table, split)
        artifacts["layer_similarity"] = write_json(
            directory / _settings._similarity_artifact, {"mean_cosine_per_layer": profile}
        )
    manifest = _write_manifest(directory, "evaluate", config, _artifact_names(artifacts), upstream=upstream)
    print(
        f"MAP@{report.cutoff} {report.map_at_n:.6f} NDCG@{report.cutoff} {report.ndcg_at_n:.6f} over "
        f"{len(report.seeds)} run(s), written to '{directory}'"
    )
    return {**artifacts, "manifest": manifest}


def cmd_token_report(config: PipelineConfig) -> typing.Dict[str, pathlib.Path]:
    """Estimate both strategies' LLM node visits on the full interaction graph

    Realized reports of finished ``infer`` runs are included under ``realized``.
    """
    data, _, prepared_manifest = _load_prepared(config)
    graph = dataset_module.build_graph(data)
    lengths = conv_inference.raw_token_lengths(data)
    num_layers = config.propagation.num_layers
    record = {
        "num_layers": num_layers,
        "neighbor_cap": config.propagation.neighbor_cap,
        "estimates": {
            strategy: conv_inference.estimate_token_cost(
                graph, num_layers, strategy, token_lengths=lengths, neighbor_cap=config.propagation.neighbor_cap
            ).to_dict()
            for strategy in ("convolutional", "plain")
        },
        "realized": {},
    }
    for strategy in _settings._strategy_choices:
        path = _layers_directory(config, strategy) / _settings._token_report_artifact
        if path.is_file():
            record["realized"][strategy] = read_json(path)
    directory = _stage_directory(config, _settings._token_report_directory)
    report_path = write_json(directory / _settings._token_report_artifact, record)
    manifest = _write_manifest(
        directory, "token-report", config, {report_path.name: report_path}, upstream=[prepared_manifest]
    )
    convolutional = record["estimates"]["convolutional"]["total_node_visits"]
    plain = record["estimates"]["plain"]["total_node_visits"]
    print(f"Node visits with {num_layers} layer(s): convolutional {convolutional}, plain {plain}")
    return {"token_report": report_path, "manifest": manifest}


def cmd_sft_export(config: PipelineConfig) -> typing.Dict[str, pathlib.Path]:
    """Write the fine-tuning pairs of the train interactions"""
    data, split, prepared_manifest = _load_prepared(config)
    directory = _stage_directory(config, _settings._sft_directory)
    path = directory / _settings._sft_artifact
    pairs = llm_gateway.export_sft_pairs(data, split, path)
    manifest = _write_manifest(directory, "sft-export", config, {path.name: path}, upstream=[prepared_manifest])
    print(f"Wrote {len(pairs)} fine-tuning pair(s) to '{path}'")
    return {"sft_pairs": path, "manifest": manifest}


def cmd_sweep(config: PipelineConfig) -> typing.Dict[str, pathlib.Path]:
    """Train and evaluate the full variant for every configured layer count"""
    data, split, prepared_manifest = _load_prepared(config)
    table, text_manifest = _load_text_table(config, "full", max(config.sweep_layers))
    results = evaluation.layer_sweep(
        data,
        split,
        table,
        layers=config.sweep_layers,
        train_config=config.train,
        protocol=config.evaluation,
        graph=dataset_module.build_graph(data, split.train),
    )
    directory = _stage_directory(config, _settings._sweep_directory)
    path = write_json(directory / _settings._sweep_artifact, {"seed": config.seed, "results": results})
    manifest = _write_manifest(
        directory, "sweep", config, {path.name: path}, upstream=[prepared_manifest, text_manifest]
    )
    for result in results:
        print(f"L={result['num_layers']}: MAP@5 {result['map']:.6f} NDCG@5 {result['ndcg']:.6f}")
    return {"layer_sweep": path, "manifest": manifest}
