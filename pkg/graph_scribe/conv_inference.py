"""Layer-by-layer LLM rewriting of node descriptions over the interaction graph

Layers are numbered ``1..L``. Layer 1 holds the raw descriptions and every further layer is produced by one rewrite
pass, so layer ``l`` carries information from nodes at most ``l - 1`` hops away.

Each pass is a synchronous update: prompts for layer ``l + 1`` read only layer ``l`` texts, users and items alike.
Completed layers are persisted as ``layer_<l>.jsonl``. Nodes finished inside an interrupted pass are appended to
``layer_<l>.partial.jsonl`` and skipped when the pass is resumed.
"""

import json
import typing
import logging
import pathlib
import dataclasses

import numpy
import scipy.sparse

from graph_scribe import _settings
from graph_scribe import _parsers
from graph_scribe import llm_gateway
from graph_scribe.dataset import Dataset
from graph_scribe.dataset import GraphTopology
from graph_scribe.dataset import build_graph
from graph_scribe._utilities import content_hash
from graph_scribe._utilities import word_tokens
from graph_scribe._utilities import write_json
from graph_scribe._utilities import ValidationError


_exclude_from_namespace = set(globals().keys())
_logger = logging.getLogger(__name__)

_node_kinds = ("user", "item")


@dataclasses.dataclass
class PropagationConfig:
    """Description inference settings

    :param num_layers: total description layers ``L``, the raw layer included
    :param neighbor_cap: maximum neighbors per prompt
    :param per_neighbor_char_cap: maximum characters kept from each neighbor description
    :param prompt_budget: maximum prompt length in words
    :param max_output_tokens: completion length cap in words
    :param strategy: ``convolutional``, ``plain`` or ``raw``
    :param task: prompt scenario, ``job`` or ``social``
    """

    num_layers: int = _parsers.propagation_defaults["num_layers"]
    neighbor_cap: int = _parsers.propagation_defaults["neighbor_cap"]
    per_neighbor_char_cap: int = _parsers.propagation_defaults["per_neighbor_char_cap"]
    prompt_budget: int = _parsers.propagation_defaults["prompt_budget"]
    max_output_tokens: int = _parsers.propagation_defaults["max_output_tokens"]
    strategy: str = _parsers.propagation_defaults["strategy"]
    task: str = _parsers.propagation_defaults["task"]

    def __post_init__(self):
        if self.num_layers < 1:
            raise ValidationError(f"'num_layers' must be at least 1. Found {self.num_layers}")
        for name in ("neighbor_cap", "per_neighbor_char_cap", "prompt_budget", "max_output_tokens"):
            if getattr(self, name) < 1:
                raise ValidationError(f"'{name}' must be positive. Found {getattr(self, name)}")
        if self.strategy not in _settings._strategy_choices:
            raise ValidationError(
                f"Unknown strategy '{self.strategy}'. Choose from: {', '.join(_settings._strategy_choices)}"
            )
        if self.task not in _settings._task_choices:
            raise ValidationError(f"Unknown task '{self.task}'. Choose from: {', '.join(_settings._task_choices)}")


@dataclasses.dataclass
class DescriptionLayers:
    """Per-node description texts for layers ``1..L``

    ``user_layers[l - 1][u]`` is the layer ``l`` text of user ``u``. Item layers mirror the user layers.
    """

    user_ids: typing.List[str]
    item_ids: typing.List[str]
    user_layers: typing.List[typing.List[str]]
    item_layers: typing.List[typing.List[str]]

    @property
    def num_layers(self) -> int:
        return len(self.user_layers)

    def texts(self, kind: str, layer: int) -> typing.List[str]:
        """Return every ``kind`` node's text at 1-based ``layer``"""
        if not 1 <= layer <= self.num_layers:
            raise ValidationError(f"Layer {layer} is not materialized. Found {self.num_layers} layer(s)")
        return self.user_layers[layer - 1] if kind == "user" else self.item_layers[layer - 1]

    def ids(self, kind: str) -> typing.List[str]:
        return self.user_ids if kind == "user" else self.item_ids

    def with_layer(self, user_texts: typing.List[str], item_texts: typing.List[str]) -> "DescriptionLayers":
        """Return a copy with one more layer on top"""
        return DescriptionLayers(
            user_ids=self.user_ids,
            item_ids=self.item_ids,
            user_layers=self.user_layers + [list(user_texts)],
            item_layers=self.item_layers + [list(item_texts)],
        )


@dataclasses.dataclass
class TokenCostReport:
    """Node descriptions and word tokens fed to the LLM, per rewrite layer

    Convolutional entries are one per rewrite pass, ``L - 1`` in total, and count neighbor descriptions. Plain entries
    are one per hop ``k = 0..L-1`` and count the descriptions reached by walks of length ``k``, the target itself at
    ``k = 0``.
    """

    strategy: str
    num_layers: int
    num_nodes: int
    num_edges: int
    node_visits: typing.List[int]
    word_tokens: typing.List[int]
    estimated_node_visits: float
    backend_calls: int = 0
    truncated_prompts: int = 0

    @property
    def average_degree(self) -> float:
        return 2.0 * self.num_edges / self.num_nodes if self.num_nodes else 0.0

    @property
    def total_node_visits(self) -> int:
        return int(sum(self.node_visits))

    @property
    def total_word_tokens(self) -> int:
        return int(sum(self.word_tokens))

    def to_dict(self) -> dict:
        record = dataclasses.asdict(self)
        record.update(
            average_degree=self.average_degree,
            total_node_visits=self.total_node_visits,
            total_word_tokens=self.total_word_tokens,
        )
        return record


def init_layers(dataset: Dataset) -> DescriptionLayers:
    """Layer 1 is the raw description of every user and item"""
    return DescriptionLayers(
        user_ids=list(dataset.user_ids),
        item_ids=list(dataset.item_ids),
        user_layers=[list(dataset.user_descriptions)],
        item_layers=[list(dataset.item_descriptions)],
    )


def truncate_layers(layers: DescriptionLayers, num_layers: int) -> DescriptionLayers:
    """Keep layers ``1..num_layers``. Synchronous runs are prefix consistent, so the result equals a shorter run.

    :raises ValidationError: ``num_layers`` outside ``1..layers.num_layers``
    """
    if not 1 <= num_layers <= layers.num_layers:
        raise ValidationError(f"Cannot keep {num_layers} of {layers.num_layers} description layer(s)")
    return DescriptionLayers(
        user_ids=layers.user_ids,
        item_ids=layers.item_ids,
        user_layers=layers.user_layers[:num_layers],
        item_layers=layers.item_layers[:num_layers],
    )


def _other(kind: str) -> str:
    return "item" if kind == "user" else "user"


def select_neighbors(
    graph: GraphTopology, kind: str, index: int, cap: typing.Optional[int] = None
) -> numpy.ndarray:
    """Order a node's neighbors by descending degree, ties by ascending index, and keep the first ``cap``

    :param graph: interaction graph
    :param kind: ``"user"`` or ``"item"``
    :param index: dense node index
    :param cap: maximum number of neighbors. ``None`` keeps every neighbor.

    :returns: selected neighbor indices in prompt order
    """
    neighbors = graph.neighbors(kind, index)
    if len(neighbors) == 0:
        return neighbors
    degrees = graph.item_degrees if kind == "user" else graph.user_degrees
    order = numpy.lexsort((neighbors, -degrees[neighbors]))
    selected = neighbors[order]
    return selected if cap is None else selected[:cap]


def _record(kind: str, node_id: str, text: str) -> dict:
    return {"content_hash": content_hash(text), "id": node_id, "node_kind": kind, "text": text}


def _check_record(record: typing.Any, path: pathlib.Path, layer: int, line_number: int) -> dict:
    if (
        not isinstance(record, dict)
        or record.get("node_kind") not in _node_kinds
        or not isinstance(record.get("id"), str)
        or not isinstance(record.get("text"), str)
    ):
        raise ValidationError(f"Corrupt checkpoint for layer {layer}: malformed record in '{path}' line {line_number}")
    if content_hash(record["text"]) != record.get("content_hash"):
        raise ValidationError(
            f"Corrupt checkpoint for layer {layer}: content hash mismatch for {record['node_kind']} "
            f"'{record['id']}' in '{path}' line {line_number}"
        )
    return record


def _write_records(path: pathlib.Path, records: typing.Iterable[dict], mode: str = "w") -> None:
    with open(path, mode, encoding="utf-8", newline="\n") as stream:
        for record in records:
            stream.write(json.dumps(record, sort_keys=True, ensure_ascii=False) + "\n")


def _read_layer_file(path: pathlib.Path, layer: int) -> typing.List[dict]:
    records = []
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except UnicodeDecodeError as err:
        raise ValidationError(f"Corrupt checkpoint for layer {layer}: '{path}' is not UTF-8: {err}")
    for line_number, line in enumerate(lines, start=1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as err:
            raise ValidationError(f"Corrupt checkpoint for layer {layer}: '{path}' line {line_number}: {err}")
        records.append(_check_record(record, path, layer, line_number))
    return records


def save_layers(layers: DescriptionLayers, directory: typing.Union[str, pathlib.Path]) -> typing.List[pathlib.Path]:
    """Write one ``layer_<l>.jsonl`` per layer with records ``{node_kind, id, text, content_hash}``, users first"""
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for layer in range(1, layers.num_layers + 1):
        path = directory / _settings._layer_artifact.format(layer=layer)
        records = [
            _record(kind, node_id, text)
            for kind in _node_kinds
            for node_id, text in zip(layers.ids(kind), layers.texts(kind, layer))
        ]
        _write_records(path, records)
        paths.append(path)
    return paths


def _records_to_texts(
    records: typing.List[dict], user_ids: typing.List[str], item_ids: typing.List[str], path: pathlib.Path, layer: int
) -> typing.Tuple[typing.List[str], typing.List[str]]:
    expected = [("user", node_id) for node_id in user_ids] + [("item", node_id) for node_id in item_ids]
    found = [(record["node_kind"], record["id"]) for record in records]
    if found != expected:
        raise ValidationError(f"Checkpoint for layer {layer} in '{path}' does not list the expected nodes in order")
    texts = [record["text"] for record in records]
    return texts[: len(user_ids)], texts[len(user_ids) :]


def load_layers(
    directory: typing.Union[str, pathlib.Path], num_layers: typing.Optional[int] = None
) -> DescriptionLayers:
    """Read consecutive ``layer_<l>.jsonl`` files starting at layer 1

    :param directory: checkpoint directory
    :param num_layers: number of layers to read. ``None`` reads every consecutive layer on disk.

    :raises ValidationError: missing layer 1 or a requested layer, hash mismatch, or node lists that disagree
    """
    directory = pathlib.Path(directory)
    first = directory / _settings._layer_artifact.format(layer=1)
    if not first.is_file():
        raise ValidationError(f"Could not find description layer checkpoint '{first}'")
    records = _read_layer_file(first, 1)
    user_ids = [record["id"] for record in records if record["node_kind"] == "user"]
    item_ids = [record["id"] for record in records if record["node_kind"] == "item"]
    user_texts, item_texts = _records_to_texts(records, user_ids, item_ids, first, 1)
    layers = DescriptionLayers(user_ids, item_ids, [user_texts], [item_texts])
    layer = 2
    while num_layers is None or layer <= num_layers:
        path = directory / _settings._layer_artifact.format(layer=layer)
        if not path.is_file():
            if num_layers is not None:
                raise ValidationError(f"Could not find description layer checkpoint '{path}'")
            break
        user_texts, item_texts = _records_to_texts(_read_layer_file(path, layer), user_ids, item_ids, path, layer)
        layers = layers.with_layer(user_texts, item_texts)
        layer += 1
    return layers


def _read_partial(path: pathlib.Path, layer: int) -> typing.Dict[typing.Tuple[str, str], str]:
    """Read the finished nodes of an interrupted pass

    A torn final line is discarded and the file is rewritten with the intact records, so later appends start on a
    fresh line.
    """
    if not path.is_file():
        return {}
    content = path.read_text(encoding="utf-8")
    lines = content.split("\n")
    torn = lines.pop()
    records = []
    for line_number, line in enumerate(lines, start=1):
        try:
            record = json.loads(line)
        except json.JSONDecodeError as err:
            raise ValidationError(f"Corrupt checkpoint for layer {layer}: '{path}' line {line_number}: {err}")
        records.append(_check_record(record, path, layer, line_number))
    if torn:
        _logger.warning("Discarding incomplete trailing record of '%s'", path)
        _write_records(path, records)
    return {(record["node_kind"], record["id"]): record["text"] for record in records}


@dataclasses.dataclass
class _NodeTask:
    kind: str
    index: int
    node_id: str
    copy_text: typing.Optional[str] = None
    prompt: typing.Optional[llm_gateway.RenderedPrompt] = None
    visits: int = 0
    visit_tokens: int = 0


@dataclasses.dataclass
class _PassStatistics:
    node_visits: int = 0
    word_tokens: int = 0
    backend_calls: int = 0
    truncated_prompts: int = 0


def _run_pass(
    tasks: typing.List[_NodeTask],
    layer: int,
    config: PropagationConfig,
    gateway: llm_gateway.LLMGateway,
    checkpoint_directory: typing.Optional[pathlib.Path],
) -> typing.Tuple[typing.List[str], typing.List[str], _PassStatistics]:
    """Complete every task of one pass, committing results in node order

    Tasks are dispatched in chunks of the gateway's in-flight limit. Each finished chunk is appended to the partial
    checkpoint before the next chunk starts.
    """
    partial_path = None
    finished = {}
    if checkpoint_directory is not None:
        checkpoint_directory.mkdir(parents=True, exist_ok=True)
        partial_path = checkpoint_directory / _settings._partial_layer_artifact.format(layer=layer)
        finished = _read_partial(partial_path, layer)
        if finished:
            _logger.info("Resuming layer %d with %d finished node(s)", layer, len(finished))

    statistics = _PassStatistics()
    texts: typing.Dict[typing.Tuple[str, str], str] = {}
    chunk_size = max(gateway.config.max_in_flight, 1)
    for start in range(0, len(tasks), chunk_size):
        chunk = tasks[start : start + chunk_size]
        pending = []
        for task in chunk:
            key = (task.kind, task.node_id)
            if key in finished:
                texts[key] = finished[key]
            elif task.prompt is None:
                texts[key] = task.copy_text
            else:
                pending.append(task)
        requests = [
            llm_gateway.CompletionRequest(
                prompt=task.prompt.text,
                max_output_tokens=config.max_output_tokens,
                request_id=f"layer{layer}:{task.kind}:{task.node_id}",
            )
            for task in pending
        ]
        for task, response in zip(pending, gateway.complete_many(requests)):
            texts[(task.kind, task.node_id)] = response.text
            statistics.backend_calls += int(not response.cached)
            statistics.node_visits += task.visits
            statistics.word_tokens += task.visit_tokens
            statistics.truncated_prompts += int(task.prompt.truncated)
        if partial_path is not None:
            new_records = [
                _record(task.kind, task.node_id, texts[(task.kind, task.node_id)])
                for task in chunk
                if (task.kind, task.node_id) not in finished
            ]
            _write_records(partial_path, new_records, mode="a")

    user_texts = [texts[("user", task.node_id)] for task in tasks if task.kind == "user"]
    item_texts = [texts[("item", task.node_id)] for task in tasks if task.kind == "item"]
    return user_texts, item_texts, statistics


def _finish_pass(
    checkpoint_directory: typing.Optional[pathlib.Path],
    layer: int,
    layers: DescriptionLayers,
) -> None:
    if checkpoint_directory is None:
        return
    path = checkpoint_directory / _settings._layer_artifact.format(layer=layer)
    records = [
        _record(kind, node_id, text)
        for kind in _node_kinds
        for node_id, text in zip(layers.ids(kind), layers.texts(kind, layer))
    ]
    _write_records(path, records)
    partial_path = checkpoint_directory / _settings._partial_layer_artifact.format(layer=layer)
    partial_path.unlink(missing_ok=True)


def _propagate(
    layers: DescriptionLayers,
    graph: GraphTopology,
    config: PropagationConfig,
    gateway: llm_gateway.LLMGateway,
    checkpoint_directory: typing.Optional[pathlib.Path],
) -> typing.Tuple[DescriptionLayers, _PassStatistics]:
    layer = layers.num_layers
    current = {kind: layers.texts(kind, layer) for kind in _node_kinds}
    templates = dict(zip(_node_kinds, llm_gateway.task_templates(config.task)))
    tasks = []
    for kind in _node_kinds:
        for index, node_id in enumerate(layers.ids(kind)):
            target = current[kind][index]
            neighbors = select_neighbors(graph, kind, index, config.neighbor_cap)
            if len(neighbors) == 0:
                tasks.append(_NodeTask(kind, index, node_id, copy_text=target))
                continue
            neighbor_texts = [current[_other(kind)][neighbor] for neighbor in neighbors]
            prompt = llm_gateway.render_prompt(
                target,
                neighbor_texts,
                templates[kind],
                budget=config.prompt_budget,
                per_neighbor_char_cap=config.per_neighbor_char_cap,
            )
            kept = neighbor_texts[: prompt.kept_neighbors]
            tasks.append(
                _NodeTask(
                    kind,
                    index,
                    node_id,
                    prompt=prompt,
                    visits=prompt.kept_neighbors,
                    visit_tokens=sum(len(word_tokens(text)) for text in kept),
                )
            )
    user_texts, item_texts, statistics = _run_pass(tasks, layer + 1, config, gateway, checkpoint_directory)
    updated = layers.with_layer(user_texts, item_texts)
    _finish_pass(checkpoint_directory, layer + 1, updated)
    return updated, statistics


def propagate_layer(
    layers: DescriptionLayers,
    graph: GraphTopology,
    config: typing.Optional[PropagationConfig] = None,
    gateway: typing.Optional[llm_gateway.LLMGateway] = None,
    checkpoint_directory: typing.Optional[typing.Union[str, pathlib.Path]] = None,
) -> DescriptionLayers:
    """Add layer ``l + 1`` by rewriting every node from its neighbors' layer ``l`` texts

    Nodes without neighbors copy their layer ``l`` text. Neighbors are chosen and ordered by
    :meth:`select_neighbors`.

    :param layers: layers ``1..l``
    :param graph: interaction graph of the same dataset
    :param config: propagation settings
    :param gateway: completion dispatcher. Defaults to the mock backend.
    :param checkpoint_directory: directory for the layer and partial checkpoints. ``None`` disables checkpoints.

    :returns: layers ``1..l + 1``

    :raises BackendError: any node's completion failed. Finished chunks remain in the partial checkpoint.
    """
    config = config if config is not None else PropagationConfig()
    gateway = gateway if gateway is not None else llm_gateway.LLMGateway()
    directory = pathlib.Path(checkpoint_directory) if checkpoint_directory is not None else None
    updated, _ = _propagate(layers, graph, config, gateway, directory)
    return updated


def _estimate(graph: GraphTopology, num_layers: int, strategy: str) -> float:
    nodes = graph.num_nodes
    degree = 2.0 * graph.num_edges / nodes if nodes else 0.0
    if num_layers < 2 or strategy == "raw":
        return 0.0
    if strategy == "convolutional":
        return nodes * degree * (num_layers - 1)
    return nodes * sum(degree**hop for hop in range(num_layers))


def _empty_report(graph: GraphTopology, config: PropagationConfig) -> TokenCostReport:
    return TokenCostReport(
        strategy=config.strategy,
        num_layers=config.num_layers,
        num_nodes=graph.num_nodes,
        num_edges=graph.num_edges,
        node_visits=[],
        word_tokens=[],
        estimated_node_visits=_estimate(graph, config.num_layers, config.strategy),
    )


def _existing_layers(
    dataset: Dataset, checkpoint_directory: typing.Optional[pathlib.Path], num_layers: int
) -> DescriptionLayers:
    layers = init_layers(dataset)
    if checkpoint_directory is None:
        return layers
    first = checkpoint_directory / _settings._layer_artifact.format(layer=1)
    if not first.is_file():
        save_layers(layers, checkpoint_directory)
        return layers
    existing = load_layers(checkpoint_directory)
    if truncate_layers(existing, 1) != layers:
        raise ValidationError(
            f"Description layer checkpoints in '{checkpoint_directory}' belong to a different dataset. "
            "Remove them or choose another output directory"
        )
    if existing.num_layers > 1:
        _logger.info("Reusing %d completed description layer(s)", min(existing.num_layers, num_layers))
    return truncate_layers(existing, min(existing.num_layers, num_layers))


def run_inference(
    dataset: Dataset,
    config: typing.Optional[PropagationConfig] = None,
    gateway: typing.Optional[llm_gateway.LLMGateway] = None,
    checkpoint_directory: typing.Optional[typing.Union[str, pathlib.Path]] = None,
    graph: typing.Optional[GraphTopology] = None,
) -> typing.Tuple[DescriptionLayers, TokenCostReport]:
    """Materialize ``L`` description layers with the convolutional or raw strategy

    Convolutional runs call :meth:`propagate_layer` ``L - 1`` times. Raw runs copy layer 1 ``L - 1`` times without
    backend calls. Completed layer checkpoints found in ``checkpoint_directory`` are reused.

    :param dataset: validated dataset
    :param config: propagation settings
    :param gateway: completion dispatcher. Defaults to the mock backend.
    :param checkpoint_directory: layer checkpoint directory. ``None`` disables checkpoints.
    :param graph: interaction graph. Built from ``dataset`` when omitted.

    :returns: description layers and the realized token cost

    :raises ValidationError: plain strategy, or checkpoints of another dataset
    :raises BackendError: propagation failure. Completed layers and finished nodes stay checkpointed.
    """
    config = config if config is not None else PropagationConfig()
    if config.strategy == "plain":
        raise ValidationError("The plain strategy runs through 'run_plain_inference'")
    gateway = gateway if gateway is not None else llm_gateway.LLMGateway()
    graph = graph if graph is not None else build_graph(dataset)
    directory = pathlib.Path(checkpoint_directory) if checkpoint_directory is not None else None
    report = _empty_report(graph, config)

    if config.strategy == "raw":
        layers = init_layers(dataset)
        for _ in range(config.num_layers - 1):
            layers = layers.with_layer(layers.texts("user", 1), layers.texts("item", 1))
        if directory is not None:
            save_layers(layers, directory)
        report.node_visits = [0] * (config.num_layers - 1)
        report.word_tokens = [0] * (config.num_layers - 1)
        return layers, report

    layers = _existing_layers(dataset, directory, config.num_layers)
    report.node_visits = [0] * (layers.num_layers - 1)
    report.word_tokens = [0] * (layers.num_layers - 1)
    while layers.num_layers < config.num_layers:
        _logger.info("Rewriting description layer %d of %d", layers.num_layers + 1, config.num_layers)
        layers, statistics = _propagate(layers, graph, config, gateway, directory)
        report.node_visits.append(statistics.node_visits)
        report.word_tokens.append(statistics.word_tokens)
        report.backend_calls += statistics.backend_calls
        report.truncated_prompts += statistics.truncated_prompts
    return layers, report


def _neighborhood(
    graph: GraphTopology,
    texts: typing.Dict[str, typing.List[str]],
    kind: str,
    index: int,
    depth: int,
    cap: int,
) -> typing.Tuple[llm_gateway.NeighborEntry, ...]:
    """Walk tree of ``depth`` hops below a node. Walks may step back to nodes already visited."""
    if depth == 0:
        return ()
    neighbor_kind = _other(kind)
    entries = []
    for neighbor in select_neighbors(graph, kind, index, cap):
        entries.append(
            llm_gateway.NeighborEntry(
                description=texts[neighbor_kind][neighbor],
                kind=neighbor_kind,
                children=_neighborhood(graph, texts, neighbor_kind, neighbor, depth - 1, cap),
            )
        )
    return tuple(entries)


def _subtree_tokens(entry: llm_gateway.NeighborEntry) -> int:
    return len(word_tokens(entry.description)) + sum(_subtree_tokens(child) for child in entry.children)


def run_plain_inference(
    dataset: Dataset,
    config: typing.Optional[PropagationConfig] = None,
    gateway: typing.Optional[llm_gateway.LLMGateway] = None,
    checkpoint_directory: typing.Optional[typing.Union[str, pathlib.Path]] = None,
    graph: typing.Optional[GraphTopology] = None,
) -> typing.Tuple[DescriptionLayers, TokenCostReport]:
    """Describe each node once from its whole ``L - 1`` hop neighborhood nested in a single prompt

    The completion becomes layer ``L``. Layers ``1..L-1`` are raw copies. Nested neighbor descriptions are raw and
    every level of the walk tree is capped by ``neighbor_cap``. With ``L = 2`` the prompts equal the convolutional
    layer 2 prompts.

    :returns: description layers and the realized token cost

    :raises BackendError: completion failure. Finished nodes stay in the partial checkpoint.
    """
    config = config if config is not None else PropagationConfig(strategy="plain")
    gateway = gateway if gateway is not None else llm_gateway.LLMGateway()
    graph = graph if graph is not None else build_graph(dataset)
    directory = pathlib.Path(checkpoint_directory) if checkpoint_directory is not None else None
    report = _empty_report(graph, dataclasses.replace(config, strategy="plain"))

    layers = init_layers(dataset)
    for _ in range(config.num_layers - 2):
        layers = layers.with_layer(layers.texts("user", 1), layers.texts("item", 1))
    if config.num_layers == 1:
        if directory is not None:
            save_layers(layers, directory)
        return layers, report
    if directory is not None:
        save_layers(layers, directory)

    raw = {kind: layers.texts(kind, 1) for kind in _node_kinds}
    templates = dict(zip(_node_kinds, llm_gateway.task_templates(config.task)))
    tasks = []
    for kind in _node_kinds:
        for index, node_id in enumerate(layers.ids(kind)):
            tree = _neighborhood(graph, raw, kind, index, config.num_layers - 1, config.neighbor_cap)
            if not tree:
                tasks.append(_NodeTask(kind, index, node_id, copy_text=raw[kind][index]))
                continue
            prompt = llm_gateway.render_plain_prompt(
                raw[kind][index],
                tree,
                templates[kind],
                budget=config.prompt_budget,
                per_neighbor_char_cap=config.per_neighbor_char_cap,
            )
            kept = tree[: prompt.kept_neighbors]
            tasks.append(
                _NodeTask(
                    kind,
                    index,
                    node_id,
                    prompt=prompt,
                    visits=1 + sum(entry.size() for entry in kept),
                    visit_tokens=len(word_tokens(raw[kind][index])) + sum(_subtree_tokens(entry) for entry in kept),
                )
            )
    user_texts, item_texts, statistics = _run_pass(tasks, config.num_layers, config, gateway, directory)
    layers = layers.with_layer(user_texts, item_texts)
    _finish_pass(directory, config.num_layers, layers)
    report.node_visits = [statistics.node_visits]
    report.word_tokens = [statistics.word_tokens]
    report.backend_calls = statistics.backend_calls
    report.truncated_prompts = statistics.truncated_prompts
    return layers, report


def infer(
    dataset: Dataset,
    config: typing.Optional[PropagationConfig] = None,
    gateway: typing.Optional[llm_gateway.LLMGateway] = None,
    checkpoint_directory: typing.Optional[typing.Union[str, pathlib.Path]] = None,
    graph: typing.Optional[GraphTopology] = None,
) -> typing.Tuple[DescriptionLayers, TokenCostReport]:
    """Dispatch to :meth:`run_plain_inference` or :meth:`run_inference` by ``config.strategy``"""
    config = config if config is not None else PropagationConfig()
    function = run_plain_inference if config.strategy == "plain" else run_inference
    return function(dataset, config, gateway=gateway, checkpoint_directory=checkpoint_directory, graph=graph)


def _capped_adjacency(graph: GraphTopology, cap: typing.Optional[int]) -> scipy.sparse.csr_matrix:
    """Directed ``(N + M) x (N + M)`` matrix with row ``v`` holding the neighbors ``v`` would select"""
    if cap is None:
        return graph.adjacency()
    rows = []
    columns = []
    for kind, offset, count, neighbor_offset in (
        ("user", 0, graph.num_users, graph.num_users),
        ("item", graph.num_users, graph.num_items, 0),
    ):
        for index in range(count):
            selected = select_neighbors(graph, kind, index, cap)
            rows.extend([offset + index] * len(selected))
            columns.extend(neighbor_offset + selected)
    data = numpy.ones(len(rows), dtype=numpy.float64)
    return scipy.sparse.csr_matrix((data, (rows, columns)), shape=(graph.num_nodes, graph.num_nodes))


def estimate_token_cost(
    graph: GraphTopology,
    num_layers: int,
    strategy: str,
    token_lengths: typing.Optional[numpy.ndarray] = None,
    neighbor_cap: typing.Optional[int] = None,
) -> TokenCostReport:
    """Count node descriptions fed to the LLM by traversal, plus the degree-based closed form

    Convolutional passes feed every node its neighbors once per pass: ``sum(degree) * (L - 1)``, estimated as
    ``|G| * average_degree * (L - 1)``. The plain strategy feeds every node the multiset of nodes reached by walks of
    length ``0..L-1``, counted exactly as ``sum_k 1' A^k 1`` and estimated as ``|G| * sum_k average_degree^k``.

    :param graph: interaction graph
    :param num_layers: total description layers ``L``
    :param strategy: ``convolutional``, ``plain`` or ``raw``
    :param token_lengths: per-node description word counts, users first. Omitted word counts are zero.
    :param neighbor_cap: apply the neighbor selection cap to every hop

    :returns: per-layer and total counts

    :raises ValidationError: ``num_layers`` below 1 or unknown strategy
    """
    if num_layers < 1:
        raise ValidationError(f"'num_layers' must be at least 1. Found {num_layers}")
    if strategy not in _settings._strategy_choices:
        raise ValidationError(f"Unknown strategy '{strategy}'. Choose from: {', '.join(_settings._strategy_choices)}")
    ones = numpy.ones(graph.num_nodes, dtype=numpy.float64)
    lengths = (
        numpy.asarray(token_lengths, dtype=numpy.float64)
        if token_lengths is not None
        else numpy.zeros(graph.num_nodes, dtype=numpy.float64)
    )
    if lengths.shape != (graph.num_nodes,):
        raise ValidationError(f"'token_lengths' must hold {graph.num_nodes} entries. Found {lengths.shape}")
    adjacency = _capped_adjacency(graph, neighbor_cap)

    node_visits = []
    tokens = []
    if num_layers >= 2 and strategy == "convolutional":
        visits = int(round((adjacency @ ones).sum()))
        words = int(round((adjacency @ lengths).sum()))
        node_visits = [visits] * (num_layers - 1)
        tokens = [words] * (num_layers - 1)
    elif num_layers >= 2 and strategy == "plain":
        walks = ones
        walk_lengths = lengths
        for _ in range(num_layers):
            node_visits.append(int(round(walks.sum())))
            tokens.append(int(round(walk_lengths.sum())))
            walks = adjacency @ walks
            walk_lengths = adjacency @ walk_lengths
    elif strategy == "raw":
        node_visits = [0] * (num_layers - 1)
        tokens = [0] * (num_layers - 1)

    return TokenCostReport(
        strategy=strategy,
        num_layers=num_layers,
        num_nodes=graph.num_nodes,
        num_edges=graph.num_edges,
        node_visits=node_visits,
        word_tokens=tokens,
        estimated_node_visits=_estimate(graph, num_layers, strategy),
    )


def raw_token_lengths(dataset: Dataset) -> numpy.ndarray:
    """Word count of every raw description, users first"""
    return numpy.array(
        [len(word_tokens(text)) for text in dataset.user_descriptions + dataset.item_descriptions],
        dtype=numpy.int64,
    )


def write_token_report(report: TokenCostReport, path: typing.Union[str, pathlib.Path]) -> pathlib.Path:
    return write_json(path, report.to_dict())


# Limit help() and 'from module import *' behavior to the module's public API
_module_objects = set(globals().keys()) - _exclude_from_namespace
__all__ = [name for name in _module_objects if not name.startswith("_")]
