import json
import logging

import numpy
import pytest
import scipy.sparse.csgraph

from graph_scribe import dataset
from graph_scribe import llm_gateway
from graph_scribe import conv_inference
from graph_scribe import _settings
from graph_scribe._utilities import BackendError
from graph_scribe._utilities import ValidationError


generous = {"prompt_budget": 100000, "max_output_tokens": 100000, "per_neighbor_char_cap": 100000, "neighbor_cap": 100}


def _dataset(num_users, num_items, pairs, user_descriptions=None, item_descriptions=None):
    return dataset.Dataset(
        user_ids=[f"u{user}" for user in range(num_users)],
        user_descriptions=user_descriptions or [f"user{user}" for user in range(num_users)],
        item_ids=[f"i{item}" for item in range(num_items)],
        item_descriptions=item_descriptions or [f"item{item}" for item in range(num_items)],
        interactions=pairs,
    )


def _regular_dataset():
    """Five users and five items, every node of degree three"""
    pairs = [(user, (user + offset) % 5) for user in range(5) for offset in range(3)]
    return _dataset(5, 5, pairs)


def _random_dataset(seed, num_users=6, num_items=6, num_edges=12):
    rng = numpy.random.default_rng(seed)
    pairs = {(int(rng.integers(num_users)), int(rng.integers(num_items))) for _ in range(num_edges)}
    return _dataset(num_users, num_items, sorted(pairs))


class RecordingGateway(llm_gateway.LLMGateway):
    """Mock gateway that keeps every request and optionally fails after ``fail_after`` completions"""

    def __init__(self, fail_after=None, **kwargs):
        super().__init__(**kwargs)
        self.requests = []
        self.fail_after = fail_after

    def complete(self, request):
        if self.fail_after is not None and self.calls >= self.fail_after:
            raise BackendError(f"Simulated outage at '{request.request_id}'")
        self.requests.append(request)
        return super().complete(request)


def test_propagation_config():
    with pytest.raises(ValidationError, match="at least 1"):
        conv_inference.PropagationConfig(num_layers=0)
    with pytest.raises(ValidationError, match="Unknown strategy"):
        conv_inference.PropagationConfig(strategy="deep")
    with pytest.raises(ValidationError, match="'neighbor_cap' must be positive"):
        conv_inference.PropagationConfig(neighbor_cap=0)


def test_init_layers():
    data = dataset.synthetic_block_dataset(num_users=6, num_items=5, seed=0)
    layers = conv_inference.init_layers(data)
    assert layers.num_layers == 1
    assert len(layers.texts("user", 1)) + len(layers.texts("item", 1)) == 11
    assert layers.texts("user", 1) == data.user_descriptions
    with pytest.raises(ValidationError, match="not materialized"):
        layers.texts("user", 2)


def test_select_neighbors():
    # Item degrees: i0 -> 1, i1 -> 3, i2 -> 3, i3 -> 2
    data = _dataset(4, 4, [(0, 0), (0, 1), (0, 2), (0, 3), (1, 1), (1, 2), (2, 1), (2, 2), (2, 3)])
    graph = dataset.build_graph(data)
    numpy.testing.assert_array_equal(conv_inference.select_neighbors(graph, "user", 0), [1, 2, 3, 0])
    numpy.testing.assert_array_equal(conv_inference.select_neighbors(graph, "user", 0, cap=2), [1, 2])
    numpy.testing.assert_array_equal(conv_inference.select_neighbors(graph, "user", 3), [])


def test_propagate_neighbor_cap():
    pairs = [(0, item) for item in range(50)]
    data = _dataset(1, 50, pairs)
    graph = dataset.build_graph(data)
    gateway = RecordingGateway()
    config = conv_inference.PropagationConfig(num_layers=2, neighbor_cap=10)
    layers = conv_inference.propagate_layer(conv_inference.init_layers(data), graph, config, gateway)
    user_prompt = next(request.prompt for request in gateway.requests if request.request_id == "layer2:user:u0")
    listed = [f"item{item}" for item in range(50) if f"item{item}," in user_prompt or f"item{item}]" in user_prompt]
    assert listed == [f"item{item}" for item in range(10)]
    assert layers.texts("user", 2)[0] == "user0 " + " ".join(f"item{item}" for item in range(10))


def test_information_reach_path():
    # u0 - i0 - u1, marker only in u1
    data = _dataset(2, 1, [(0, 0), (1, 0)], user_descriptions=["alpha", "beta Z"], item_descriptions=["gamma"])
    config = conv_inference.PropagationConfig(num_layers=3)
    layers, _ = conv_inference.run_inference(data, config)
    assert "Z" not in layers.texts("user", 2)[0].split()
    assert "Z" in layers.texts("item", 2)[0].split()
    assert "Z" in layers.texts("user", 3)[0].split()


@pytest.mark.parametrize("seed", range(5))
def test_information_reach_matches_breadth_first_search(seed):
    data = _random_dataset(seed, num_users=5, num_items=5, num_edges=7)
    data = _dataset(
        data.num_users,
        data.num_items,
        data.interactions,
        user_descriptions=[f"mu{user}" for user in range(data.num_users)],
        item_descriptions=[f"mi{item}" for item in range(data.num_items)],
    )
    graph = dataset.build_graph(data)
    config = conv_inference.PropagationConfig(num_layers=4, **generous)
    layers, _ = conv_inference.run_inference(data, config)

    distances = scipy.sparse.csgraph.shortest_path(graph.adjacency(), unweighted=True)
    markers = [f"mu{user}" for user in range(data.num_users)] + [f"mi{item}" for item in range(data.num_items)]
    for layer in range(1, 5):
        texts = layers.texts("user", layer) + layers.texts("item", layer)
        for target, text in enumerate(texts):
            tokens = set(text.split())
            for source, marker in enumerate(markers):
                assert (marker in tokens) == (distances[source, target] <= layer - 1)


def test_layer_barrier():
    data = _dataset(2, 2, [(0, 0), (0, 1), (1, 1)])
    gateway = RecordingGateway()
    config = conv_inference.PropagationConfig(num_layers=3, **generous)
    layers, _ = conv_inference.run_inference(data, config, gateway=gateway)
    graph = dataset.build_graph(data)
    user_template, item_template = llm_gateway.task_templates("job")

    layer_ids = [int(request.request_id.split(":")[0].removeprefix("layer")) for request in gateway.requests]
    assert layer_ids == sorted(layer_ids)
    for request in gateway.requests:
        name, kind, node_id = request.request_id.split(":")
        layer = int(name.removeprefix("layer"))
        index = layers.ids(kind).index(node_id)
        other = "item" if kind == "user" else "user"
        neighbors = conv_inference.select_neighbors(graph, kind, index, config.neighbor_cap)
        expected = llm_gateway.render_prompt(
            layers.texts(kind, layer - 1)[index],
            [layers.texts(other, layer - 1)[neighbor] for neighbor in neighbors],
            user_template if kind == "user" else item_template,
            budget=config.prompt_budget,
            per_neighbor_char_cap=config.per_neighbor_char_cap,
        )
        assert request.prompt == expected.text


def test_backend_calls():
    # Seven nodes, u3 and i2 isolated
    data = _dataset(4, 3, [(0, 0), (1, 0), (1, 1), (2, 1)])
    gateway = RecordingGateway()
    config = conv_inference.PropagationConfig(num_layers=3)
    layers, report = conv_inference.run_inference(data, config, gateway=gateway)
    assert gateway.calls == 2 * 5
    assert report.backend_calls == 10
    assert layers.texts("user", 3)[3] == "user3"
    assert layers.texts("item", 2)[2] == "item2"
    assert report.node_visits == [8, 8]


def test_raw_strategy():
    data = _regular_dataset()
    gateway = RecordingGateway()
    config = conv_inference.PropagationConfig(num_layers=3, strategy="raw")
    layers, report = conv_inference.infer(data, config, gateway=gateway)
    assert gateway.calls == 0
    assert layers.num_layers == 3
    assert layers.texts("item", 3) == data.item_descriptions
    assert report.node_visits == [0, 0]


def test_run_inference_rejects_plain():
    with pytest.raises(ValidationError, match="run_plain_inference"):
        conv_inference.run_inference(_regular_dataset(), conv_inference.PropagationConfig(strategy="plain"))


def test_single_layer():
    data = _regular_dataset()
    layers, report = conv_inference.run_inference(data, conv_inference.PropagationConfig(num_layers=1))
    assert layers.num_layers == 1
    assert report.node_visits == []


def test_checkpoint_round_trip(tmp_path):
    data = dataset.synthetic_block_dataset(num_users=6, num_items=6, seed=2)
    config = conv_inference.PropagationConfig(num_layers=3)
    layers, _ = conv_inference.run_inference(data, config, checkpoint_directory=tmp_path)
    assert sorted(path.name for path in tmp_path.iterdir()) == ["layer_1.jsonl", "layer_2.jsonl", "layer_3.jsonl"]
    first = json.loads((tmp_path / "layer_1.jsonl").read_text().splitlines()[0])
    assert sorted(first) == ["content_hash", "id", "node_kind", "text"]

    loaded = conv_inference.load_layers(tmp_path)
    assert loaded == layers
    assert conv_inference.load_layers(tmp_path, num_layers=2) == conv_inference.truncate_layers(layers, 2)
    with pytest.raises(ValidationError, match="Could not find"):
        conv_inference.load_layers(tmp_path, num_layers=4)

    # Completed layers are reused without backend calls
    gateway = RecordingGateway()
    rerun, report = conv_inference.run_inference(data, config, gateway=gateway, checkpoint_directory=tmp_path)
    assert rerun == layers
    assert gateway.calls == 0


def test_checkpoint_corruption(tmp_path):
    data = dataset.synthetic_block_dataset(num_users=4, num_items=4, seed=0)
    conv_inference.run_inference(data, conv_inference.PropagationConfig(num_layers=2), checkpoint_directory=tmp_path)
    path = tmp_path / "layer_2.jsonl"
    records = [json.loads(line) for line in path.read_text().splitlines()]
    records[1]["text"] = "tampered"
    path.write_text("".join(json.dumps(record) + "\n" for record in records))
    with pytest.raises(ValidationError, match="layer 2.*content hash mismatch"):
        conv_inference.load_layers(tmp_path)


def test_checkpoint_other_dataset(tmp_path):
    config = conv_inference.PropagationConfig(num_layers=2)
    conv_inference.run_inference(dataset.synthetic_block_dataset(seed=0), config, checkpoint_directory=tmp_path)
    with pytest.raises(ValidationError, match="different dataset"):
        conv_inference.run_inference(dataset.synthetic_block_dataset(seed=1), config, checkpoint_directory=tmp_path)


def test_resume_after_backend_failure(tmp_path, caplog):
    data = dataset.synthetic_block_dataset(num_users=6, num_items=6, seed=4)
    config = conv_inference.PropagationConfig(num_layers=2)
    sequential = llm_gateway.BackendConfig(max_in_flight=1)
    expected, _ = conv_inference.run_inference(data, config)

    failing = RecordingGateway(fail_after=5, config=sequential)
    with pytest.raises(BackendError, match="Simulated outage"):
        conv_inference.run_inference(data, config, gateway=failing, checkpoint_directory=tmp_path)
    partial = tmp_path / _settings._partial_layer_artifact.format(layer=2)
    assert not (tmp_path / "layer_2.jsonl").exists()
    assert len(partial.read_text().splitlines()) == 5

    # A write interrupted mid-record leaves a torn line behind
    with open(partial, "a") as stream:
        stream.write('{"node_kind": "user", "id"')

    resumed = RecordingGateway(config=sequential)
    with caplog.at_level(logging.WARNING, logger="graph_scribe.conv_inference"):
        layers, _ = conv_inference.run_inference(data, config, gateway=resumed, checkpoint_directory=tmp_path)
    assert "incomplete trailing record" in caplog.text
    assert resumed.calls == 12 - 5
    assert layers == expected
    assert not partial.exists()


def test_resume_twice_after_torn_record(tmp_path):
    data = dataset.synthetic_block_dataset(num_users=6, num_items=6, seed=4)
    config = conv_inference.PropagationConfig(num_layers=2)
    sequential = llm_gateway.BackendConfig(max_in_flight=1)
    expected, _ = conv_inference.run_inference(data, config)
    partial = tmp_path / _settings._partial_layer_artifact.format(layer=2)

    with pytest.raises(BackendError):
        conv_inference.run_inference(
            data, config, gateway=RecordingGateway(fail_after=4, config=sequential), checkpoint_directory=tmp_path
        )
    with open(partial, "a") as stream:
        stream.write('{"node_kind": "item", "id"')

    # The first resume drops the torn tail before appending, then fails again
    with pytest.raises(BackendError):
        conv_inference.run_inference(
            data, config, gateway=RecordingGateway(fail_after=3, config=sequential), checkpoint_directory=tmp_path
        )
    lines = partial.read_text().splitlines()
    assert len(lines) == 4 + 3
    assert all(json.loads(line)["node_kind"] in ("user", "item") for line in lines)

    final = RecordingGateway(config=sequential)
    layers, _ = conv_inference.run_inference(data, config, gateway=final, checkpoint_directory=tmp_path)
    assert final.calls == 12 - 7
    assert layers == expected
    assert not partial.exists()


def test_plain_inference_star():
    data = _dataset(
        3,
        2,
        [(0, 0), (1, 0), (2, 0), (0, 1)],
        user_descriptions=["alpha", "beta", "gamma"],
        item_descriptions=["center", "leaf"],
    )
    gateway = RecordingGateway()
    config = conv_inference.PropagationConfig(num_layers=3, strategy="plain")
    layers, report = conv_inference.infer(data, config, gateway=gateway)
    center = next(request.prompt for request in gateway.requests if request.request_id == "layer3:item:i0")
    assert (
        "[alpha who is interested in jobs [center, leaf], beta who is interested in jobs [center], "
        "gamma who is interested in jobs [center]]"
    ) in center
    assert layers.num_layers == 3
    assert layers.texts("item", 2) == ["center", "leaf"]
    assert layers.texts("item", 3)[0] == "center alpha leaf beta gamma"
    assert report.backend_calls == 5


def test_plain_two_layers_matches_convolutional():
    data = _random_dataset(3)
    convolutional, _ = conv_inference.run_inference(data, conv_inference.PropagationConfig(num_layers=2))
    plain, _ = conv_inference.run_plain_inference(
        data, conv_inference.PropagationConfig(num_layers=2, strategy="plain")
    )
    assert plain == convolutional


def test_token_cost_regular_graph():
    data = _regular_dataset()
    graph = dataset.build_graph(data)
    convolutional = conv_inference.estimate_token_cost(graph, 3, "convolutional")
    plain = conv_inference.estimate_token_cost(graph, 3, "plain")
    assert convolutional.node_visits == [30, 30]
    assert convolutional.total_node_visits == 60
    assert convolutional.estimated_node_visits == pytest.approx(60.0)
    assert plain.node_visits == [10, 30, 90]
    assert plain.total_node_visits == 130
    assert plain.estimated_node_visits == pytest.approx(130.0)
    assert convolutional.average_degree == pytest.approx(3.0)

    # Realized counts agree with the traversal counts
    _, realized = conv_inference.infer(data, conv_inference.PropagationConfig(num_layers=3))
    assert realized.total_node_visits == 60
    _, realized = conv_inference.infer(data, conv_inference.PropagationConfig(num_layers=3, strategy="plain"))
    assert realized.total_node_visits == 130


def test_token_cost_word_tokens():
    data = _regular_dataset()
    graph = dataset.build_graph(data)
    lengths = conv_inference.raw_token_lengths(data)
    numpy.testing.assert_array_equal(lengths, [1] * 10)
    report = conv_inference.estimate_token_cost(graph, 2, "convolutional", token_lengths=lengths * 2)
    assert report.word_tokens == [60]
    with pytest.raises(ValidationError, match="10 entries"):
        conv_inference.estimate_token_cost(graph, 2, "convolutional", token_lengths=[1, 2])


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("num_layers", [2, 3, 4])
def test_token_cost_dominance(seed, num_layers):
    graph = dataset.build_graph(_random_dataset(seed, num_users=7, num_items=8, num_edges=15))
    convolutional = conv_inference.estimate_token_cost(graph, num_layers, "convolutional")
    plain = conv_inference.estimate_token_cost(graph, num_layers, "plain")
    assert min(convolutional.node_visits) >= 0
    assert convolutional.total_node_visits <= plain.total_node_visits


def test_token_cost_neighbor_cap():
    # One user with four items: capping at two halves the user's visits
    data = _dataset(1, 4, [(0, item) for item in range(4)])
    graph = dataset.build_graph(data)
    uncapped = conv_inference.estimate_token_cost(graph, 2, "convolutional")
    capped = conv_inference.estimate_token_cost(graph, 2, "convolutional", neighbor_cap=2)
    assert uncapped.node_visits == [8]
    assert capped.node_visits == [6]


def test_write_token_report(tmp_path):
    graph = dataset.build_graph(_regular_dataset())
    report = conv_inference.estimate_token_cost(graph, 3, "plain")
    path = conv_inference.write_token_report(report, tmp_path / "report.json")
    record = json.loads(path.read_text())
    assert record["total_node_visits"] == 130
    assert record["strategy"] == "plain"
    assert record["average_degree"] == pytest.approx(3.0)
