import math
import itertools
from contextlib import nullcontext as does_not_raise
from unittest.mock import MagicMock

import numpy
import pytest

from graph_scribe import dataset
from graph_scribe import evaluation
from graph_scribe import model
from graph_scribe import text_encoder
from graph_scribe import training
from graph_scribe._utilities import ValidationError


map_at_n = {
    "perfect": ([1, 2, 3, 4, 5], [1, 2], 5, 1.0),
    "second and fourth": ([9, 1, 8, 2, 7], [1, 2], 5, (1.0 / 2.0 + 2.0 / 4.0) / 2.0),
    "miss": ([9, 8, 7, 6, 5], [1], 5, 0.0),
    "beyond cutoff": ([9, 8, 7, 6, 5, 1], [1], 5, 0.0),
    "more relevant than cutoff": ([1, 2, 9], [1, 2, 3, 4], 2, 1.0),
}


@pytest.mark.parametrize(
    "ranked, relevant, cutoff, expected",
    map_at_n.values(),
    ids=map_at_n.keys(),
)
def test_map_at_n(ranked, relevant, cutoff, expected):
    assert evaluation.map_at_n(ranked, relevant, cutoff) == pytest.approx(expected)


ndcg_at_n = {
    "perfect": ([1, 2, 3], [1, 2], 5, 1.0),
    "second": ([9, 1, 8], [1], 5, 1.0 / numpy.log2(3.0)),
    "second and third": (
        [9, 1, 2],
        [1, 2],
        5,
        (1.0 / numpy.log2(3.0) + 1.0 / numpy.log2(4.0)) / (1.0 + 1.0 / numpy.log2(3.0)),
    ),
    "miss": ([9, 8], [1], 5, 0.0),
}


@pytest.mark.parametrize(
    "ranked, relevant, cutoff, expected",
    ndcg_at_n.values(),
    ids=ndcg_at_n.keys(),
)
def test_ndcg_at_n(ranked, relevant, cutoff, expected):
    assert evaluation.ndcg_at_n(ranked, relevant, cutoff) == pytest.approx(expected)


metric_errors = {
    "empty relevant": ([1, 2], [], 5, pytest.raises(ValidationError, match="empty relevant")),
    "zero cutoff": ([1, 2], [1], 0, pytest.raises(ValidationError, match="at least 1")),
    "valid": ([1, 2], [1], 1, does_not_raise()),
}


@pytest.mark.parametrize(
    "ranked, relevant, cutoff, outcome",
    metric_errors.values(),
    ids=metric_errors.keys(),
)
def test_metric_errors(ranked, relevant, cutoff, outcome):
    with outcome:
        evaluation.map_at_n(ranked, relevant, cutoff)
    with outcome:
        evaluation.ndcg_at_n(ranked, relevant, cutoff)


def _precision_oracle(ranking, relevant, cutoff):
    """Average of precision@k over the relevant positions k of the top ``cutoff``"""
    total = 0.0
    for k in range(1, min(cutoff, len(ranking)) + 1):
        if ranking[k - 1] in relevant:
            total += len(set(ranking[:k]) & relevant) / k
    return total / min(len(relevant), cutoff)


def _dcg_oracle(ranking, relevant, cutoff):
    return sum(
        (1.0 if ranking[k - 1] in relevant else 0.0) / math.log2(k + 1)
        for k in range(1, min(cutoff, len(ranking)) + 1)
    )


exhaustive_rankings = {
    "three candidates, one relevant": (3, 1),
    "five candidates, two relevant": (5, 2),
    "six candidates, three relevant": (6, 3),
    "eight candidates, one relevant": (8, 1),
    "eight candidates, three relevant": (8, 3),
}


@pytest.mark.parametrize(
    "length, num_relevant",
    exhaustive_rankings.values(),
    ids=exhaustive_rankings.keys(),
)
def test_metrics_exhaustive_oracle(length, num_relevant):
    cutoff = 5
    relevant = set(range(num_relevant))
    rankings = list(itertools.permutations(range(length)))
    ideal = max(_dcg_oracle(ranking, relevant, cutoff) for ranking in rankings)
    for ranking in rankings:
        assert evaluation.map_at_n(ranking, relevant, cutoff) == pytest.approx(
            _precision_oracle(ranking, relevant, cutoff), abs=1e-12
        )
        assert evaluation.ndcg_at_n(ranking, relevant, cutoff) == pytest.approx(
            _dcg_oracle(ranking, relevant, cutoff) / ideal, abs=1e-12
        )


pinned_metrics = {
    "average precision, relevant at ranks 1 and 3": (evaluation.map_at_n, [1, 9, 2, 8, 7], [1, 2], 0.833333),
    "ndcg, single relevant at rank 3": (evaluation.ndcg_at_n, [9, 8, 1, 7, 6], [1], 0.5),
}


@pytest.mark.parametrize(
    "metric, ranked, relevant, expected",
    pinned_metrics.values(),
    ids=pinned_metrics.keys(),
)
def test_metrics_pinned(metric, ranked, relevant, expected):
    assert metric(ranked, relevant, 5) == pytest.approx(expected, abs=1e-6)


@pytest.mark.parametrize("num_relevant", [1, 2, 3])
def test_metrics_relevant_swap_upward(num_relevant):
    relevant = set(range(num_relevant))
    for ranking in itertools.permutations(range(6)):
        before = (evaluation.map_at_n(ranking, relevant, 5), evaluation.ndcg_at_n(ranking, relevant, 5))
        assert all(0.0 <= value <= 1.0 for value in before)
        for upper, lower in itertools.combinations(range(6), 2):
            if ranking[lower] not in relevant or ranking[upper] in relevant:
                continue
            swapped = list(ranking)
            swapped[upper], swapped[lower] = swapped[lower], swapped[upper]
            assert evaluation.map_at_n(swapped, relevant, 5) >= before[0] - 1e-12
            assert evaluation.ndcg_at_n(swapped, relevant, 5) >= before[1] - 1e-12


def test_rank_by_scores_ties():
    ranked = evaluation.rank_by_scores(numpy.array([7, 3, 5, 1]), numpy.array([0.5, 1.0, 0.5, 0.5]))
    numpy.testing.assert_array_equal(ranked, [3, 1, 5, 7])


def test_eval_protocol():
    protocol = evaluation.EvalProtocol()
    assert protocol.cutoff == 5
    assert protocol.negatives_per_positive == 20
    assert protocol.num_runs == 5
    with pytest.raises(ValidationError, match="'num_runs'"):
        evaluation.EvalProtocol(num_runs=0)


def _evaluation_problem():
    data = dataset.synthetic_block_dataset(num_users=10, num_items=30, seed=0, density=0.3)
    split = dataset.split_dataset(data, seed=1)
    return data, split


def test_sample_eval_negatives():
    data, split = _evaluation_problem()
    interacted = evaluation.user_items(data.interactions, data.num_users)
    rng = numpy.random.default_rng(0)
    for user in range(data.num_users):
        negatives, short = evaluation.sample_eval_negatives(user, data, split, 2, rng, part="test")
        positives = int(numpy.sum(split.test[:, 0] == user))
        assert not short
        assert len(negatives) == 2 * positives
        assert len(set(negatives.tolist())) == len(negatives)
        assert set(negatives.tolist()).isdisjoint(interacted[user].tolist())


def test_sample_eval_negatives_short_pool(caplog):
    data = dataset.Dataset(
        user_ids=["u0"],
        user_descriptions=[""],
        item_ids=["i0", "i1", "i2"],
        item_descriptions=["", "", ""],
        interactions=[(0, 0)],
    )
    split = dataset.Split(train=numpy.zeros((0, 2)), valid=numpy.zeros((0, 2)), test=[(0, 0)], seed=0)
    with caplog.at_level("WARNING"):
        negatives, short = evaluation.sample_eval_negatives(0, data, split, 5, numpy.random.default_rng(0))
    assert short
    assert sorted(negatives.tolist()) == [1, 2]
    assert "Using the whole pool" in caplog.text


def _oracle_scorer(split):
    """Positives of the test part score 1, everything else 0"""
    table = {(int(user), int(item)): 1.0 for user, item in split.test}
    return evaluation.TableScorer(table)


def test_evaluate_oracle():
    data, split = _evaluation_problem()
    protocol = evaluation.EvalProtocol(num_runs=3, negatives_per_positive=4, seed=10)
    report = evaluation.evaluate(_oracle_scorer(split), data, split, protocol)
    assert report.map_at_n == pytest.approx(1.0)
    assert report.ndcg_at_n == pytest.approx(1.0)
    assert report.seeds == [10, 11, 12]
    assert len(report.map_per_run) == 3
    assert report.excluded_users == data.num_users - len(report.users)

    record = report.to_dict(ids=data.user_ids)
    assert record["map"] == pytest.approx(1.0)
    assert record["evaluated_users"] == len(report.users)
    assert set(record["per_user"]) == {data.user_ids[user] for user in report.users}


def test_evaluate_inverse_oracle():
    data, split = _evaluation_problem()
    table = {(int(user), int(item)): -1.0 for user, item in split.test}
    protocol = evaluation.EvalProtocol(num_runs=1, negatives_per_positive=10)
    report = evaluation.evaluate(evaluation.TableScorer(table), data, split, protocol)
    assert report.map_at_n == pytest.approx(0.0)


def test_evaluate_deterministic():
    data, split = _evaluation_problem()
    final = model.FinalEmbeddings(
        users=numpy.random.default_rng(0).normal(size=(data.num_users, 4)),
        items=numpy.random.default_rng(1).normal(size=(data.num_items, 4)),
    )
    scorer = evaluation.EmbeddingScorer(final)
    protocol = evaluation.EvalProtocol(num_runs=2, negatives_per_positive=3, seed=4)
    first = evaluation.evaluate(scorer, data, split, protocol)
    second = evaluation.evaluate(scorer, data, split, protocol)
    assert first.map_per_run == second.map_per_run
    numpy.testing.assert_array_equal(first.ndcg_per_user, second.ndcg_per_user)


def test_evaluate_retrain():
    data, split = _evaluation_problem()
    factory = MagicMock(side_effect=lambda seed: _oracle_scorer(split))
    protocol = evaluation.EvalProtocol(num_runs=2, seed=3, retrain=True)
    evaluation.evaluate(None, data, split, protocol, scorer_factory=factory)
    assert [call.args[0] for call in factory.call_args_list] == [3, 4]

    with pytest.raises(ValidationError, match="scorer factory"):
        evaluation.evaluate(None, data, split, protocol)


def test_evaluate_empty_part():
    data, split = _evaluation_problem()
    empty = dataset.Split(train=split.train, valid=numpy.zeros((0, 2)), test=split.test, seed=1)
    with pytest.raises(ValidationError, match="No user has positives in the 'valid' split"):
        evaluation.evaluate(_oracle_scorer(split), data, empty, part="valid")


def test_table_scorer_from_tsv(tmp_path):
    data, _ = _evaluation_problem()
    path = tmp_path / "scores.tsv"
    path.write_text(f"{data.user_ids[0]}\t{data.item_ids[1]}\t2.5\n\n", encoding="utf-8")
    scorer = evaluation.TableScorer.from_tsv(path, data, missing_score=-1.0)
    numpy.testing.assert_array_equal(scorer.scores(0, numpy.array([1, 2])), [2.5, -1.0])


score_table_errors = {
    "missing file": (None, "Could not find score table"),
    "fields": ("u0\ti0\n", "expected 3 fields"),
    "unknown user": ("x\ti0\t1.0\n", "Unknown user id 'x'"),
    "unknown item": ("u0\tx\t1.0\n", "Unknown item id 'x'"),
    "malformed score": ("u0\ti0\thigh\n", "Malformed score 'high'"),
    "non-finite": ("u0\ti0\tnan\n", "Non-finite score.*line 1"),
}


@pytest.mark.parametrize(
    "content, message",
    score_table_errors.values(),
    ids=score_table_errors.keys(),
)
def test_table_scorer_errors(tmp_path, content, message):
    data, _ = _evaluation_problem()
    path = tmp_path / "scores.tsv"
    if content is not None:
        path.write_text(content, encoding="utf-8")
    with pytest.raises(ValidationError, match=message):
        evaluation.TableScorer.from_tsv(path, data)


length_groups = {
    "even": ([5, 1, 4, 2, 3, 6], 3, [[1, 3], [4, 2], [0, 5]]),
    "remainder first": ([1, 2, 3, 4, 5, 6, 7], 3, [[0, 1, 2], [3, 4], [5, 6]]),
    "ties by position": ([2, 2, 1, 1], 2, [[2, 3], [0, 1]]),
}


@pytest.mark.parametrize(
    "lengths, num_groups, expected",
    length_groups.values(),
    ids=length_groups.keys(),
)
def test_length_groups(lengths, num_groups, expected):
    groups = evaluation.length_groups(lengths, num_groups)
    assert [group.tolist() for group in groups] == expected


def test_length_groups_too_few():
    with pytest.raises(ValidationError, match="at least 5 users"):
        evaluation.length_groups([1, 2, 3], 5)


def test_length_groups_random_profiles():
    rng = numpy.random.default_rng(2024)
    for _ in range(1000):
        lengths = rng.integers(0, 40, size=int(rng.integers(5, 60)))
        groups = evaluation.length_groups(lengths, 5)
        sizes = [len(group) for group in groups]
        assert len(groups) == 5
        assert sum(sizes) == len(lengths)
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True)
        assert sorted(numpy.concatenate(groups).tolist()) == list(range(len(lengths)))
        for shorter, longer in zip(groups[:-1], groups[1:]):
            assert lengths[shorter].max() <= lengths[longer].min()
        # The first group holds exactly the shortest positions of a stable sort
        oracle = sorted(range(len(lengths)), key=lambda position: (lengths[position], position))
        assert groups[0].tolist() == oracle[: sizes[0]]


def test_subgroup_analysis():
    data = dataset.Dataset(
        user_ids=["u0", "u1", "u2", "u3"],
        user_descriptions=["aaaa", "", "aa", "aaaaaa"],
        item_ids=["i0"],
        item_descriptions=[""],
        interactions=[(0, 0), (1, 0), (2, 0), (3, 0)],
    )
    report = evaluation.MetricsReport(
        cutoff=5,
        seeds=[0],
        map_per_run=[0.5],
        ndcg_per_run=[0.5],
        users=numpy.array([0, 1, 2, 3]),
        map_per_user=numpy.array([0.4, 0.0, 0.2, 1.0]),
        ndcg_per_user=numpy.array([0.5, 0.1, 0.3, 0.9]),
        excluded_users=0,
    )
    subgroups = evaluation.subgroup_analysis(report, data, num_groups=2)
    assert [group.tolist() for group in subgroups.groups] == [[1, 2], [0, 3]]
    assert subgroups.mean_lengths == [1.0, 5.0]
    assert subgroups.map_per_group == pytest.approx([0.1, 0.7])
    assert subgroups.ndcg_per_group == pytest.approx([0.2, 0.7])
    record = subgroups.to_dict()
    assert [group["name"] for group in record["groups"]] == ["G1", "G2"]
    assert record["groups"][0]["size"] == 2


def test_layer_similarity_profile():
    split = dataset.Split(train=[(0, 0)], valid=[(1, 1)], test=[(0, 1), (1, 0)], seed=0)
    table = text_encoder.TextTable(
        user=numpy.array([[[1.0, 0.0], [0.0, 1.0]], [[0.0, 1.0], [0.0, 0.0]]]),
        item=numpy.array([[[1.0, 0.0], [1.0, 0.0]], [[0.0, 1.0], [0.0, 1.0]]]),
    )
    # Layer 1: user 0 vs item 1 -> 0, user 1 vs item 0 -> 0. Layer 2: 1 and the zero vector 0.
    assert evaluation.layer_similarity_profile(table, split) == pytest.approx([0.0, 0.5])
    with pytest.raises(ValidationError, match="'valid' split is empty"):
        evaluation.layer_similarity_profile(
            table, dataset.Split(train=[(0, 0)], valid=numpy.zeros((0, 2)), test=[(0, 1)], seed=0), part="valid"
        )


def test_layer_sweep():
    data, split = _evaluation_problem()
    rng = numpy.random.default_rng(0)
    table = text_encoder.TextTable(
        user=rng.normal(size=(data.num_users, 3, 4)), item=rng.normal(size=(data.num_items, 3, 4))
    )
    config = training.TrainConfig(epochs=1, batch_size=16)
    protocol = evaluation.EvalProtocol(num_runs=1, negatives_per_positive=2)
    results = evaluation.layer_sweep(data, split, table, layers=[3, 1], train_config=config, protocol=protocol)
    assert [record["num_layers"] for record in results] == [3, 1]
    for record in results:
        assert set(record) == {"num_layers", "map", "ndcg", "best_epoch"}
        assert 0.0 <= record["map"] <= 1.0
    with pytest.raises(ValidationError, match="Cannot keep 4"):
        evaluation.layer_sweep(data, split, table, layers=[4], train_config=config, protocol=protocol)
