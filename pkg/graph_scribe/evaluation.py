"""Top-n evaluation against sampled negatives

Every user with positives in the evaluated part is ranked once per run. The candidate list holds all of the user's
positives plus ``negatives_per_positive`` sampled items per positive, drawn without replacement from the items the user
never interacted with in any part. Candidates are shuffled before scoring so scorers never see which are positive.
Ties rank by ascending item index.
"""

import csv
import typing
import logging
import pathlib
import dataclasses

import numpy

from graph_scribe import _parsers
from graph_scribe.dataset import Dataset
from graph_scribe.dataset import Split
from graph_scribe._utilities import ValidationError


_exclude_from_namespace = set(globals().keys())
_logger = logging.getLogger(__name__)


@dataclasses.dataclass
class EvalProtocol:
    """Sampled-negative protocol

    :param cutoff: ranking cutoff ``n``
    :param negatives_per_positive: sampled negatives per positive
    :param num_runs: runs with seeds ``seed + run``
    :param seed: base seed
    :param retrain: rebuild the scorer with the run seed before every run
    :param num_groups: description length subgroups
    """

    cutoff: int = _parsers.evaluation_defaults["cutoff"]
    negatives_per_positive: int = _parsers.evaluation_defaults["negatives_per_positive"]
    num_runs: int = _parsers.evaluation_defaults["num_runs"]
    seed: int = 0
    retrain: bool = _parsers.evaluation_defaults["retrain"]
    num_groups: int = _parsers.evaluation_defaults["num_groups"]

    def __post_init__(self):
        for name in ("cutoff", "negatives_per_positive", "num_runs", "num_groups"):
            if getattr(self, name) < 1:
                raise ValidationError(f"Evaluation '{name}' must be at least 1. Found {getattr(self, name)}")


class Scorer(typing.Protocol):
    def scores(self, user: int, items: numpy.ndarray) -> numpy.ndarray: ...


class EmbeddingScorer:
    """Inner product scores of final embeddings

    :param graph_scribe.model.FinalEmbeddings final: final user and item embeddings
    """

    def __init__(self, final) -> None:
        self.final = final

    def scores(self, user: int, items: numpy.ndarray) -> numpy.ndarray:
        return self.final.items[items] @ self.final.users[user]


class TableScorer:
    """Scores looked up from an external table. Pairs missing from the table score ``missing_score``."""

    def __init__(self, table: typing.Dict[typing.Tuple[int, int], float], missing_score: float = 0.0) -> None:
        self.table = table
        self.missing_score = missing_score

    def scores(self, user: int, items: numpy.ndarray) -> numpy.ndarray:
        return numpy.array(
            [self.table.get((user, int(item)), self.missing_score) for item in items], dtype=numpy.float64
        )

    @classmethod
    def from_tsv(cls, path: typing.Union[str, pathlib.Path], dataset: Dataset, missing_score: float = 0.0):
        """Read ``user_id<TAB>item_id<TAB>score`` lines

        :raises ValidationError: missing file, malformed line, unknown id, or a non-finite score
        """
        path = pathlib.Path(path)
        if not path.is_file():
            raise ValidationError(f"Could not find score table '{path}'")
        table = {}
        with open(path, "r", encoding="utf-8", newline="") as stream:
            for line_number, row in enumerate(csv.reader(stream, delimiter="\t"), start=1):
                if not row:
                    continue
                if len(row) != 3:
                    raise ValidationError(f"Malformed score in '{path}' line {line_number}: expected 3 fields")
                user_id, item_id, value = row
                if user_id not in dataset.user_index:
                    raise ValidationError(f"Unknown user id '{user_id}' in '{path}' line {line_number}")
                if item_id not in dataset.item_index:
                    raise ValidationError(f"Unknown item id '{item_id}' in '{path}' line {line_number}")
                try:
                    value = float(value)
                except ValueError:
                    raise ValidationError(f"Malformed score '{value}' in '{path}' line {line_number}")
                if not numpy.isfinite(value):
                    raise ValidationError(f"Non-finite score in '{path}' line {line_number}")
                table[(dataset.user_index[user_id], dataset.item_index[item_id])] = value
        return cls(table, missing_score=missing_score)


@dataclasses.dataclass
class MetricsReport:
    """Run and per-user metrics. Per-user values average the user's runs."""

    cutoff: int
    seeds: typing.List[int]
    map_per_run: typing.List[float]
    ndcg_per_run: typing.List[float]
    users: numpy.ndarray
    map_per_user: numpy.ndarray
    ndcg_per_user: numpy.ndarray
    excluded_users: int
    short_pool_users: int = 0

    @property
    def map_at_n(self) -> float:
        return float(numpy.mean(self.map_per_run))

    @property
    def ndcg_at_n(self) -> float:
        return float(numpy.mean(self.ndcg_per_run))

    def to_dict(self, ids: typing.Optional[typing.List[str]] = None) -> dict:
        record = {
            "cutoff": self.cutoff,
            "seeds": list(self.seeds),
            "map": self.map_at_n,
            "ndcg": self.ndcg_at_n,
            "map_per_run": list(self.map_per_run),
            "ndcg_per_run": list(self.ndcg_per_run),
            "evaluated_users": int(len(self.users)),
            "excluded_users": self.excluded_users,
            "short_pool_users": self.short_pool_users,
        }
        if ids is not None:
            record["per_user"] = {
                ids[user]: {"map": float(ap), "ndcg": float(ndcg)}
                for user, ap, ndcg in zip(self.users, self.map_per_user, self.ndcg_per_user)
            }
        return record


@dataclasses.dataclass
class SubgroupReport:
    """Users split into groups of ascending raw description length"""

    groups: typing.List[numpy.ndarray]
    mean_lengths: typing.List[float]
    map_per_group: typing.List[float]
    ndcg_per_group: typing.List[float]

    def to_dict(self) -> dict:
        return {
            "groups": [
                {
                    "name": f"G{position}",
                    "size": int(len(users)),
                    "mean_length": mean_length,
                    "map": ap,
                    "ndcg": ndcg,
                }
                for position, (users, mean_length, ap, ndcg) in enumerate(
                    zip(self.groups, self.mean_lengths, self.map_per_group, self.ndcg_per_group), start=1
                )
            ]
        }


def user_items(pairs: numpy.ndarray, num_users: int) -> typing.List[numpy.ndarray]:
    """Sorted item indices per user"""
    items = [[] for _ in range(num_users)]
    for user, item in pairs:
        items[user].append(item)
    return [numpy.array(sorted(row), dtype=numpy.int64) for row in items]


def sample_eval_negatives(
    user: int,
    dataset: Dataset,
    split: Split,
    k: int,
    rng: numpy.random.Generator,
    part: str = "test",
    interacted: typing.Optional[typing.List[numpy.ndarray]] = None,
) -> typing.Tuple[numpy.ndarray, bool]:
    """Sample ``k`` negatives per positive of ``user`` from the items the user never interacted with

    :param user: user index
    :param dataset: dataset with every interaction
    :param split: split providing the positives
    :param k: negatives per positive
    :param rng: random generator
    :param part: split part providing the positives
    :param interacted: precomputed :meth:`user_items` over every interaction

    :returns: negatives and whether the pool was short, in which case the whole pool is returned
    """
    interacted = interacted if interacted is not None else user_items(dataset.interactions, dataset.num_users)
    positives = int(numpy.sum(split.part(part)[:, 0] == user))
    pool = numpy.setdiff1d(numpy.arange(dataset.num_items, dtype=numpy.int64), interacted[user])
    size = k * positives
    if len(pool) < size:
        _logger.warning(
            "User '%s' has %d negative candidate(s), fewer than %d. Using the whole pool",
            dataset.user_ids[user],
            len(pool),
            size,
        )
        return rng.permutation(pool), True
    return rng.choice(pool, size=size, replace=False), False


def rank_by_scores(candidates: numpy.ndarray, scores: numpy.ndarray) -> numpy.ndarray:
    """Candidates by descending score, ties by ascending item index"""
    candidates = numpy.asarray(candidates, dtype=numpy.int64)
    order = numpy.lexsort((candidates, -numpy.asarray(scores, dtype=numpy.float64)))
    return candidates[order]


def rank_candidates(scorer: Scorer, user: int, candidates: numpy.ndarray) -> numpy.ndarray:
    """Score and rank one user's candidates"""
    candidates = numpy.asarray(candidates, dtype=numpy.int64)
    return rank_by_scores(candidates, scorer.scores(user, candidates))


def _check_relevant(relevant: typing.Collection[int], cutoff: int) -> None:
    if cutoff < 1:
        raise ValidationError(f"Ranking cutoff must be at least 1. Found {cutoff}")
    if len(relevant) == 0:
        raise ValidationError("Ranking metrics are undefined for an empty relevant set")


def map_at_n(ranked: typing.Sequence[int], relevant: typing.Collection[int], cutoff: int) -> float:
    """Average precision at ``cutoff``: summed precision at relevant hits divided by ``min(|relevant|, cutoff)``

    :raises ValidationError: empty relevant set or cutoff below 1
    """
    _check_relevant(relevant, cutoff)
    relevant = set(int(item) for item in relevant)
    hits = 0
    total = 0.0
    for rank, item in enumerate(list(ranked)[:cutoff], start=1):
        if int(item) in relevant:
            hits += 1
            total += hits / rank
    return total / min(len(relevant), cutoff)


def ndcg_at_n(ranked: typing.Sequence[int], relevant: typing.Collection[int], cutoff: int) -> float:
    """Binary-relevance NDCG at ``cutoff`` with discount ``1 / log2(rank + 1)``

    :raises ValidationError: empty relevant set or cutoff below 1
    """
    _check_relevant(relevant, cutoff)
    relevant = set(int(item) for item in relevant)
    dcg = sum(
        1.0 / numpy.log2(rank + 1)
        for rank, item in enumerate(list(ranked)[:cutoff], start=1)
        if int(item) in relevant
    )
    ideal = sum(1.0 / numpy.log2(rank + 1) for rank in range(1, min(len(relevant), cutoff) + 1))
    return float(dcg / ideal)


def evaluate(
    scorer: Scorer,
    dataset: Dataset,
    split: Split,
    protocol: typing.Optional[EvalProtocol] = None,
    part: str = "test",
    scorer_factory: typing.Optional[typing.Callable[[int], Scorer]] = None,
) -> MetricsReport:
    """Run the sampled-negative protocol ``num_runs`` times

    Run ``r`` samples negatives with seed ``protocol.seed + r``. With ``protocol.retrain`` the scorer of run ``r`` is
    ``scorer_factory(protocol.seed + r)`` instead of ``scorer``.

    :param scorer: scores of candidate items for a user
    :param dataset: dataset with every interaction
    :param split: split providing the positives
    :param protocol: cutoff, negative count, runs and seed
    :param part: evaluated split part
    :param scorer_factory: retraining hook for ``protocol.retrain``

    :returns: per-run and per-user metrics

    :raises ValidationError: no user has positives in ``part``, or retraining without a factory
    """
    protocol = protocol if protocol is not None else EvalProtocol()
    if protocol.retrain and scorer_factory is None:
        raise ValidationError("Retraining evaluation runs requires a scorer factory")
    positives = user_items(split.part(part), dataset.num_users)
    users = numpy.array([user for user, items in enumerate(positives) if len(items)], dtype=numpy.int64)
    if len(users) == 0:
        raise ValidationError(f"No user has positives in the '{part}' split")
    excluded = dataset.num_users - len(users)
    interacted = user_items(dataset.interactions, dataset.num_users)

    seeds = [protocol.seed + run for run in range(protocol.num_runs)]
    map_values = numpy.zeros((protocol.num_runs, len(users)), dtype=numpy.float64)
    ndcg_values = numpy.zeros((protocol.num_runs, len(users)), dtype=numpy.float64)
    short_pool = set()
    for run, seed in enumerate(seeds):
        rng = numpy.random.default_rng(seed)
        run_scorer = scorer_factory(seed) if protocol.retrain else scorer
        for position, user in enumerate(users):
            negatives, short = sample_eval_negatives(
                user, dataset, split, protocol.negatives_per_positive, rng, part=part, interacted=interacted
            )
            if short:
                short_pool.add(int(user))
            candidates = rng.permutation(numpy.concatenate([positives[user], negatives]))
            ranked = rank_candidates(run_scorer, user, candidates)
            map_values[run, position] = map_at_n(ranked, positives[user], protocol.cutoff)
            ndcg_values[run, position] = ndcg_at_n(ranked, positives[user], protocol.cutoff)
        _logger.info(
            "Run %d seed %d: MAP@%d %.6f NDCG@%d %.6f",
            run,
            seed,
            protocol.cutoff,
            map_values[run].mean(),
            protocol.cutoff,
            ndcg_values[run].mean(),
        )

    return MetricsReport(
        cutoff=protocol.cutoff,
        seeds=seeds,
        map_per_run=[float(value) for value in map_values.mean(axis=1)],
        ndcg_per_run=[float(value) for value in ndcg_values.mean(axis=1)],
        users=users,
        map_per_user=map_values.mean(axis=0),
        ndcg_per_user=ndcg_values.mean(axis=0),
        excluded_users=excluded,
        short_pool_users=len(short_pool),
    )


def length_groups(lengths: typing.Sequence[int], num_groups: int = 5) -> typing.List[numpy.ndarray]:
    """Positions sorted by ascending length, ties by position, cut into contiguous near-equal groups

    Remainders go to the earlier groups.

    :raises ValidationError: fewer entries than groups
    """
    lengths = numpy.asarray(lengths)
    if len(lengths) < num_groups:
        raise ValidationError(f"Subgroup analysis needs at least {num_groups} users. Found {len(lengths)}")
    order = numpy.lexsort((numpy.arange(len(lengths)), lengths))
    return numpy.array_split(order, num_groups)


def subgroup_analysis(report: MetricsReport, dataset: Dataset, num_groups: int = 5) -> SubgroupReport:
    """Group the evaluated users by raw description character length and average their metrics per group

    :raises ValidationError: fewer evaluated users than groups
    """
    lengths = numpy.array([len(dataset.user_descriptions[user]) for user in report.users], dtype=numpy.int64)
    groups = length_groups(lengths, num_groups)
    return SubgroupReport(
        groups=[report.users[positions] for positions in groups],
        mean_lengths=[float(lengths[positions].mean()) for positions in groups],
        map_per_group=[float(report.map_per_user[positions].mean()) for positions in groups],
        ndcg_per_group=[float(report.ndcg_per_user[positions].mean()) for positions in groups],
    )


def _cosine(left: numpy.ndarray, right: numpy.ndarray) -> numpy.ndarray:
    norms = numpy.linalg.norm(left, axis=1) * numpy.linalg.norm(right, axis=1)
    dots = numpy.sum(left * right, axis=1)
    return numpy.divide(dots, norms, out=numpy.zeros_like(dots), where=norms > 0.0)


def layer_similarity_profile(text_table, split: Split, part: str = "test") -> typing.List[float]:
    """Mean cosine similarity, per layer, between a user's layer ``l`` description embedding and the raw description
    embeddings of the user's ``part`` items

    Zero vectors have zero similarity.

    :param graph_scribe.text_encoder.TextTable text_table: description embeddings
    :param split: split providing the user-item pairs
    :param part: split part
    """
    pairs = split.part(part)
    if len(pairs) == 0:
        raise ValidationError(f"The '{part}' split is empty")
    raw_items = text_table.item[pairs[:, 1], 0, :]
    return [
        float(_cosine(text_table.user[pairs[:, 0], layer, :], raw_items).mean())
        for layer in range(text_table.num_layers)
    ]


def layer_sweep(
    dataset: Dataset,
    split: Split,
    text_table,
    layers: typing.Sequence[int] = tuple(_parsers.sweep_defaults["layers"]),
    train_config=None,
    protocol: typing.Optional[EvalProtocol] = None,
    graph=None,
) -> typing.List[dict]:
    """Train and evaluate the full variant for each layer count on the prefix layers of one text table

    :param dataset: dataset
    :param split: split
    :param graph_scribe.text_encoder.TextTable text_table: embeddings of a convolutional run with at least
        ``max(layers)`` layers
    :param layers: layer counts
    :param graph_scribe.training.TrainConfig train_config: training settings
    :param protocol: evaluation protocol
    :param graph_scribe.dataset.GraphTopology graph: train graph

    :returns: one record per layer count ``{num_layers, map, ndcg, best_epoch}``
    """
    from graph_scribe import training

    protocol = protocol if protocol is not None else EvalProtocol()
    results = []
    for num_layers in layers:
        result = training.train(
            dataset, split, text_table.truncate(num_layers), train_config, variant="full", graph=graph
        )
        final = training.final_embeddings(result.params, result.graph, text_table.truncate(num_layers))
        report = evaluate(EmbeddingScorer(final), dataset, split, protocol)
        results.append(
            {
                "num_layers": int(num_layers),
                "map": report.map_at_n,
                "ndcg": report.ndcg_at_n,
                "best_epoch": result.best_epoch,
            }
        )
    return results


# Limit help() and 'from module import *' behavior to the module's public API
_module_objects = set(globals().keys()) - _exclude_from_namespace
__all__ = [name for name in _module_objects if not name.startswith("_")]
