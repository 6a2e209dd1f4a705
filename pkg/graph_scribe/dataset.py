"""Users, items, interactions, the bipartite interaction graph, and deterministic train/valid/test splits"""

import json
import typing
import logging
import pathlib
import functools
import dataclasses

import numpy
import scipy.sparse

from graph_scribe import _settings
from graph_scribe._utilities import ValidationError


_exclude_from_namespace = set(globals().keys())
_logger = logging.getLogger(__name__)

_split_parts = ("train", "valid", "test")


@dataclasses.dataclass
class Dataset:
    """Users and items with raw descriptions plus the deduplicated interaction set

    Ids are opaque strings mapped to dense indices ``0..N-1`` / ``0..M-1`` in first-appearance order. Interactions
    are stored as an ``[E, 2]`` integer array of ``(user_index, item_index)`` rows sorted ascending.
    """

    user_ids: typing.List[str]
    user_descriptions: typing.List[str]
    item_ids: typing.List[str]
    item_descriptions: typing.List[str]
    interactions: numpy.ndarray

    def __post_init__(self):
        self.interactions = _normalize_pairs(self.interactions)
        self.user_index = _index_ids(self.user_ids, "user")
        self.item_index = _index_ids(self.item_ids, "item")
        self.validate()

    @property
    def num_users(self) -> int:
        return len(self.user_ids)

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_interactions(self) -> int:
        return len(self.interactions)

    def validate(self) -> None:
        """Check the referential and completeness invariants

        :raises ValidationError: on missing descriptions or out-of-range interaction indices
        """
        if len(self.user_descriptions) != self.num_users or len(self.item_descriptions) != self.num_items:
            raise ValidationError("Every user and item must carry a description (possibly empty)")
        for kind, descriptions in (("user", self.user_descriptions), ("item", self.item_descriptions)):
            for index, description in enumerate(descriptions):
                if not isinstance(description, str):
                    raise ValidationError(f"Description of {kind} index {index} is not a string")
        if self.num_interactions:
            users, items = self.interactions[:, 0], self.interactions[:, 1]
            if users.min() < 0 or users.max() >= self.num_users:
                raise ValidationError("Interaction references a user index outside the user table")
            if items.min() < 0 or items.max() >= self.num_items:
                raise ValidationError("Interaction references an item index outside the item table")

    def interaction_set(self) -> typing.Set[typing.Tuple[str, str]]:
        """Return the interactions as a set of ``(user_id, item_id)`` pairs"""
        return {(self.user_ids[user], self.item_ids[item]) for user, item in self.interactions}


@dataclasses.dataclass
class GraphTopology:
    """Bipartite adjacency of the unified user-item graph

    ``user_adj[u]`` holds the item neighbors of user ``u`` and ``item_adj[i]`` the user neighbors of item ``i``,
    both as ascending dense-index arrays. Isolated nodes have empty arrays.
    """

    num_users: int
    num_items: int
    user_adj: typing.List[numpy.ndarray]
    item_adj: typing.List[numpy.ndarray]

    @property
    def user_degrees(self) -> numpy.ndarray:
        return numpy.array([len(neighbors) for neighbors in self.user_adj], dtype=numpy.int64)

    @property
    def item_degrees(self) -> numpy.ndarray:
        return numpy.array([len(neighbors) for neighbors in self.item_adj], dtype=numpy.int64)

    @property
    def num_nodes(self) -> int:
        return self.num_users + self.num_items

    @property
    def num_edges(self) -> int:
        return int(self.user_degrees.sum())

    def neighbors(self, kind: str, index: int) -> numpy.ndarray:
        """Return the neighbor indices of a ``"user"`` or ``"item"`` node"""
        return self.user_adj[index] if kind == "user" else self.item_adj[index]

    def degree(self, kind: str, index: int) -> int:
        return len(self.neighbors(kind, index))

    def edges(self) -> numpy.ndarray:
        """Reconstruct the ``[E, 2]`` sorted edge array from the adjacency lists"""
        rows = [(user, item) for user, items in enumerate(self.user_adj) for item in items]
        return _normalize_pairs(rows)

    def interaction_matrix(self) -> scipy.sparse.csr_matrix:
        """Binary ``N x M`` interaction matrix ``R``"""
        edges = self.edges()
        data = numpy.ones(len(edges), dtype=numpy.float64)
        return scipy.sparse.csr_matrix(
            (data, (edges[:, 0], edges[:, 1])), shape=(self.num_users, self.num_items), dtype=numpy.float64
        )

    @functools.cached_property
    def normalized_interactions(self) -> scipy.sparse.csr_matrix:
        """Symmetrically normalized ``N x M`` matrix with entries ``R_ui / sqrt(|N_u| |N_i|)``

        Rows and columns of isolated nodes are empty, so their aggregates are zero vectors.
        """
        matrix = self.interaction_matrix()
        with numpy.errstate(divide="ignore"):
            user_scale = numpy.power(self.user_degrees.astype(numpy.float64), -0.5)
            item_scale = numpy.power(self.item_degrees.astype(numpy.float64), -0.5)
        user_scale[numpy.isinf(user_scale)] = 0.0
        item_scale[numpy.isinf(item_scale)] = 0.0
        normalized = scipy.sparse.diags(user_scale) @ matrix @ scipy.sparse.diags(item_scale)
        return scipy.sparse.csr_matrix(normalized)

    def adjacency(self) -> scipy.sparse.csr_matrix:
        """Binary ``(N + M) x (N + M)`` adjacency of the unified graph, users first"""
        matrix = self.interaction_matrix()
        return scipy.sparse.csr_matrix(scipy.sparse.bmat([[None, matrix], [matrix.T, None]]))


@dataclasses.dataclass
class Split:
    """Disjoint train/valid/test interaction arrays, each ``[E_k, 2]`` and sorted"""

    train: numpy.ndarray
    valid: numpy.ndarray
    test: numpy.ndarray
    seed: int

    def __post_init__(self):
        self.train = _normalize_pairs(self.train)
        self.valid = _normalize_pairs(self.valid)
        self.test = _normalize_pairs(self.test)

    def part(self, name: str) -> numpy.ndarray:
        if name not in _split_parts:
            raise ValidationError(f"Unknown split part '{name}'. Choose from: {', '.join(_split_parts)}")
        return getattr(self, name)

    def sizes(self) -> typing.Tuple[int, int, int]:
        return len(self.train), len(self.valid), len(self.test)


def _normalize_pairs(pairs: typing.Iterable) -> numpy.ndarray:
    """Return a deduplicated, lexicographically sorted ``[E, 2]`` int64 array"""
    array = numpy.asarray(list(pairs) if not isinstance(pairs, numpy.ndarray) else pairs, dtype=numpy.int64)
    if array.size == 0:
        return numpy.zeros((0, 2), dtype=numpy.int64)
    array = array.reshape(-1, 2)
    return numpy.unique(array, axis=0)


def _index_ids(ids: typing.List[str], kind: str) -> typing.Dict[str, int]:
    index = {}
    for position, node_id in enumerate(ids):
        if node_id in index:
            raise ValidationError(f"Duplicate {kind} id '{node_id}'")
        index[node_id] = position
    return index


def _read_nodes(path: pathlib.Path, kind: str) -> typing.Tuple[typing.List[str], typing.List[str]]:
    """Parse a line-delimited ``{"id": ..., "description": ...}`` node file

    Blank lines are ignored. Every other line must be a JSON object with string ``id`` and ``description`` fields.
    """
    if not path.is_file():
        raise ValidationError(f"Could not find {kind} file '{path}'")
    ids = []
    descriptions = []
    seen = set()
    with open(path, "r", encoding="utf-8") as stream:
        for line_number, line in enumerate(stream, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as err:
                raise ValidationError(f"Malformed {kind} record in '{path}' line {line_number}: {err}")
            if not isinstance(record, dict) or not isinstance(record.get("id"), str):
                raise ValidationError(f"Missing string 'id' field in '{path}' line {line_number}")
            if not isinstance(record.get("description"), str):
                raise ValidationError(f"Missing string 'description' field in '{path}' line {line_number}")
            if record["id"] in seen:
                raise ValidationError(f"Duplicate {kind} id '{record['id']}' in '{path}' line {line_number}")
            seen.add(record["id"])
            ids.append(record["id"])
            descriptions.append(record["description"])
    return ids, descriptions


def load_dataset(
    users_path: typing.Union[str, pathlib.Path],
    items_path: typing.Union[str, pathlib.Path],
    interactions_path: typing.Union[str, pathlib.Path],
) -> Dataset:
    """Read and validate the node files and the interaction TSV

    Duplicate interaction lines collapse to one interaction.

    :param users_path: ``users.jsonl`` with ``id`` and ``description`` fields
    :param items_path: ``items.jsonl`` with ``id`` and ``description`` fields
    :param interactions_path: ``user_id<TAB>item_id`` lines

    :returns: validated dataset

    :raises ValidationError: missing file, malformed line (with line number), or unknown id (with id and line)
    """
    users_path = pathlib.Path(users_path)
    items_path = pathlib.Path(items_path)
    interactions_path = pathlib.Path(interactions_path)
    user_ids, user_descriptions = _read_nodes(users_path, "user")
    item_ids, item_descriptions = _read_nodes(items_path, "item")
    user_index = {node_id: index for index, node_id in enumerate(user_ids)}
    item_index = {node_id: index for index, node_id in enumerate(item_ids)}

    if not interactions_path.is_file():
        raise ValidationError(f"Could not find interactions file '{interactions_path}'")
    pairs = []
    duplicates = 0
    seen = set()
    with open(interactions_path, "r", encoding="utf-8") as stream:
        for line_number, line in enumerate(stream, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 2:
                raise ValidationError(
                    f"Malformed interaction in '{interactions_path}' line {line_number}: expected 'user_id<TAB>item_id'"
                )
            user_id, item_id = fields
            if user_id not in user_index:
                raise ValidationError(
                    f"Unknown user id '{user_id}' in '{interactions_path}' line {line_number}"
                )
            if item_id not in item_index:
                raise ValidationError(
                    f"Unknown item id '{item_id}' in '{interactions_path}' line {line_number}"
                )
            pair = (user_index[user_id], item_index[item_id])
            if pair in seen:
                duplicates += 1
                continue
            seen.add(pair)
            pairs.append(pair)
    if duplicates:
        _logger.info("Collapsed %d duplicate interaction line(s) in '%s'", duplicates, interactions_path)

    return Dataset(
        user_ids=user_ids,
        user_descriptions=user_descriptions,
        item_ids=item_ids,
        item_descriptions=item_descriptions,
        interactions=pairs,
    )


def build_graph(dataset: Dataset, interactions: typing.Optional[numpy.ndarray] = None) -> GraphTopology:
    """Build the unified bipartite graph from the interaction set

    :param dataset: validated dataset
    :param interactions: ``[E, 2]`` subset of the interactions, e.g. the train split. Defaults to every interaction.

    :returns: symmetric adjacency lists, ascending by dense index
    """
    user_adj = [[] for _ in range(dataset.num_users)]
    item_adj = [[] for _ in range(dataset.num_items)]
    pairs = dataset.interactions if interactions is None else _normalize_pairs(interactions)
    for user, item in pairs:
        user_adj[user].append(item)
        item_adj[item].append(user)
    return GraphTopology(
        num_users=dataset.num_users,
        num_items=dataset.num_items,
        user_adj=[numpy.array(sorted(items), dtype=numpy.int64) for items in user_adj],
        item_adj=[numpy.array(sorted(users), dtype=numpy.int64) for users in item_adj],
    )


def split_dataset(dataset: Dataset, seed: int) -> Split:
    """Uniformly shuffle all interactions and cut them into three near-equal parts

    Part sizes come from ``numpy.array_split`` so they differ pairwise by at most one, larger parts first.

    :param dataset: validated dataset
    :param seed: shuffle seed

    :returns: train/valid/test partition of the interactions

    :raises ValidationError: fewer than three interactions
    """
    if dataset.num_interactions < 3:
        raise ValidationError(
            f"Splitting requires at least 3 interactions. Found {dataset.num_interactions}"
        )
    rng = numpy.random.default_rng(seed)
    order = rng.permutation(dataset.num_interactions)
    train, valid, test = (dataset.interactions[part] for part in numpy.array_split(order, 3))
    return Split(train=train, valid=valid, test=test, seed=seed)


def save_prepared(
    dataset: Dataset, split: Split, directory: typing.Union[str, pathlib.Path]
) -> typing.Dict[str, pathlib.Path]:
    """Persist the dataset, the index mapping, and the split

    :param dataset: validated dataset
    :param split: split of the dataset interactions
    :param directory: destination directory, created if missing

    :returns: artifact name to path mapping
    """
    directory = pathlib.Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "users": directory / _settings._users_artifact,
        "items": directory / _settings._items_artifact,
        "interactions": directory / _settings._interactions_artifact,
        "index": directory / _settings._index_artifact,
        "split": directory / _settings._split_artifact,
    }
    for key, ids, descriptions in (
        ("users", dataset.user_ids, dataset.user_descriptions),
        ("items", dataset.item_ids, dataset.item_descriptions),
    ):
        lines = [
            json.dumps({"description": description, "id": node_id}, sort_keys=True, ensure_ascii=False)
            for node_id, description in zip(ids, descriptions)
        ]
        _write_lines(paths[key], lines)
    _write_lines(
        paths["interactions"],
        [f"{dataset.user_ids[user]}\t{dataset.item_ids[item]}" for user, item in dataset.interactions],
    )
    index_lines = [f"user\t{node_id}\t{index}" for index, node_id in enumerate(dataset.user_ids)]
    index_lines.extend(f"item\t{node_id}\t{index}" for index, node_id in enumerate(dataset.item_ids))
    _write_lines(paths["index"], index_lines)
    split_lines = []
    for name in _split_parts:
        split_lines.extend(
            f"{dataset.user_ids[user]}\t{dataset.item_ids[item]}\t{name}" for user, item in split.part(name)
        )
    _write_lines(paths["split"], [f"# seed\t{split.seed}"] + split_lines)
    return paths


def load_prepared(directory: typing.Union[str, pathlib.Path]) -> typing.Tuple[Dataset, Split]:
    """Inverse of :meth:`save_prepared`

    :raises ValidationError: missing artifacts or an index mapping inconsistent with the node files
    """
    directory = pathlib.Path(directory)
    dataset = load_dataset(
        directory / _settings._users_artifact,
        directory / _settings._items_artifact,
        directory / _settings._interactions_artifact,
    )
    index_path = directory / _settings._index_artifact
    if not index_path.is_file():
        raise ValidationError(f"Could not find index mapping '{index_path}'")
    for line_number, line in enumerate(index_path.read_text(encoding="utf-8").splitlines(), start=1):
        fields = line.split("\t")
        if len(fields) != 3 or fields[0] not in ("user", "item"):
            raise ValidationError(f"Malformed index record in '{index_path}' line {line_number}")
        kind, node_id, index = fields
        mapping = dataset.user_index if kind == "user" else dataset.item_index
        if str(mapping.get(node_id)) != index:
            raise ValidationError(f"Index mapping '{index_path}' line {line_number} disagrees with the node files")

    split_path = directory / _settings._split_artifact
    if not split_path.is_file():
        raise ValidationError(f"Could not find split file '{split_path}'")
    parts = {name: [] for name in _split_parts}
    seed = 0
    for line_number, line in enumerate(split_path.read_text(encoding="utf-8").splitlines(), start=1):
        if line.startswith("# seed\t"):
            try:
                seed = int(line.split("\t")[1])
            except ValueError:
                raise ValidationError(f"Malformed seed record in '{split_path}' line {line_number}")
            continue
        fields = line.split("\t")
        if len(fields) != 3 or fields[2] not in parts:
            raise ValidationError(f"Malformed split record in '{split_path}' line {line_number}")
        user_id, item_id, name = fields
        if user_id not in dataset.user_index or item_id not in dataset.item_index:
            raise ValidationError(f"Unknown id in split record '{split_path}' line {line_number}")
        parts[name].append((dataset.user_index[user_id], dataset.item_index[item_id]))
    split = Split(train=parts["train"], valid=parts["valid"], test=parts["test"], seed=seed)
    return dataset, split


def _write_lines(path: pathlib.Path, lines: typing.Iterable[str]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as stream:
        for line in lines:
            stream.write(line + "\n")


def synthetic_block_dataset(
    num_users: int = 40,
    num_items: int = 40,
    num_blocks: int = 2,
    seed: int = 0,
    density: float = 1.0,
    blank_fraction: float = 0.0,
    filler_vocabulary: int = 30,
) -> Dataset:
    """Block-diagonal synthetic dataset: users in block ``b`` interact only with items in block ``b``

    Users and items are assigned to blocks round-robin by index. Every description carries the block's signal
    token ``topic<b>`` plus seeded filler words shared by all blocks. A ``blank_fraction`` of the users (chosen by
    seed) receive empty raw descriptions so only their neighbors can restore the block signal.

    :param num_users: number of users
    :param num_items: number of items
    :param num_blocks: number of disjoint blocks
    :param seed: generator seed
    :param density: probability of each within-block user-item edge. Every user keeps at least one edge.
    :param blank_fraction: fraction of users whose raw description is empty
    :param filler_vocabulary: number of block-agnostic filler words

    :returns: validated dataset
    """
    rng = numpy.random.default_rng(seed)
    filler = [f"word{index}" for index in range(filler_vocabulary)]

    def describe(block: int) -> str:
        words = list(rng.choice(filler, size=3, replace=False))
        return " ".join([f"topic{block}"] + words)

    user_blocks = [user % num_blocks for user in range(num_users)]
    item_blocks = [item % num_blocks for item in range(num_items)]
    user_descriptions = [describe(block) for block in user_blocks]
    item_descriptions = [describe(block) for block in item_blocks]
    blank_count = int(round(blank_fraction * num_users))
    for user in rng.choice(num_users, size=blank_count, replace=False):
        user_descriptions[user] = ""

    pairs = []
    for user, block in enumerate(user_blocks):
        block_items = [item for item, item_block in enumerate(item_blocks) if item_block == block]
        chosen = [item for item in block_items if rng.random() < density]
        if not chosen and block_items:
            chosen = [block_items[int(rng.integers(len(block_items)))]]
        pairs.extend((user, item) for item in chosen)

    return Dataset(
        user_ids=[f"u{user}" for user in range(num_users)],
        user_descriptions=user_descriptions,
        item_ids=[f"i{item}" for item in range(num_items)],
        item_descriptions=item_descriptions,
        interactions=pairs,
    )


# Limit help() and 'from module import *' behavior to the module's public API
_module_objects = set(globals().keys()) - _exclude_from_namespace
__all__ = [name for name in _module_objects if not name.startswith("_")]
