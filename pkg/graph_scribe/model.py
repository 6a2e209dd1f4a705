"""Graph convolution fused with description embeddings, layer averaging, and inner product scoring

Embeddings are row vectors. With ``A(X)`` the symmetrically normalized neighbor aggregation and ``T^(l)`` the text
embeddings of description layer ``l``, the full variant computes

.. code-block:: text

   E^(l) = [A(E^(l-1)), T^(l)] @ W_l        for l = 1..L
   final = mean(E^(1), ..., E^(L))

from the ID embeddings ``E^(0)``. One ``W_l`` of shape ``2d x d`` is shared by users and items.

* ``raw`` and ``plain`` run the full computation on text tables built from their own description layers
* ``no_align`` fuses the top description layer once, ``E^(0) = [ids, T^(L)] @ W_0``, then propagates without text
* ``mf`` scores the ID embeddings directly
"""

import struct
import typing
import hashlib
import logging
import pathlib
import dataclasses

import numpy
import scipy.sparse

from graph_scribe import _settings
from graph_scribe._utilities import NonFiniteError
from graph_scribe._utilities import ValidationError


_exclude_from_namespace = set(globals().keys())
_logger = logging.getLogger(__name__)

_magic = b"GSCB"
_format_version = 1
_header = struct.Struct("<4sHHIIIIq")
_variant_codes = {variant: code for code, variant in enumerate(_settings._variant_choices)}


@dataclasses.dataclass
class ModelParams:
    """Trainable tensors

    :param user_embeddings: ``N x d`` ID embeddings ``E^(0)``
    :param item_embeddings: ``M x d`` ID embeddings ``E^(0)``
    :param mappings: ``K x 2d x d`` alignment matrices. ``K = L`` for text variants, 1 for ``no_align``, 0 for ``mf``.
    :param variant: model variant
    :param num_layers: embedding layers ``L``
    :param seed: initialization seed
    """

    user_embeddings: numpy.ndarray
    item_embeddings: numpy.ndarray
    mappings: numpy.ndarray
    variant: str
    num_layers: int
    seed: int = 0

    @property
    def dimension(self) -> int:
        return self.user_embeddings.shape[1]

    @property
    def num_users(self) -> int:
        return self.user_embeddings.shape[0]

    @property
    def num_items(self) -> int:
        return self.item_embeddings.shape[0]

    def tensors(self) -> typing.Dict[str, numpy.ndarray]:
        return {
            "user_embeddings": self.user_embeddings,
            "item_embeddings": self.item_embeddings,
            "mappings": self.mappings,
        }

    def replace(self, **tensors) -> "ModelParams":
        return dataclasses.replace(self, **tensors)

    def copy(self) -> "ModelParams":
        return self.replace(**{name: tensor.copy() for name, tensor in self.tensors().items()})

    def squared_norm(self) -> float:
        return float(sum(numpy.sum(tensor * tensor) for tensor in self.tensors().values()))

    def checksum(self) -> str:
        """SHA-256 of the float64 tensor bytes in checkpoint order"""
        digest = hashlib.sha256()
        for tensor in self.tensors().values():
            digest.update(numpy.ascontiguousarray(tensor, dtype="<f8").tobytes())
        return digest.hexdigest()

    def is_finite(self) -> bool:
        return all(numpy.all(numpy.isfinite(tensor)) for tensor in self.tensors().values())


@dataclasses.dataclass
class LayerEmbeddings:
    """Computed layers ``E^(1)..E^(L)`` plus the propagation input ``E^(0)``

    For ``no_align`` the input is the text-fused initial embedding, for the other variants the ID embeddings.
    """

    initial_users: numpy.ndarray
    initial_items: numpy.ndarray
    users: typing.List[numpy.ndarray]
    items: typing.List[numpy.ndarray]

    @property
    def num_layers(self) -> int:
        return len(self.users)


@dataclasses.dataclass
class FinalEmbeddings:
    users: numpy.ndarray
    items: numpy.ndarray

    def scores(self, user: int) -> numpy.ndarray:
        """Scores of one user against every item"""
        return self.items @ self.users[user]


def mapping_count(variant: str, num_layers: int) -> int:
    if variant not in _variant_codes:
        raise ValidationError(f"Unknown variant '{variant}'. Choose from: {', '.join(_settings._variant_choices)}")
    if variant == "mf":
        return 0
    if variant == "no_align":
        return 1
    return num_layers


def init_params(
    num_users: int,
    num_items: int,
    dimension: int,
    num_layers: int,
    variant: str = _settings._default_variant,
    seed: int = 0,
    init_scale: float = 0.01,
) -> ModelParams:
    """Seeded initialization

    ID embeddings are drawn from ``normal(0, init_scale)``. Mappings are drawn from
    ``uniform(-sqrt(1 / 2d), sqrt(1 / 2d))``.
    """
    if dimension < 1 or num_layers < 1:
        raise ValidationError("Model 'dimension' and 'num_layers' must be positive")
    count = mapping_count(variant, num_layers)
    rng = numpy.random.default_rng(seed)
    bound = numpy.sqrt(1.0 / (2.0 * dimension))
    return ModelParams(
        user_embeddings=rng.normal(0.0, init_scale, size=(num_users, dimension)),
        item_embeddings=rng.normal(0.0, init_scale, size=(num_items, dimension)),
        mappings=rng.uniform(-bound, bound, size=(count, 2 * dimension, dimension)),
        variant=variant,
        num_layers=num_layers,
        seed=seed,
    )


def aggregate_neighbors(
    user_embeddings: numpy.ndarray,
    item_embeddings: numpy.ndarray,
    graph,
) -> typing.Tuple[numpy.ndarray, numpy.ndarray]:
    """Symmetrically normalized neighbor sums

    Users receive ``sum_{i in N_u} e_i / sqrt(|N_u| |N_i|)`` and items the symmetric form. Isolated nodes receive
    zero vectors.

    :param user_embeddings: ``N x d``
    :param item_embeddings: ``M x d``
    :param graph_scribe.dataset.GraphTopology graph: interaction graph

    :returns: aggregated user and item embeddings

    :raises ValidationError: row counts or dimensions that disagree with the graph
    """
    if user_embeddings.shape[0] != graph.num_users or item_embeddings.shape[0] != graph.num_items:
        raise ValidationError(
            f"Embedding rows ({user_embeddings.shape[0]}, {item_embeddings.shape[0]}) do not match the graph "
            f"({graph.num_users}, {graph.num_items})"
        )
    if user_embeddings.shape[1:] != item_embeddings.shape[1:]:
        raise ValidationError("User and item embeddings must share a dimension")
    normalized: scipy.sparse.csr_matrix = graph.normalized_interactions
    return normalized @ item_embeddings, normalized.T @ user_embeddings


def _check_finite(array: numpy.ndarray, layer: int, kind: str) -> None:
    if not numpy.all(numpy.isfinite(array)):
        raise NonFiniteError(f"Non-finite {kind} embeddings at layer {layer}")


def _check_inputs(params: ModelParams, graph, text_table, variant: str) -> None:
    expected = mapping_count(variant, params.num_layers)
    if params.mappings.shape != (expected, 2 * params.dimension, params.dimension):
        raise ValidationError(
            f"Variant '{variant}' expects mappings of shape {(expected, 2 * params.dimension, params.dimension)}. "
            f"Found {params.mappings.shape}"
        )
    if variant == "mf":
        return
    if text_table is None:
        raise ValidationError(f"Variant '{variant}' requires a text embedding table")
    if text_table.num_layers != params.num_layers or text_table.dimension != params.dimension:
        raise ValidationError(
            f"Text table has {text_table.num_layers} layer(s) of dimension {text_table.dimension}. "
            f"The model expects {params.num_layers} of dimension {params.dimension}"
        )
    if text_table.user.shape[0] != graph.num_users or text_table.item.shape[0] != graph.num_items:
        raise ValidationError("Text table rows do not match the graph")


def forward(
    params: ModelParams,
    graph,
    text_table=None,
    variant: typing.Optional[str] = None,
) -> typing.Tuple[LayerEmbeddings, FinalEmbeddings]:
    """Compute every embedding layer and the layer-averaged final embeddings

    :param params: model parameters
    :param graph_scribe.dataset.GraphTopology graph: interaction graph
    :param graph_scribe.text_encoder.TextTable text_table: frozen description embeddings with ``L`` layers
    :param variant: overrides ``params.variant``

    :raises ValidationError: shape mismatch
    :raises NonFiniteError: a NaN or infinite entry, naming the layer
    """
    variant = variant if variant is not None else params.variant
    _check_inputs(params, graph, text_table, variant)
    users = params.user_embeddings
    items = params.item_embeddings
    if variant == "mf":
        return LayerEmbeddings(users, items, [users], [items]), FinalEmbeddings(users=users, items=items)

    if variant == "no_align":
        top_users, top_items = text_table.layer(params.num_layers)
        mapping = params.mappings[0]
        users = numpy.hstack([users, top_users]) @ mapping
        items = numpy.hstack([items, top_items]) @ mapping
        _check_finite(users, 0, "user")
        _check_finite(items, 0, "item")

    layers = LayerEmbeddings(initial_users=users, initial_items=items, users=[], items=[])
    for layer in range(1, params.num_layers + 1):
        aggregated_users, aggregated_items = aggregate_neighbors(users, items, graph)
        if variant == "no_align":
            users, items = aggregated_users, aggregated_items
        else:
            text_users, text_items = text_table.layer(layer)
            mapping = params.mappings[layer - 1]
            users = numpy.hstack([aggregated_users, text_users]) @ mapping
            items = numpy.hstack([aggregated_items, text_items]) @ mapping
        _check_finite(users, layer, "user")
        _check_finite(items, layer, "item")
        layers.users.append(users)
        layers.items.append(items)

    final = FinalEmbeddings(
        users=sum(layers.users) / params.num_layers,
        items=sum(layers.items) / params.num_layers,
    )
    return layers, final


def score(final: FinalEmbeddings, user: int, item: int) -> float:
    """Inner product of the final user and item embeddings

    :raises ValidationError: index out of range
    """
    if not 0 <= user < final.users.shape[0] or not 0 <= item < final.items.shape[0]:
        raise ValidationError(f"Score index out of range: user {user}, item {item}")
    return float(final.users[user] @ final.items[item])


def score_batch(final: FinalEmbeddings, user: int, items: typing.Sequence[int]) -> numpy.ndarray:
    """Scores of one user against a candidate item list

    :raises ValidationError: index out of range
    """
    items = numpy.asarray(items, dtype=numpy.int64)
    if not 0 <= user < final.users.shape[0] or (
        items.size and (items.min() < 0 or items.max() >= final.items.shape[0])
    ):
        raise ValidationError(f"Score index out of range: user {user}, items {items.tolist()}")
    return final.items[items] @ final.users[user]


def save_params(params: ModelParams, path: typing.Union[str, pathlib.Path]) -> pathlib.Path:
    """Write the binary checkpoint

    Layout: header ``(magic, version, variant code, N, M, d, L, seed)``, then little-endian float32 user embeddings,
    item embeddings and mappings in row-major order, then the SHA-256 of everything before it.
    """
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    content = _header.pack(
        _magic,
        _format_version,
        _variant_codes[params.variant],
        params.num_users,
        params.num_items,
        params.dimension,
        params.num_layers,
        params.seed,
    )
    content += b"".join(
        numpy.ascontiguousarray(tensor, dtype="<f4").tobytes() for tensor in params.tensors().values()
    )
    path.write_bytes(content + hashlib.sha256(content).digest())
    return path


def load_params(path: typing.Union[str, pathlib.Path]) -> ModelParams:
    """Read a checkpoint written by :meth:`save_params`

    :raises ValidationError: missing file, wrong magic or version, truncated content, or hash mismatch
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise ValidationError(f"Could not find parameter checkpoint '{path}'")
    content = path.read_bytes()
    if len(content) < _header.size + 32:
        raise ValidationError(f"Parameter checkpoint '{path}' is truncated")
    body, trailer = content[:-32], content[-32:]
    if hashlib.sha256(body).digest() != trailer:
        raise ValidationError(f"Parameter checkpoint '{path}' failed its content hash check")
    magic, version, variant_code, num_users, num_items, dimension, num_layers, seed = _header.unpack_from(body)
    if magic != _magic or version != _format_version:
        raise ValidationError(f"'{path}' is not a version {_format_version} parameter checkpoint")
    variants = {code: variant for variant, code in _variant_codes.items()}
    if variant_code not in variants:
        raise ValidationError(f"Parameter checkpoint '{path}' has unknown variant code {variant_code}")
    variant = variants[variant_code]
    count = mapping_count(variant, num_layers)
    shapes = [(num_users, dimension), (num_items, dimension), (count, 2 * dimension, dimension)]
    if len(body) != _header.size + 4 * sum(int(numpy.prod(shape)) for shape in shapes):
        raise ValidationError(f"Parameter checkpoint '{path}' size disagrees with its header")
    tensors = []
    offset = _header.size
    for shape in shapes:
        size = int(numpy.prod(shape))
        if size == 0:
            tensors.append(numpy.zeros(shape, dtype=numpy.float64))
            continue
        tensor = numpy.frombuffer(body, dtype="<f4", count=size, offset=offset).reshape(shape)
        tensors.append(tensor.astype(numpy.float64))
        offset += 4 * size
    return ModelParams(
        user_embeddings=tensors[0],
        item_embeddings=tensors[1],
        mappings=tensors[2],
        variant=variant,
        num_layers=num_layers,
        seed=seed,
    )


# Limit help() and 'from module import *' behavior to the module's public API
_module_objects = set(globals().keys()) - _exclude_from_namespace
__all__ = [name for name in _module_objects if not name.startswith("_")]
