"""Fixed dimension text embeddings from a remote encoder endpoint or a hashed bag-of-words fallback

The fallback hashes every whitespace token into one of ``d`` buckets with a 64-bit BLAKE2b digest, accumulates
counts, and L2-normalizes. Token order is ignored, unlike a contextual sentence encoder.

Remote vectors are rounded to float32 on arrival so warm cache reads reproduce them exactly. The remote endpoint is
responsible for any sentence-level pooling token.
"""

import time
import struct
import typing
import hashlib
import logging
import pathlib
import threading
import dataclasses

import numpy
import requests

from graph_scribe import _settings
from graph_scribe import _parsers
from graph_scribe._utilities import post_json_with_retries
from graph_scribe._utilities import word_tokens
from graph_scribe._utilities import BackendError
from graph_scribe._utilities import NonFiniteError
from graph_scribe._utilities import ValidationError


_exclude_from_namespace = set(globals().keys())
_logger = logging.getLogger(__name__)

_record_header = struct.Struct("<32sI")


@dataclasses.dataclass
class EncoderConfig:
    """Text encoder backend selection

    :param backend: ``hashed_fallback`` or ``remote``
    :param dimension: embedding dimension ``d``
    :param endpoint: remote encoder URL
    :param batch_size: texts per remote request
    :param max_retries: remote attempts per batch
    :param backoff_seconds: first retry delay
    :param timeout: remote request timeout in seconds
    :param cache_path: binary cache file of remote embeddings. ``None`` keeps the cache in memory only.
    """

    backend: str = _parsers.encoder_defaults["backend"]
    dimension: int = _parsers.encoder_defaults["dimension"]
    endpoint: typing.Optional[str] = _parsers.encoder_defaults["endpoint"]
    batch_size: int = _parsers.encoder_defaults["batch_size"]
    max_retries: int = _parsers.encoder_defaults["max_retries"]
    backoff_seconds: float = _parsers.encoder_defaults["backoff_seconds"]
    timeout: float = _parsers.encoder_defaults["timeout"]
    cache_path: typing.Optional[str] = _parsers.encoder_defaults["cache_path"]

    def __post_init__(self):
        if self.backend not in _settings._encoder_backend_choices:
            raise ValidationError(
                f"Unknown encoder backend '{self.backend}'. "
                f"Choose from: {', '.join(_settings._encoder_backend_choices)}"
            )
        if self.dimension < 1 or self.batch_size < 1:
            raise ValidationError("Encoder 'dimension' and 'batch_size' must be positive")


def token_bucket(token: str, dimension: int) -> int:
    """Bucket of one token: little-endian 64-bit BLAKE2b digest modulo ``dimension``"""
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little") % dimension


def hashed_embedding(text: str, dimension: int) -> numpy.ndarray:
    """Normalized bucket counts of the text's whitespace tokens. Empty text maps to the zero vector."""
    vector = numpy.zeros(dimension, dtype=numpy.float64)
    for token in word_tokens(text):
        vector[token_bucket(token, dimension)] += 1.0
    norm = numpy.linalg.norm(vector)
    if norm > 0.0:
        vector /= norm
    return vector


class TextEncoder:
    """Caching text encoder

    Embeddings are cached in memory by (backend, SHA-256 of the text). Remote embeddings are also appended to
    ``config.cache_path`` and read back on construction.

    :param config: backend selection
    :param transport: HTTP POST callable. Defaults to ``requests.post``.
    :param sleep: backoff sleep function
    """

    def __init__(
        self,
        config: typing.Optional[EncoderConfig] = None,
        transport: typing.Optional[typing.Callable] = None,
        sleep: typing.Callable[[float], None] = time.sleep,
    ) -> None:
        self.config = config if config is not None else EncoderConfig()
        self._transport = transport if transport is not None else requests.post
        self._sleep = sleep
        self._lock = threading.Lock()
        self._cache: typing.Dict[typing.Tuple[str, bytes], numpy.ndarray] = {}
        self.cache_hits = 0
        self.remote_calls = 0
        if self.config.backend == "remote" and self.config.cache_path:
            self._load_disk_cache(pathlib.Path(self.config.cache_path))

    def _key(self, text: str) -> typing.Tuple[str, bytes]:
        return self.config.backend, hashlib.sha256(text.encode("utf-8")).digest()

    def _load_disk_cache(self, path: pathlib.Path) -> None:
        if not path.is_file():
            return
        content = path.read_bytes()
        position = 0
        loaded = 0
        while position + _record_header.size <= len(content):
            digest, dimension = _record_header.unpack_from(content, position)
            end = position + _record_header.size + 4 * dimension
            if end > len(content):
                break
            if dimension != self.config.dimension:
                raise ValidationError(
                    f"Encoder cache '{path}' holds {dimension}-dimensional vectors. Expected {self.config.dimension}"
                )
            vector = numpy.frombuffer(content, dtype="<f4", count=dimension, offset=position + _record_header.size)
            self._cache[(self.config.backend, digest)] = vector.astype(numpy.float64)
            position = end
            loaded += 1
        if position != len(content):
            _logger.warning("Ignoring an incomplete trailing record of encoder cache '%s'", path)
        _logger.info("Loaded %d cached embedding(s) from '%s'", loaded, path)

    def _append_disk_cache(self, entries: typing.List[typing.Tuple[bytes, numpy.ndarray]]) -> None:
        path = pathlib.Path(self.config.cache_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "ab") as stream:
            for digest, vector in entries:
                stream.write(_record_header.pack(digest, len(vector)))
                stream.write(vector.astype("<f4").tobytes())

    def _remote(self, texts: typing.List[str]) -> typing.List[numpy.ndarray]:
        if not self.config.endpoint:
            raise ValidationError(
                "Remote encoder backend requires an endpoint. "
                f"Set '{_settings._encoder_endpoint_variable}' or 'encoder.endpoint'"
            )
        with self._lock:
            self.remote_calls += 1
        body = post_json_with_retries(
            self.config.endpoint,
            {"texts": texts},
            self._transport,
            headers={"Content-Type": "application/json"},
            max_attempts=self.config.max_retries,
            backoff_seconds=self.config.backoff_seconds,
            timeout=self.config.timeout,
            sleep=self._sleep,
        )
        embeddings = body.get("embeddings") if isinstance(body, dict) else None
        if not isinstance(embeddings, list) or len(embeddings) != len(texts):
            raise BackendError(f"Encoder endpoint returned no 'embeddings' list for {len(texts)} text(s)")
        vectors = []
        for vector in embeddings:
            vector = numpy.asarray(vector, dtype=numpy.float32)
            if vector.shape != (self.config.dimension,):
                raise BackendError(
                    f"Encoder endpoint returned a vector of shape {vector.shape}. Expected ({self.config.dimension},)"
                )
            if not numpy.all(numpy.isfinite(vector)):
                raise NonFiniteError("Encoder endpoint returned non-finite embedding entries")
            vectors.append(vector.astype(numpy.float64))
        return vectors

    def encode_many(self, texts: typing.Sequence[str]) -> numpy.ndarray:
        """Embed texts in order, one row per text

        :raises BackendError: remote failure after retries or a dimension mismatch
        """
        output = numpy.zeros((len(texts), self.config.dimension), dtype=numpy.float64)
        missing: typing.Dict[typing.Tuple[str, bytes], typing.List[int]] = {}
        with self._lock:
            for row, text in enumerate(texts):
                key = self._key(text)
                cached = self._cache.get(key)
                if cached is not None:
                    self.cache_hits += 1
                    output[row] = cached
                else:
                    missing.setdefault(key, []).append(row)
        if not missing:
            return output

        keys = list(missing)
        if self.config.backend == "hashed_fallback":
            computed = [hashed_embedding(texts[missing[key][0]], self.config.dimension) for key in keys]
        else:
            computed = []
            for start in range(0, len(keys), self.config.batch_size):
                batch = keys[start : start + self.config.batch_size]
                computed.extend(self._remote([texts[missing[key][0]] for key in batch]))
            if self.config.cache_path:
                self._append_disk_cache([(key[1], vector) for key, vector in zip(keys, computed)])
        with self._lock:
            for key, vector in zip(keys, computed):
                self._cache[key] = vector
                output[missing[key]] = vector
        return output

    def encode(self, text: str) -> numpy.ndarray:
        """Embed one text"""
        return self.encode_many([text])[0]


def encode(text: str, config: typing.Optional[EncoderConfig] = None) -> numpy.ndarray:
    """Single-text convenience wrapper around :meth:`TextEncoder.encode`"""
    return TextEncoder(config).encode(text)


@dataclasses.dataclass
class TextTable:
    """Frozen description embeddings: users ``N x L x d`` and items ``M x L x d``"""

    user: numpy.ndarray
    item: numpy.ndarray

    def __post_init__(self):
        self.user = numpy.asarray(self.user, dtype=numpy.float64)
        self.item = numpy.asarray(self.item, dtype=numpy.float64)
        if self.user.ndim != 3 or self.item.ndim != 3 or self.user.shape[1:] != self.item.shape[1:]:
            raise ValidationError(
                f"Text tables must share (layers, dimension). Found {self.user.shape} and {self.item.shape}"
            )

    @property
    def num_layers(self) -> int:
        return self.user.shape[1]

    @property
    def dimension(self) -> int:
        return self.user.shape[2]

    def layer(self, layer: int) -> typing.Tuple[numpy.ndarray, numpy.ndarray]:
        """User and item embeddings of 1-based ``layer``"""
        return self.user[:, layer - 1, :], self.item[:, layer - 1, :]

    def truncate(self, num_layers: int) -> "TextTable":
        if not 1 <= num_layers <= self.num_layers:
            raise ValidationError(f"Cannot keep {num_layers} of {self.num_layers} text layer(s)")
        return TextTable(user=self.user[:, :num_layers, :].copy(), item=self.item[:, :num_layers, :].copy())

    def save(self, directory: typing.Union[str, pathlib.Path]) -> typing.Dict[str, pathlib.Path]:
        directory = pathlib.Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "user": directory / _settings._user_text_artifact,
            "item": directory / _settings._item_text_artifact,
        }
        numpy.save(paths["user"], self.user, allow_pickle=False)
        numpy.save(paths["item"], self.item, allow_pickle=False)
        return paths

    @classmethod
    def load(cls, directory: typing.Union[str, pathlib.Path]) -> "TextTable":
        directory = pathlib.Path(directory)
        arrays = []
        for name in (_settings._user_text_artifact, _settings._item_text_artifact):
            path = directory / name
            if not path.is_file():
                raise ValidationError(f"Could not find text embedding table '{path}'")
            try:
                arrays.append(numpy.load(path, allow_pickle=False))
            except ValueError as err:
                raise ValidationError(f"Could not read text embedding table '{path}': {err}")
        return cls(user=arrays[0], item=arrays[1])


def encode_layers(
    layers,
    config: typing.Optional[EncoderConfig] = None,
    encoder: typing.Optional[TextEncoder] = None,
) -> TextTable:
    """Embed every node's text at every layer

    :param graph_scribe.conv_inference.DescriptionLayers layers: complete description layers
    :param config: encoder settings. Ignored when ``encoder`` is given.
    :param encoder: encoder instance, reused to share its cache

    :returns: text table of shape ``(N, L, d)`` and ``(M, L, d)``

    :raises BackendError: encoding failure, naming the node kind, layer and node id range
    """
    encoder = encoder if encoder is not None else TextEncoder(config)
    dimension = encoder.config.dimension
    tables = {}
    for kind in ("user", "item"):
        ids = layers.ids(kind)
        table = numpy.zeros((len(ids), layers.num_layers, dimension), dtype=numpy.float64)
        for layer in range(1, layers.num_layers + 1):
            texts = layers.texts(kind, layer)
            for start in range(0, len(texts), encoder.config.batch_size):
                stop = min(start + encoder.config.batch_size, len(texts))
                try:
                    table[start:stop, layer - 1, :] = encoder.encode_many(texts[start:stop])
                except BackendError as err:
                    raise BackendError(
                        f"Encoding {kind} layer {layer} nodes '{ids[start]}'..'{ids[stop - 1]}' failed: {err}"
                    )
        tables[kind] = table
    return TextTable(user=tables["user"], item=tables["item"])


# Limit help() and 'from module import *' behavior to the module's public API
_module_objects = set(globals().keys()) - _exclude_from_namespace
__all__ = [name for name in _module_objects if not name.startswith("_")]
