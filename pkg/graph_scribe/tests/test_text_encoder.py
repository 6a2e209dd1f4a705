from unittest.mock import MagicMock

import numpy
import pytest

from graph_scribe import conv_inference
from graph_scribe import text_encoder
from graph_scribe._utilities import BackendError
from graph_scribe._utilities import NonFiniteError
from graph_scribe._utilities import ValidationError


def _fake_transport(dimension, calls=None):
    """Remote encoder stand-in: each text maps to its word count in every entry"""

    def transport(url, json=None, headers=None, timeout=None):
        if calls is not None:
            calls.append(list(json["texts"]))
        response = MagicMock()
        response.status_code = 200
        response.json.return_value = {
            "embeddings": [[len(text.split()) + 0.1] * dimension for text in json["texts"]],
        }
        return response

    return transport


def test_hashed_embedding():
    dimension = 4096
    bucket_a = text_encoder.token_bucket("a", dimension)
    bucket_b = text_encoder.token_bucket("b", dimension)
    assert bucket_a != bucket_b
    vector = text_encoder.hashed_embedding("a a b", dimension)
    assert numpy.count_nonzero(vector) == 2
    assert numpy.linalg.norm(vector) == pytest.approx(1.0)
    assert vector[bucket_a] == pytest.approx(2.0 * vector[bucket_b])
    assert vector[bucket_a] == pytest.approx(2.0 / numpy.sqrt(5.0))


def test_hashed_embedding_properties():
    first = text_encoder.hashed_embedding("python data engineer", 64)
    second = text_encoder.hashed_embedding("engineer data python", 64)
    numpy.testing.assert_array_equal(first, second)
    numpy.testing.assert_array_equal(text_encoder.hashed_embedding("", 64), numpy.zeros(64))
    encoded = text_encoder.encode("python data engineer", text_encoder.EncoderConfig(dimension=64))
    numpy.testing.assert_array_equal(encoded, first)


def test_token_bucket_stable():
    assert text_encoder.token_bucket("python", 768) == text_encoder.token_bucket("python", 768)
    assert 0 <= text_encoder.token_bucket("python", 7) < 7


def test_encoder_config():
    with pytest.raises(ValidationError, match="Unknown encoder backend"):
        text_encoder.EncoderConfig(backend="bert")
    with pytest.raises(ValidationError, match="positive"):
        text_encoder.EncoderConfig(dimension=0)


def test_memory_cache():
    encoder = text_encoder.TextEncoder(text_encoder.EncoderConfig(dimension=16))
    vectors = encoder.encode_many(["a b", "c", "a b"])
    numpy.testing.assert_array_equal(vectors[0], vectors[2])
    assert encoder.cache_hits == 0
    encoder.encode_many(["c", "a b"])
    assert encoder.cache_hits == 2


def test_remote_batches():
    calls = []
    config = text_encoder.EncoderConfig(backend="remote", endpoint="http://encoder", dimension=3, batch_size=2)
    encoder = text_encoder.TextEncoder(config, transport=_fake_transport(3, calls))
    vectors = encoder.encode_many(["one", "two words", "three more words", "one"])
    assert calls == [["one", "two words"], ["three more words"]]
    assert encoder.remote_calls == 2
    numpy.testing.assert_allclose(vectors[:, 0], numpy.float32([1.1, 2.1, 3.1, 1.1]))


def test_remote_disk_cache(tmp_path):
    cache_path = tmp_path / "cache" / "embeddings.bin"
    config = text_encoder.EncoderConfig(
        backend="remote", endpoint="http://encoder", dimension=4, cache_path=str(cache_path)
    )
    cold = text_encoder.TextEncoder(config, transport=_fake_transport(4))
    expected = cold.encode_many(["alpha", "beta gamma"])
    assert cold.remote_calls == 1
    assert cache_path.stat().st_size == 2 * (36 + 4 * 4)

    warm_transport = MagicMock()
    warm = text_encoder.TextEncoder(config, transport=warm_transport)
    numpy.testing.assert_array_equal(warm.encode_many(["beta gamma", "alpha"]), expected[::-1])
    assert warm.remote_calls == 0
    warm_transport.assert_not_called()

    mismatched = text_encoder.EncoderConfig(
        backend="remote", endpoint="http://encoder", dimension=8, cache_path=str(cache_path)
    )
    with pytest.raises(ValidationError, match="4-dimensional"):
        text_encoder.TextEncoder(mismatched)


remote_errors = {
    "no endpoint": (
        {"backend": "remote", "dimension": 2},
        {"embeddings": [[0.0, 1.0]]},
        pytest.raises(ValidationError, match="requires an endpoint"),
    ),
    "wrong dimension": (
        {"backend": "remote", "endpoint": "http://encoder", "dimension": 2},
        {"embeddings": [[0.0, 1.0, 2.0]]},
        pytest.raises(BackendError, match="Expected \\(2,\\)"),
    ),
    "wrong count": (
        {"backend": "remote", "endpoint": "http://encoder", "dimension": 2},
        {"embeddings": []},
        pytest.raises(BackendError, match="no 'embeddings'"),
    ),
    "non-finite": (
        {"backend": "remote", "endpoint": "http://encoder", "dimension": 2},
        {"embeddings": [[float("nan"), 1.0]]},
        pytest.raises(NonFiniteError),
    ),
}


@pytest.mark.parametrize(
    "config, body, outcome",
    remote_errors.values(),
    ids=remote_errors.keys(),
)
def test_remote_errors(config, body, outcome):
    response = MagicMock()
    response.status_code = 200
    response.json.return_value = body
    encoder = text_encoder.TextEncoder(text_encoder.EncoderConfig(**config), transport=MagicMock(return_value=response))
    with outcome:
        encoder.encode("text")


def _layers():
    return conv_inference.DescriptionLayers(
        user_ids=["u0", "u1"],
        item_ids=["i0"],
        user_layers=[["a", "b"], ["a c", "b"]],
        item_layers=[["c"], ["c a b"]],
    )


def test_encode_layers():
    table = text_encoder.encode_layers(_layers(), text_encoder.EncoderConfig(dimension=32))
    assert table.user.shape == (2, 2, 32)
    assert table.item.shape == (1, 2, 32)
    assert table.num_layers == 2
    assert table.dimension == 32
    numpy.testing.assert_array_equal(table.user[0, 1], text_encoder.hashed_embedding("a c", 32))
    users, items = table.layer(2)
    numpy.testing.assert_array_equal(items[0], text_encoder.hashed_embedding("c a b", 32))
    assert table.truncate(1).num_layers == 1
    with pytest.raises(ValidationError, match="Cannot keep"):
        table.truncate(3)


def test_encode_layers_failure():
    response = MagicMock()
    response.status_code = 503
    config = text_encoder.EncoderConfig(
        backend="remote", endpoint="http://encoder", dimension=2, max_retries=1
    )
    encoder = text_encoder.TextEncoder(config, transport=MagicMock(return_value=response), sleep=MagicMock())
    with pytest.raises(BackendError, match="Encoding user layer 1 nodes 'u0'..'u1'"):
        text_encoder.encode_layers(_layers(), encoder=encoder)


def test_text_table_round_trip(tmp_path):
    table = text_encoder.encode_layers(_layers(), text_encoder.EncoderConfig(dimension=8))
    paths = table.save(tmp_path)
    assert sorted(path.name for path in paths.values()) == ["item_text.npy", "user_text.npy"]
    loaded = text_encoder.TextTable.load(tmp_path)
    numpy.testing.assert_array_equal(loaded.user, table.user)
    numpy.testing.assert_array_equal(loaded.item, table.item)

    paths["item"].unlink()
    with pytest.raises(ValidationError, match="Could not find text embedding table"):
        text_encoder.TextTable.load(tmp_path)


def test_text_table_shapes():
    with pytest.raises(ValidationError, match="must share"):
        text_encoder.TextTable(user=numpy.zeros((2, 2, 4)), item=numpy.zeros((2, 3, 4)))
