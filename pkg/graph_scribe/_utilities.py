import sys
import json
import time
import typing
import hashlib
import logging
import pathlib
import functools

from graph_scribe import _settings


_logger = logging.getLogger(__name__)


class GraphScribeError(RuntimeError):
    """Base class for every error raised by the package. Unclassified errors map to the internal exit code."""

    exit_code = _settings._exit_internal


class ValidationError(GraphScribeError):
    """Invalid input files, configuration values, or stale/corrupt artifacts"""

    exit_code = _settings._exit_validation


class BackendError(GraphScribeError):
    """LLM or encoder endpoint failures that survive the retry policy"""

    exit_code = _settings._exit_backend


class NonFiniteError(GraphScribeError):
    """A NaN or infinite value appeared in a numerical computation"""


def exit_on_error(function: typing.Callable) -> typing.Callable:
    """Decorate a function to catch package exceptions and instead call sys.exit with the matching exit code

    :param function: function to decorate
    """

    @functools.wraps(function)
    def wrapper(*args, **kwargs):
        try:
            output = function(*args, **kwargs)
        except GraphScribeError as err:
            print(f"{type(err).__name__}: {err}", file=sys.stderr)
            sys.exit(err.exit_code)
        except Exception as err:
            print(f"Internal error: {type(err).__name__}: {err}", file=sys.stderr)
            sys.exit(_settings._exit_internal)
        return output

    return wrapper


def word_tokens(text: str) -> typing.List[str]:
    """Split text on whitespace. The package-wide token proxy for budgets and the mock backend."""
    return text.split()


def content_hash(content: typing.Union[str, bytes]) -> str:
    """Return the hexadecimal SHA-256 digest of text (UTF-8 encoded) or bytes"""
    if isinstance(content, str):
        content = content.encode("utf-8")
    return hashlib.sha256(content).hexdigest()


def file_hash(path: typing.Union[str, pathlib.Path]) -> str:
    """Return the hexadecimal SHA-256 digest of a file's bytes

    :raises ValidationError: if the file does not exist
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise ValidationError(f"Could not find artifact '{path}'")
    return content_hash(path.read_bytes())


def json_dumps(data: typing.Any, indent: typing.Optional[int] = None) -> str:
    """Deterministic JSON text: sorted keys, UTF-8 preserved"""
    return json.dumps(data, sort_keys=True, ensure_ascii=False, indent=indent)


def write_json(path: typing.Union[str, pathlib.Path], data: typing.Any) -> pathlib.Path:
    """Write deterministic, indented JSON with a trailing newline. Creates parent directories."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json_dumps(data, indent=2) + "\n", encoding="utf-8")
    return path


def read_json(path: typing.Union[str, pathlib.Path]) -> typing.Any:
    """Read a JSON document, raising a validation error naming the path on failure"""
    path = pathlib.Path(path)
    if not path.is_file():
        raise ValidationError(f"Could not find file '{path}'")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValidationError(f"Malformed JSON in '{path}': {err}")


def write_jsonl(path: typing.Union[str, pathlib.Path], records: typing.Iterable[dict]) -> pathlib.Path:
    """Write one deterministic JSON record per line. Creates parent directories."""
    path = pathlib.Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as stream:
        for record in records:
            stream.write(json_dumps(record) + "\n")
    return path


def post_json_with_retries(
    url: str,
    payload: dict,
    transport: typing.Callable,
    headers: typing.Optional[dict] = None,
    max_attempts: int = 3,
    backoff_seconds: float = 1.0,
    timeout: float = 60.0,
    sleep: typing.Callable[[float], None] = time.sleep,
) -> dict:
    """POST a JSON payload, retrying transport failures and 5xx responses with exponential backoff

    The transport is any callable ``transport(url, json=..., headers=..., timeout=...)`` returning an object with
    ``status_code`` and ``json()``, e.g. ``requests.post``.

    Backoff doubles after every failed attempt: ``backoff_seconds``, ``2 * backoff_seconds``, ...

    :param url: endpoint URL
    :param payload: JSON serializable request body
    :param transport: callable performing the HTTP POST
    :param headers: optional request headers
    :param max_attempts: total number of attempts before giving up
    :param backoff_seconds: first backoff delay
    :param timeout: per-request timeout in seconds passed to the transport
    :param sleep: sleep function, injectable for tests

    :returns: decoded JSON response body

    :raises BackendError: on a 4xx response, an error payload, or after ``max_attempts`` failed attempts. The message
        contains the attempt log.
    """
    attempts = []
    delay = backoff_seconds
    for attempt in range(1, max_attempts + 1):
        try:
            response = transport(url, json=payload, headers=headers or {}, timeout=timeout)
        except Exception as err:
            attempts.append(f"attempt {attempt}: transport failure: {err}")
        else:
            status = response.status_code
            if 400 <= status < 500:
                raise BackendError(f"Endpoint '{url}' rejected the request with HTTP {status}")
            if status >= 500:
                attempts.append(f"attempt {attempt}: HTTP {status}")
            else:
                try:
                    body = response.json()
                except ValueError as err:
                    raise BackendError(f"Endpoint '{url}' returned a non-JSON body: {err}")
                if isinstance(body, dict) and "error" in body:
                    raise BackendError(f"Endpoint '{url}' returned an error payload: {body['error']}")
                return body
        _logger.warning("%s: %s", url, attempts[-1])
        if attempt < max_attempts:
            sleep(delay)
            delay *= 2.0
    attempt_log = "\n    ".join(attempts)
    raise BackendError(f"Endpoint '{url}' failed after {max_attempts} attempts:\n    {attempt_log}")

