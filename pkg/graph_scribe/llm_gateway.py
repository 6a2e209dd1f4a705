"""Prompt rendering, completion dispatch to a remote endpoint or the deterministic mock backend, and SFT pair export

Prompt templates are JSON resources in ``graph_scribe/templates`` keyed by task. Each template holds a ``body`` with
``${target}`` and ``${neighbors}`` slots, a ``no_neighbors`` sentinel body, the neighbor ``separator``, and the
``relations`` phrases used to nest neighbors-of-neighbors in plain prompts.

Tokens are whitespace separated words throughout. Budgets are word counts.
"""

import re
import time
import string
import typing
import logging
import pathlib
import threading
import functools
import dataclasses
import concurrent.futures

import requests

from graph_scribe import _settings
from graph_scribe import _parsers
from graph_scribe._utilities import word_tokens
from graph_scribe._utilities import content_hash
from graph_scribe._utilities import json_dumps
from graph_scribe._utilities import write_json
from graph_scribe._utilities import write_jsonl
from graph_scribe._utilities import read_json
from graph_scribe._utilities import post_json_with_retries
from graph_scribe._utilities import BackendError
from graph_scribe._utilities import GraphScribeError
from graph_scribe._utilities import ValidationError


_exclude_from_namespace = set(globals().keys())
_logger = logging.getLogger(__name__)

_template_tasks = ("job_user", "job_item", "social")
_slot_pattern = re.compile(r"\$\{(target|neighbors)\}")


@dataclasses.dataclass(frozen=True)
class PromptTemplate:
    """A rewriting prompt for one task

    :param task: ``job_user``, ``job_item`` or ``social``
    :param body: template text with ``${target}`` and ``${neighbors}`` slots
    :param no_neighbors: sentinel template text with only the ``${target}`` slot
    :param relations: node kind to the phrase that introduces that node's own neighbors in nested renderings
    :param separator: text placed between neighbor descriptions
    """

    task: str
    body: str
    no_neighbors: str
    relations: typing.Dict[str, str]
    separator: str = ", "

    def fill(self, target: str, neighbors: typing.Optional[str]) -> str:
        if neighbors is None:
            return string.Template(self.no_neighbors).substitute(target=target)
        return string.Template(self.body).substitute(target=target, neighbors=neighbors)

    @functools.cached_property
    def body_pattern(self) -> re.Pattern:
        return _compile_slots(self.body)

    @functools.cached_property
    def no_neighbors_pattern(self) -> re.Pattern:
        return _compile_slots(self.no_neighbors)


@dataclasses.dataclass(frozen=True)
class NeighborEntry:
    """One neighbor description, optionally followed by that neighbor's own neighbors (plain prompts)

    :param description: neighbor description text
    :param kind: ``"user"`` or ``"item"``. Selects the relation phrase that introduces ``children``.
    :param children: nested entries rendered as ``description <relation> [child, child]``
    """

    description: str
    kind: typing.Optional[str] = None
    children: typing.Tuple["NeighborEntry", ...] = ()

    def size(self) -> int:
        """Number of descriptions in this entry's subtree, itself included"""
        return 1 + sum(child.size() for child in self.children)


@dataclasses.dataclass(frozen=True)
class RenderedPrompt:
    """Rendered prompt text plus the truncation bookkeeping of the budget policy"""

    text: str
    truncated: bool
    kept_neighbors: int
    target_tokens: int


@dataclasses.dataclass(frozen=True)
class CompletionRequest:
    prompt: str
    max_output_tokens: int
    request_id: str
    temperature: float = 0.0


@dataclasses.dataclass(frozen=True)
class CompletionResponse:
    text: str
    input_tokens: int
    output_tokens: int
    request_id: str
    truncated: bool = False
    cached: bool = False


@dataclasses.dataclass(frozen=True)
class SftPair:
    query: str
    answer: str
    direction: str

    def to_record(self) -> dict:
        return {"answer": self.answer, "direction": self.direction, "query": self.query}


@dataclasses.dataclass
class BackendConfig:
    """Completion backend selection and remote endpoint policy"""

    backend: str = _parsers.llm_defaults["backend"]
    endpoint: typing.Optional[str] = _parsers.llm_defaults["endpoint"]
    api_key: typing.Optional[str] = None
    model: str = _parsers.llm_defaults["model"]
    max_retries: int = _parsers.llm_defaults["max_retries"]
    backoff_seconds: float = _parsers.llm_defaults["backoff_seconds"]
    timeout: float = _parsers.llm_defaults["timeout"]
    max_in_flight: int = _parsers.llm_defaults["max_in_flight"]

    def __post_init__(self):
        if self.backend not in _settings._llm_backend_choices:
            raise ValidationError(
                f"Unknown LLM backend '{self.backend}'. Choose from: {', '.join(_settings._llm_backend_choices)}"
            )
        if self.max_retries < 1 or self.max_in_flight < 1:
            raise ValidationError("LLM 'max_retries' and 'max_in_flight' must be positive")


def _compile_slots(text: str) -> re.Pattern:
    pieces = _slot_pattern.split(text)
    pattern = ""
    for position, piece in enumerate(pieces):
        if position % 2 == 0:
            pattern += re.escape(piece)
        elif piece == "target":
            pattern += "(?P<target>.*?)"
        else:
            pattern += "(?P<neighbors>.*)"
    return re.compile(pattern, flags=re.DOTALL)


@functools.lru_cache(maxsize=None)
def load_template(task: str, directory: typing.Optional[str] = None) -> PromptTemplate:
    """Read a prompt template resource

    :param task: template key, e.g. ``job_user``
    :param directory: template directory. Defaults to the packaged templates.

    :raises ValidationError: unknown task or a template missing its slots
    """
    directory = pathlib.Path(directory) if directory is not None else _settings._templates_directory
    path = directory / f"{task}.json"
    if not path.is_file():
        raise ValidationError(f"Could not find prompt template '{task}' in '{directory}'")
    record = read_json(path)
    template = PromptTemplate(
        task=task,
        body=record["body"],
        no_neighbors=record["no_neighbors"],
        relations=dict(record.get("relations", {})),
        separator=record.get("separator", ", "),
    )
    if "${target}" not in template.body or "${neighbors}" not in template.body:
        raise ValidationError(f"Prompt template '{path}' body must contain '${{target}}' and '${{neighbors}}'")
    if "${target}" not in template.no_neighbors:
        raise ValidationError(f"Prompt template '{path}' no_neighbors must contain '${{target}}'")
    return template


def task_templates(task: str = _settings._default_task) -> typing.Tuple[PromptTemplate, PromptTemplate]:
    """Return the (user rewrite, item rewrite) templates for a recommendation scenario

    :param task: ``job`` (resumes and job descriptions) or ``social`` (friend descriptions on both sides)
    """
    if task == "job":
        return load_template("job_user"), load_template("job_item")
    if task == "social":
        template = load_template("social")
        return template, template
    raise ValidationError(f"Unknown task '{task}'. Choose from: {', '.join(_settings._task_choices)}")


def _clip_words(text: str, character_cap: typing.Optional[int]) -> str:
    """Keep the longest whole-word prefix of at most ``character_cap`` characters"""
    if character_cap is None or len(text) <= character_cap:
        return text
    kept = []
    length = -1
    for token in word_tokens(text):
        length += len(token) + 1
        if length > character_cap:
            break
        kept.append(token)
    return " ".join(kept)


def _clip_entry(entry: NeighborEntry, character_cap: typing.Optional[int]) -> NeighborEntry:
    return NeighborEntry(
        description=_clip_words(entry.description, character_cap),
        kind=entry.kind,
        children=tuple(_clip_entry(child, character_cap) for child in entry.children),
    )


def _format_entry(entry: NeighborEntry, template: PromptTemplate) -> str:
    if not entry.children:
        return entry.description
    relation = template.relations.get(entry.kind, "")
    inner = template.separator.join(_format_entry(child, template) for child in entry.children)
    return f"{entry.description} {relation} [{inner}]"


def _as_entry(neighbor: typing.Union[str, NeighborEntry]) -> NeighborEntry:
    return neighbor if isinstance(neighbor, NeighborEntry) else NeighborEntry(description=neighbor)


def render_prompt(
    target: str,
    neighbors: typing.Sequence[typing.Union[str, NeighborEntry]],
    template: PromptTemplate,
    budget: int = _parsers.propagation_defaults["prompt_budget"],
    neighbor_cap: typing.Optional[int] = None,
    per_neighbor_char_cap: typing.Optional[int] = None,
) -> RenderedPrompt:
    """Fill a template with a target description and its ordered neighbor descriptions under a word budget

    Truncation policy, applied in order:

    #. keep the first ``neighbor_cap`` neighbors (callers order neighbors by the neighbor selection policy)
    #. clip every neighbor description to a whole-word prefix of ``per_neighbor_char_cap`` characters
    #. while the rendered prompt exceeds ``budget`` words, drop neighbors from the tail
    #. with no neighbors left, render the ``no_neighbors`` sentinel and clip the target's trailing words

    The target description appears verbatim unless step 4 clips it.

    :param target: target node description
    :param neighbors: ordered neighbor descriptions, plain strings or nested entries
    :param template: prompt template
    :param budget: maximum prompt length in words
    :param neighbor_cap: maximum number of neighbors
    :param per_neighbor_char_cap: maximum characters per neighbor description

    :returns: rendered prompt and truncation bookkeeping

    :raises ValidationError: the budget cannot hold the sentinel rendering with at least one target word
    """
    entries = [_clip_entry(_as_entry(neighbor), per_neighbor_char_cap) for neighbor in neighbors]
    if neighbor_cap is not None:
        entries = entries[:neighbor_cap]
    clipped = any(
        clipped_entry != _as_entry(original) for clipped_entry, original in zip(entries, neighbors)
    )

    kept = len(entries)
    while kept > 0:
        rendered = template.separator.join(_format_entry(entry, template) for entry in entries[:kept])
        text = template.fill(target, rendered)
        if len(word_tokens(text)) <= budget:
            return RenderedPrompt(
                text=text,
                truncated=clipped or kept < len(entries),
                kept_neighbors=kept,
                target_tokens=len(word_tokens(target)),
            )
        kept -= 1

    target_tokens = word_tokens(target)
    text = template.fill(target, None)
    if len(word_tokens(text)) <= budget:
        return RenderedPrompt(
            text=text, truncated=clipped or len(entries) > 0, kept_neighbors=0, target_tokens=len(target_tokens)
        )
    overhead = len(word_tokens(template.fill("", None)))
    room = budget - overhead
    if room < min(1, len(target_tokens)):
        raise ValidationError(
            f"Prompt budget of {budget} words cannot hold the '{template.task}' template ({overhead} words) and a "
            "truncated target description"
        )
    clipped_target = " ".join(target_tokens[:room])
    return RenderedPrompt(
        text=template.fill(clipped_target, None), truncated=True, kept_neighbors=0, target_tokens=room
    )


def render_user_prompt(
    target_desc: str,
    neighbor_descs: typing.Sequence[typing.Union[str, NeighborEntry]],
    template: typing.Optional[PromptTemplate] = None,
    budget: int = _parsers.propagation_defaults["prompt_budget"],
    **kwargs,
) -> RenderedPrompt:
    """Render a user rewriting prompt. Defaults to the job scenario resume template.

    See :meth:`render_prompt` for the truncation policy and keyword arguments.
    """
    template = template if template is not None else load_template("job_user")
    return render_prompt(target_desc, neighbor_descs, template, budget=budget, **kwargs)


def render_item_prompt(
    target_desc: str,
    neighbor_descs: typing.Sequence[typing.Union[str, NeighborEntry]],
    template: typing.Optional[PromptTemplate] = None,
    budget: int = _parsers.propagation_defaults["prompt_budget"],
    **kwargs,
) -> RenderedPrompt:
    """Render an item rewriting prompt. Defaults to the job scenario job description template."""
    template = template if template is not None else load_template("job_item")
    return render_prompt(target_desc, neighbor_descs, template, budget=budget, **kwargs)


def render_plain_prompt(
    target_desc: str,
    neighborhood: typing.Sequence[NeighborEntry],
    template: PromptTemplate,
    budget: int = _parsers.propagation_defaults["prompt_budget"],
    **kwargs,
) -> RenderedPrompt:
    """Render a one-shot prompt that nests the whole multi-hop neighborhood

    Every entry lists its own neighbors after the template's relation phrase, e.g.
    ``Job 1 which interests users with resumes [Resume 1, Resume 2]``. With depth-one entries the rendering is
    identical to :meth:`render_prompt`.
    """
    return render_prompt(target_desc, neighborhood, template, budget=budget, **kwargs)


def _split_top_level(text: str, separator: str) -> typing.List[str]:
    """Split on ``separator`` outside of square brackets"""
    pieces = []
    depth = 0
    start = 0
    position = 0
    while position < len(text):
        character = text[position]
        if character == "[":
            depth += 1
        elif character == "]":
            depth -= 1
        elif depth == 0 and text.startswith(separator, position):
            pieces.append(text[start:position])
            position += len(separator)
            start = position
            continue
        position += 1
    pieces.append(text[start:])
    return pieces


def _entry_tokens(piece: str, template: PromptTemplate) -> typing.List[str]:
    open_index = piece.find("[")
    if open_index < 0 or not piece.endswith("]"):
        return word_tokens(piece)
    head = piece[:open_index].rstrip()
    for relation in sorted(set(template.relations.values()), key=len, reverse=True):
        if relation and head.endswith(relation):
            head = head[: -len(relation)]
            break
    tokens = word_tokens(head)
    for child in _split_top_level(piece[open_index + 1 : -1], template.separator):
        tokens.extend(_entry_tokens(child, template))
    return tokens


def _parse_prompt(
    prompt: str, templates: typing.Iterable[PromptTemplate]
) -> typing.Tuple[typing.List[str], typing.List[str]]:
    """Recover the (target tokens, neighbor tokens in order) from a rendered prompt

    :raises BackendError: the prompt matches no known template
    """
    for template in templates:
        match = template.body_pattern.fullmatch(prompt)
        if match:
            neighbor_tokens = []
            for piece in _split_top_level(match.group("neighbors"), template.separator):
                neighbor_tokens.extend(_entry_tokens(piece, template))
            return word_tokens(match.group("target")), neighbor_tokens
        match = template.no_neighbors_pattern.fullmatch(prompt)
        if match:
            return word_tokens(match.group("target")), []
    raise BackendError("Mock backend could not parse the prompt structure against any known template")


def _mock_tokens(prompt: str, templates: typing.Optional[typing.Iterable[PromptTemplate]] = None) -> typing.List[str]:
    if templates is None:
        templates = [load_template(task) for task in _template_tasks]
    target_tokens, neighbor_tokens = _parse_prompt(prompt, templates)
    return list(dict.fromkeys(target_tokens + neighbor_tokens))


def mock_complete(
    prompt: str,
    max_output_tokens: typing.Optional[int] = None,
    templates: typing.Optional[typing.Iterable[PromptTemplate]] = None,
) -> str:
    """Deterministic stand-in LLM

    Output is the target description's words followed by each neighbor description's words in prompt order,
    deduplicated by first occurrence and cut to ``max_output_tokens`` words.

    :param prompt: prompt rendered by one of the ``render_*`` functions
    :param max_output_tokens: output word cap
    :param templates: candidate templates for parsing. Defaults to every packaged template.

    :raises BackendError: unparseable prompt
    """
    tokens = _mock_tokens(prompt, templates)
    if max_output_tokens is not None:
        tokens = tokens[:max_output_tokens]
    return " ".join(tokens)


class LLMGateway:
    """Completion dispatcher with a bounded number of in-flight requests

    The mock backend is pure and never touches the transport. The remote backend POSTs the wire contract
    ``{"model", "prompt", "max_tokens", "temperature", "request_id"}`` and expects
    ``{"text", "usage": {"input_tokens", "output_tokens"}}``.

    Responses are cached by request id, prompt, output cap and model. A repeated request is answered from the cache
    without a backend call and comes back with ``cached=True``. ``calls`` counts backend calls only.

    :param config: backend selection and retry policy
    :param transport: HTTP POST callable. Defaults to ``requests.post``.
    :param sleep: backoff sleep function
    :param templates: templates the mock backend parses against
    :param cache_path: JSON file the response cache is loaded from and written to by :meth:`save_cache`
    """

    def __init__(
        self,
        config: typing.Optional[BackendConfig] = None,
        transport: typing.Optional[typing.Callable] = None,
        sleep: typing.Callable[[float], None] = time.sleep,
        templates: typing.Optional[typing.Iterable[PromptTemplate]] = None,
        cache_path: typing.Optional[typing.Union[str, pathlib.Path]] = None,
    ) -> None:
        self.config = config if config is not None else BackendConfig()
        self._transport = transport if transport is not None else requests.post
        self._sleep = sleep
        self._templates = list(templates) if templates is not None else None
        self._lock = threading.Lock()
        self._cache: typing.Dict[str, CompletionResponse] = {}
        self.cache_path = pathlib.Path(cache_path) if cache_path is not None else None
        self.calls = 0
        self.cache_hits = 0
        self.input_tokens = 0
        self.output_tokens = 0
        self.load_cache()

    def _cache_key(self, request: CompletionRequest) -> str:
        return content_hash(
            json_dumps(
                {
                    "max_output_tokens": request.max_output_tokens,
                    "model": self.config.model if self.config.backend == "remote" else "mock",
                    "prompt": request.prompt,
                    "request_id": request.request_id,
                }
            )
        )

    def load_cache(self) -> None:
        """Read the cache file if it exists. An unreadable file is discarded with a warning."""
        if self.cache_path is None or not self.cache_path.is_file():
            return
        try:
            records = read_json(self.cache_path)
            cache = {key: CompletionResponse(**record, cached=True) for key, record in records.items()}
        except (ValidationError, AttributeError, TypeError) as err:
            _logger.warning("Ignoring unreadable response cache '%s': %s", self.cache_path, err)
            return
        with self._lock:
            self._cache = cache

    def save_cache(self) -> typing.Optional[pathlib.Path]:
        """Write the cache file. Does nothing without a ``cache_path``."""
        if self.cache_path is None:
            return None
        with self._lock:
            records = {
                key: {field: value for field, value in dataclasses.asdict(response).items() if field != "cached"}
                for key, response in self._cache.items()
            }
        return write_json(self.cache_path, records)

    def _record(self, key: str, response: CompletionResponse) -> None:
        with self._lock:
            self._cache[key] = response
            self.calls += 1
            self.input_tokens += response.input_tokens
            self.output_tokens += response.output_tokens

    def complete(self, request: CompletionRequest) -> CompletionResponse:
        """Return the completion for one request

        :raises ValidationError: nonzero temperature
        :raises BackendError: transport failure after retries, error payloads, malformed responses
        """
        if request.temperature != 0:
            raise ValidationError(
                f"Request '{request.request_id}' uses temperature {request.temperature}. Only 0 is allowed"
            )
        key = self._cache_key(request)
        with self._lock:
            hit = self._cache.get(key)
            if hit is not None:
                self.cache_hits += 1
        if hit is not None:
            return dataclasses.replace(hit, cached=True)
        if self.config.backend == "mock":
            tokens = _mock_tokens(request.prompt, self._templates)
            input_tokens = len(word_tokens(request.prompt))
        else:
            tokens, input_tokens = self._remote(request)
        truncated = len(tokens) > request.max_output_tokens
        if truncated:
            _logger.warning(
                "Completion '%s' exceeded %d output tokens and was truncated",
                request.request_id,
                request.max_output_tokens,
            )
            tokens = tokens[: request.max_output_tokens]
        response = CompletionResponse(
            text=" ".join(tokens),
            input_tokens=input_tokens,
            output_tokens=len(tokens),
            request_id=request.request_id,
            truncated=truncated,
        )
        self._record(key, response)
        return response

    def _remote(self, request: CompletionRequest) -> typing.Tuple[typing.List[str], int]:
        if not self.config.endpoint:
            raise ValidationError(
                f"Remote LLM backend requires an endpoint. Set '{_settings._llm_endpoint_variable}' or 'llm.endpoint'"
            )
        headers = {"Content-Type": "application/json"}
        if self.config.api_key:
            headers["Authorization"] = f"Bearer {self.config.api_key}"
        payload = {
            "model": self.config.model,
            "prompt": request.prompt,
            "max_tokens": request.max_output_tokens,
            "temperature": 0,
            "request_id": request.request_id,
        }
        body = post_json_with_retries(
            self.config.endpoint,
            payload,
            self._transport,
            headers=headers,
            max_attempts=self.config.max_retries,
            backoff_seconds=self.config.backoff_seconds,
            timeout=self.config.timeout,
            sleep=self._sleep,
        )
        text = body.get("text") if isinstance(body, dict) else None
        if not isinstance(text, str):
            raise BackendError(f"LLM endpoint response for '{request.request_id}' has no 'text' field")
        usage = body.get("usage", {}) or {}
        input_tokens = max(int(usage.get("input_tokens", 0)), 0)
        return word_tokens(text), input_tokens

    def complete_many(self, requests_: typing.Sequence[CompletionRequest]) -> typing.List[CompletionResponse]:
        """Dispatch requests concurrently, at most ``max_in_flight`` at a time, returning responses in request order

        :raises BackendError: the first failure in request order, after all in-flight requests settle
        """
        if self.config.backend == "mock" or self.config.max_in_flight == 1:
            return [self.complete(request) for request in requests_]
        results: typing.List[typing.Optional[CompletionResponse]] = [None] * len(requests_)
        errors: typing.Dict[int, Exception] = {}
        with concurrent.futures.ThreadPoolExecutor(max_workers=self.config.max_in_flight) as executor:
            future_to_index = {
                executor.submit(self.complete, request): index for index, request in enumerate(requests_)
            }
            for future in concurrent.futures.as_completed(future_to_index):
                index = future_to_index[future]
                try:
                    results[index] = future.result()
                except Exception as err:
                    errors[index] = err
        if errors:
            first = min(errors)
            err = errors[first]
            if isinstance(err, GraphScribeError):
                raise err
            raise BackendError(f"Request '{requests_[first].request_id}' failed: {err}")
        return results


def complete(
    request: CompletionRequest,
    backend_config: typing.Optional[BackendConfig] = None,
    transport: typing.Optional[typing.Callable] = None,
) -> CompletionResponse:
    """Single-request convenience wrapper around :meth:`LLMGateway.complete`"""
    return LLMGateway(backend_config, transport=transport).complete(request)


@functools.lru_cache(maxsize=None)
def _sft_templates() -> typing.Dict[str, str]:
    return read_json(_settings._templates_directory / "sft.json")


def sft_pairs(dataset, split) -> typing.List[SftPair]:
    """Build two supervised fine-tuning pairs per train interaction, ordered by (user index, item index)

    The ``item->user`` pair asks for the user's description given the item's; ``user->item`` is symmetric. Answers
    are the counterpart's raw description.

    :param graph_scribe.dataset.Dataset dataset: dataset with raw descriptions
    :param graph_scribe.dataset.Split split: split whose train part is exported
    """
    templates = _sft_templates()
    pairs = []
    for user, item in split.train:
        user_description = dataset.user_descriptions[user]
        item_description = dataset.item_descriptions[item]
        pairs.append(
            SftPair(
                query=string.Template(templates["item->user"]).substitute(description=item_description),
                answer=user_description,
                direction="item->user",
            )
        )
        pairs.append(
            SftPair(
                query=string.Template(templates["user->item"]).substitute(description=user_description),
                answer=item_description,
                direction="user->item",
            )
        )
    return pairs


def export_sft_pairs(dataset, split, path: typing.Union[str, pathlib.Path]) -> typing.List[SftPair]:
    """Write :meth:`sft_pairs` as JSONL records ``{query, answer, direction}``

    :raises ValidationError: empty train split
    :raises GraphScribeError: write failure
    """
    if len(split.train) == 0:
        raise ValidationError("SFT export requires a non-empty train split")
    pairs = sft_pairs(dataset, split)
    try:
        write_jsonl(path, (pair.to_record() for pair in pairs))
    except OSError as err:
        raise GraphScribeError(f"Could not write SFT pairs to '{path}': {err}")
    return pairs


# Limit help() and 'from module import *' behavior to the module's public API
_module_objects = set(globals().keys()) - _exclude_from_namespace
__all__ = [name for name in _module_objects if not name.startswith("_")]
