"""Pipeline configuration: one JSON document, environment interpolation, and command line overrides

.. code-block:: json

   {
     "dataset": {"users": "users.jsonl", "items": "items.jsonl", "interactions": "interactions.tsv"},
     "output_directory": "build",
     "seed": 0,
     "variant": "full",
     "propagation": {"num_layers": 3, "strategy": "convolutional", "task": "job"},
     "llm": {"backend": "remote", "endpoint": "${LLM_ENDPOINT}", "model": "chat"},
     "encoder": {"backend": "hashed_fallback", "dimension": 768},
     "train": {"epochs": 50},
     "evaluation": {"num_runs": 5},
     "sweep": {"layers": [4, 3, 2]}
   }

``${NAME}`` placeholders in string values are replaced by environment variables. Relative paths resolve against the
configuration file directory. The LLM API key is read only from the environment and never written to snapshots.
"""

import os
import re
import typing
import pathlib
import dataclasses

from graph_scribe import _settings
from graph_scribe import _parsers
from graph_scribe._utilities import read_json
from graph_scribe._utilities import ValidationError
from graph_scribe.conv_inference import PropagationConfig
from graph_scribe.llm_gateway import BackendConfig
from graph_scribe.text_encoder import EncoderConfig
from graph_scribe.training import TrainConfig
from graph_scribe.evaluation import EvalProtocol


_placeholder = re.compile(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}")
_redacted = "***"

_sections = {
    "propagation": PropagationConfig,
    "llm": BackendConfig,
    "encoder": EncoderConfig,
    "train": TrainConfig,
    "evaluation": EvalProtocol,
}
# Set from the environment or the global seed, never from the section itself
_reserved = {
    "llm": {"api_key"},
    "train": {"seed"},
    "evaluation": {"seed"},
}
_top_level = {"dataset", "output_directory", "seed", "variant", "sweep"} | set(_sections)
_dataset_keys = ("users", "items", "interactions")


@dataclasses.dataclass
class PipelineConfig:
    output_directory: pathlib.Path
    seed: int = _parsers.pipeline_defaults["seed"]
    variant: str = _parsers.pipeline_defaults["variant"]
    users: typing.Optional[pathlib.Path] = None
    items: typing.Optional[pathlib.Path] = None
    interactions: typing.Optional[pathlib.Path] = None
    propagation: PropagationConfig = dataclasses.field(default_factory=PropagationConfig)
    llm: BackendConfig = dataclasses.field(default_factory=BackendConfig)
    encoder: EncoderConfig = dataclasses.field(default_factory=EncoderConfig)
    train: TrainConfig = dataclasses.field(default_factory=TrainConfig)
    evaluation: EvalProtocol = dataclasses.field(default_factory=EvalProtocol)
    sweep_layers: typing.List[int] = dataclasses.field(
        default_factory=lambda: list(_parsers.sweep_defaults["layers"])
    )

    def __post_init__(self):
        if self.variant not in _settings._variant_choices:
            raise ValidationError(
                f"Unknown variant '{self.variant}'. Choose from: {', '.join(_settings._variant_choices)}"
            )
        if not self.sweep_layers or any(layers < 1 for layers in self.sweep_layers):
            raise ValidationError("Sweep 'layers' must be a non-empty list of positive layer counts")

    def snapshot(self) -> dict:
        """JSON serializable copy with the API key redacted"""
        llm = dataclasses.asdict(self.llm)
        llm["api_key"] = _redacted if llm["api_key"] else None
        return {
            "dataset": {key: _path_text(getattr(self, key)) for key in _dataset_keys},
            "output_directory": str(self.output_directory),
            "seed": self.seed,
            "variant": self.variant,
            "propagation": dataclasses.asdict(self.propagation),
            "llm": llm,
            "encoder": dataclasses.asdict(self.encoder),
            "train": dataclasses.asdict(self.train),
            "evaluation": dataclasses.asdict(self.evaluation),
            "sweep": {"layers": list(self.sweep_layers)},
        }


def _path_text(path: typing.Optional[pathlib.Path]) -> typing.Optional[str]:
    return str(path) if path is not None else None


def interpolate(value: typing.Any, environment: typing.Optional[typing.Mapping[str, str]] = None) -> typing.Any:
    """Replace ``${NAME}`` placeholders in every string of a JSON value

    :raises ValidationError: a placeholder names an unset variable
    """
    environment = environment if environment is not None else os.environ
    if isinstance(value, dict):
        return {key: interpolate(item, environment) for key, item in value.items()}
    if isinstance(value, list):
        return [interpolate(item, environment) for item in value]
    if not isinstance(value, str):
        return value

    def substitute(match: re.Match) -> str:
        name = match.group(1)
        if name not in environment:
            raise ValidationError(f"Configuration references unset environment variable '{name}'")
        return environment[name]

    return _placeholder.sub(substitute, value)


def _check_keys(record: typing.Any, allowed: typing.Iterable[str], where: str) -> None:
    if not isinstance(record, dict):
        raise ValidationError(f"Configuration section '{where}' must be an object")
    unknown = sorted(set(record) - set(allowed))
    if unknown:
        raise ValidationError(f"Unknown configuration key(s) in '{where}': {', '.join(unknown)}")


def _resolve(path: typing.Optional[str], root: pathlib.Path) -> typing.Optional[pathlib.Path]:
    if path is None:
        return None
    path = pathlib.Path(path).expanduser()
    return path if path.is_absolute() else (root / path).resolve()


def _build_section(name: str, values: dict, seed: int):
    cls = _sections[name]
    fields = {field.name for field in dataclasses.fields(cls)} - _reserved.get(name, set())
    _check_keys(values, fields, name)
    values = dict(values)
    if name in ("train", "evaluation"):
        values["seed"] = seed
    try:
        return cls(**values)
    except TypeError as err:
        raise ValidationError(f"Invalid '{name}' configuration: {err}")


def load_config(
    path: typing.Optional[typing.Union[str, pathlib.Path]] = None,
    overrides: typing.Optional[typing.Dict[str, typing.Any]] = None,
    environment: typing.Optional[typing.Mapping[str, str]] = None,
) -> PipelineConfig:
    """Build the pipeline configuration from a file, the environment, and overrides

    Precedence, highest first: ``overrides``, the configuration file, the environment variables
    ``LLM_ENDPOINT`` / ``ENCODER_ENDPOINT``, and the package defaults.

    :param path: configuration JSON file. ``None`` uses the defaults with paths relative to the working directory.
    :param overrides: dotted keys, e.g. ``{"propagation.num_layers": 2, "seed": 1}``. ``None`` values are skipped.
    :param environment: variable mapping. Defaults to ``os.environ``.

    :raises ValidationError: unreadable file, unknown keys, unset placeholders, or invalid values
    """
    environment = environment if environment is not None else os.environ
    if path is not None:
        path = pathlib.Path(path)
        document = read_json(path)
        root = path.parent.resolve()
    else:
        document = {}
        root = pathlib.Path.cwd()
    document = interpolate(document, environment)
    _check_keys(document, _top_level, "<root>")

    for key, value in (overrides or {}).items():
        if value is None:
            continue
        section, _, field = key.rpartition(".")
        target = document.setdefault(section, {}) if section else document
        target[field] = value

    dataset = document.get("dataset", {})
    _check_keys(dataset, _dataset_keys, "dataset")
    sweep = document.get("sweep", {})
    _check_keys(sweep, ("layers",), "sweep")
    seed = document.get("seed", _parsers.pipeline_defaults["seed"])
    if not isinstance(seed, int) or seed < 0:
        raise ValidationError(f"'seed' must be a non-negative integer. Found {seed!r}")

    sections = {}
    for name in _sections:
        values = document.get(name, {})
        if not isinstance(values, dict):
            raise ValidationError(f"Configuration section '{name}' must be an object")
        sections[name] = dict(values)
    if "endpoint" not in sections["llm"] and environment.get(_settings._llm_endpoint_variable):
        sections["llm"]["endpoint"] = environment[_settings._llm_endpoint_variable]
    if "endpoint" not in sections["encoder"] and environment.get(_settings._encoder_endpoint_variable):
        sections["encoder"]["endpoint"] = environment[_settings._encoder_endpoint_variable]
    if sections["encoder"].get("cache_path") is not None:
        sections["encoder"]["cache_path"] = str(_resolve(sections["encoder"]["cache_path"], root))

    built = {name: _build_section(name, values, seed) for name, values in sections.items()}
    built["llm"].api_key = environment.get(_settings._llm_api_key_variable) or None

    return PipelineConfig(
        output_directory=_resolve(
            document.get("output_directory", _parsers.pipeline_defaults["output_directory"]), root
        ),
        seed=seed,
        variant=document.get("variant", _parsers.pipeline_defaults["variant"]),
        users=_resolve(dataset.get("users"), root),
        items=_resolve(dataset.get("items"), root),
        interactions=_resolve(dataset.get("interactions"), root),
        sweep_layers=list(sweep.get("layers", _parsers.sweep_defaults["layers"])),
        **built,
    )
