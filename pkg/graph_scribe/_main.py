import sys
import typing
import logging
import pathlib
import argparse

from graph_scribe import __version__
from graph_scribe import _settings
from graph_scribe import _parsers
from graph_scribe import _pipeline
from graph_scribe._config import load_config
from graph_scribe._utilities import exit_on_error


_subcommands = {
    "prepare": (_parsers.prepare_parser, _parsers.prepare_cli_help),
    "infer": (_parsers.infer_parser, _parsers.infer_cli_help),
    "encode": (_parsers.encode_parser, _parsers.encode_cli_help),
    "train": (_parsers.train_parser, _parsers.train_cli_help),
    "evaluate": (_parsers.evaluate_parser, _parsers.evaluate_cli_help),
    "token-report": (_parsers.token_report_parser, _parsers.token_report_cli_help),
    "sft-export": (_parsers.sft_export_parser, _parsers.sft_export_cli_help),
    "sweep": (_parsers.sweep_parser, _parsers.sweep_cli_help),
}

# Command line destination to dotted configuration key
_override_keys = {
    "output_directory": "output_directory",
    "seed": "seed",
    "variant": "variant",
    "users": "dataset.users",
    "items": "dataset.items",
    "interactions": "dataset.interactions",
    "num_layers": "propagation.num_layers",
    "strategy": "propagation.strategy",
    "neighbor_cap": "propagation.neighbor_cap",
    "prompt_budget": "propagation.prompt_budget",
    "llm_backend": "llm.backend",
    "encoder_backend": "encoder.backend",
    "dimension": "encoder.dimension",
    "epochs": "train.epochs",
    "learning_rate": "train.learning_rate",
    "batch_size": "train.batch_size",
    "num_runs": "evaluation.num_runs",
    "retrain": "evaluation.retrain",
    "layers": "sweep.layers",
}
_path_overrides = {"output_directory", "users", "items", "interactions"}


def get_parser() -> argparse.ArgumentParser:
    """Get parser object for command line options

    :return: parser
    :rtype: ArgumentParser
    """
    main_description = (
        "Enrich user and item descriptions by rewriting them with an LLM over the user-item interaction graph, one "
        "graph convolution layer at a time, then train and evaluate a graph convolutional recommender aligned with "
        "the rewritten descriptions."
    )
    main_parser = argparse.ArgumentParser(
        description=main_description,
        prog=_settings._project_name_short,
    )
    main_parser.add_argument(
        "-V",
        "--version",
        action="version",
        version=f"{_settings._project_name_short} {__version__}",
    )

    subparsers = main_parser.add_subparsers(
        title="subcommands",
        metavar="{subcommand}",
        dest="subcommand",
    )
    for name, (parser_function, cli_help) in _subcommands.items():
        parent = parser_function(add_help=False)
        subparsers.add_parser(name, help=cli_help, description=parent.description, parents=[parent])
    return main_parser


def configure_logging(verbosity: int) -> None:
    """Send log records to STDERR. Warnings by default, info with ``-v``, debug with ``-vv``."""
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbosity, logging.DEBUG)
    logging.basicConfig(
        level=level,
        format="%(levelname)s: %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def overrides_from_args(args: argparse.Namespace) -> typing.Dict[str, typing.Any]:
    """Map parsed flags onto dotted configuration keys. Unset flags are omitted."""
    overrides = {}
    for destination, key in _override_keys.items():
        value = getattr(args, destination, None)
        if value is None:
            continue
        if destination in _path_overrides:
            value = str(pathlib.Path(value).resolve())
        overrides[key] = value
    return overrides


@exit_on_error
def _run(args: argparse.Namespace) -> None:
    configure_logging(args.verbose)
    config = load_config(args.config, overrides=overrides_from_args(args))
    if args.subcommand == "prepare":
        _pipeline.cmd_prepare(config)
    elif args.subcommand == "infer":
        _pipeline.cmd_infer(config)
    elif args.subcommand == "encode":
        _pipeline.cmd_encode(config)
    elif args.subcommand == "train":
        _pipeline.cmd_train(config)
    elif args.subcommand == "evaluate":
        _pipeline.cmd_evaluate(config, scores=args.scores)
    elif args.subcommand == "token-report":
        _pipeline.cmd_token_report(config)
    elif args.subcommand == "sft-export":
        _pipeline.cmd_sft_export(config)
    elif args.subcommand == "sweep":
        _pipeline.cmd_sweep(config)


def main() -> None:
    parser = get_parser()
    subcommand_list = parser._subparsers._group_actions[0].choices.keys()
    try:
        args = parser.parse_args()
    except SystemExit as err:
        # argparse exits 2 on usage errors, which is the backend failure code here
        if err.code == 2:
            sys.exit(_settings._exit_validation)
        raise

    if args.subcommand not in subcommand_list:
        parser.print_help()
    else:
        _run(args)


if __name__ == "__main__":
    main()  # pragma: no cover
