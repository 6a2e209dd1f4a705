"""Subcommand parsers and the default values shared by the command line and the library functions

Override flags default to ``None`` so that an unset flag falls through to the configuration file value, which in turn
falls through to the ``*_defaults`` dictionaries below. The help text reports the library default.
"""

import argparse

from graph_scribe import _settings


def positive_float(argument):
    """Type function for argparse - positive floats including zero

    :param str argument: string argument from argparse

    :returns: argument
    :rtype: float
    """
    MINIMUM_VALUE = 0.0
    try:
        argument = float(argument)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid float value: '{argument}'")
    if not argument >= MINIMUM_VALUE:
        raise argparse.ArgumentTypeError(f"invalid positive float: '{argument}'")
    return argument


def positive_int(argument):
    """Type function for argparse - positive integers including zero

    :param str argument: string argument from argparse

    :returns: argument
    :rtype: int
    """
    MINIMUM_VALUE = 0
    try:
        argument = int(argument)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid integer value: '{argument}'")
    if not argument >= MINIMUM_VALUE:
        raise argparse.ArgumentTypeError(f"invalid positive integer: '{argument}'")
    return argument


def strictly_positive_int(argument):
    """Type function for argparse - integers greater than zero

    :param str argument: string argument from argparse

    :returns: argument
    :rtype: int
    """
    argument = positive_int(argument)
    if argument == 0:
        raise argparse.ArgumentTypeError(f"invalid strictly positive integer: '{argument}'")
    return argument


pipeline_defaults = {
    "seed": 0,
    "variant": _settings._default_variant,
    "output_directory": ".",
}

propagation_defaults = {
    "num_layers": 3,
    "neighbor_cap": 10,
    "per_neighbor_char_cap": 1000,
    "prompt_budget": 2048,
    "max_output_tokens": 512,
    "strategy": _settings._default_strategy,
    "task": _settings._default_task,
}

llm_defaults = {
    "backend": _settings._default_llm_backend,
    "endpoint": None,
    "model": "default",
    "max_retries": 3,
    "backoff_seconds": 1.0,
    "timeout": 120.0,
    "max_in_flight": 4,
}

encoder_defaults = {
    "backend": _settings._default_encoder_backend,
    "dimension": 768,
    "endpoint": None,
    "batch_size": 64,
    "max_retries": 3,
    "backoff_seconds": 1.0,
    "timeout": 120.0,
    "cache_path": None,
}

train_defaults = {
    "learning_rate": 1.0e-3,
    "batch_size": 1024,
    "regularization": 1.0e-4,
    "epochs": 50,
    "patience": 10,
    "beta1": 0.9,
    "beta2": 0.999,
    "epsilon": 1.0e-8,
    "weight_decay": 0.0,
    "init_scale": 0.01,
}

evaluation_defaults = {
    "cutoff": 5,
    "negatives_per_positive": 20,
    "num_runs": 5,
    "retrain": False,
    "num_groups": 5,
}

sweep_defaults = {
    "layers": [4, 3, 2],
}


def _default_help(text, value):
    return f"{text} (default: {value})"


def common_parser():
    """Options shared by every pipeline subcommand"""
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument(
        "--config",
        type=str,
        default=None,
        help="Pipeline configuration JSON file. Relative paths inside resolve against its directory",
    )
    parser.add_argument(
        "--output-directory",
        type=str,
        default=None,
        help=_default_help("Root directory of the pipeline artifacts", pipeline_defaults["output_directory"]),
    )
    parser.add_argument(
        "--seed",
        type=positive_int,
        default=None,
        help=_default_help("Global seed recorded in every artifact", pipeline_defaults["seed"]),
    )
    parser.add_argument(
        "-v",
        "--verbose",
        action="count",
        default=0,
        help="Increase logging verbosity. Repeat for debug messages",
    )
    return parser


def _add_propagation_options(parser, include_strategy=True):
    parser.add_argument(
        "--num-layers",
        type=strictly_positive_int,
        default=None,
        help=_default_help(
            "Total description layers, the raw layer included", propagation_defaults["num_layers"]
        ),
    )
    if include_strategy:
        parser.add_argument(
            "--strategy",
            choices=_settings._strategy_choices,
            default=None,
            help=_default_help("Description inference strategy", propagation_defaults["strategy"]),
        )


prepare_cli_help = "Validate the dataset, build the interaction graph, and write the train/valid/test split"
prepare_cli_description = (
    "Read the user and item description files and the interaction TSV, collapse duplicate interactions, split the "
    "interactions into three near-equal parts with the pipeline seed, and write the prepared artifacts with a "
    "manifest of content hashes."
)


def prepare_parser(add_help=True, description=prepare_cli_description):
    """Return the prepare subcommand parser

    :param bool add_help: ``add_help`` argument value for the ``argparse.ArgumentParser`` class interface
    :param str description: The ``description`` argument value for the ``argparse.ArgumentParser`` class interface

    :returns: argparse parser
    :rtype: argparse.ArgumentParser
    """
    parser = argparse.ArgumentParser(add_help=add_help, description=description, parents=[common_parser()])
    parser.add_argument("--users", type=str, default=None, help="Line-delimited user records")
    parser.add_argument("--items", type=str, default=None, help="Line-delimited item records")
    parser.add_argument("--interactions", type=str, default=None, help="Tab separated user/item interaction lines")
    return parser


infer_cli_help = "Rewrite every description layer by layer from neighbor descriptions"
infer_cli_description = (
    "Materialize the description layers of every user and item. The convolutional strategy rewrites each node's "
    "description from its neighbors' previous layer, one synchronous layer at a time. The plain strategy asks once "
    "per node with the whole multi-hop neighborhood nested in one prompt. The raw strategy copies the raw "
    "descriptions. Interrupted runs resume from the per-layer checkpoints."
)


def infer_parser(add_help=True, description=infer_cli_description):
    """Return the infer subcommand parser"""
    parser = argparse.ArgumentParser(add_help=add_help, description=description, parents=[common_parser()])
    _add_propagation_options(parser)
    parser.add_argument(
        "--neighbor-cap",
        type=strictly_positive_int,
        default=None,
        help=_default_help("Maximum neighbors per prompt", propagation_defaults["neighbor_cap"]),
    )
    parser.add_argument(
        "--prompt-budget",
        type=strictly_positive_int,
        default=None,
        help=_default_help("Maximum prompt length in words", propagation_defaults["prompt_budget"]),
    )
    parser.add_argument(
        "--llm-backend",
        choices=_settings._llm_backend_choices,
        default=None,
        help=_default_help("Completion backend", llm_defaults["backend"]),
    )
    return parser


encode_cli_help = "Embed every description layer with the text encoder"
encode_cli_description = (
    "Encode each node's description layers into fixed dimension vectors with the remote encoder endpoint or the "
    "deterministic hashed bag-of-words fallback."
)


def encode_parser(add_help=True, description=encode_cli_description):
    """Return the encode subcommand parser"""
    parser = argparse.ArgumentParser(add_help=add_help, description=description, parents=[common_parser()])
    _add_propagation_options(parser)
    parser.add_argument(
        "--encoder-backend",
        choices=_settings._encoder_backend_choices,
        default=None,
        help=_default_help("Text encoder backend", encoder_defaults["backend"]),
    )
    parser.add_argument(
        "--dimension",
        type=strictly_positive_int,
        default=None,
        help=_default_help("Embedding dimension", encoder_defaults["dimension"]),
    )
    return parser


def _add_variant_option(parser):
    parser.add_argument(
        "--variant",
        choices=_settings._variant_choices,
        default=None,
        help=_default_help("Model variant. 'mf' trains the ID-only baseline", pipeline_defaults["variant"]),
    )


def _add_train_options(parser):
    parser.add_argument(
        "--epochs",
        type=positive_int,
        default=None,
        help=_default_help("Maximum training epochs", train_defaults["epochs"]),
    )
    parser.add_argument(
        "--learning-rate",
        type=positive_float,
        default=None,
        help=_default_help("AdamW learning rate", train_defaults["learning_rate"]),
    )
    parser.add_argument(
        "--batch-size",
        type=strictly_positive_int,
        default=None,
        help=_default_help("Triplets per batch", train_defaults["batch_size"]),
    )


train_cli_help = "Train the recommender with the pairwise ranking loss"
train_cli_description = (
    "Train ID embeddings and the per-layer text alignment mappings with the pairwise ranking loss, analytic "
    "gradients, and AdamW. Validation NDCG drives early stopping and the returned checkpoint is the best epoch."
)


def train_parser(add_help=True, description=train_cli_description):
    """Return the train subcommand parser"""
    parser = argparse.ArgumentParser(add_help=add_help, description=description, parents=[common_parser()])
    _add_variant_option(parser)
    _add_propagation_options(parser, include_strategy=False)
    _add_train_options(parser)
    return parser


evaluate_cli_help = "Rank test positives against sampled negatives and report MAP and NDCG"
evaluate_cli_description = (
    "Evaluate a trained checkpoint, or an external score table, on the test split. Each user's test positives are "
    "ranked jointly with sampled never-interacted items. Metrics are averaged over several negative sampling runs "
    "and broken down into description length subgroups."
)


def evaluate_parser(add_help=True, description=evaluate_cli_description):
    """Return the evaluate subcommand parser"""
    parser = argparse.ArgumentParser(add_help=add_help, description=description, parents=[common_parser()])
    _add_variant_option(parser)
    parser.add_argument(
        "--num-runs",
        type=strictly_positive_int,
        default=None,
        help=_default_help("Evaluation runs with derived seeds", evaluation_defaults["num_runs"]),
    )
    parser.add_argument(
        "--retrain",
        action="store_true",
        default=None,
        help="Retrain the model with the run seed before every evaluation run",
    )
    parser.add_argument(
        "--scores",
        type=str,
        default=None,
        help="Evaluate an external 'user_id<TAB>item_id<TAB>score' table instead of a trained checkpoint",
    )
    return parser


token_report_cli_help = "Report LLM node visits and word tokens of each inference strategy"
token_report_cli_description = (
    "Count the node descriptions fed to the LLM by the convolutional and plain strategies on the prepared graph, "
    "both exactly by traversal and by the degree-based closed forms."
)


def token_report_parser(add_help=True, description=token_report_cli_description):
    """Return the token-report subcommand parser"""
    parser = argparse.ArgumentParser(add_help=add_help, description=description, parents=[common_parser()])
    _add_propagation_options(parser, include_strategy=False)
    return parser


sft_export_cli_help = "Export fine-tuning query/answer pairs from the train interactions"
sft_export_cli_description = (
    "Write two supervised fine-tuning pairs per train interaction, asking for the user's description given the "
    "item's and the reverse."
)


def sft_export_parser(add_help=True, description=sft_export_cli_description):
    """Return the sft-export subcommand parser"""
    return argparse.ArgumentParser(add_help=add_help, description=description, parents=[common_parser()])


sweep_cli_help = "Train and evaluate the full model for several description layer counts"
sweep_cli_description = (
    "Reuse the prefix layers of one convolutional inference run to train and evaluate the full variant for each "
    "requested layer count."
)


def sweep_parser(add_help=True, description=sweep_cli_description):
    """Return the sweep subcommand parser"""
    parser = argparse.ArgumentParser(add_help=add_help, description=description, parents=[common_parser()])
    parser.add_argument(
        "--layers",
        type=strictly_positive_int,
        nargs="+",
        default=None,
        help=_default_help("Description layer counts", sweep_defaults["layers"]),
    )
    _add_train_options(parser)
    return parser
