import SCons.Builder
from waves.scons_extensions import first_target_emitter

from graph_scribe._settings import _cd_action_prefix
from graph_scribe._settings import _redirect_action_postfix
from graph_scribe._settings import _project_name_short


_exclude_from_namespace = set(globals().keys())

_default_required = "--config ${SOURCES[0].abspath}"


def cli_builder(
    program: str = _project_name_short,
    subcommand: str = "",
    required: str = _default_required,
    options: str = "",
) -> SCons.Builder.Builder:
    """Return a generic Graph Scribe CLI builder.

    This builder provides a template action for the Graph Scribe CLI. The default behavior will not do anything unless
    the ``subcommand`` argument is updated to one of the pipeline subcommands.

    At least one target must be specified. The first target determines the working directory for the builder's action.
    The action changes the working directory to the first target's parent directory prior to execution. The first
    source must be the pipeline configuration file. Pipeline artifacts are written below the configuration
    ``output_directory``, so the targets should name the artifacts the subcommand writes there, e.g.
    ``build/prepared/manifest.json``. The emitter appends a STDOUT redirect file target.

    *Builder/Task keyword arguments*

    * ``program``: The Graph Scribe command line executable absolute or relative path
    * ``subcommand``: A Graph Scribe subcommand
    * ``required``: A space delimited string of subcommand required arguments
    * ``options``: A space delimited string of subcommand optional arguments
    * ``cd_action_prefix``: Advanced behavior. Most users should accept the defaults.
    * ``redirect_action_postfix``: Advanced behavior. Most users should accept the defaults.

    .. code-block::
       :caption: action string construction

       ${cd_action_prefix} ${program} ${subcommand} ${required} ${options} ${redirect_action_postfix}

    .. code-block::
       :caption: SConstruct

       import waves
       import graph_scribe
       env = Environment()
       env["graph_scribe"] = waves.scons_extensions.add_program(env, ["graph-scribe"])
       env.Append(BUILDERS={
           "GraphScribeInfer": graph_scribe.scons_extensions.cli_builder(
               program=env["graph_scribe"],
               subcommand="infer",
               options="--num-layers ${num_layers}",
           )
       })
       env.GraphScribeInfer(
           target=["build/layers/convolutional/layer_3.jsonl"],
           source=["config.json"],
           num_layers=3,
       )

    :param str program: The Graph Scribe command line executable absolute or relative path
    :param str subcommand: A Graph Scribe subcommand
    :param str required: A space delimited string of subcommand required arguments
    :param str options: A space delimited string of subcommand optional arguments

    :returns: SCons Graph Scribe CLI builder
    """
    action = ["${cd_action_prefix} ${program} ${subcommand} ${required} ${options} ${redirect_action_postfix}"]
    builder = SCons.Builder.Builder(
        action=action,
        emitter=first_target_emitter,
        cd_action_prefix=_cd_action_prefix,
        redirect_action_postfix=_redirect_action_postfix,
        program=program,
        subcommand=subcommand,
        required=required,
        options=options,
    )
    return builder


def prepare(program: str = _project_name_short, required: str = _default_required, options: str = ""):
    """Return a Graph Scribe prepare subcommand CLI builder

    Builds subcommand specific options for the :meth:`graph_scribe.scons_extensions.cli_builder` function.
    """
    return cli_builder(program=program, subcommand="prepare", required=required, options=options)


def infer(program: str = _project_name_short, required: str = _default_required, options: str = ""):
    """Return a Graph Scribe infer subcommand CLI builder

    Builds subcommand specific options for the :meth:`graph_scribe.scons_extensions.cli_builder` function.
    """
    return cli_builder(program=program, subcommand="infer", required=required, options=options)


def encode(program: str = _project_name_short, required: str = _default_required, options: str = ""):
    """Return a Graph Scribe encode subcommand CLI builder"""
    return cli_builder(program=program, subcommand="encode", required=required, options=options)


def train(program: str = _project_name_short, required: str = _default_required, options: str = ""):
    """Return a Graph Scribe train subcommand CLI builder"""
    return cli_builder(program=program, subcommand="train", required=required, options=options)


def evaluate(program: str = _project_name_short, required: str = _default_required, options: str = ""):
    """Return a Graph Scribe evaluate subcommand CLI builder"""
    return cli_builder(program=program, subcommand="evaluate", required=required, options=options)


def token_report(program: str = _project_name_short, required: str = _default_required, options: str = ""):
    """Return a Graph Scribe token-report subcommand CLI builder"""
    return cli_builder(program=program, subcommand="token-report", required=required, options=options)


def sft_export(program: str = _project_name_short, required: str = _default_required, options: str = ""):
    """Return a Graph Scribe sft-export subcommand CLI builder"""
    return cli_builder(program=program, subcommand="sft-export", required=required, options=options)


def sweep(program: str = _project_name_short, required: str = _default_required, options: str = ""):
    """Return a Graph Scribe sweep subcommand CLI builder"""
    return cli_builder(program=program, subcommand="sweep", required=required, options=options)


_module_objects = set(globals().keys()) - _exclude_from_namespace
__all__ = [name for name in _module_objects if not name.startswith("_")]
