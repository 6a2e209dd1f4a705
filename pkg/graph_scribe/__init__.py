from importlib.metadata import version, PackageNotFoundError

import lazy_loader


submodules = [
    "dataset",
    "llm_gateway",
    "conv_inference",
    "text_encoder",
    "model",
    "training",
    "evaluation",
    "scons_extensions",
]
__getattr__, __dir__, __all__ = lazy_loader.attach(__name__, submodules=submodules)

try:
    __version__ = version("graph_scribe")
except PackageNotFoundError:
    try:
        from graph_scribe import _version

        __version__ = _version.version
    except ImportError:
        # Un-installed package in the local repository
        import pathlib
        import warnings

        warnings.filterwarnings(action="ignore", message="tag", category=UserWarning, module="setuptools_scm")
        import setuptools_scm

        __version__ = setuptools_scm.get_version(root=pathlib.Path(__file__).parent.parent)
