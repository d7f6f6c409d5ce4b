"""Self-supervised unrolled reconstruction for undersampled multi-echo spiral MRI.

Submodules are imported on demand so that ``import ncssdu`` stays cheap;
torch is only loaded by :mod:`ncssdu.model` and :mod:`ncssdu.training`.
"""
import importlib

__version__ = "0.1.0"

_SUBMODULES = (
    "acquisition", "nufft", "dcf", "operators", "solvers", "ssdu", "model",
    "training", "bold", "datastore", "report", "cli", "errors",
)

__all__ = ["__version__", *_SUBMODULES]


def __getattr__(name):
    if name in _SUBMODULES:
        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
