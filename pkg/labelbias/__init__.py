"""Label bias in proxy-outcome regression and measurement-model corrections."""

from __future__ import annotations

from importlib import import_module
from typing import TYPE_CHECKING, Any

__all__ = [
    "artifacts",
    "cli",
    "config",
    "experiments",
    "leakage",
    "metrics",
    "models",
    "regress",
    "sampler",
    "simdata",
    "threshold",
    "__version__",
]

_MODULE_EXPORTS = {
    name: name
    for name in (
        "artifacts",
        "cli",
        "config",
        "experiments",
        "leakage",
        "metrics",
        "models",
        "regress",
        "sampler",
        "simdata",
        "threshold",
    )
}

if TYPE_CHECKING:  # pragma: no cover - import-time only for type checkers
    from . import (
        artifacts,
        cli,
        config,
        experiments,
        leakage,
        metrics,
        models,
        regress,
        sampler,
        simdata,
        threshold,
    )


def __getattr__(name: str) -> Any:
    """Lazily import submodules when accessed."""

    if name in _MODULE_EXPORTS:
        module = import_module(f"{__name__}.{_MODULE_EXPORTS[name]}")
        globals()[name] = module
        return module
    raise AttributeError(f"module '{__name__}' has no attribute '{name}'")


__version__ = "0.1.0"
