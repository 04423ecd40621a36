"""
Exception hierarchy shared by the numerical core, the models and the harness.

Every error raised on purpose by this code base derives from `LatError`, so the
CLI and the HTTP routers can translate failures in one place.
"""
from typing import Optional


class LatError(Exception):
    """Base class for all expected failures."""

    exit_code = 1


class DimensionError(LatError):
    """Operand shapes do not agree."""


class DegenerateInputError(LatError):
    """Input is well-formed but has nothing to work on (all masked, zero objects...)."""


class ContractError(LatError):
    """A documented precondition was violated by the caller."""


class NonFiniteError(LatError):
    """An operation produced (or was handed) NaN or Inf."""


class GraphStateError(LatError):
    """Backward was requested on a consumed graph or with stale gradients."""


class ParseError(LatError):
    """A text input (embeddings, dataset, config) could not be parsed."""

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class GenerationError(LatError):
    """The synthetic world could not be generated as requested."""


class CheckpointError(LatError):
    """A checkpoint could not be read or does not fit the data it is used with."""


class AcceptanceFailure(LatError):
    """A measured quantity missed its acceptance threshold."""

    exit_code = 2
