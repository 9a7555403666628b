"""Exception hierarchy shared by every layer of the runtime."""

from __future__ import annotations


class TlaError(Exception):
    """Base class for all runtime errors."""


# -- frontend ---------------------------------------------------------------


class SourceError(TlaError):
    """An error tied to a position in a script."""

    def __init__(self, message: str, line: int = 0, col: int = 0):
        self.message = message
        self.line = line
        self.col = col
        super().__init__(f"{line}:{col}: {message}" if line else message)


class LexError(SourceError):
    pass


class ParseError(SourceError):
    pass


class CompileError(SourceError):
    pass


# -- executor ---------------------------------------------------------------


class SchedulerShutdown(TlaError):
    pass


class InvalidStateError(TlaError, AssertionError):
    """A FutureCell was resolved twice."""


class EvaluationError(TlaError):
    """A primitive failed while the tree was being evaluated."""

    def __init__(self, node_id: int, primitive: str, cause: BaseException, line: int = 0, col: int = 0):
        self.node_id = node_id
        self.primitive = primitive
        self.cause = cause
        self.line = line
        self.col = col
        where = f" at {line}:{col}" if line else ""
        super().__init__(f"node {node_id} ({primitive}){where}: {type(cause).__name__}: {cause}")


# -- arrays -----------------------------------------------------------------


class TilingError(TlaError):
    pass


class UnknownLocality(TlaError):
    pass


class GenerationMismatch(TlaError):
    pass


class MetaMismatch(TlaError):
    pass


class HaloError(TlaError):
    """halo_exchange called on an array without overlap."""


# -- communication ----------------------------------------------------------


class TransportError(TlaError):
    pass


class TransportDown(TransportError):
    pass


class PayloadTooLarge(TransportError):
    pass


class FrameError(TransportError):
    """A wire frame could not be decoded."""


class ShapeMismatch(TlaError):
    pass


class TagCollision(TlaError):
    pass


class MultipleRoots(TlaError):
    pass


class NoRoot(TlaError):
    pass


class RemoteError(TlaError):
    """An error raised on another locality and shipped over the wire."""


# -- deep learning ----------------------------------------------------------


class LabelOutOfRange(TlaError):
    pass


class InsufficientOverlap(TlaError):
    pass


class ReplicaDivergence(TlaError):
    pass


# -- resilience -------------------------------------------------------------


class ResilienceExhausted(TlaError):
    pass


REMOTE_ERRORS: dict[str, type[TlaError]] = {
    cls.__name__: cls
    for cls in (
        ShapeMismatch,
        TagCollision,
        MultipleRoots,
        NoRoot,
        GenerationMismatch,
        MetaMismatch,
        TransportDown,
        PayloadTooLarge,
    )
}
