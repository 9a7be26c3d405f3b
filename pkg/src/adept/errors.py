"""Exception hierarchy shared by every module in the package."""

from __future__ import annotations


class AdeptError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(AdeptError, ValueError):
    pass


class EmptyInput(AdeptError, ValueError):
    pass


class CacheGap(AdeptError, RuntimeError):
    """An attention read hit an unpopulated KV slot (scheduler bug)."""


class CacheOverwrite(AdeptError, RuntimeError):
    """A KV slot was written twice."""


class ZeroState(AdeptError, ArithmeticError):
    """A zero-norm vector reached an operation that needs a direction."""


class InvalidPatience(AdeptError, ValueError):
    pass


class Unreachable(AdeptError):
    """Target reduction exceeds what the most permissive threshold achieves."""

    def __init__(self, target: float, max_achievable: float):
        super().__init__(
            f"target reduction {target:.4f} unreachable; max achievable {max_achievable:.4f}"
        )
        self.target = target
        self.max_achievable = max_achievable


class TapeMismatch(AdeptError, ValueError):
    pass


class ContextOverflow(AdeptError, ValueError):
    pass


class TooShort(AdeptError, ValueError):
    pass


class NoTrainingSignal(AdeptError, RuntimeError):
    pass


class DivByZero(AdeptError, ZeroDivisionError):
    pass


class CheckpointError(AdeptError, IOError):
    pass


class ChecksumMismatch(CheckpointError):
    pass


class ConfigMismatch(CheckpointError):
    pass


class VersionMismatch(CheckpointError):
    pass


class ConfigError(AdeptError):
    """Bad or unresolvable experiment configuration."""


class DataError(AdeptError):
    """Corpus could not be used (empty, undecodable, too short)."""


class NumericalError(AdeptError, ArithmeticError):
    """A non-finite value appeared where a finite one is required."""
