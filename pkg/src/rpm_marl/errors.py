"""Exception hierarchy shared by every module of the package."""

from __future__ import annotations


class RpmError(Exception):
    """Base class for all package errors."""


class ConfigError(RpmError, ValueError):
    """Invalid run configuration or CLI input (CLI exit code 1)."""


# env_core / substrates
class InvalidAction(RpmError, ValueError):
    pass


class SteppedTerminal(RpmError, RuntimeError):
    pass


class UnknownSubstrate(ConfigError):
    pass


class EmptyInventory(RpmError):
    """An encounter was attempted while one participant holds nothing."""


# tensor_autodiff
class ShapeMismatch(RpmError, ValueError):
    pass


class NonScalarLoss(RpmError, ValueError):
    pass


# mappo
class LengthMismatch(RpmError, ValueError):
    pass


class BufferTooSmall(RpmError, RuntimeError):
    pass


# rpm_store
class NonpositivePsi(RpmError, ValueError):
    pass


class EmptyStore(RpmError, LookupError):
    pass


class ArchMismatch(RpmError, ValueError):
    pass


# eval_protocol
class UnknownScenario(ConfigError):
    pass


# orchestrator
class CorruptCheckpoint(RpmError, ValueError):
    pass


class VersionMismatch(CorruptCheckpoint):
    pass


class WorkerFailure(RpmError, RuntimeError):
    pass


class WorkerTimeout(WorkerFailure):
    pass
