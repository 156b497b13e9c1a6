"""Exception types shared across the package."""

from __future__ import annotations


class MVCCError(Exception):
    """Base class for all package errors."""


class ConfigError(MVCCError, ValueError):
    """Invalid configuration value or combination."""


class DomainError(MVCCError, ValueError):
    """Input outside the mathematical domain of an operation."""


class ContractError(MVCCError, ValueError):
    """Arguments violate a shape or layout contract between components."""


class DataError(MVCCError, ValueError):
    """Dataset content is inconsistent (e.g. unknown labels)."""


class ClipFormatError(MVCCError):
    """A clip file is malformed; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class CheckpointError(MVCCError):
    """Checkpoint cannot be read or does not match the target architecture."""

    def __init__(self, message: str, names: list[str] | None = None):
        self.names = list(names or [])
        if self.names:
            message = f"{message}: {', '.join(self.names)}"
        super().__init__(message)
