"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes: contract and config problems exit 1,
numeric failures exit 2, file-system and checkpoint problems exit 3.
"""

from __future__ import annotations


class TpidmError(Exception):
    """Base class for all package errors."""


class ContractError(TpidmError, ValueError):
    """A caller violated a documented precondition (shapes, ranges, counts)."""


class UndefinedResultError(ContractError):
    """The requested statistic has no defined value for this input."""


class NumericError(TpidmError, ArithmeticError):
    """A non-finite value appeared during computation.

    ``where`` names the tape node, integration step or epoch at which the
    problem was detected.
    """

    def __init__(self, message: str, where: int | None = None):
        super().__init__(message)
        self.where = where


class ConfigError(ContractError):
    """Invalid or unknown configuration entry."""


class SchemaError(TpidmError):
    """An input file does not carry the expected columns."""


class ParseError(TpidmError):
    """An input file cell could not be parsed."""

    def __init__(self, message: str, row: int | None = None, column: str | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class CorruptCheckpointError(TpidmError):
    """Checkpoint magic, version or checksum did not verify."""
