"""Exception hierarchy shared by the protocol runtime and the CLI.

Every class carries an ``exit_code`` so the command-line front end can map
failures onto a stable enumeration without a lookup table elsewhere.
"""

from __future__ import annotations


class BlindFairError(Exception):
    exit_code = 1


class TripleExhausted(BlindFairError):
    exit_code = 10


class ProtocolError(BlindFairError):
    exit_code = 11


class VersionMismatch(ProtocolError):
    exit_code = 12


class ConfigMismatch(ProtocolError):
    exit_code = 13


class StaleRunError(ProtocolError):
    """A run id was presented that this party has already consumed."""

    exit_code = 14


class ProtocolAbort(ProtocolError):
    """The peer sent an abort frame."""

    exit_code = 15


class DimensionMismatch(ProtocolError):
    exit_code = 16


class ChannelClosed(BlindFairError):
    exit_code = 20


class FrameTooLarge(BlindFairError):
    exit_code = 21


class UnknownTag(BlindFairError):
    exit_code = 22


class HandshakeTimeout(BlindFairError):
    exit_code = 23


class BlockSizeError(BlindFairError, ValueError):
    exit_code = 30


class NonFiniteError(BlindFairError, ArithmeticError):
    exit_code = 31


class SingularProjection(BlindFairError, ArithmeticError):
    exit_code = 32


class BarrierDomainError(BlindFairError, ArithmeticError):
    exit_code = 33


class UndefinedMetric(BlindFairError):
    exit_code = 34


class NoCertificate(BlindFairError):
    exit_code = 40


class IntegrityError(BlindFairError):
    """A certificate or triple file failed its structural or checksum check."""

    exit_code = 41


class DataError(BlindFairError, ValueError):
    exit_code = 50


class ParseError(DataError):
    exit_code = 53

    def __init__(self, message: str, row: int | None = None, col: str | None = None):
        where = []
        if row is not None:
            where.append(f"row {row}")
        if col is not None:
            where.append(f"column {col!r}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.row = row
        self.col = col


class NonBinaryColumn(DataError):
    exit_code = 51


class EmptyDataset(DataError):
    exit_code = 52


class FixedPointOverflow(BlindFairError, OverflowError):
    """Raised where the fixed-point grid cannot hold a value.

    Subclasses the builtin ``OverflowError`` so callers can catch either.
    """

    exit_code = 60

    def __init__(self, message: str, index: tuple | None = None):
        super().__init__(message if index is None else f"{message} at {index}")
        self.index = index
