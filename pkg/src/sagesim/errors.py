"""Error types shared by every subsystem.

Each error carries a stable machine-readable ``code`` so the wire protocol,
the CLI and the tests can match on it without parsing messages.
"""

from __future__ import annotations


class SageError(Exception):
    code = "INTERNAL"

    def __init__(self, message: str = "", **details):
        super().__init__(message or self.code)
        self.message = message or self.code
        self.details = details

    def __str__(self):
        if self.details:
            extra = ", ".join(f"{k}={v!r}" for k, v in sorted(self.details.items()))
            return f"{self.message} ({extra})"
        return self.message


class InvalidTopology(SageError):
    code = "INVALID_TOPOLOGY"


class UnknownTarget(SageError):
    code = "UNKNOWN_TARGET"


class DeviceFailed(SageError):
    code = "DEVICE_FAILED"


class NodeCrashed(SageError):
    code = "NODE_CRASHED"


class CapacityExceeded(SageError):
    code = "CAPACITY_EXCEEDED"


class LivelockDetected(SageError):
    code = "LIVELOCK_DETECTED"


class EntityNotFound(SageError):
    code = "ENTITY_NOT_FOUND"


class RealmNotFound(SageError):
    code = "REALM_NOT_FOUND"


class RealmReadOnly(SageError):
    code = "REALM_READ_ONLY"


class RangeOutOfBounds(SageError):
    code = "RANGE_OUT_OF_BOUNDS"


class NoEligibleDevice(SageError):
    code = "NO_ELIGIBLE_DEVICE"


class ExtentNotFound(SageError):
    code = "EXTENT_NOT_FOUND"


class CoverageViolation(SageError):
    code = "COVERAGE_VIOLATION"


class UnequalUnitLengths(SageError):
    code = "UNEQUAL_UNIT_LENGTHS"


class TooManyLosses(SageError):
    code = "TOO_MANY_LOSSES"


class TxAborted(SageError):
    code = "TX_ABORTED"


class EpochClosed(SageError):
    code = "EPOCH_CLOSED"


class CoordinatorUnavailable(SageError):
    code = "COORDINATOR_UNAVAILABLE"


class KeyNotFound(SageError):
    code = "KEY_NOT_FOUND"


class DataUnavailable(SageError):
    code = "DATA_UNAVAILABLE"


class ChecksumMismatch(SageError):
    code = "CHECKSUM_MISMATCH"


class InvalidState(SageError):
    code = "INVALID_STATE"


class Timeout(SageError):
    code = "TIMEOUT"


class DuplicateName(SageError):
    code = "DUPLICATE_NAME"


class ReducerNotCommutative(SageError):
    code = "REDUCER_NOT_COMMUTATIVE"


class UnknownFunction(SageError):
    code = "UNKNOWN_FUNCTION"


class NodeUnavailable(SageError):
    code = "NODE_UNAVAILABLE"


class BadFrame(SageError):
    code = "BAD_FRAME"


class UnknownOp(SageError):
    code = "UNKNOWN_OP"


class BadParams(SageError):
    code = "BAD_PARAMS"


class ScriptParseError(SageError):
    code = "SCRIPT_PARSE_ERROR"


class AssertionFailed(SageError):
    code = "ASSERTION_FAILED"
