"""Error types shared across the engine.

Every error carries a stable string code so that callers (CLI, service
wrappers) can map failures to exit codes without parsing messages.
"""


class TrifuseError(Exception):
    """Base class for all engine errors."""

    code = "error"

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class BadMagicError(TrifuseError):
    code = "bad_magic"


class BadVersionError(TrifuseError):
    code = "bad_version"


class BadFormatError(TrifuseError):
    code = "bad_format"


class DimensionOverflowError(TrifuseError):
    code = "dimension_overflow"


class NonFiniteValueError(TrifuseError):
    code = "non_finite_value"


class DuplicateIdError(TrifuseError):
    code = "duplicate_id"


class ZeroRowError(TrifuseError):
    code = "zero_row"

    def __init__(self, row: int):
        super().__init__(f"row {row} has (near-)zero L2 norm; cosine is undefined")
        self.row = row


class ShapeMismatchError(TrifuseError):
    code = "shape_mismatch"


class TrainBatchTooSmallError(TrifuseError):
    code = "train_batch_too_small"


class OverflowReportedError(TrifuseError):
    code = "overflow"


class DivergenceError(TrifuseError):
    code = "divergence"


class MiningError(TrifuseError):
    code = "mining"


class TransportError(TrifuseError):
    code = "transport"


class RerankFormatError(TrifuseError):
    code = "rerank_format"


class CheckpointMismatchError(TrifuseError):
    code = "checkpoint_mismatch"
