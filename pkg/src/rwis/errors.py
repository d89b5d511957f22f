"""Exception hierarchy shared by every rwis module."""


class RwisError(Exception):
    """Base class for all errors raised by this package."""


class SchemaError(RwisError):
    pass


class MissingColumn(SchemaError):
    def __init__(self, column):
        super().__init__(f"missing required column: {column!r}")
        self.column = column


class UnparseableRow(RwisError):
    def __init__(self, row_index, reason):
        super().__init__(f"row {row_index}: {reason}")
        self.row_index = row_index
        self.reason = reason


class EmptyInput(RwisError):
    pass


class CadenceTooCoarse(RwisError):
    pass


class OutOfRange(RwisError):
    pass


class IndexOutOfBounds(RwisError):
    pass


class NonFiniteInput(RwisError):
    pass


class SingularSystem(RwisError):
    pass


class StepTooLarge(RwisError):
    pass


class InsufficientMeteo(RwisError):
    pass


class LengthMismatch(RwisError):
    pass


class DimensionMismatch(RwisError):
    pass


class DegenerateInput(RwisError):
    pass


class ConfigInvalid(RwisError):
    pass


class AlignmentError(RwisError):
    pass


class MissingModelCell(RwisError):
    def __init__(self, channel, horizon):
        super().__init__(f"no model for cell ({channel}, {horizon}h)")
        self.channel = channel
        self.horizon = horizon


class CellFitError(RwisError):
    """A fit failure inside one (channel, horizon) cell of the grid."""

    def __init__(self, channel, horizon, cause):
        super().__init__(f"cell ({channel}, {horizon}h): {cause}")
        self.channel = channel
        self.horizon = horizon
        self.cause = cause


class SpanTooShort(RwisError):
    pass


class OverlapExhaustion(RwisError):
    pass


class DegenerateLabels(RwisError):
    pass


class SpecInvalid(RwisError):
    pass


class MalformedPayload(RwisError):
    pass


class UnknownStation(RwisError):
    pass


class Quarantined(RwisError):
    pass


class WarmingUp(RwisError):
    pass


class MissingMeteo(RwisError):
    pass


class FormatError(RwisError):
    """A serialized artifact has the wrong kind or version."""
