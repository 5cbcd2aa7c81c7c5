"""Exception taxonomy.

One class per failure category so callers (and the CLI error reporter) can
dispatch on type instead of matching message strings.
"""


class SidnnError(Exception):
    """Base class for all toolkit errors."""

    category = "error"


class DimensionError(SidnnError):
    category = "dimension"


class ParameterError(SidnnError):
    category = "parameter"


class SchemaError(SidnnError):
    category = "schema"


class ParseError(SidnnError):
    category = "parse"


class DataError(SidnnError):
    category = "data"


class PlanError(SidnnError):
    category = "plan"


class StateError(SidnnError):
    category = "state"


class UsageError(SidnnError):
    category = "usage"


class LossError(SidnnError):
    category = "loss"


class OptimizerError(SidnnError):
    category = "optimizer"


class TrainingError(SidnnError):
    category = "training"


class FinderError(SidnnError):
    category = "finder"


class InputError(SidnnError):
    category = "input"


class CompatibilityError(SidnnError):
    category = "compatibility"


class FormatError(SidnnError):
    category = "format"


class CorruptionError(SidnnError):
    category = "corruption"


class BookkeepingError(SidnnError):
    category = "bookkeeping"


class ReportError(SidnnError):
    category = "report"
