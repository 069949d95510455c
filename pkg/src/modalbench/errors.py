"""Error hierarchy with stable machine-readable codes.

Every failure that can cross the CLI boundary carries a short ``code``
string so callers (and the extractor pipeline) can branch on it without
parsing prose.
"""


class ModalbenchError(Exception):
    """Base class; ``code`` identifies the failure category."""

    code = "error"

    def __init__(self, message, code=None):
        super().__init__(message)
        if code is not None:
            self.code = code


class DimensionError(ModalbenchError):
    """Operand shapes are incompatible."""

    code = "dimension-mismatch"


class NumericError(ModalbenchError):
    """A public numeric operation produced NaN or Inf."""

    code = "numeric-overflow"


class ConfigError(ModalbenchError):
    """Invalid configuration or arguments."""

    code = "config-invalid"


class FormatError(ModalbenchError):
    """A file does not conform to its declared binary/JSON format."""

    code = "format-invalid"


class DigestError(FormatError):
    code = "digest-mismatch"


class RowCountError(FormatError):
    code = "row-count-mismatch"


class LabelRangeError(FormatError):
    code = "label-range"


class AlignmentError(FormatError):
    """Per-modality label vectors disagree, breaking instance alignment."""

    code = "label-alignment"


class SelectionError(ModalbenchError):
    """A model-selection query cannot be answered from the records."""

    code = "empty-selection"


class IncompleteTrialError(SelectionError):
    code = "incomplete-trial"
