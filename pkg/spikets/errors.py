"""Exceptions raised by spikets.

Every exception derives from `SpiketsError`; most also derive from the builtin they specialise, so callers can
catch either.
"""


class SpiketsError(Exception):
    """Base class of all spikets errors."""


class ShapeError(SpiketsError, ValueError):
    """Operand shapes do not agree."""


class NonFiniteError(SpiketsError, FloatingPointError):
    """An operation produced or received NaN/Inf values."""


class BackwardError(SpiketsError, RuntimeError):
    """The reverse pass cannot be run on the given loss or tape."""


class NonBinaryError(SpiketsError, ValueError):
    """A spike array contains values other than 0 and 1."""


class CsvFormatError(SpiketsError, ValueError):
    """A CSV file could not be parsed as a rectangular numeric table."""


class RaggedRowError(CsvFormatError):
    """A CSV row has a different number of cells than the first row."""


class NonNumericCellError(CsvFormatError):
    """A CSV cell could not be converted to a float."""


class EmptyFileError(CsvFormatError):
    """A CSV file holds no data rows."""


class DegenerateSplitError(SpiketsError, ValueError):
    """A chronological split leaves one part empty or its ratios are invalid."""


class SplitTooShortError(SpiketsError, ValueError):
    """A split is shorter than lookback plus horizon."""


class DegenerateTargetError(SpiketsError, ValueError):
    """Ground truth is constant, so a relative metric is undefined."""


class MissingRateError(SpiketsError, KeyError):
    """A spiking layer has no measured firing rate."""


class TrainingDivergedError(SpiketsError, FloatingPointError):
    """The training loss became non-finite."""


class EmptySplitError(SpiketsError, ValueError):
    """A split holds no usable windows."""


class CheckpointError(SpiketsError, ValueError):
    """A checkpoint is malformed or does not match the model."""


class ConfigError(SpiketsError, ValueError):
    """A run configuration is invalid."""
