"""Exception hierarchy shared by every flatlab module.

Library code raises these; only ``cli.py`` turns them into exit codes.
"""


class FlatlabError(Exception):
    """Base class for all errors raised by flatlab."""


class ConfigError(FlatlabError):
    """Invalid experiment, optimizer or analysis configuration."""


class LayoutMismatchError(FlatlabError):
    """Two parameter vectors (or a vector and a gradient) do not share a segment layout."""


class ShapeMismatchError(FlatlabError):
    """Batch inputs do not match the input specification of a model."""


class NonFiniteError(FlatlabError):
    """A loss, gradient or parameter update produced NaN or Inf."""

    def __init__(self, stage, detail=""):
        self.stage = stage
        message = f"non-finite values during {stage}"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class DataFormatError(FlatlabError):
    """A binary file (IDX, checkpoint) or a generated dataset request is malformed."""


class DegenerateDirectionError(FlatlabError):
    """Random direction sampling kept producing parallel vectors."""


class ResultsError(FlatlabError):
    """Missing, empty or corrupt experiment result files."""
