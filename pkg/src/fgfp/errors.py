"""Exception types shared across the toolkit.

The CLI maps these onto exit codes: usage errors exit 2, data/format
errors exit 3, numeric failures exit 4.
"""


class FgfpError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(FgfpError):
    """Tensor shapes are inconsistent with the requested operation."""


class NumericError(FgfpError):
    """A computation produced non-finite values and was aborted."""


class FormatError(FgfpError):
    """A file's bytes do not match the expected on-disk format."""


class IntegrityError(FormatError):
    """A checkpoint parsed cleanly but violates a model invariant."""


class FitError(FgfpError):
    """Every restart of a parameter fit diverged to a non-finite loss."""


class UsageError(FgfpError):
    """Command invoked with inconsistent or missing arguments."""
