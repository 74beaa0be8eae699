"""Exceptions raised by `vipsim`.

Everything derives from `VipsimError`. Configuration and validation problems
are also `ValueError`\\s so they can be caught the usual way.
"""

__all__ = [
    "VipsimError",
    "ConfigError",
    "ValidationError",
    "BinningMismatchError",
    "FrameFormatError",
    "InsufficientStatisticsError",
    "FitFailureError",
    "SingularFitError",
    "PipelineError",
]


class VipsimError(Exception):
    pass


class ConfigError(VipsimError, ValueError):
    """The configuration file could not be parsed.

    Parameters
    ----------
    message : str
    field : str, optional
        Dotted key path of the offending entry, e.g. ``"geometry.n_ccds"``.
    line : int, optional
        1-based line number reported by the YAML parser.
    """

    def __init__(self, message, *, field=None, line=None):
        where = []
        if field is not None:
            where.append(f"field '{field}'")
        if line is not None:
            where.append(f"line {line}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.field = field
        self.line = line


class ValidationError(VipsimError, ValueError):
    """A value violates an invariant of one of the domain types.

    ``invariant`` is a short, stable code naming the violated invariant
    (``"positive_length"``, ``"active_ccds_le_n_ccds"``, ...).
    """

    def __init__(self, message, *, invariant, field=None):
        super().__init__(f"[{invariant}] {message}")
        self.invariant = invariant
        self.field = field


class BinningMismatchError(ValidationError):
    def __init__(self, message):
        super().__init__(message, invariant="identical_binning")


class FrameFormatError(VipsimError):
    pass


class InsufficientStatisticsError(VipsimError):
    pass


class FitFailureError(VipsimError):
    """A non-linear fit did not converge.

    ``diagnostics`` holds whatever is useful for debugging the fit:
    initial guesses, window, number of entries and the solver message.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class SingularFitError(VipsimError):
    pass


class PipelineError(VipsimError):
    def __init__(self, message, *, stage):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage
