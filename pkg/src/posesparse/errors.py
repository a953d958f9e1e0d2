"""Exception types and the CLI exit-code table."""


class PosesparseError(Exception):
    exit_code = 1


class ConfigError(PosesparseError, ValueError):
    exit_code = 2


class ParseError(PosesparseError):
    exit_code = 4


class SchemaError(PosesparseError):
    exit_code = 4


class RangeError(PosesparseError, ValueError):
    exit_code = 4


class FormatVersionError(ParseError):
    pass


class DegenerateError(PosesparseError):
    exit_code = 5

    def __init__(self, msg, frames=None):
        super().__init__(msg)
        self.frames = frames


class NumericalError(PosesparseError):
    exit_code = 5


class DivergenceError(NumericalError):
    pass


class DimensionMismatchError(PosesparseError, ValueError):
    exit_code = 6


class LayoutMismatchError(DimensionMismatchError):
    pass


class ShapeError(DimensionMismatchError):
    pass


class EmptyRowError(PosesparseError):
    exit_code = 5


class UnknownMetricError(PosesparseError, KeyError):
    exit_code = 2


class DuplicateMetricError(PosesparseError):
    exit_code = 2


class EmptyRegionWarning(UserWarning):
    """A keypoint group had no usable in-frame points; its region is empty."""


EXIT_OK = 0
EXIT_IO = 3

# code -> meaning, printed by ``posesparse --help``
EXIT_CODES = {
    0: "success",
    1: "unexpected internal error",
    2: "invalid configuration or arguments",
    3: "file could not be read or written",
    4: "malformed, wrong-schema or out-of-range input file",
    5: "numerical failure (degenerate geometry, divergence, empty attention row)",
    6: "dimension mismatch between inputs",
}
