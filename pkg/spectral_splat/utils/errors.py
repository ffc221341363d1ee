"""
Exception hierarchy for the workbench.
Each error carries the CLI exit code it maps to.
"""

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERICAL = 4


class WorkbenchError(Exception):
    """Base class for every error raised by the workbench."""

    exit_code = EXIT_DATA


class UsageError(WorkbenchError):
    """Inconsistent command-line arguments that argparse cannot catch."""

    exit_code = EXIT_USAGE


# ─── Data errors (exit 3) ───────────────────────────────────────────────────

class DataError(WorkbenchError):
    exit_code = EXIT_DATA


class MalformedHeaderError(DataError):
    pass


class TruncatedPayloadError(DataError):
    def __init__(self, path: str, offset: int, detail: str = ""):
        self.path = path
        self.offset = offset
        suffix = f" ({detail})" if detail else ""
        super().__init__(f"{path}: payload truncated at byte offset {offset}{suffix}")


class UnsupportedEncodingError(DataError):
    pass


class EmptySceneError(DataError):
    pass


class ShapeMismatchError(DataError, ValueError):
    pass


class CameraFileError(DataError):
    pass


# ─── Numerical errors (exit 4) ──────────────────────────────────────────────

class NumericalError(WorkbenchError):
    exit_code = EXIT_NUMERICAL


class NonFiniteError(NumericalError):
    pass


class DegenerateError(NumericalError):
    pass


class ZeroTraceError(NumericalError):
    pass


class DomainError(NumericalError, ValueError):
    pass


class GridTooSmallError(NumericalError):
    pass


class BehindCameraError(NumericalError):
    pass


class NoVisibilityError(NumericalError):
    pass


class RankDeficientError(NumericalError):
    pass


class DegenerateCovarianceError(NumericalError):
    pass


class SingularCovarianceError(NumericalError):
    pass


class TrainingDivergedError(NumericalError):
    pass
