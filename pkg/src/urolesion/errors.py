"""Exception hierarchy shared across the package."""


class UrolesionError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(UrolesionError, ValueError):
    pass


class NumericError(UrolesionError, ArithmeticError):
    """A forward op saw or produced non-finite values."""


class BackwardError(UrolesionError, RuntimeError):
    pass


class ValidationError(UrolesionError, ValueError):
    pass


class FreezeMaskError(UrolesionError, ValueError):
    pass


class ArchitectureError(UrolesionError, ValueError):
    pass


class CheckpointError(UrolesionError):
    pass


class CheckpointFormatError(CheckpointError):
    """Bad magic bytes or an unreadable header."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointSpecError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class ManifestError(UrolesionError, ValueError):
    def __init__(self, message: str, row: int | None = None):
        self.row = row
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)


class FoldError(UrolesionError, ValueError):
    pass


class TrainingError(UrolesionError, ValueError):
    pass


class MetricError(UrolesionError, ValueError):
    pass


class UndefinedROCError(MetricError):
    """ROC needs at least one positive and one negative sample."""


class IncompleteBundleError(UrolesionError):
    def __init__(self, missing: list[str]):
        self.missing = list(missing)
        preview = ", ".join(self.missing[:10])
        more = "" if len(self.missing) <= 10 else f" (+{len(self.missing) - 10} more)"
        super().__init__(f"bundle is missing {len(self.missing)} cell(s): {preview}{more}")


class GradCamError(UrolesionError, ValueError):
    pass


class ConfigError(UrolesionError, ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
