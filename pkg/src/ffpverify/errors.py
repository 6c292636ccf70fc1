"""Exception hierarchy shared by all stages.

The CLI maps ``ValidationError`` subclasses to exit code 1 and
``MissingInput`` subclasses to exit code 2; anything else is internal (3).
"""


class VerifyError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(VerifyError, ValueError):
    """Input violates a documented invariant."""


class MissingInput(VerifyError, FileNotFoundError):
    """A required file or upstream artifact does not exist."""


# camera geometry
class PointAtCameraPlane(VerifyError, ArithmeticError):
    pass


class DomainError(ValidationError):
    pass


class ParseError(ValidationError):
    def __init__(self, message, *, line=None, field=None):
        context = []
        if line is not None:
            context.append(f"line {line}")
        if field is not None:
            context.append(f"field {field!r}")
        if context:
            message = f"{message} ({', '.join(context)})"
        super().__init__(message)
        self.line = line
        self.field = field


# LOD-1 builder
class EmptyGrid(ValidationError):
    pass


class NoCoverage(ValidationError):
    pass


class DegenerateHeight(ValidationError):
    pass


# patch extraction
class DegenerateConfiguration(ValidationError):
    pass


class DimensionMismatch(ValidationError):
    pass


class PatchTooSmall(ValidationError):
    pass


# network
class ShapeError(ValidationError):
    pass


class EmptyClass(ValidationError):
    pass


# voting
class NoVisibleViews(ValidationError):
    pass


class MissingVerdict(ValidationError):
    pass


class UndefinedRatio(ValidationError, ZeroDivisionError):
    pass


# pipeline
class SpecError(ValidationError):
    pass


class MissingArtifact(MissingInput):
    def __init__(self, stage, path):
        super().__init__(f"missing artifact from stage {stage!r}: {path}")
        self.stage = stage
        self.path = path
