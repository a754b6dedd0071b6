"""Exception hierarchy shared across the package."""


class BiGLError(Exception):
    """Base class for every error raised by this package."""


class EmptyImage(BiGLError):
    pass


class LabelSchemeViolation(BiGLError):
    pass


class ShapeMismatch(BiGLError):
    pass


class DirectionMismatch(BiGLError):
    pass


class NonFiniteActivation(BiGLError):
    pass


class NonFiniteLoss(BiGLError):
    def __init__(self, message, iteration=None):
        super().__init__(message if iteration is None else f"{message} (iteration {iteration})")
        self.iteration = iteration


class LevelMismatch(BiGLError):
    pass


class FrozenContractViolation(BiGLError):
    pass


class IncompleteReport(BiGLError):
    def __init__(self, missing):
        super().__init__(f"loss report is missing component(s): {', '.join(missing)}")
        self.missing = list(missing)


class EmptyEpoch(BiGLError):
    pass


class ScheduleExhausted(BiGLError):
    pass


class CheckpointError(BiGLError):
    pass


class CheckpointWriteError(CheckpointError):
    pass


class UndefinedDistance(BiGLError):
    """Surface distance requested with an empty mask on one or both sides."""

    def __init__(self, empty_side):
        super().__init__(f"surface distance undefined: {empty_side} mask is empty")
        self.empty_side = empty_side


class IngestError(BiGLError):
    pass


class IncompleteCase(IngestError):
    pass


class InsufficientCases(BiGLError):
    pass
