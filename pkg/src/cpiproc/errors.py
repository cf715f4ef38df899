"""Exception hierarchy shared by all stages of the pipeline."""


class CPIError(Exception):
    """Base class for every error raised by cpiproc."""


class SizeMismatch(CPIError):
    def __init__(self, message, path=None):
        super().__init__(message if path is None else f"{path}: {message}")
        self.path = path


class RoiOutOfBounds(CPIError):
    pass


class LayoutMismatch(CPIError):
    pass


class EmptyDataset(CPIError):
    pass


class BudgetTooSmall(CPIError):
    pass


class TaskFailure(CPIError):
    """A tile task raised; ``tile`` is the index range it was working on."""

    def __init__(self, tile, cause):
        super().__init__(f"tile {tile} failed: {cause!r}")
        self.tile = tile
        self.cause = cause


class LengthMismatch(CPIError):
    pass


class DimMismatch(CPIError):
    pass


class AlignmentMismatch(CPIError):
    pass


class ZeroFrames(CPIError):
    pass


class DegenerateAlpha(CPIError):
    pass


class EmptyAngularGrid(CPIError):
    pass


class RoiMismatch(CPIError):
    pass


class IoFailure(CPIError):
    pass


class InsufficientFiles(CPIError):
    pass


class MissingGamma(CPIError):
    pass


class FormatError(CPIError):
    """A container file does not carry the expected header."""
