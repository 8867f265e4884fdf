"""Exception types raised across the package."""


class CmpNetError(Exception):
    """Base class for domain errors (CLI maps these to exit code 1)."""


class ShapeError(CmpNetError, ValueError):
    pass


class InvalidCmpConfig(CmpNetError, ValueError):
    """A (C, r, s) triple whose derived kernel size is below 1."""

    def __init__(self, C, r, s, k):
        self.C, self.r, self.s, self.k = C, r, s, k
        super().__init__(
            f"invalid CMP config: C={C}, r={r:g}, s={s} gives k={k} "
            f"(k = C - s*(ceil(C/r) - 1) must be >= 1)"
        )


class NoValidStride(CmpNetError, ValueError):
    pass


class BuildError(CmpNetError):
    pass


class FormatError(CmpNetError):
    pass


class DivergenceError(CmpNetError, FloatingPointError):
    """Raised when training produces a non-finite loss or gradient.

    ``checkpoint`` holds the last good model state, if one exists.
    """

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
