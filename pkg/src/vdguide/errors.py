"""Exception types shared across the package."""


class VDGuideError(Exception):
    pass


class InvalidInputError(VDGuideError, ValueError):
    pass


class InvalidConfigError(VDGuideError, ValueError):
    pass


class DegenerateFitError(VDGuideError):
    """Least-squares affine fit is underdetermined."""


class DegenerateConfigurationError(VDGuideError):
    """PnP correspondences do not constrain a pose."""


class RobustFailureError(VDGuideError):
    """RANSAC could not find enough inliers."""


class EmptyEvaluationError(VDGuideError):
    pass


class InsufficientDataError(VDGuideError):
    pass


class GenerationError(VDGuideError):
    def __init__(self, message: str, frame: int | None = None):
        super().__init__(message if frame is None else f"frame {frame}: {message}")
        self.frame = frame
