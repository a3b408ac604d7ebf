"""
Exception hierarchy for the stereo calibrator
"""

from typing import Optional, Tuple


class CalibrationError(Exception):
    """Base class for every error raised by stereo_calib"""


class InvalidArgumentError(CalibrationError, ValueError):
    """An argument violates an operation precondition"""


class BehindCameraError(CalibrationError):
    """A point to project lies at or behind the image plane"""


class OutOfIntervalError(CalibrationError):
    """A spline was queried outside its valid time interval"""

    def __init__(self, tau: float, interval: Tuple[float, float]):
        self.tau = tau
        self.interval = interval
        super().__init__(
            f"time {tau:.9f} s outside valid interval [{interval[0]:.9f}, {interval[1]:.9f})"
        )


class NoSegmentError(CalibrationError):
    """No trajectory segment covers the queried time"""

    def __init__(self, tau: float):
        self.tau = tau
        super().__init__(f"no trajectory segment covers time {tau:.9f} s")


class InsufficientDataError(CalibrationError):
    """Not enough tracked patterns to proceed"""


class DegeneratePatternError(CalibrationError):
    """Pattern geometry cannot constrain a camera pose"""


class PnPFailureError(CalibrationError):
    """Pose refinement did not reach an acceptable reprojection error"""


class InsufficientSpanError(CalibrationError):
    """A pose run is too short for the requested knot spacing"""


class InsufficientOverlapError(CalibrationError):
    """Too few target poses overlap the reference trajectory"""


class InsufficientCoverageError(CalibrationError):
    """No residual survived trajectory coverage exclusion"""


class ConditioningError(CalibrationError):
    """Normal equations are rank deficient"""


class EvaluationError(CalibrationError):
    """A residual block produced a non-finite value"""

    def __init__(self, block_name: str, detail: str = "non-finite residual"):
        self.block_name = block_name
        super().__init__(f"{detail} in residual block '{block_name}'")


class ScenarioError(CalibrationError):
    """A simulation scenario is invalid or cannot be realised"""


class ConfigurationError(CalibrationError):
    """Configuration contains unknown keys or invalid values"""


class FormatError(CalibrationError):
    """A detection, scenario, report or sidecar file is malformed"""

    def __init__(self, path: str, message: str, line: Optional[int] = None):
        self.path = path
        self.line = line
        location = f"{path}:{line}" if line is not None else path
        super().__init__(f"{location}: {message}")


class StageError(CalibrationError):
    """A pipeline stage failed; wraps the original cause"""

    def __init__(self, stage: str, cause: Exception):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
