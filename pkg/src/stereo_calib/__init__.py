"""
Stereo Calib - continuous-time spatiotemporal calibration of stereo event-camera rigs
"""

from .config import Configuration
from .errors import CalibrationError, StageError
from .geometry import CameraIntrinsics, Pose, Rotation
from .initialization import HandEyeInitializer, fit_spline_segment, hand_eye_init, solve_pnp
from .logging import CalibrationLogger, logger
from .main import main
from .models import (
    BoardSpec,
    CalibrationInput,
    CalibrationResult,
    CameraData,
    EllipseFrame,
    GridPattern,
    PatternTrack,
    SpatiotemporalParams,
)
from .pipeline import StereoCalibrator, build_ba_problem, run_calibration
from .simulator import ScenarioSpec, evaluate, generate, run_sweep
from .spline import PiecewiseTrajectory, PositionSpline, RotationSpline, TrajectorySegment
from .tracking import IncompletePatternTracker, track_incomplete

__version__ = "0.1.0"
__author__ = "Stereo Calib Team"

__all__ = [
    # Data models
    "BoardSpec",
    "CameraData",
    "CameraIntrinsics",
    "EllipseFrame",
    "GridPattern",
    "PatternTrack",
    "Pose",
    "Rotation",
    "SpatiotemporalParams",
    "CalibrationInput",
    "CalibrationResult",
    # Core components
    "Configuration",
    "IncompletePatternTracker",
    "track_incomplete",
    "solve_pnp",
    "fit_spline_segment",
    "HandEyeInitializer",
    "hand_eye_init",
    "PiecewiseTrajectory",
    "PositionSpline",
    "RotationSpline",
    "TrajectorySegment",
    "build_ba_problem",
    # Main system
    "StereoCalibrator",
    "run_calibration",
    "main",
    # Simulation
    "ScenarioSpec",
    "generate",
    "evaluate",
    "run_sweep",
    # Errors and logging
    "CalibrationError",
    "StageError",
    "logger",
    "CalibrationLogger",
]
