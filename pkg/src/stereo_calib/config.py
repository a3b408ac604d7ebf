"""
Configuration settings for the stereo calibrator
"""

import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Dict, Optional, Union

from .errors import ConfigurationError
from .initialization import (
    DEFAULT_BA_OFFSET_WINDOW,
    DEFAULT_DT_THD,
    DEFAULT_N_THD,
    DEFAULT_OFFSET_BOUND,
    DEFAULT_OFFSET_GRID_STEP,
    DEFAULT_PNP_MAX_RMS,
    DEFAULT_SPLINE_FIT_MAX_ITERATIONS,
    DEFAULT_SPLINE_FIT_TOLERANCE,
)
from .solver import (
    DEFAULT_FUNCTION_TOLERANCE,
    DEFAULT_GRADIENT_TOLERANCE,
    DEFAULT_HUBER_DELTA,
    DEFAULT_INITIAL_DAMPING,
    DEFAULT_MAX_ITERATIONS,
    SolverOptions,
)
from .spline import DEFAULT_KNOT_SPACING
from .tracking import DEFAULT_D_THD, DEFAULT_MAX_TRAVERSAL_OFFSET, DEFAULT_MIN_POINTS


@dataclass
class Configuration:
    """Every tunable of the pipeline; defaults come from the owning modules"""

    # ===== INCOMPLETE PATTERN TRACKING =====
    d_thd: float = DEFAULT_D_THD  # px
    min_points: Optional[int] = DEFAULT_MIN_POINTS  # None: max(5, ceil(0.3 * circles))
    max_traversal_offset: int = DEFAULT_MAX_TRAVERSAL_OFFSET

    # ===== REFERENCE CAMERA =====
    reference_camera: Optional[str] = None  # None: the camera with more tracked patterns

    # ===== TRAJECTORY INITIALIZATION =====
    dt_thd: float = DEFAULT_DT_THD  # s
    n_thd: int = DEFAULT_N_THD
    knot_spacing_rot: float = DEFAULT_KNOT_SPACING  # s
    knot_spacing_pos: float = DEFAULT_KNOT_SPACING  # s
    pnp_max_rms: float = DEFAULT_PNP_MAX_RMS  # px
    spline_fit_max_iterations: int = DEFAULT_SPLINE_FIT_MAX_ITERATIONS
    spline_fit_tolerance: float = DEFAULT_SPLINE_FIT_TOLERANCE

    # ===== TIME OFFSET =====
    offset_bound: float = DEFAULT_OFFSET_BOUND  # s
    offset_grid_step: float = DEFAULT_OFFSET_GRID_STEP  # s
    ba_offset_window: float = DEFAULT_BA_OFFSET_WINDOW  # s

    # ===== BUNDLE ADJUSTMENT SOLVER =====
    huber_delta: float = DEFAULT_HUBER_DELTA  # px
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    function_tolerance: float = DEFAULT_FUNCTION_TOLERANCE
    gradient_tolerance: float = DEFAULT_GRADIENT_TOLERANCE
    initial_damping: float = DEFAULT_INITIAL_DAMPING

    def validate(self) -> "Configuration":
        """Raise ConfigurationError on the first value its owning module would reject"""
        positive = [
            "d_thd",
            "dt_thd",
            "knot_spacing_rot",
            "knot_spacing_pos",
            "pnp_max_rms",
            "spline_fit_tolerance",
            "offset_bound",
            "offset_grid_step",
            "ba_offset_window",
            "huber_delta",
            "function_tolerance",
            "gradient_tolerance",
            "initial_damping",
        ]
        for name in positive:
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not value > 0:
                raise ConfigurationError(f"{name} must be a positive number, got {value!r}")

        counts = {
            "n_thd": 0,
            "max_traversal_offset": 2,
            "spline_fit_max_iterations": 1,
            "max_iterations": 1,
        }
        for name, minimum in counts.items():
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
                raise ConfigurationError(f"{name} must be an integer >= {minimum}, got {value!r}")

        min_points = self.min_points
        if min_points is not None and (
            isinstance(min_points, bool) or not isinstance(min_points, int) or min_points < 1
        ):
            raise ConfigurationError(
                f"min_points must be null or a positive integer, got {min_points!r}"
            )
        reference = self.reference_camera
        if reference is not None and (not isinstance(reference, str) or not reference):
            raise ConfigurationError(
                f"reference_camera must be null or a camera id, got {reference!r}"
            )
        if self.offset_grid_step > self.offset_bound:
            raise ConfigurationError("offset_grid_step must not exceed offset_bound")
        if self.ba_offset_window > self.offset_bound:
            raise ConfigurationError("ba_offset_window must not exceed offset_bound")
        return self

    def solver_options(self) -> SolverOptions:
        return SolverOptions(
            max_iterations=self.max_iterations,
            function_tolerance=self.function_tolerance,
            gradient_tolerance=self.gradient_tolerance,
            initial_damping=self.initial_damping,
        )

    def spline_fit_options(self) -> SolverOptions:
        return SolverOptions(
            max_iterations=self.spline_fit_max_iterations,
            function_tolerance=self.spline_fit_tolerance,
            gradient_tolerance=self.gradient_tolerance,
            initial_damping=self.initial_damping,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any], source: str = "<config>") -> "Configuration":
        if not isinstance(data, dict):
            raise ConfigurationError(f"{source}: configuration must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigurationError(f"{source}: unknown configuration keys {unknown}")
        return cls(**data).validate()

    @classmethod
    def from_file(cls, path: Optional[Union[str, Path]]) -> "Configuration":
        """Load a JSON configuration; no path gives the defaults"""
        if path is None:
            return cls().validate()
        try:
            data = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigurationError(f"{path}: cannot read configuration: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
        return cls.from_dict(data, str(path))
