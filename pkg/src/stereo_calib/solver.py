"""
Sparse robust Levenberg-Marquardt over Euclidean and SO(3) parameter blocks.

A problem is a set of named parameter blocks and residual blocks. Each residual block is a
pure function of the values of the parameter blocks it lists. Jacobians are taken by forward
differences on the tangent space unless the block supplies analytic ones. The damped normal
equations are assembled as a ``scipy.sparse`` matrix and factored with ``splu``.
"""

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Hashable, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .errors import (
    BehindCameraError,
    CalibrationError,
    ConditioningError,
    EvaluationError,
    InvalidArgumentError,
)
from .geometry import quat_exp, quat_multiply, quat_normalize
from .logging import logger

DEFAULT_MAX_ITERATIONS = 100
DEFAULT_FUNCTION_TOLERANCE = 1e-10
DEFAULT_GRADIENT_TOLERANCE = 1e-12
DEFAULT_INITIAL_DAMPING = 1e-4
DEFAULT_HUBER_DELTA = 1.0

FD_RELATIVE_STEP = 1e-7
FD_MIN_STEP = 1e-9
MAX_DAMPING = 1e16
MAX_UNDAMPED_CONDITION = 1e12


def huber_loss(s: Any, delta: float) -> Tuple[Any, Any]:
    """Huber loss on a squared norm: value and derivative with respect to s"""
    if not delta > 0:
        raise InvalidArgumentError(f"Huber threshold must be positive, got {delta}")
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < 0):
        raise InvalidArgumentError("squared norm must be nonnegative")
    inlier = s_arr <= delta * delta
    root = np.sqrt(np.where(inlier, 1.0, s_arr))
    if np.isinf(delta):
        rho, drho = s_arr.copy(), np.ones_like(s_arr)
    else:
        rho = np.where(inlier, s_arr, 2.0 * delta * root - delta * delta)
        drho = np.where(inlier, 1.0, delta / root)
    if np.ndim(s) == 0:
        return float(rho), float(drho)
    return rho, drho


@dataclass(frozen=True)
class HuberLoss:
    delta: float = DEFAULT_HUBER_DELTA

    def __call__(self, s: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        return huber_loss(np.asarray(s, dtype=float), self.delta)


class Manifold(str, Enum):
    EUCLIDEAN = "euclidean"
    SO3 = "so3"


@dataclass
class ParameterBlock:
    """Optimization variable. SO(3) values are unit quaternions (w, x, y, z)"""

    id: Hashable
    value: np.ndarray
    manifold: Manifold = Manifold.EUCLIDEAN
    constant: bool = False
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self) -> None:
        self.value = np.array(self.value, dtype=float).reshape(-1)
        if self.manifold == Manifold.SO3:
            if self.value.shape != (4,):
                raise InvalidArgumentError(f"SO(3) block {self.id!r} needs a quaternion value")
            if self.lower is not None or self.upper is not None:
                raise InvalidArgumentError(f"SO(3) block {self.id!r} cannot be bounded")
            self.value = quat_normalize(self.value)
        if self.lower is not None:
            self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), self.value.shape)
        if self.upper is not None:
            self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), self.value.shape)
        if self.lower is not None and self.upper is not None and np.any(self.lower > self.upper):
            raise InvalidArgumentError(f"empty bounds on block {self.id!r}")

    @property
    def tangent_dim(self) -> int:
        return 3 if self.manifold == Manifold.SO3 else len(self.value)

    def plus(self, value: np.ndarray, delta: np.ndarray) -> np.ndarray:
        """Retraction: right-multiplied exponential on SO(3), addition otherwise"""
        if self.manifold == Manifold.SO3:
            return quat_normalize(quat_multiply(value, quat_exp(delta)))
        return self.project(value + delta)

    def project(self, value: np.ndarray) -> np.ndarray:
        if self.lower is not None:
            value = np.maximum(value, self.lower)
        if self.upper is not None:
            value = np.minimum(value, self.upper)
        return value

    def fd_steps(self, value: np.ndarray) -> np.ndarray:
        if self.manifold == Manifold.SO3:
            return np.full(3, FD_RELATIVE_STEP)
        return np.maximum(FD_RELATIVE_STEP * np.abs(value), FD_MIN_STEP)


JacobianFunction = Callable[..., Dict[int, np.ndarray]]


@dataclass
class ResidualBlock:
    """Residual vector over a fixed list of parameter blocks.

    ``loss_chunk`` splits the residual into equal pieces that are robustified separately,
    e.g. 2 for a stack of reprojection errors. ``jacobian`` may return analytic tangent-space
    Jacobians for some argument positions; the rest are differenced.
    """

    dimension: int
    parameter_ids: Sequence[Hashable]
    function: Callable[..., np.ndarray]
    loss: Optional[HuberLoss] = None
    loss_chunk: Optional[int] = None
    jacobian: Optional[JacobianFunction] = None
    group: str = "default"
    name: str = ""

    def __post_init__(self) -> None:
        if self.dimension < 1:
            raise InvalidArgumentError(f"residual dimension must be positive, got {self.dimension}")
        chunk = self.loss_chunk or self.dimension
        if self.dimension % chunk:
            raise InvalidArgumentError(
                f"loss chunk {chunk} does not divide residual dimension {self.dimension}"
            )
        self.loss_chunk = chunk
        if not self.name:
            self.name = f"{self.group}[{', '.join(map(str, self.parameter_ids))}]"


@dataclass
class SolverOptions:
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    function_tolerance: float = DEFAULT_FUNCTION_TOLERANCE
    gradient_tolerance: float = DEFAULT_GRADIENT_TOLERANCE
    initial_damping: float = DEFAULT_INITIAL_DAMPING
    damping_increase: float = 10.0
    damping_decrease: float = 0.5
    min_diagonal: float = 1e-6
    max_diagonal: float = 1e32


@dataclass
class SolverReport:
    initial_cost: float
    final_cost: float
    iterations: int
    termination: str
    group_rms: Dict[str, float] = field(default_factory=dict)
    cost_history: List[float] = field(default_factory=list)
    condition_estimate: float = float("nan")
    residual_count: int = 0
    parameter_count: int = 0

    @property
    def converged(self) -> bool:
        return self.termination in ("function_tolerance", "gradient_tolerance")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "initial_cost": self.initial_cost,
            "final_cost": self.final_cost,
            "iterations": self.iterations,
            "termination": self.termination,
            "group_rms": dict(self.group_rms),
            "condition_estimate": (
                self.condition_estimate if np.isfinite(self.condition_estimate) else None
            ),
            "cost_history": list(self.cost_history),
            "residuals": self.residual_count,
            "parameters": self.parameter_count,
        }


class Problem:
    """Parameter blocks keyed by id plus the residual blocks that reference them"""

    def __init__(self) -> None:
        self.parameters: Dict[Hashable, ParameterBlock] = {}
        self.residuals: List[ResidualBlock] = []

    def add_parameter_block(self, block: ParameterBlock) -> ParameterBlock:
        if block.id in self.parameters:
            raise InvalidArgumentError(f"duplicate parameter block {block.id!r}")
        self.parameters[block.id] = block
        return block

    def add_residual_block(self, block: ResidualBlock) -> ResidualBlock:
        missing = [pid for pid in block.parameter_ids if pid not in self.parameters]
        if missing:
            raise InvalidArgumentError(
                f"residual '{block.name}' references unknown blocks {missing}"
            )
        self.residuals.append(block)
        return block

    def __getitem__(self, block_id: Hashable) -> ParameterBlock:
        return self.parameters[block_id]

    @property
    def residual_dimension(self) -> int:
        return sum(r.dimension for r in self.residuals)

    def values(self) -> Dict[Hashable, np.ndarray]:
        return {pid: block.value.copy() for pid, block in self.parameters.items()}

    def evaluate(
        self, values: Optional[Dict[Hashable, np.ndarray]] = None
    ) -> Tuple[float, List[np.ndarray]]:
        """Robust cost 0.5 * sum(rho) and the raw residual of every block"""
        values = values if values is not None else self.values()
        residuals = [_evaluate(r, [values[p] for p in r.parameter_ids]) for r in self.residuals]
        return _robust_cost(self.residuals, residuals), residuals


def _evaluate(block: ResidualBlock, args: List[np.ndarray]) -> np.ndarray:
    try:
        r = np.asarray(block.function(*args), dtype=float).reshape(-1)
    except BehindCameraError as exc:
        raise EvaluationError(block.name, str(exc)) from exc
    if r.shape != (block.dimension,):
        raise EvaluationError(
            block.name, f"residual shape {r.shape}, expected ({block.dimension},)"
        )
    if not np.all(np.isfinite(r)):
        raise EvaluationError(block.name)
    return r


def _chunk_norms(block: ResidualBlock, r: np.ndarray) -> np.ndarray:
    return np.sum(r.reshape(-1, block.loss_chunk) ** 2, axis=1)


def _robust_cost(blocks: Sequence[ResidualBlock], residuals: Sequence[np.ndarray]) -> float:
    total = 0.0
    for block, r in zip(blocks, residuals):
        s = _chunk_norms(block, r)
        total += float(np.sum(block.loss(s)[0] if block.loss else s))
    return 0.5 * total


def _irls_weights(block: ResidualBlock, r: np.ndarray) -> np.ndarray:
    """Row weights sqrt(rho'(s)) expanded to residual entries"""
    if block.loss is None:
        return np.ones(block.dimension)
    _, drho = block.loss(_chunk_norms(block, r))
    return np.repeat(np.sqrt(drho), block.loss_chunk)


def _block_jacobians(
    block: ResidualBlock,
    params: Sequence[ParameterBlock],
    args: List[np.ndarray],
    r0: np.ndarray,
) -> Dict[int, np.ndarray]:
    analytic: Dict[int, np.ndarray] = {}
    if block.jacobian is not None:
        analytic = block.jacobian(*args)
    jacobians: Dict[int, np.ndarray] = {}
    for position, param in enumerate(params):
        if param.constant:
            continue
        if position in analytic:
            jacobians[position] = np.asarray(analytic[position], dtype=float).reshape(
                block.dimension, param.tangent_dim
            )
            continue
        steps = param.fd_steps(args[position])
        jac = np.empty((block.dimension, param.tangent_dim))
        original = args[position]
        for k in range(param.tangent_dim):
            delta = np.zeros(param.tangent_dim)
            delta[k] = steps[k]
            if param.manifold == Manifold.SO3:
                perturbed = param.plus(original, delta)
            else:
                perturbed = original + delta
            args[position] = perturbed
            jac[:, k] = (_evaluate(block, args) - r0) / steps[k]
        args[position] = original
        jacobians[position] = jac
    return jacobians


class LevenbergMarquardt:
    """One solve of a Problem; writes the optimum back into its parameter blocks"""

    def __init__(self, problem: Problem, options: Optional[SolverOptions] = None):
        self.problem = problem
        self.options = options or SolverOptions()
        self.variables = [b for b in problem.parameters.values() if not b.constant]
        if not self.variables:
            raise InvalidArgumentError("problem has no variable parameter blocks")
        self.offsets: Dict[Hashable, int] = {}
        column = 0
        for block in self.variables:
            self.offsets[block.id] = column
            column += block.tangent_dim
        self.n_columns = column
        self.last_condition = float("nan")

    def _linearize(
        self, values: Dict[Hashable, np.ndarray], residuals: List[np.ndarray]
    ) -> Tuple[sp.csr_matrix, np.ndarray]:
        """IRLS-weighted sparse Jacobian and weighted residual vector"""
        rows: List[np.ndarray] = []
        cols: List[np.ndarray] = []
        data: List[np.ndarray] = []
        weighted: List[np.ndarray] = []
        row = 0
        for block, r in zip(self.problem.residuals, residuals):
            params = [self.problem.parameters[p] for p in block.parameter_ids]
            args = [values[p] for p in block.parameter_ids]
            weights = _irls_weights(block, r)
            weighted.append(weights * r)
            for position, jac in _block_jacobians(block, params, args, r).items():
                col0 = self.offsets[params[position].id]
                rr, cc = np.meshgrid(
                    np.arange(block.dimension), np.arange(jac.shape[1]), indexing="ij"
                )
                rows.append((rr + row).ravel())
                cols.append((cc + col0).ravel())
                data.append((weights[:, None] * jac).ravel())
            row += block.dimension
        jacobian = sp.coo_matrix(
            (
                np.concatenate(data) if data else np.zeros(0),
                (
                    np.concatenate(rows) if rows else np.zeros(0, dtype=int),
                    np.concatenate(cols) if cols else np.zeros(0, dtype=int),
                ),
            ),
            shape=(row, self.n_columns),
        ).tocsr()
        return jacobian, np.concatenate(weighted) if weighted else np.zeros(0)

    def _solve_undamped(self, jtj: sp.csc_matrix, gradient: np.ndarray) -> Optional[np.ndarray]:
        """Gauss-Newton step, or None when the normal equations are singular or ill-conditioned"""
        try:
            lu = splu(jtj.tocsc())
        except RuntimeError:
            return None
        pivots = np.abs(lu.U.diagonal())
        if not pivots.min() > 0 or pivots.max() / pivots.min() > MAX_UNDAMPED_CONDITION:
            return None
        step = lu.solve(-gradient)
        if not np.all(np.isfinite(step)):
            return None
        self.last_condition = float(pivots.max() / pivots.min())
        return step

    def _solve_damped(
        self, jtj: sp.csc_matrix, gradient: np.ndarray, damping: float
    ) -> Tuple[np.ndarray, float]:
        """Step for the current damping, raising it until the system factors"""
        diagonal = np.clip(jtj.diagonal(), self.options.min_diagonal, self.options.max_diagonal)
        while damping <= MAX_DAMPING:
            system = (jtj + sp.diags(damping * diagonal)).tocsc()
            try:
                lu = splu(system)
            except RuntimeError:
                damping *= self.options.damping_increase
                continue
            pivots = np.abs(lu.U.diagonal())
            if pivots.min() > 0:
                self.last_condition = float(pivots.max() / pivots.min())
                step = lu.solve(-gradient)
                if np.all(np.isfinite(step)):
                    return step, damping
            damping *= self.options.damping_increase
        raise ConditioningError("normal equations stay singular at maximum damping")

    def _retract(
        self, values: Dict[Hashable, np.ndarray], step: np.ndarray
    ) -> Dict[Hashable, np.ndarray]:
        updated = dict(values)
        for block in self.variables:
            col0 = self.offsets[block.id]
            updated[block.id] = block.plus(values[block.id], step[col0 : col0 + block.tangent_dim])
        return updated

    def _try_evaluate(
        self, values: Dict[Hashable, np.ndarray]
    ) -> Optional[Tuple[float, List[np.ndarray]]]:
        try:
            return self.problem.evaluate(values)
        except CalibrationError as exc:
            logger.log_debug(f"Trial step rejected: {exc}")
            return None

    def run(self) -> SolverReport:
        opts = self.options
        values = {
            pid: b.project(b.value) if not b.constant else b.value
            for pid, b in self.problem.parameters.items()
        }
        cost, residuals = self.problem.evaluate(values)
        initial_cost = cost
        history = [cost]
        damping = opts.initial_damping
        termination = "max_iterations"
        iterations = 0

        while iterations < opts.max_iterations:
            jacobian, weighted = self._linearize(values, residuals)
            gradient = jacobian.T @ weighted
            if np.max(np.abs(gradient), initial=0.0) < opts.gradient_tolerance:
                termination = "gradient_tolerance"
                break
            jtj = (jacobian.T @ jacobian).tocsc()

            # undamped step first; it is exact on linear problems
            accepted = False
            step = self._solve_undamped(jtj, gradient)
            if step is not None:
                trial_values = self._retract(values, step)
                trial = self._try_evaluate(trial_values)
                accepted = trial is not None and trial[0] <= cost
            while not accepted and damping <= MAX_DAMPING:
                step, damping = self._solve_damped(jtj, gradient, damping)
                trial_values = self._retract(values, step)
                trial = self._try_evaluate(trial_values)
                if trial is not None and trial[0] <= cost:
                    accepted = True
                    break
                damping *= opts.damping_increase
            iterations += 1
            if not accepted:
                termination = "no_descent"
                break

            new_cost, residuals = trial  # type: ignore[misc]
            decrease = cost - new_cost
            values, cost = trial_values, new_cost
            history.append(cost)
            damping = max(damping * opts.damping_decrease, 1e-300)
            logger.log_debug(
                f"LM iteration {iterations}", {"cost": f"{cost:.6e}", "damping": f"{damping:.1e}"}
            )
            if cost == 0.0 or decrease < opts.function_tolerance * (cost + decrease):
                termination = "function_tolerance"
                break

        for pid, value in values.items():
            self.problem.parameters[pid].value = value
        return SolverReport(
            initial_cost=initial_cost,
            final_cost=cost,
            iterations=iterations,
            termination=termination,
            group_rms=group_rms(self.problem.residuals, residuals),
            cost_history=history,
            condition_estimate=self.last_condition,
            residual_count=self.problem.residual_dimension,
            parameter_count=self.n_columns,
        )


def group_rms(blocks: Sequence[ResidualBlock], residuals: Sequence[np.ndarray]) -> Dict[str, float]:
    """Root mean square of the raw residual entries of each group"""
    sums: Dict[str, float] = {}
    counts: Dict[str, int] = {}
    for block, r in zip(blocks, residuals):
        sums[block.group] = sums.get(block.group, 0.0) + float(r @ r)
        counts[block.group] = counts.get(block.group, 0) + len(r)
    return {g: float(np.sqrt(sums[g] / counts[g])) for g in sums}


def solve(problem: Problem, options: Optional[SolverOptions] = None) -> SolverReport:
    """Minimize the problem's robust cost in place and report how it went"""
    if not problem.residuals:
        raise InvalidArgumentError("problem has no residual blocks")
    return LevenbergMarquardt(problem, options).run()
