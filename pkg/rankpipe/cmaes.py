"""
(1+1)-CMA-ES with constraint handling by active covariance reduction.

The search runs on the encoded real vector of a ParameterSpace. The box bounds of the space
and the caller's constraints (``g(point) <= 0`` is feasible) are handled alike: an
infeasible offspring is not evaluated, and instead the Cholesky factor of the covariance is
shrunk along the faded directions of recent violations of each violated constraint. Every
candidate counts against the budget and is recorded in the archive, the solution path the
tuner mines for finalists.
"""
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from . import config
from .errors import RankpipeError
from .space import ParameterSpace, TuningPoint

LOG = logging.getLogger(__name__)

Objective = Callable[[TuningPoint], float]
Constraint = Callable[[TuningPoint], float]


@dataclass
class ArchiveEntry:
    point: TuningPoint
    vector: np.ndarray
    objective: Optional[float]
    constraints: List[float]
    in_bounds: bool
    feasible: bool
    evaluation: int

    def to_dict(self):
        return {
            "point": self.point.to_dict(),
            "objective": self.objective,
            "constraints": self.constraints,
            "in_bounds": self.in_bounds,
            "feasible": self.feasible,
            "evaluation": self.evaluation,
        }


@dataclass
class OptimizationResult:
    best: TuningPoint
    best_objective: float
    archive: List[ArchiveEntry] = field(default_factory=list)
    evaluations: int = 0

    def feasible_entries(self) -> List[ArchiveEntry]:
        return [e for e in self.archive if e.feasible and e.objective is not None]


class NoFeasiblePointFound(RankpipeError):
    def __init__(self, archive: List[ArchiveEntry]) -> None:
        self.archive = archive
        super().__init__(f"no feasible point among {len(archive)} candidates")


class OnePlusOne:
    """
    State of one (1+1)-CMA-ES run over an n-dimensional real vector.
    """

    def __init__(self, x0: np.ndarray, sigma: float, scales: np.ndarray, rng: np.random.Generator):
        n = len(x0)
        self.n = n
        self.x = np.asarray(x0, dtype=float)
        self.fx = math.inf
        self.sigma = sigma
        self.A = np.diag(np.asarray(scales, dtype=float))
        self.s = np.zeros(n)
        self.rng = rng

        self.d = 1.0 + n / 2.0
        self.c = 2.0 / (n + 2.0)
        self.c_p = 1.0 / 12.0
        self.p_target = 2.0 / 11.0
        self.c_cov = 2.0 / (n**2 + 6.0)
        self.c_c = 1.0 / (n + 2.0)
        self.beta = 0.1 / (n + 2.0)
        self.p_succ = self.p_target

        self.v: Optional[np.ndarray] = None
        self._z = np.zeros(n)

    def sample(self) -> np.ndarray:
        self._z = self.rng.standard_normal(self.n)
        return self.x + self.sigma * (self.A @ self._z)

    def reject(self, violated: Sequence[int], constraint_count: int) -> None:
        """
        Reduces the covariance along the fading records of every violated constraint.
        """
        if self.v is None:
            self.v = np.zeros((constraint_count, self.n))
        az = self.A @ self._z
        for j in violated:
            self.v[j] = (1.0 - self.c_c) * self.v[j] + self.c_c * az

        update = np.zeros((self.n, self.n))
        for j in violated:
            w = np.linalg.solve(self.A, self.v[j])
            ww = float(w @ w)
            if ww > 0:
                update += np.outer(self.v[j], w) / ww
        self.A = self.A - (self.beta / len(violated)) * update

    def tell(self, y: np.ndarray, fy: float) -> bool:
        success = fy <= self.fx
        self.p_succ = (1.0 - self.c_p) * self.p_succ + self.c_p * float(success)
        self.sigma *= math.exp((self.p_succ - self.p_target) / (self.d * (1.0 - self.p_target)))

        if success:
            az = self.A @ self._z
            self.x = y
            self.fx = fy
            self.s = (1.0 - self.c) * self.s + math.sqrt(self.c * (2.0 - self.c)) * az
            w = np.linalg.solve(self.A, self.s)
            ww = float(w @ w)
            a = math.sqrt(1.0 - self.c_cov)
            if ww > 0:
                b = a / ww * (math.sqrt(1.0 + self.c_cov * ww / (1.0 - self.c_cov)) - 1.0)
                self.A = a * self.A + b * np.outer(self.s, w)
        return success

    @property
    def converged(self) -> bool:
        return self.sigma * float(np.abs(self.A).max()) < 1e-14


def cma_es_constrained(
    objective: Objective,
    constraints: Sequence[Constraint],
    space: ParameterSpace,
    budget: int,
    seed: int = 0,
    x0: TuningPoint = None,
    sigma0: float = 0.3,
) -> OptimizationResult:
    """
    Minimizes ``objective`` over the space subject to ``g(point) <= 0`` for every
    constraint. Starts from ``x0`` (default: the space defaults); if that is infeasible, a
    first phase minimizes the total constraint violation until a feasible point is found.

    :param budget: total number of candidates, evaluated or rejected; at least
        ``config.CMA_ES_MIN_BUDGET``
    :param seed: seeds the normal sampler; equal seeds give equal archives
    :raises NoFeasiblePointFound: if the budget runs out without a feasible point
    """
    if budget < config.CMA_ES_MIN_BUDGET:
        raise ValueError(f"budget {budget} is below the minimum of {config.CMA_ES_MIN_BUDGET}")

    lower, upper = space.lower, space.upper
    rng = np.random.default_rng(seed)
    start = space.encode(x0 if x0 is not None else space.defaults())
    bounds_count = 2 * space.dimension
    total = bounds_count + len(constraints)

    archive: List[ArchiveEntry] = []
    evaluations = 0
    best: Optional[ArchiveEntry] = None

    def bound_violations(y: np.ndarray) -> List[int]:
        low = [i for i in range(space.dimension) if y[i] < lower[i]]
        high = [space.dimension + i for i in range(space.dimension) if y[i] > upper[i]]
        return low + high

    def record(y: np.ndarray, objective_value, values, in_bounds) -> ArchiveEntry:
        nonlocal best
        feasible = in_bounds and all(g <= 0 for g in values)
        entry = ArchiveEntry(
            space.decode(y), y.copy(), objective_value, values, in_bounds, feasible, evaluations
        )
        archive.append(entry)
        if feasible and objective_value is not None:
            if best is None or objective_value < best.objective:
                best = entry
        return entry

    def constraint_values(point: TuningPoint) -> List[float]:
        return [float(g(point)) for g in constraints]

    es = OnePlusOne(start, sigma0, upper - lower, rng)
    feasible_phase = True

    # the start point itself
    evaluations += 1
    start_point = space.decode(start)
    values = constraint_values(start_point)
    if all(g <= 0 for g in values):
        es.fx = float(objective(start_point))
        record(start, es.fx, values, True)
        feasible_phase = False
    else:
        es.fx = sum(max(0.0, g) for g in values)
        record(start, None, values, True)

    while evaluations < budget and not es.converged:
        y = es.sample()
        evaluations += 1

        outside = bound_violations(y)
        if outside:
            record(y, None, [], False)
            es.reject(outside, total)
            continue

        point = space.decode(y)
        values = constraint_values(point)
        violated = [bounds_count + j for j, g in enumerate(values) if g > 0]

        if feasible_phase:
            record(y, None, values, True)
            violation = sum(max(0.0, g) for g in values)
            if not violated:
                LOG.debug("feasible point found after %d candidates", evaluations)
                feasible_phase = False
                es = _restart(es, y, rng)
                es.fx = float(objective(point))
                archive[-1].objective = es.fx
                archive[-1].feasible = True
                best = archive[-1] if best is None or es.fx < best.objective else best
            else:
                es.tell(y, violation)
            continue

        if violated:
            record(y, None, values, True)
            es.reject(violated, total)
            continue

        fy = float(objective(point))
        record(y, fy, values, True)
        es.tell(y, fy)

    if best is None:
        raise NoFeasiblePointFound(archive)

    LOG.debug(
        "cma-es finished after %d candidates, best objective %g", evaluations, best.objective
    )
    return OptimizationResult(best.point, best.objective, archive, evaluations)


def _restart(es: OnePlusOne, x: np.ndarray, rng: np.random.Generator) -> OnePlusOne:
    fresh = OnePlusOne(x, es.sigma, np.ones(es.n), rng)
    fresh.A = es.A.copy()
    return fresh
