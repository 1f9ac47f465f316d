#
# Copyright (c) 2024 The idmpc developers.
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#     http://www.apache.org/licenses/LICENSE-2.0
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.
#
r''' Dense convex quadratic programming.

Problems have the form

.. math::
    \min_z \tfrac{1}{2} z^T H z + g^T z \quad
    \text{s.t.} \quad A_{eq} z = b_{eq},\; A_{in} z \le b_{in}

and are solved by a primal active-set method with equalities always
enforced. :func:`brute_force_qp` enumerates active sets and is intended as a
reference for testing.
'''
import enum
import itertools
import logging
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple
import numpy as np
import scipy.linalg
import scipy.optimize


LOGGER = logging.getLogger(__name__)

#: Absolute asymmetry allowed in a cost matrix
SYMMETRY_TOL = 1e-10
#: Relative singular value below which constraint rows are dependent
RANK_RTOL = 1e-12
#: Number of consecutive zero-length steps before switching to Bland's rule
BLAND_AFTER = 5


class RankDeficientError(RuntimeError):
    ''' Equality constraint rows are linearly dependent. '''


class IndefiniteHessianError(RuntimeError):
    ''' The cost is not positive definite on the equality null space. '''


class Status(enum.Enum):
    ''' Solver termination state. ``MAX_ITER`` also covers termination
    without reaching the requested accuracy.
    '''
    OPTIMAL = 'optimal'
    INFEASIBLE = 'infeasible'
    MAX_ITER = 'max_iter'


def _rows(mat, cols: int) -> np.ndarray:
    if mat is None:
        return np.zeros((0, cols))
    return np.array(mat, dtype=float, ndmin=2).reshape(-1, cols)


def _vec(val, size: int) -> np.ndarray:
    if val is None:
        return np.zeros(size)
    return np.array(val, dtype=float).reshape(size)


@dataclass(frozen=True, eq=False)
class QpProblem:
    ''' An immutable convex QP. Missing constraint blocks may be ``None``.
    '''
    H: np.ndarray
    g: np.ndarray
    A_eq: Optional[np.ndarray] = None
    b_eq: Optional[np.ndarray] = None
    A_in: Optional[np.ndarray] = None
    b_in: Optional[np.ndarray] = None

    def __post_init__(self):
        hmat = np.array(self.H, dtype=float, ndmin=2)
        dim = hmat.shape[0]
        if hmat.shape != (dim, dim):
            raise ValueError(f'H must be square, got {hmat.shape}')
        if np.max(np.abs(hmat - hmat.T), initial=0.0) > SYMMETRY_TOL:
            raise ValueError('H is not symmetric')
        object.__setattr__(self, 'H', 0.5 * (hmat + hmat.T))
        object.__setattr__(self, 'g', _vec(self.g, dim))
        a_eq = _rows(self.A_eq, dim)
        a_in = _rows(self.A_in, dim)
        object.__setattr__(self, 'A_eq', a_eq)
        object.__setattr__(self, 'b_eq', _vec(self.b_eq, a_eq.shape[0]))
        object.__setattr__(self, 'A_in', a_in)
        object.__setattr__(self, 'b_in', _vec(self.b_in, a_in.shape[0]))
        if a_eq.shape[0] > dim:
            raise RankDeficientError(f'{a_eq.shape[0]} equalities exceed dimension {dim}')

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @property
    def n_eq(self) -> int:
        return self.A_eq.shape[0]

    @property
    def n_in(self) -> int:
        return self.A_in.shape[0]

    @property
    def scale(self) -> float:
        ''' Magnitude used to relate absolute residuals to the problem. '''
        return max(1.0, float(np.max(np.abs(self.H))), float(np.max(np.abs(self.g), initial=0.0)))

    def objective(self, z: np.ndarray) -> float:
        return float(0.5 * z @ self.H @ z + self.g @ z)

    def without_inequality(self, index: int) -> 'QpProblem':
        ''' A copy of this problem with one inequality row removed. '''
        keep = np.arange(self.n_in) != index
        return QpProblem(self.H, self.g, self.A_eq, self.b_eq, self.A_in[keep], self.b_in[keep])


@dataclass
class KktResiduals:
    ''' Absolute optimality residuals, each in the infinity norm. '''
    stationarity: float = 0.0
    primal_eq: float = 0.0
    primal_in: float = 0.0
    complementarity: float = 0.0
    #: Most negative inequality multiplier, as a nonnegative number
    dual: float = 0.0

    def worst(self) -> float:
        return max(self.stationarity, self.primal_eq, self.primal_in,
                   self.complementarity, self.dual)


@dataclass
class QpSolution:
    ''' Solver result.

    :ivar z: The primal point, NaN if infeasible.
    :ivar nu: Equality multipliers.
    :ivar mu: Inequality multipliers, zero for inactive rows.
    :ivar active: Indices of inequality rows in the final working set.
    :ivar certificate: For infeasible problems, the minimal total violation.
    '''
    z: np.ndarray
    objective: float
    status: Status
    residuals: KktResiduals = field(default_factory=KktResiduals)
    nu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mu: np.ndarray = field(default_factory=lambda: np.zeros(0))
    active: Tuple[int, ...] = ()
    iterations: int = 0
    certificate: float = 0.0

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def kkt_residuals(problem: QpProblem, z, nu, mu) -> KktResiduals:
    ''' Evaluate the KKT conditions of a candidate primal-dual point.
    '''
    grad = problem.H @ z + problem.g + problem.A_eq.T @ nu + problem.A_in.T @ mu
    slack = problem.b_in - problem.A_in @ z
    return KktResiduals(
        stationarity=float(np.max(np.abs(grad), initial=0.0)),
        primal_eq=float(np.max(np.abs(problem.A_eq @ z - problem.b_eq), initial=0.0)),
        primal_in=float(max(0.0, -np.min(slack, initial=0.0))),
        complementarity=float(abs(mu @ slack)) if mu.size else 0.0,
        dual=float(max(0.0, -np.min(mu, initial=0.0))),
    )


def _kkt_solve(hmat, gvec, amat, bvec) -> Tuple[np.ndarray, np.ndarray]:
    ''' Solve the equality-constrained KKT system with one refinement step. '''
    dim = hmat.shape[0]
    rows = amat.shape[0]
    kkt = np.block([[hmat, amat.T], [amat, np.zeros((rows, rows))]])
    rhs = np.concatenate([-gvec, bvec])
    with warnings.catch_warnings():
        warnings.simplefilter('ignore', scipy.linalg.LinAlgWarning)
        factor = scipy.linalg.lu_factor(kkt, check_finite=False)
        sol = scipy.linalg.lu_solve(factor, rhs, check_finite=False)
        if np.all(np.isfinite(sol)):
            sol = sol + scipy.linalg.lu_solve(factor, rhs - kkt @ sol, check_finite=False)
    if not np.all(np.isfinite(sol)):
        raise IndefiniteHessianError('KKT system is singular')
    return sol[:dim], sol[dim:]


def _check_eqp(hmat, amat):
    dim = hmat.shape[0]
    if amat.shape[0]:
        sing = scipy.linalg.svdvals(amat)
        if amat.shape[0] > dim or sing[-1] <= RANK_RTOL * max(1.0, sing[0]):
            raise RankDeficientError('Equality constraint rows are linearly dependent')
        basis = scipy.linalg.null_space(amat)
    else:
        basis = np.eye(dim)
    if basis.shape[1] == 0:
        return
    reduced = basis.T @ hmat @ basis
    eig = scipy.linalg.eigvalsh(0.5 * (reduced + reduced.T))
    if eig[0] <= RANK_RTOL * max(1.0, float(np.max(np.abs(hmat)))):
        raise IndefiniteHessianError(f'Reduced Hessian has eigenvalue {eig[0]:.3e}')


def solve_eqp(H, g, A_eq=None, b_eq=None) -> QpSolution:
    ''' Solve an equality-constrained QP through its KKT system.

    :raise RankDeficientError: If the rows of ``A_eq`` are dependent.
    :raise IndefiniteHessianError: If ``H`` is not positive definite on the
        null space of ``A_eq``.
    '''
    problem = QpProblem(H, g, A_eq, b_eq)
    _check_eqp(problem.H, problem.A_eq)
    z, nu = _kkt_solve(problem.H, problem.g, problem.A_eq, problem.b_eq)
    return QpSolution(
        z=z, objective=problem.objective(z), status=Status.OPTIMAL,
        residuals=kkt_residuals(problem, z, nu, np.zeros(0)), nu=nu,
    )


def ruiz_scaling(hmat: np.ndarray, iterations: int = 10) -> np.ndarray:
    ''' Symmetric Ruiz equilibration of a cost matrix.

    :return: Diagonal ``d`` such that ``diag(d) H diag(d)`` has rows of
        roughly unit max-norm.
    '''
    diag = np.ones(hmat.shape[0])
    scaled = hmat.copy()
    for _ in range(iterations):
        norms = np.sqrt(np.max(np.abs(scaled), axis=1))
        norms[norms < 1e-8] = 1.0
        scaled = scaled / norms[:, None] / norms[None, :]
        diag = diag / norms
    return diag


def _phase_one(problem: QpProblem, feas_tol: float) -> Tuple[Optional[np.ndarray], float]:
    ''' Find a feasible point by minimizing total inequality violation.

    :return: The point, or None, and the minimal violation.
    '''
    dim, k_in = problem.dim, problem.n_in
    if k_in == 0:
        if problem.n_eq == 0:
            return np.zeros(dim), 0.0
        point = scipy.linalg.lstsq(problem.A_eq, problem.b_eq)[0]
        viol = float(np.max(np.abs(problem.A_eq @ point - problem.b_eq)))
        return (point, viol) if viol <= feas_tol else (None, viol)

    cost = np.concatenate([np.zeros(dim), np.ones(k_in)])
    a_ub = np.hstack([problem.A_in, -np.eye(k_in)])
    a_eq = np.hstack([problem.A_eq, np.zeros((problem.n_eq, k_in))]) if problem.n_eq else None
    bounds = [(None, None)] * dim + [(0.0, None)] * k_in
    res = scipy.optimize.linprog(
        cost, A_ub=a_ub, b_ub=problem.b_in, A_eq=a_eq, b_eq=problem.b_eq if problem.n_eq else None,
        bounds=bounds, method='highs',
        options={'primal_feasibility_tolerance': 1e-9, 'dual_feasibility_tolerance': 1e-9},
    )
    if res.status != 0 or res.x is None:
        LOGGER.debug('Phase-one LP ended with status %d: %s', res.status, res.message)
        return None, float('inf')
    viol = float(res.fun)
    if viol > feas_tol * max(1.0, k_in):
        return None, viol
    return res.x[:dim], viol


class _WorkingSet:
    ''' Inequality indices kept linearly independent of the equality rows. '''

    def __init__(self, a_eq: np.ndarray):
        self.indices = []
        self._basis = np.zeros((0, a_eq.shape[1]))
        for row in a_eq:
            self._extend(row)

    def _extend(self, row: np.ndarray) -> bool:
        resid = row - self._basis.T @ (self._basis @ row)
        norm = np.linalg.norm(resid)
        if norm <= 1e-9 * max(1.0, np.linalg.norm(row)):
            return False
        self._basis = np.vstack([self._basis, resid / norm])
        return True

    def try_add(self, index: int, row: np.ndarray) -> bool:
        if self._extend(row):
            self.indices.append(index)
            return True
        return False


def _initial_working_set(problem, z, feas_tol, hint: Sequence[int]) -> list:
    slack = problem.b_in - problem.A_in @ z
    near = set(int(idx) for idx in np.flatnonzero(slack <= feas_tol * (1.0 + np.abs(problem.b_in))))
    ordered = [idx for idx in hint if idx in near] + sorted(near.difference(hint))
    work = _WorkingSet(problem.A_eq)
    for idx in ordered:
        if len(work.indices) + problem.n_eq >= problem.dim:
            break
        work.try_add(idx, problem.A_in[idx])
    return work.indices


def _independent_of(problem, working: list, row: np.ndarray) -> bool:
    work = _WorkingSet(np.vstack([problem.A_eq, problem.A_in[working]]))
    return work.try_add(-1, row)


def solve_qp(problem: QpProblem, tol: float = 1e-8, max_iter: int = 1000,
             warm_start=None, working_hint: Sequence[int] = ()) -> QpSolution:
    ''' Solve a convex QP with a primal active-set method.

    :param tol: Optimality tolerance, relative to :attr:`QpProblem.scale`.
    :param max_iter: Limit on active-set iterations.
    :param warm_start: An optional starting point. It is projected onto the
        equality constraints and used if it then satisfies all inequalities.
    :param working_hint: Inequality indices preferred for the initial
        working set, typically the previous solution's active set.
    :return: The solution; infeasibility and iteration limits are reported
        through :attr:`QpSolution.status`.
    '''
    scale_diag = ruiz_scaling(problem.H)
    scaled = QpProblem(
        problem.H * scale_diag[:, None] * scale_diag[None, :], problem.g * scale_diag,
        problem.A_eq * scale_diag[None, :], problem.b_eq,
        problem.A_in * scale_diag[None, :], problem.b_in,
    )
    feas_tol = 1e-9

    point = None
    if warm_start is not None:
        cand = np.asarray(warm_start, dtype=float).reshape(problem.dim) / scale_diag
        if scaled.n_eq:
            cand = cand + scipy.linalg.lstsq(scaled.A_eq, scaled.b_eq - scaled.A_eq @ cand)[0]
        if scaled.n_in == 0 or np.max(scaled.A_in @ cand - scaled.b_in) <= feas_tol:
            point = cand
    if point is None:
        point, viol = _phase_one(scaled, feas_tol)
        if point is None:
            LOGGER.debug('QP infeasible, minimal violation %.3e', viol)
            return QpSolution(
                z=np.full(problem.dim, np.nan), objective=float('nan'),
                status=Status.INFEASIBLE, certificate=viol,
                nu=np.zeros(problem.n_eq), mu=np.zeros(problem.n_in),
            )

    working = _initial_working_set(scaled, point, feas_tol, working_hint)
    status = Status.MAX_ITER
    degenerate = 0
    lam = np.zeros(problem.n_eq)
    iteration = 0
    for iteration in range(1, max_iter + 1):
        a_work = np.vstack([scaled.A_eq, scaled.A_in[working]])
        b_work = np.concatenate([scaled.b_eq, scaled.b_in[working]])
        target, lam = _kkt_solve(scaled.H, scaled.g, a_work, b_work)
        step = target - point

        if np.max(np.abs(step)) <= 1e-10 * (1.0 + np.max(np.abs(point))):
            point = target
            viol = scaled.A_in @ point - scaled.b_in
            viol[working] = -np.inf
            if viol.size and np.max(viol) > feas_tol:
                worst = int(np.argmax(viol))
                if _independent_of(scaled, working, scaled.A_in[worst]):
                    working.append(worst)
                    continue
            mult = lam[scaled.n_eq:]
            negative = [idx for idx, val in zip(working, mult) if val < -tol]
            if not negative:
                status = Status.OPTIMAL
                break
            if degenerate >= BLAND_AFTER:
                leave = min(negative)
            else:
                leave = working[int(np.argmin(mult))]
            working.remove(leave)
            continue

        alpha = 1.0
        blocking = None
        candidates = np.setdiff1d(np.arange(scaled.n_in), working)
        if candidates.size:
            rate = scaled.A_in[candidates] @ step
            moving = rate > 1e-14 * np.linalg.norm(step)
            if np.any(moving):
                slack = scaled.b_in[candidates[moving]] - scaled.A_in[candidates[moving]] @ point
                ratios = np.maximum(slack, 0.0) / rate[moving]
                pos = int(np.argmin(ratios))
                if ratios[pos] < 1.0:
                    alpha = float(ratios[pos])
                    blocking = int(candidates[moving][pos])
        point = point + alpha * step
        if blocking is not None:
            working.append(blocking)
            degenerate = degenerate + 1 if alpha == 0.0 else 0
        else:
            degenerate = 0

    z = point * scale_diag
    nu = lam[:problem.n_eq]
    mu = np.zeros(problem.n_in)
    if len(lam) == problem.n_eq + len(working):
        mu[working] = lam[problem.n_eq:]
    residuals = kkt_residuals(problem, z, nu, mu)
    if status is Status.OPTIMAL and residuals.worst() > tol * problem.scale:
        LOGGER.warning('Active-set finished with KKT residual %.3e above tolerance', residuals.worst())
        status = Status.MAX_ITER
    LOGGER.debug('QP %s after %d iterations, %d active', status.value, iteration, len(working))
    return QpSolution(
        z=z, objective=problem.objective(z), status=status, residuals=residuals,
        nu=nu, mu=mu, active=tuple(sorted(working)), iterations=iteration,
    )


def brute_force_qp(problem: QpProblem, tol: float = 1e-9) -> QpSolution:
    ''' Solve a small QP by enumerating every candidate active set.

    Only usable for ``dim <= 8`` and at most 12 inequalities.
    '''
    if problem.dim > 8 or problem.n_in > 12:
        raise ValueError('Problem too large for enumeration')
    best = None
    max_active = min(problem.n_in, problem.dim - problem.n_eq)
    for size in range(max_active + 1):
        for subset in itertools.combinations(range(problem.n_in), size):
            rows = list(subset)
            try:
                sol = solve_eqp(
                    problem.H, problem.g,
                    np.vstack([problem.A_eq, problem.A_in[rows]]),
                    np.concatenate([problem.b_eq, problem.b_in[rows]]),
                )
            except (RankDeficientError, IndefiniteHessianError):
                continue
            mu = np.zeros(problem.n_in)
            mu[rows] = sol.nu[problem.n_eq:]
            if np.any(problem.A_in @ sol.z - problem.b_in > tol * (1.0 + np.abs(problem.b_in))):
                continue
            if np.any(mu < -tol):
                continue
            if best is None or sol.objective < best.objective:
                best = QpSolution(
                    z=sol.z, objective=sol.objective, status=Status.OPTIMAL,
                    residuals=kkt_residuals(problem, sol.z, sol.nu[:problem.n_eq], mu),
                    nu=sol.nu[:problem.n_eq], mu=mu, active=tuple(rows),
                )
    if best is None:
        return QpSolution(z=np.full(problem.dim, np.nan), objective=float('nan'),
                          status=Status.INFEASIBLE)
    return best
