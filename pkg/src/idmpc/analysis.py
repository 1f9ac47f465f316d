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
''' Post-hoc metrics of closed-loop runs: tracking error, the true plant's
optimal reachable equilibrium, identification error and the robustness
sweep over regularization and window length.
'''
import dataclasses
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple
import numpy as np
import scipy.linalg
import scipy.optimize
from idmpc.loop import BootstrapError, BootstrapStrategy, ClosedLoopTrace, run_closed_loop
from idmpc.mpc import ConfigError, MpcConfig
from idmpc.plant import AugmentedPlant, Plant, PlantDomainError, jacobian, linearize
from idmpc.sysid import AffineModel


LOGGER = logging.getLogger(__name__)

#: Default upper time index of the tracking error sum
DEFAULT_HORIZON = 2500
#: Objective value used for inputs where the plant leaves its domain
_PENALTY = 1e10
#: Largest steady-state residual of an accepted equilibrium
ACCEPT_RESIDUAL = 1e-10


class EquilibriumError(RuntimeError):
    ''' No start of the equilibrium search converged.

    :ivar residual: The best steady-state residual found.
    '''

    def __init__(self, message: str, residual: float):
        super().__init__(f'{message} (best residual {residual:.3e})')
        self.residual = residual


def tracking_error(trace, y_r, T: int = DEFAULT_HORIZON, start: int = 0) -> float:
    ''' Sum of output error norms :math:`\\sum_{t=start}^{T} \\|y_t - y^r\\|_2`.

    :param trace: A :class:`ClosedLoopTrace` or an array of outputs, one row
        per time step.
    :param start: First time index included; N excludes the bootstrap.
    :raise ValueError: If the trace is shorter than T + 1 outputs.
    '''
    if isinstance(trace, ClosedLoopTrace):
        outputs = trace.output_array()
    else:
        outputs = np.asarray(trace, dtype=float)
    if outputs.ndim == 1:
        outputs = outputs[:, None]
    if outputs.shape[0] < T + 1:
        raise ValueError(f'Trace has {outputs.shape[0]} outputs, need {T + 1}')
    if not 0 <= start <= T:
        raise ValueError(f'Start index {start} outside 0..{T}')
    y_r = np.asarray(y_r, dtype=float).reshape(-1)
    resid = outputs[start:T + 1] - y_r[None, :]
    return float(np.sum(np.linalg.norm(resid, axis=1)))


def id_error_diagnostic(model: AffineModel, plant: Plant, x_t) -> float:
    ''' Largest coefficient difference between a model and the plant's
    linearization at ``(x_t, 0)``.
    '''
    return model.max_abs_diff(linearize(plant, x_t))


@dataclass
class PlantEquilibrium:
    ''' An optimal reachable equilibrium of the true plant.

    :ivar residual: :math:`\\|f(x^{sr}, u^{sr}) - x^{sr}\\|_2`.
    '''
    x_sr: np.ndarray
    u_sr: np.ndarray
    y_sr: np.ndarray
    residual: float
    cost: float = 0.0


def _newton(func, start: np.ndarray, rows: int, max_iter: int, tol: float
            ) -> Tuple[np.ndarray, float]:
    ''' Newton iteration with a finite-difference Jacobian.

    :return: The final point and its residual norm.
    '''
    point = start.copy()
    for _ in range(max_iter):
        res = func(point)
        norm = float(np.linalg.norm(res))
        if not np.isfinite(norm):
            break
        if norm <= tol:
            return point, norm
        jac = jacobian(func, point, rows)
        try:
            step = scipy.linalg.solve(jac, -res)
        except (np.linalg.LinAlgError, ValueError):
            step = scipy.linalg.lstsq(jac, -res)[0]
        point = point + step
    return point, float(np.linalg.norm(func(point)))


class _EquilibriumSearch:
    ''' The steady-state problem posed on a plant's physical coordinates. '''

    def __init__(self, plant: Plant, cfg: MpcConfig, y_r, max_iter: int, tol: float):
        self.augmented = isinstance(plant, AugmentedPlant)
        if self.augmented:
            box = cfg.state_box
            if box is None:
                raise ValueError('An augmented plant needs a state box on its stored input')
            self.core = plant.inner
            self.lo, self.hi = box.s_lo, box.s_hi
        else:
            self.core = plant
            self.lo, self.hi = cfg.us_lo, cfg.us_hi
        self.n = self.core.state_dim
        self.m = self.core.input_dim
        self.S = cfg.S
        self.y_r = cfg.y_r if y_r is None else np.asarray(y_r, dtype=float).reshape(cfg.p)
        self.max_iter = max_iter
        self.tol = tol
        self.x_warm = None

    def state_residual(self, x, u) -> np.ndarray:
        return self.core.step(x, u) - x

    def cost(self, x, u) -> float:
        resid = self.core.output(x, u) - self.y_r
        return float(resid @ self.S @ resid)

    def state_at(self, u, x_start) -> Tuple[np.ndarray, float]:
        ''' Newton solve of f(x, u) = x for a fixed input. '''
        return _newton(lambda x: self.state_residual(x, u), x_start, self.n,
                       self.max_iter, self.tol)

    def square_solve(self, x_start, u_start) -> Tuple[np.ndarray, np.ndarray, float]:
        ''' Newton on the joint steady-state and output-matching system. '''
        def func(point):
            x, u = point[:self.n], point[self.n:]
            return np.concatenate([self.state_residual(x, u), self.core.output(x, u) - self.y_r])

        point, norm = _newton(func, np.concatenate([x_start, u_start]), self.n + self.m,
                              self.max_iter, self.tol)
        return point[:self.n], point[self.n:], norm

    def inside(self, u) -> bool:
        return bool(np.all(u >= self.lo - self.tol) and np.all(u <= self.hi + self.tol))

    def objective(self, u) -> float:
        start = self.x_warm if self.x_warm is not None else self.core.nominal_state()
        try:
            x, norm = self.state_at(u, start)
            if norm > max(self.tol, ACCEPT_RESIDUAL):
                return _PENALTY
            self.x_warm = x
            return self.cost(x, u)
        except PlantDomainError:
            return _PENALTY


def plant_equilibrium(plant: Plant, cfg: MpcConfig, y_r=None, x_guess=None, starts: int = 20,
                      max_iter: int = 50, tol: float = 1e-12) -> PlantEquilibrium:
    ''' Find the plant's optimal reachable equilibrium.

    Minimizes :math:`\\|h(x, u) - y^r\\|_S^2` subject to :math:`f(x, u) = x`
    and :math:`u \\in \\mathbb{U}^s`. With as many inputs as outputs, Newton
    on the joint system is tried first from ``starts`` inputs spread over
    the admissible box; otherwise, or when no exact match lies inside the
    box, a bounded search over the input is made with the state eliminated
    by Newton.

    For input-rate augmented plants the search runs on the inner plant with
    the stored-input steady-state bounds and ``x_sr`` is returned in
    augmented coordinates.

    :raise EquilibriumError: If no start converges.
    '''
    search = _EquilibriumSearch(plant, cfg, y_r, max_iter, tol)
    x_start = search.core.nominal_state() if x_guess is None else np.asarray(x_guess, dtype=float)
    if search.augmented and x_start.size == plant.state_dim:
        x_start = x_start[:search.n]
    grid = [search.lo + frac * (search.hi - search.lo) for frac in np.linspace(0.0, 1.0, starts)]

    best = None
    best_residual = float('inf')
    if search.m == cfg.p:
        for u_start in grid:
            try:
                x, u, norm = search.square_solve(x_start, u_start)
            except PlantDomainError:
                continue
            best_residual = min(best_residual, norm)
            if norm <= tol and search.inside(u):
                best = (x, np.clip(u, search.lo, search.hi))
                LOGGER.debug('Exact equilibrium from start u=%s', u_start)
                break

    if best is None:
        values = [search.objective(u_start) for u_start in grid]
        u_start = grid[int(np.argmin(values))]
        result = scipy.optimize.minimize(
            search.objective, u_start, method='L-BFGS-B',
            bounds=list(zip(search.lo, search.hi)),
            options={'maxiter': 200, 'ftol': 1e-15, 'gtol': 1e-12},
        )
        u = np.clip(result.x, search.lo, search.hi)
        try:
            x, norm = search.state_at(u, search.x_warm if search.x_warm is not None else x_start)
        except PlantDomainError:
            norm = float('inf')
        best_residual = min(best_residual, norm)
        if norm <= max(tol, ACCEPT_RESIDUAL):
            best = (x, u)

    if best is None:
        raise EquilibriumError('No equilibrium search converged', best_residual)

    x, u = best
    residual = float(np.linalg.norm(search.state_residual(x, u)))
    y_sr = search.core.output(x, u)
    x_sr = np.concatenate([x, u]) if search.augmented else x
    LOGGER.info('Plant equilibrium y_sr=%s u_sr=%s residual=%.3e', y_sr, u, residual)
    return PlantEquilibrium(x_sr=x_sr, u_sr=u, y_sr=y_sr, residual=residual,
                            cost=search.cost(x, u))


@dataclass
class SweepSpec:
    ''' The Cartesian grid of a robustness sweep. '''
    lambda_values: Sequence[float]
    N_values: Sequence[int]

    def __post_init__(self):
        self.lambda_values = [float(val) for val in self.lambda_values]
        self.N_values = [int(val) for val in self.N_values]
        if not self.lambda_values or not self.N_values:
            raise ValueError('Sweep grid must not be empty')
        if any(val < 0 for val in self.lambda_values):
            raise ValueError('Regularization values must be nonnegative')
        if any(val <= 0 for val in self.N_values):
            raise ValueError('Window lengths must be positive')

    def cells(self) -> List[Tuple[int, float]]:
        ''' Grid points in row-major order, rows being window lengths. '''
        return [(win, lam) for win in self.N_values for lam in self.lambda_values]


@dataclass
class SweepCell:
    ''' Result of one grid point; failed cells carry no error value. '''
    N: int
    lam: float
    status: str
    tracking_error: Optional[float] = None
    final_error: Optional[float] = None
    message: str = ''

    @property
    def succeeded(self) -> bool:
        return self.status == 'complete'


@dataclass
class SweepGrid:
    ''' All cells of a completed sweep. '''
    lambda_values: List[float]
    N_values: List[int]
    cells: List[SweepCell] = field(default_factory=list)

    def cell(self, N: int, lam: float) -> SweepCell:
        for item in self.cells:
            if item.N == N and item.lam == lam:
                return item
        raise KeyError((N, lam))

    @property
    def success_count(self) -> int:
        return sum(1 for item in self.cells if item.succeeded)


@dataclass
class _SweepJob:
    plant: Plant
    cfg: MpcConfig
    x0: np.ndarray
    strategy: BootstrapStrategy
    t_end: int
    model_source: str
    error_offset: int
    N: int
    lam: float


def _run_cell(job: _SweepJob) -> SweepCell:
    ''' Run one grid point, turning every run failure into a status. '''
    try:
        cfg = dataclasses.replace(job.cfg, lam=job.lam, N=job.N)
        trace = run_closed_loop(job.plant, job.x0, cfg, job.strategy, job.t_end, job.model_source)
    except ConfigError as err:
        return SweepCell(N=job.N, lam=job.lam, status='config_error', message=str(err))
    except BootstrapError as err:
        return SweepCell(N=job.N, lam=job.lam, status='bootstrap_error', message=str(err))
    except PlantDomainError as err:
        return SweepCell(N=job.N, lam=job.lam, status='domain_error', message=str(err))
    except ValueError as err:
        return SweepCell(N=job.N, lam=job.lam, status='config_error', message=str(err))

    if not trace.complete:
        return SweepCell(N=job.N, lam=job.lam, status=trace.status, message=trace.message)
    outputs = trace.output_array()
    if not np.all(np.isfinite(outputs)):
        return SweepCell(N=job.N, lam=job.lam, status='domain_error', message='Non-finite output')
    final = float(np.max(np.abs(outputs[-1] - cfg.y_r)))
    return SweepCell(
        N=job.N, lam=job.lam, status=trace.status,
        tracking_error=tracking_error(trace, cfg.y_r, T=min(DEFAULT_HORIZON, trace.final_time),
                                      start=job.error_offset),
        final_error=final,
    )


def run_sweep(plant: Plant, base_cfg: MpcConfig, spec: SweepSpec, x0,
              strategy: BootstrapStrategy, t_end: int, workers: int = 1,
              model_source: str = 'identified', error_offset: int = 0) -> SweepGrid:
    ''' Run an independent closed loop for every (N, lambda) grid point.

    Each cell uses the same bootstrap seed, so re-running a grid reproduces
    it exactly. With ``workers > 1`` cells run in separate processes and the
    plant must be picklable.

    :return: The grid with cells in row-major order.
    '''
    jobs = [
        _SweepJob(plant=plant, cfg=base_cfg, x0=np.asarray(x0, dtype=float), strategy=strategy,
                  t_end=t_end, model_source=model_source, error_offset=error_offset,
                  N=win, lam=lam)
        for win, lam in spec.cells()
    ]
    LOGGER.info('Sweeping %d cells with %d worker(s)', len(jobs), workers)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            cells = list(executor.map(_run_cell, jobs))
    else:
        cells = [_run_cell(job) for job in jobs]

    for cell in cells:
        if cell.succeeded:
            LOGGER.info('Cell N=%d lambda=%g: error %.6e', cell.N, cell.lam, cell.tracking_error)
        else:
            LOGGER.warning('Cell N=%d lambda=%g failed: %s %s', cell.N, cell.lam, cell.status,
                           cell.message)
    return SweepGrid(lambda_values=list(spec.lambda_values), N_values=list(spec.N_values),
                     cells=cells)
