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
''' The adaptive closed loop: bootstrap a data window, then alternate
identification, tracking MPC and multi-step application.
'''
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional
import numpy as np
from idmpc.mpc import (
    MpcConfig, MpcSolution, SteadyStateError, lyapunov_candidate, optimal_reachable_cost,
    solve_tracking,
)
from idmpc.plant import AugmentedPlant, Plant, PlantDomainError, linearize
from idmpc.qp import IndefiniteHessianError, RankDeficientError
from idmpc.sysid import (
    SINGULAR_RTOL, AffineModel, DataWindow, SingularRegressorError, identify, pe_metric,
)


LOGGER = logging.getLogger(__name__)

#: Slack allowed on applied input constraints
CONSTRAINT_TOL = 1e-8

#: Largest ridge shrinkage lam / (sigma**2 + lam) tolerated along the least
#: excited regressor direction before a new model is rejected
MAX_SHRINKAGE = 1e-3


class BootstrapError(RuntimeError):
    ''' The initial data window could not be generated.

    :ivar sigma_min: Smallest regressor singular value, if it was computed.
    '''

    def __init__(self, message: str, sigma_min: Optional[float] = None):
        if sigma_min is not None:
            message = f'{message} (sigma_min(Z)={sigma_min:.3e})'
        super().__init__(message)
        self.sigma_min = sigma_min


@dataclass
class BootstrapStrategy:
    ''' How the first N transitions are generated.

    :ivar variant: ``model_based_mpc`` runs the tracking MPC on the true
        linearization; ``excited_rollout`` holds a nominal input with a seeded
        uniform perturbation.
    :ivar amplitude: Perturbation size as a fraction of the input box half-width.
    :ivar nominal: Nominal input; the middle of the input box when omitted.
    '''
    variant: str = 'model_based_mpc'
    amplitude: float = 0.5
    seed: int = 0
    nominal: Optional[np.ndarray] = None

    VARIANTS = ('model_based_mpc', 'excited_rollout')

    def __post_init__(self):
        if self.variant not in BootstrapStrategy.VARIANTS:
            raise ValueError(f'Bad bootstrap variant: {self.variant}')
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError('Excitation amplitude must be within [0, 1]')


#: Sources of the prediction model
MODEL_SOURCES = ('identified', 'linearized')


@dataclass
class SolveRecord:
    ''' Diagnostics of one solve instant.

    :ivar held: The window was too poorly excited, so the model of an earlier
        solve was reused.
    '''
    t: int
    status: str
    frozen: bool
    held: bool = False
    J_star: float = float('nan')
    J_hat_star: float = float('nan')
    V: float = float('nan')
    sigma_min_Z: float = float('nan')
    id_error: float = float('nan')
    model: Optional[AffineModel] = None
    solution: Optional[MpcSolution] = None


@dataclass
class ClosedLoopTrace:
    ''' The time-indexed record of one run.

    ``states`` and ``outputs`` cover t = 0..T, ``inputs`` cover t = 0..T-1.
    The final output is evaluated with the last applied input.

    :ivar status: ``complete`` or the reason the run stopped early.
    '''
    y_r: np.ndarray
    bootstrap_length: int
    states: List[np.ndarray] = field(default_factory=list)
    inputs: List[np.ndarray] = field(default_factory=list)
    outputs: List[np.ndarray] = field(default_factory=list)
    solves: List[SolveRecord] = field(default_factory=list)
    status: str = 'complete'
    message: str = ''

    @property
    def final_time(self) -> int:
        return len(self.states) - 1

    @property
    def complete(self) -> bool:
        return self.status == 'complete'

    def state_array(self) -> np.ndarray:
        return np.array(self.states)

    def input_array(self) -> np.ndarray:
        return np.array(self.inputs)

    def output_array(self) -> np.ndarray:
        return np.array(self.outputs)

    def solve_times(self) -> List[int]:
        return [rec.t for rec in self.solves]

    def solve_at(self, t: int) -> Optional[SolveRecord]:
        for rec in self.solves:
            if rec.t == t:
                return rec
        return None


def input_violation(plant: Plant, cfg: MpcConfig, x_next: np.ndarray, u: np.ndarray) -> float:
    ''' How far an applied input leaves its constraint set.

    For plants carrying their input as a state, the stored component of the
    successor state is checked against the state box as well.
    '''
    viol = max(float(np.max(cfg.u_lo - u)), float(np.max(u - cfg.u_hi)), 0.0)
    box = cfg.state_box
    if box is not None:
        comp = x_next[list(box.index)]
        viol = max(viol, float(np.max(box.lo - comp)), float(np.max(comp - box.hi)))
    return viol


class _Runner:
    ''' Shared state of a bootstrap and a closed-loop run. '''

    def __init__(self, plant: Plant, cfg: MpcConfig, x0):
        self.plant = plant
        self.cfg = cfg
        n, m, p = plant.state_dim, plant.input_dim, plant.output_dim
        if (n, m, p) != (cfg.n, cfg.m, cfg.p):
            raise ValueError(f'Plant dimensions {(n, m, p)} do not match config {(cfg.n, cfg.m, cfg.p)}')
        self.window = DataWindow(cfg.N, n, m, p)
        self.trace = ClosedLoopTrace(y_r=cfg.y_r.copy(), bootstrap_length=cfg.N)
        self.trace.states.append(np.asarray(x0, dtype=float).reshape(n).copy())
        self.violations = 0

    @property
    def t(self) -> int:
        return self.trace.final_time

    @property
    def state(self) -> np.ndarray:
        return self.trace.states[-1]

    def apply(self, u) -> float:
        ''' Apply one input to the plant and record the transition.

        :return: The constraint violation of the applied input.
        '''
        u = np.asarray(u, dtype=float).reshape(self.plant.input_dim)
        x = self.state
        try:
            y = self.plant.output(x, u)
            x_next = self.plant.step(x, u)
        except PlantDomainError as err:
            raise PlantDomainError(str(err), time_index=self.t) from err
        self.window.push(x, u, y, x_next)
        self.trace.inputs.append(u)
        self.trace.outputs.append(y)
        self.trace.states.append(x_next)
        viol = input_violation(self.plant, self.cfg, x_next, u)
        if viol > CONSTRAINT_TOL:
            self.violations += 1
            LOGGER.warning('Input constraint violated by %.3e at t=%d', viol, self.t - 1)
        return viol

    def finish(self):
        ''' Evaluate the output at the last state. '''
        last_u = self.trace.inputs[-1] if self.trace.inputs else np.zeros(self.plant.input_dim)
        try:
            self.trace.outputs.append(self.plant.output(self.state, last_u))
        except PlantDomainError:
            self.trace.outputs.append(np.full(self.plant.output_dim, np.nan))
        return self.trace

    def _excitation(self, strategy: BootstrapStrategy, rng: np.random.Generator) -> np.ndarray:
        cfg, plant = self.cfg, self.plant
        box = cfg.state_box
        if isinstance(plant, AugmentedPlant) and box is not None:
            lo, hi = box.lo, box.hi
        else:
            lo, hi = cfg.u_lo, cfg.u_hi
        nominal = 0.5 * (lo + hi) if strategy.nominal is None else np.asarray(strategy.nominal, dtype=float)
        target = nominal + strategy.amplitude * 0.5 * (hi - lo) * rng.uniform(-1.0, 1.0, size=lo.size)
        target = np.clip(target, lo, hi)
        if isinstance(plant, AugmentedPlant) and box is not None:
            delta = np.zeros(plant.input_dim)
            delta[np.array(box.index) - plant.inner.state_dim] = target - self.state[list(box.index)]
            return np.clip(delta, cfg.u_lo, cfg.u_hi)
        return target

    def bootstrap(self, strategy: BootstrapStrategy) -> DataWindow:
        cfg = self.cfg
        rows = self.plant.state_dim + self.plant.input_dim + 1
        if cfg.N < rows:
            raise ValueError(f'Window length N={cfg.N} is below n+m+1={rows}')

        if strategy.variant == 'excited_rollout':
            rng = np.random.default_rng(strategy.seed)
            for _ in range(cfg.N):
                if self.apply(self._excitation(strategy, rng)) > CONSTRAINT_TOL:
                    raise BootstrapError(f'Excitation left the input set at t={self.t - 1}')
        else:
            previous = None
            while self.t < cfg.N:
                model = linearize(self.plant, self.state)
                sol = solve_tracking(model, self.state, cfg, previous)
                if not sol.optimal:
                    raise BootstrapError(f'Model-based MPC returned {sol.status.value} at t={self.t}')
                for k in range(min(cfg.apply_steps, cfg.N - self.t)):
                    if self.apply(sol.u_pred[k]) > CONSTRAINT_TOL:
                        raise BootstrapError(f'Model-based MPC violated the input set at t={self.t - 1}')
                previous = sol

        sigma = pe_metric(self.window)
        scale = max(1.0, float(np.linalg.norm(self.window.regressor(), 2)))
        if not sigma > SINGULAR_RTOL * scale:
            raise BootstrapError('Bootstrap data is not persistently exciting', sigma)
        LOGGER.info('Bootstrap (%s) finished with sigma_min(Z)=%.3e', strategy.variant, sigma)
        return self.window


def bootstrap(plant: Plant, x0, cfg: MpcConfig, strategy: BootstrapStrategy) -> DataWindow:
    ''' Generate the initial data window of length N.

    :raise ValueError: If N is too short for a full-rank regressor.
    :raise BootstrapError: If the data is rank deficient, the model-based
        controller fails or the input constraints are violated.
    '''
    return _Runner(plant, cfg, x0).bootstrap(strategy)


def excitation_floor(cfg: MpcConfig) -> float:
    ''' Smallest :math:`\\sigma_{min}(Z)` at which a freshly identified model is
    trusted.

    This is ``cfg.pe_threshold`` raised, when needed, so that the ridge
    shrinkage along the least excited direction stays below
    :data:`MAX_SHRINKAGE`.
    '''
    ridge = math.sqrt(cfg.lam * (1.0 / MAX_SHRINKAGE - 1.0))
    return max(cfg.pe_threshold, ridge)


def _identification_error(plant: Plant, model: AffineModel, x_t: np.ndarray) -> float:
    try:
        return model.max_abs_diff(linearize(plant, x_t))
    except PlantDomainError:
        return float('nan')


def run_closed_loop(plant: Plant, x0, cfg: MpcConfig, strategy: BootstrapStrategy,
                    t_end: int, model_source: str = 'identified') -> ClosedLoopTrace:
    ''' Run the adaptive tracking scheme up to time ``t_end``.

    Solves happen at t = N, N + n_apply, ... below ``t_end``. A new model is
    identified only while :math:`\\sigma_{min}(Z)` is at least
    :func:`excitation_floor`; below it the previous model is kept. The model
    is frozen once two consecutive plant states differ by less than
    ``cfg.stop_threshold``.

    :param model_source: ``identified`` for least-squares models from the
        data window, ``linearized`` for the plant's own linearization at x_t.
    :return: The trace; a run stopped by infeasibility, a singular regressor
        or a plant domain error is returned up to that point with its status.
    :raise BootstrapError: If the bootstrap fails.
    '''
    if model_source not in MODEL_SOURCES:
        raise ValueError(f'Bad model source: {model_source}')
    if t_end < cfg.N:
        raise ValueError(f'End time {t_end} is before the bootstrap end {cfg.N}')

    runner = _Runner(plant, cfg, x0)
    runner.bootstrap(strategy)
    trace = runner.trace
    window = runner.window
    frozen = False
    model = None
    previous = None
    floor = excitation_floor(cfg)
    held_since = None
    LOGGER.info('Closed loop from t=%d to t=%d with %s models', cfg.N, t_end, model_source)

    while runner.t < t_end:
        t = runner.t
        x_t = runner.state
        record = SolveRecord(t=t, status='', frozen=frozen, sigma_min_Z=pe_metric(window))
        trace.solves.append(record)
        try:
            if model_source == 'linearized':
                model = linearize(plant, x_t)
            elif not frozen:
                if model is None or record.sigma_min_Z >= floor:
                    if model is None and record.sigma_min_Z < floor:
                        LOGGER.warning(
                            'First window is poorly excited: sigma_min(Z)=%.3e < %.3e',
                            record.sigma_min_Z, floor)
                    elif held_since is not None:
                        LOGGER.info('Excitation recovered at t=%d after holding since t=%d',
                                    t, held_since)
                    model = identify(window, cfg.lam)
                    held_since = None
                else:
                    if held_since is None:
                        held_since = t
                        LOGGER.warning(
                            'sigma_min(Z)=%.3e below %.3e at t=%d, keeping the previous model',
                            record.sigma_min_Z, floor, t)
                    record.held = True
        except SingularRegressorError as err:
            record.status = 'singular_regressor'
            trace.status, trace.message = record.status, str(err)
            break
        record.model = model

        try:
            sol = solve_tracking(model, x_t, cfg, previous)
        except (SteadyStateError, IndefiniteHessianError, RankDeficientError) as err:
            record.status = 'infeasible'
            trace.status, trace.message = record.status, f'Tracking problem ill-posed at t={t}: {err}'
            LOGGER.warning('%s', trace.message)
            break
        record.status = sol.status.value
        record.solution = sol
        if not sol.optimal:
            trace.status = sol.status.value
            trace.message = f'Tracking QP returned {sol.status.value} at t={t}'
            LOGGER.warning('%s', trace.message)
            break
        reach = optimal_reachable_cost(model, cfg)
        record.J_star = sol.J_star
        record.J_hat_star = reach.J_hat_star
        record.V = lyapunov_candidate(sol.J_star, reach.J_hat_star)
        record.id_error = _identification_error(plant, model, x_t)
        LOGGER.debug('t=%d J*=%.6e V=%.3e sigma_Z=%.3e', t, record.J_star, record.V, record.sigma_min_Z)

        steps = min(cfg.apply_steps, t_end - t)
        try:
            for k in range(steps):
                runner.apply(sol.u_pred[k])
        except PlantDomainError as err:
            trace.status, trace.message = 'domain_error', str(err)
            LOGGER.warning('%s', err)
            break
        previous = sol

        if model_source == 'identified' and not frozen:
            block = np.array(trace.states[-(steps + 1):])
            diffs = np.linalg.norm(np.diff(block, axis=0), axis=1)
            if np.any(diffs < cfg.stop_threshold):
                frozen = True
                LOGGER.info('Identification frozen after t=%d', runner.t)

    if runner.violations:
        LOGGER.warning('%d applied inputs violated their constraints', runner.violations)
    return runner.finish()
