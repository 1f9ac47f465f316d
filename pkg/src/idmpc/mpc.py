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
r''' Tracking MPC with artificial steady states.

The problem solved at each instant is

.. math::
    \min \sum_{k=0}^{L-1} \|\hat{x}_k - \hat{x}^s\|_Q^2 + \|\hat{u}_k - \hat{u}^s\|_R^2
    + \|\hat{y}^s - y^r\|_S^2

subject to the affine prediction model, :math:`\hat{x}_0 = x_t`,
:math:`\hat{x}_L = \hat{x}^s`, steady-state equations for
:math:`(\hat{x}^s, \hat{u}^s, \hat{y}^s)` and input constraints. States are
eliminated by rollout and the steady state by an affine parametrization, so
only inputs and the steady-state parameter remain as decision variables.
'''
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple
import numpy as np
import scipy.linalg
from idmpc.qp import QpProblem, QpSolution, Status, solve_qp
from idmpc.sysid import AffineModel, DEFAULT_LAMBDA, DEFAULT_SIGMA


LOGGER = logging.getLogger(__name__)

#: Relative ridge on the steady-state parameter of the reachable-equilibrium QP
REACHABLE_RIDGE = 1e-12


class ConfigError(ValueError):
    ''' An MPC configuration violates its invariants. '''


class SteadyStateError(RuntimeError):
    ''' The model has no well-posed steady-state map.

    :ivar sigma_min: Smallest singular value of :math:`I - A`.
    '''

    def __init__(self, message: str, sigma_min: float):
        super().__init__(f'{message} (sigma_min(I-A)={sigma_min:.3e})')
        self.sigma_min = sigma_min


def weight_matrix(val, dim: Optional[int] = None) -> np.ndarray:
    ''' Coerce a scalar, diagonal or full weight into a square matrix.
    '''
    arr = np.array(val, dtype=float)
    if arr.ndim == 0:
        return arr * np.eye(dim or 1)
    if arr.ndim == 1:
        return np.diag(arr)
    return arr


def _bounds(val, size: int) -> np.ndarray:
    arr = np.array(val, dtype=float).reshape(-1)
    if arr.size == 1 and size > 1:
        arr = np.full(size, float(arr[0]))
    if arr.size != size:
        raise ConfigError(f'Bound has size {arr.size}, expected {size}')
    return arr


@dataclass
class StateBox:
    ''' Bounds on selected components of predicted and steady states.

    Used when a physical input is carried as a state, so that its constraint
    set lands on the predicted states for k = 1..L and on the steady state.
    '''
    index: Tuple[int, ...]
    lo: np.ndarray
    hi: np.ndarray
    s_lo: np.ndarray
    s_hi: np.ndarray

    def __post_init__(self):
        self.index = tuple(int(idx) for idx in self.index)
        size = len(self.index)
        self.lo = _bounds(self.lo, size)
        self.hi = _bounds(self.hi, size)
        self.s_lo = _bounds(self.s_lo, size)
        self.s_hi = _bounds(self.s_hi, size)


@dataclass
class MpcConfig:
    ''' All tunables of the tracking scheme.

    :ivar n_apply: Inputs applied per solve; defaults to the state dimension.
    :ivar ss_tol: Smallest :math:`\\sigma_{min}(I-A)` for which the steady
        state is eliminated through :math:`(I-A)^{-1}`.
    :ivar pe_threshold: Smallest :math:`\\sigma_{min}(Z)` at which a freshly
        identified model replaces the current one.
    '''
    Q: np.ndarray
    R: np.ndarray
    S: np.ndarray
    y_r: np.ndarray
    u_lo: np.ndarray
    u_hi: np.ndarray
    us_lo: np.ndarray
    us_hi: np.ndarray
    L: int = 41
    N: int = 25
    n_apply: Optional[int] = None
    lam: float = DEFAULT_LAMBDA
    state_box: Optional[StateBox] = None
    stop_threshold: float = 5e-6
    pe_threshold: float = DEFAULT_SIGMA
    ss_tol: float = DEFAULT_SIGMA
    qp_tol: float = 1e-8
    qp_max_iter: int = 1000

    def __post_init__(self):
        self.Q = weight_matrix(self.Q)
        self.R = weight_matrix(self.R)
        self.S = weight_matrix(self.S)
        self.y_r = _bounds(self.y_r, self.p)
        self.u_lo = _bounds(self.u_lo, self.m)
        self.u_hi = _bounds(self.u_hi, self.m)
        self.us_lo = _bounds(self.us_lo, self.m)
        self.us_hi = _bounds(self.us_hi, self.m)
        self.validate()

    @property
    def n(self) -> int:
        return self.Q.shape[0]

    @property
    def m(self) -> int:
        return self.R.shape[0]

    @property
    def p(self) -> int:
        return self.S.shape[0]

    @property
    def apply_steps(self) -> int:
        return self.n_apply if self.n_apply is not None else self.n

    def validate(self):
        ''' Check all invariants.

        :raise ConfigError: For the first violated invariant.
        '''
        for name in ('Q', 'R', 'S'):
            mat = getattr(self, name)
            if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
                raise ConfigError(f'{name} must be square')
            if np.max(np.abs(mat - mat.T), initial=0.0) > 1e-12:
                raise ConfigError(f'{name} must be symmetric')
            try:
                scipy.linalg.cholesky(mat)
            except np.linalg.LinAlgError as err:
                raise ConfigError(f'{name} must be positive definite') from err
        if not np.all(self.u_lo <= self.u_hi):
            raise ConfigError('Input bounds are inverted')
        if not (np.all(self.us_lo > self.u_lo) and np.all(self.us_hi < self.u_hi)):
            raise ConfigError('Steady-state input set must lie strictly inside the input set')
        if not np.all(self.us_lo <= self.us_hi):
            raise ConfigError('Steady-state input bounds are inverted')
        if self.L < self.n:
            raise ConfigError(f'Horizon L={self.L} must be at least the state dimension {self.n}')
        if self.N < self.n:
            raise ConfigError(f'Window N={self.N} must be at least the state dimension {self.n}')
        if not 1 <= self.apply_steps <= self.L:
            raise ConfigError(f'n_apply={self.apply_steps} must be within 1..L')
        if self.lam < 0:
            raise ConfigError('Regularization must be nonnegative')
        if self.pe_threshold < 0:
            raise ConfigError('Excitation threshold must be nonnegative')
        box = self.state_box
        if box is not None:
            if any(idx < 0 or idx >= self.n for idx in box.index):
                raise ConfigError('State box index out of range')
            if not (np.all(box.s_lo > box.lo) and np.all(box.s_hi < box.hi)):
                raise ConfigError('Steady-state box must lie strictly inside the state box')

    def scaled(self, factor: float) -> 'MpcConfig':
        ''' A copy with all three weights multiplied by ``factor``. '''
        return MpcConfig(**{
            **self.__dict__,
            'Q': self.Q * factor, 'R': self.R * factor, 'S': self.S * factor,
        })


@dataclass
class SteadyStateMap:
    ''' Affine parametrization of a model's steady states by a parameter v:
    ``x_s = Gx v + hx``, ``u_s = Gu v + hu``, ``y_s = Gy v + hy``.

    :ivar eliminated: True when v is the steady-state input itself.
    '''
    Gx: np.ndarray
    hx: np.ndarray
    Gu: np.ndarray
    hu: np.ndarray
    Gy: np.ndarray
    hy: np.ndarray
    eliminated: bool

    @property
    def dim(self) -> int:
        return self.Gx.shape[1]

    def at(self, v) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        v = np.asarray(v, dtype=float).reshape(self.dim)
        return self.Gx @ v + self.hx, self.Gu @ v + self.hu, self.Gy @ v + self.hy

    def parameter_of(self, x_s, u_s) -> np.ndarray:
        ''' Least-squares parameter reproducing a given steady state. '''
        lhs = np.vstack([self.Gx, self.Gu])
        rhs = np.concatenate([np.asarray(x_s) - self.hx, np.asarray(u_s) - self.hu])
        return scipy.linalg.lstsq(lhs, rhs)[0]


def _sigma_l(model: AffineModel) -> float:
    return float(scipy.linalg.svdvals(np.eye(model.n) - model.A)[-1])


def steady_state_map(model: AffineModel, u_s, tol: float = DEFAULT_SIGMA
                     ) -> Tuple[np.ndarray, np.ndarray]:
    ''' The steady state of a model for a given input.

    :return: The pair ``(x_s, y_s)``.
    :raise SteadyStateError: If :math:`I - A` is near singular.
    '''
    sigma = _sigma_l(model)
    if sigma < tol:
        raise SteadyStateError('I-A is near singular', sigma)
    u_s = np.asarray(u_s, dtype=float).reshape(model.m)
    factor = scipy.linalg.lu_factor(np.eye(model.n) - model.A)
    x_s = scipy.linalg.lu_solve(factor, model.B @ u_s + model.e)
    return x_s, model.output(x_s, u_s)


def steady_state_parametrization(model: AffineModel, tol: float = DEFAULT_SIGMA) -> SteadyStateMap:
    ''' Parametrize the steady-state manifold of a model.

    If :math:`I - A` is well conditioned the parameter is the steady-state
    input. Otherwise the manifold :math:`(A - I) x + B u + e = 0` is
    parametrized through a null-space basis of :math:`[A - I, B]`, which
    covers integrating models such as input-rate augmentations.
    '''
    n, m = model.n, model.m
    sigma = _sigma_l(model)
    if sigma >= tol:
        factor = scipy.linalg.lu_factor(np.eye(n) - model.A)
        gx = scipy.linalg.lu_solve(factor, model.B)
        hx = scipy.linalg.lu_solve(factor, model.e)
        gu = np.eye(m)
        hu = np.zeros(m)
        eliminated = True
    else:
        mat = np.hstack([model.A - np.eye(n), model.B])
        base = scipy.linalg.lstsq(mat, -model.e)[0]
        if np.max(np.abs(mat @ base + model.e)) > 1e-9 * (1.0 + np.max(np.abs(model.e))):
            raise SteadyStateError('Model has no steady state', sigma)
        basis = scipy.linalg.null_space(mat)
        if basis.shape[1] == 0:
            raise SteadyStateError('Steady-state manifold is a single point', sigma)
        gx, hx = basis[:n], base[:n]
        gu, hu = basis[n:], base[n:]
        eliminated = False
        LOGGER.debug('Steady states parametrized by a %d-dim null space', basis.shape[1])
    return SteadyStateMap(
        Gx=gx, hx=hx, Gu=gu, hu=hu,
        Gy=model.C @ gx + model.D @ gu, hy=model.C @ hx + model.D @ hu + model.r,
        eliminated=eliminated,
    )


@dataclass
class MpcSolution:
    ''' The decoded optimum of one tracking problem.

    Array fields are NaN-filled when the problem was not solved.
    '''
    x_pred: np.ndarray
    u_pred: np.ndarray
    x_s: np.ndarray
    u_s: np.ndarray
    y_s: np.ndarray
    J_star: float
    status: Status
    z: np.ndarray = field(default_factory=lambda: np.zeros(0))
    qp: Optional[QpSolution] = None

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def _prediction(model: AffineModel, x_t: np.ndarray, horizon: int):
    ''' Affine rollout maps ``x_k = G_k U + q_k`` for k = 0..L. '''
    n, m = model.n, model.m
    gmat = np.zeros((n, horizon * m))
    qvec = x_t.copy()
    gains, offsets = [], []
    for k in range(horizon + 1):
        gains.append(gmat)
        offsets.append(qvec)
        if k < horizon:
            gmat = model.A @ gmat
            gmat[:, k * m:(k + 1) * m] += model.B
            qvec = model.A @ qvec + model.e
    return gains, offsets


def _box_rows(mat: np.ndarray, offset: np.ndarray, lo: np.ndarray, hi: np.ndarray):
    ''' Rows of ``lo <= mat z + offset <= hi``, skipping infinite bounds. '''
    rows, rhs = [], []
    for idx in range(mat.shape[0]):
        if np.isfinite(hi[idx]):
            rows.append(mat[idx])
            rhs.append(hi[idx] - offset[idx])
        if np.isfinite(lo[idx]):
            rows.append(-mat[idx])
            rhs.append(offset[idx] - lo[idx])
    return rows, rhs


@dataclass
class TrackingQp:
    ''' A condensed tracking problem together with what is needed to decode
    its solution.

    :ivar constant: Cost constant dropped from the QP objective.
    '''
    problem: QpProblem
    constant: float
    model: AffineModel
    x_t: np.ndarray
    cfg: MpcConfig
    steady: SteadyStateMap

    def decode(self, sol: QpSolution) -> MpcSolution:
        ''' Map a QP solution back to trajectories and the steady state. '''
        cfg, model = self.cfg, self.model
        if not sol.optimal:
            return MpcSolution(
                x_pred=np.full((cfg.L + 1, model.n), np.nan),
                u_pred=np.full((cfg.L, model.m), np.nan),
                x_s=np.full(model.n, np.nan), u_s=np.full(model.m, np.nan),
                y_s=np.full(model.p, np.nan), J_star=float('nan'),
                status=sol.status, z=sol.z, qp=sol,
            )
        u_pred = sol.z[:cfg.L * model.m].reshape(cfg.L, model.m)
        x_pred = [self.x_t]
        for u_k in u_pred:
            x_pred.append(model.step(x_pred[-1], u_k))
        x_s, u_s, y_s = self.steady.at(sol.z[cfg.L * model.m:])
        return MpcSolution(
            x_pred=np.array(x_pred), u_pred=u_pred, x_s=x_s, u_s=u_s, y_s=y_s,
            J_star=sol.objective + self.constant, status=sol.status, z=sol.z, qp=sol,
        )

    def warm_start(self, previous: MpcSolution, shift: int) -> Optional[np.ndarray]:
        ''' Shift a previous solution by ``shift`` steps, padding with its
        steady-state input.
        '''
        if previous is None or not previous.optimal:
            return None
        tail = np.repeat(previous.u_s[None, :], shift, axis=0)
        inputs = np.vstack([previous.u_pred[shift:], tail])[:self.cfg.L]
        param = self.steady.parameter_of(previous.x_s, previous.u_s)
        return np.concatenate([inputs.reshape(-1), param])


def build_tracking_qp(model: AffineModel, x_t, cfg: MpcConfig) -> TrackingQp:
    ''' Condense the tracking problem for a model and current state.

    The decision vector is ``[u_0, ..., u_{L-1}, v]`` with ``v`` the
    steady-state parameter of :func:`steady_state_parametrization`.
    '''
    n, m, horizon = model.n, model.m, cfg.L
    if (n, m, model.p) != (cfg.n, cfg.m, cfg.p):
        raise ConfigError(
            f'Model dimensions {(n, m, model.p)} do not match config {(cfg.n, cfg.m, cfg.p)}'
        )
    x_t = np.asarray(x_t, dtype=float).reshape(n)
    steady = steady_state_parametrization(model, cfg.ss_tol)
    n_in = horizon * m
    dim = n_in + steady.dim

    gains, offsets = _prediction(model, x_t, horizon)
    pad = np.zeros((n, steady.dim))
    pred = [np.hstack([gain, pad]) for gain in gains]
    sel_v = np.hstack([np.zeros((steady.dim, n_in)), np.eye(steady.dim)])
    px_s = steady.Gx @ sel_v
    pu_s = steady.Gu @ sel_v
    py_s = steady.Gy @ sel_v

    # residual blocks M z + c with weight W
    blocks = []
    for k in range(horizon):
        blocks.append((pred[k] - px_s, offsets[k] - steady.hx, cfg.Q))
        sel_u = np.zeros((m, dim))
        sel_u[:, k * m:(k + 1) * m] = np.eye(m)
        blocks.append((sel_u - pu_s, -steady.hu, cfg.R))
    blocks.append((py_s, steady.hy - cfg.y_r, cfg.S))

    hmat = np.zeros((dim, dim))
    gvec = np.zeros(dim)
    constant = 0.0
    for mat, off, weight in blocks:
        wmat = weight @ mat
        hmat += 2.0 * mat.T @ wmat
        gvec += 2.0 * wmat.T @ off
        constant += float(off @ weight @ off)

    a_eq = pred[horizon] - px_s
    b_eq = steady.hx - offsets[horizon]

    rows, rhs = _box_rows(
        np.hstack([np.eye(n_in), np.zeros((n_in, steady.dim))]), np.zeros(n_in),
        np.tile(cfg.u_lo, horizon), np.tile(cfg.u_hi, horizon),
    )
    more_rows, more_rhs = _box_rows(pu_s, steady.hu, cfg.us_lo, cfg.us_hi)
    rows += more_rows
    rhs += more_rhs
    box = cfg.state_box
    if box is not None:
        idx = list(box.index)
        for k in range(1, horizon + 1):
            more_rows, more_rhs = _box_rows(pred[k][idx], offsets[k][idx], box.lo, box.hi)
            rows += more_rows
            rhs += more_rhs
        more_rows, more_rhs = _box_rows(px_s[idx], steady.hx[idx], box.s_lo, box.s_hi)
        rows += more_rows
        rhs += more_rhs

    problem = QpProblem(
        H=0.5 * (hmat + hmat.T), g=gvec, A_eq=a_eq, b_eq=b_eq,
        A_in=np.array(rows) if rows else None, b_in=np.array(rhs) if rhs else None,
    )
    return TrackingQp(problem=problem, constant=constant, model=model, x_t=x_t,
                      cfg=cfg, steady=steady)


def solve_tracking(model: AffineModel, x_t, cfg: MpcConfig,
                   previous: Optional[MpcSolution] = None) -> MpcSolution:
    ''' Build, solve and decode the tracking problem.

    :param previous: The prior solution, used as a warm start after shifting
        it by ``cfg.apply_steps``.
    '''
    tracking = build_tracking_qp(model, x_t, cfg)
    warm = tracking.warm_start(previous, cfg.apply_steps)
    sol = solve_qp(tracking.problem, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter, warm_start=warm)
    result = tracking.decode(sol)
    LOGGER.debug('Tracking QP %s: J*=%.6e in %d iterations',
                 sol.status.value, result.J_star, sol.iterations)
    return result


@dataclass
class ReachableEquilibrium:
    ''' The optimal reachable steady state of a model. '''
    y_sr: np.ndarray
    x_sr: np.ndarray
    u_sr: np.ndarray
    J_hat_star: float
    status: Status


def optimal_reachable_cost(model: AffineModel, cfg: MpcConfig) -> ReachableEquilibrium:
    ''' Minimize :math:`\\|y_s - y^r\\|_S^2` over the model's admissible
    steady states.
    '''
    steady = steady_state_parametrization(model, cfg.ss_tol)
    hmat = 2.0 * steady.Gy.T @ cfg.S @ steady.Gy
    hmat += REACHABLE_RIDGE * max(1.0, float(np.max(np.abs(hmat)))) * np.eye(steady.dim)
    gvec = 2.0 * steady.Gy.T @ cfg.S @ (steady.hy - cfg.y_r)

    rows, rhs = _box_rows(steady.Gu, steady.hu, cfg.us_lo, cfg.us_hi)
    box = cfg.state_box
    if box is not None:
        idx = list(box.index)
        more_rows, more_rhs = _box_rows(steady.Gx[idx], steady.hx[idx], box.s_lo, box.s_hi)
        rows += more_rows
        rhs += more_rhs
    problem = QpProblem(H=hmat, g=gvec, A_in=np.array(rows) if rows else None,
                        b_in=np.array(rhs) if rhs else None)
    sol = solve_qp(problem, tol=cfg.qp_tol, max_iter=cfg.qp_max_iter)
    if not sol.optimal:
        nan = float('nan')
        return ReachableEquilibrium(
            y_sr=np.full(model.p, nan), x_sr=np.full(model.n, nan),
            u_sr=np.full(model.m, nan), J_hat_star=nan, status=sol.status,
        )
    x_sr, u_sr, y_sr = steady.at(sol.z)
    resid = y_sr - cfg.y_r
    return ReachableEquilibrium(
        y_sr=y_sr, x_sr=x_sr, u_sr=u_sr, J_hat_star=float(resid @ cfg.S @ resid),
        status=sol.status,
    )


def lyapunov_candidate(J_star: float, J_hat_star: float) -> float:
    ''' The value :math:`V = J^*_{MPC} - \\hat{J}^*`, nonnegative up to solver tolerance. '''
    return J_star - J_hat_star
