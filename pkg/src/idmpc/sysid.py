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
r''' Moving-window least-squares identification of local affine models.

The identified model is

.. math::
    x^+ = \hat{A} x + \hat{B} u + \hat{e}, \quad y = \hat{C} x + \hat{D} u + \hat{r}

fit to the last N transitions held in a :class:`DataWindow`.
'''
import collections
import logging
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import numpy as np
import scipy.linalg


LOGGER = logging.getLogger(__name__)

#: Default ridge regularization of the normal equations
DEFAULT_LAMBDA = 1e-12
#: Relative singular value below which an unregularized Gram matrix is singular
SINGULAR_RTOL = 1e-14
#: Default threshold for all assumption singular values
DEFAULT_SIGMA = 1e-6


class DimensionError(ValueError):
    ''' Raised when array shapes do not agree with the model dimensions. '''


class SingularRegressorError(RuntimeError):
    ''' The unregularized normal equations are numerically singular.

    :ivar sigma_min: Smallest singular value of :math:`Z Z^T`.
    :ivar sigma_max: Largest singular value of :math:`Z Z^T`.
    '''

    def __init__(self, sigma_min: float, sigma_max: float):
        super().__init__(
            f'Regressor Gram matrix is singular: sigma_min={sigma_min:.3e}, sigma_max={sigma_max:.3e}'
        )
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max


def _as_matrix(val, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.array(val, dtype=float, ndmin=2)
    if arr.size == rows * cols and arr.shape != (rows, cols):
        arr = arr.reshape(rows, cols)
    if arr.shape != (rows, cols):
        raise DimensionError(f'{name} has shape {arr.shape}, expected {(rows, cols)}')
    return arr


def _as_vector(val, size: int, name: str) -> np.ndarray:
    arr = np.array(val, dtype=float).reshape(-1)
    if arr.shape != (size,):
        raise DimensionError(f'{name} has size {arr.size}, expected {size}')
    return arr


@dataclass(frozen=True, eq=False)
class AffineModel:
    ''' A local affine model, identified or obtained by linearization.

    Scalars and flat sequences are accepted and reshaped when their size
    matches the dimensions implied by ``A``, ``B`` and ``C``.
    '''
    A: np.ndarray
    B: np.ndarray
    e: np.ndarray
    C: np.ndarray
    D: np.ndarray
    r: np.ndarray

    def __post_init__(self):
        amat = np.array(self.A, dtype=float, ndmin=2)
        n = amat.shape[0]
        bmat = np.array(self.B, dtype=float, ndmin=2)
        if bmat.shape[0] != n:
            bmat = bmat.reshape(n, -1)
        m = bmat.shape[1]
        cmat = np.array(self.C, dtype=float, ndmin=2)
        if cmat.shape[1] != n:
            cmat = cmat.reshape(-1, n)
        p = cmat.shape[0]

        object.__setattr__(self, 'A', _as_matrix(amat, n, n, 'A'))
        object.__setattr__(self, 'B', _as_matrix(bmat, n, m, 'B'))
        object.__setattr__(self, 'e', _as_vector(self.e, n, 'e'))
        object.__setattr__(self, 'C', _as_matrix(cmat, p, n, 'C'))
        object.__setattr__(self, 'D', _as_matrix(self.D, p, m, 'D'))
        object.__setattr__(self, 'r', _as_vector(self.r, p, 'r'))
        for name, arr in self.coefficients().items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f'Model coefficient {name} is not finite')

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def p(self) -> int:
        return self.C.shape[0]

    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ x + self.B @ u + self.e

    def output(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.C @ x + self.D @ u + self.r

    def coefficients(self) -> Dict[str, np.ndarray]:
        ''' All coefficient arrays keyed by name, in a fixed order. '''
        return collections.OrderedDict(
            (name, getattr(self, name)) for name in ('A', 'B', 'e', 'C', 'D', 'r')
        )

    def max_abs_diff(self, other: 'AffineModel') -> float:
        ''' Max-norm distance between all coefficients of two models.
        '''
        if (self.n, self.m, self.p) != (other.n, other.m, other.p):
            raise DimensionError('Models have different dimensions')
        return max(
            float(np.max(np.abs(ours - theirs), initial=0.0))
            for ours, theirs in zip(self.coefficients().values(), other.coefficients().values())
        )


class DataWindow:
    ''' The moving measurement set of the last N transitions.

    The window holds states :math:`x_{t-N}, \\dots, x_t`, inputs
    :math:`u_{t-N}, \\dots, u_{t-1}` and outputs :math:`y_{t-N}, \\dots, y_{t-1}`.
    Outputs are indexed like inputs so that :math:`y_k = h(x_k, u_k)`.

    :param length: The window length N.
    :param n: State dimension.
    :param m: Input dimension.
    :param p: Output dimension.
    :param t0: Absolute time index of the first state pushed.
    '''

    def __init__(self, length: int, n: int, m: int, p: int, t0: int = 0):
        if length < 1:
            raise ValueError('Window length must be positive')
        self.length = length
        self.n, self.m, self.p = n, m, p
        self._states = collections.deque(maxlen=length + 1)
        self._inputs = collections.deque(maxlen=length)
        self._outputs = collections.deque(maxlen=length)
        self._t0 = t0
        self._evicted = 0

    @property
    def t(self) -> Optional[int]:
        ''' Absolute time index of the newest state, or None if empty. '''
        if not self._states:
            return None
        return self._t0 + len(self._inputs) + self._evicted

    @property
    def full(self) -> bool:
        return len(self._inputs) == self.length

    def __len__(self):
        return len(self._inputs)

    def push(self, x, u, y, x_next):
        ''' Append one transition, evicting the oldest when full.

        :param x: The state the transition starts from. Must equal the newest
            held state, if there is one.
        :param u: The applied input.
        :param y: The output at (x, u).
        :param x_next: The successor state.
        '''
        x = _as_vector(x, self.n, 'x')
        if self._states:
            if not np.array_equal(self._states[-1], x):
                raise ValueError('Transition does not start at the newest window state')
        else:
            self._states.append(x)
        if self.full:
            self._evicted += 1
        self._inputs.append(_as_vector(u, self.m, 'u'))
        self._outputs.append(_as_vector(y, self.p, 'y'))
        self._states.append(_as_vector(x_next, self.n, 'x_next'))

    @property
    def states(self) -> np.ndarray:
        ''' All held states as an n x (N+1) matrix. '''
        return np.column_stack(self._states) if self._states else np.zeros((self.n, 0))

    @property
    def inputs(self) -> np.ndarray:
        return np.column_stack(self._inputs) if self._inputs else np.zeros((self.m, 0))

    @property
    def outputs(self) -> np.ndarray:
        return np.column_stack(self._outputs) if self._outputs else np.zeros((self.p, 0))

    def regressor(self) -> np.ndarray:
        ''' The regressor :math:`Z_t = [X_t; U_t; 1^T]`.
        '''
        return regressor_matrix(self.states[:, :-1], self.inputs)

    def copy(self) -> 'DataWindow':
        ''' An independent snapshot of this window. '''
        other = DataWindow(self.length, self.n, self.m, self.p, self._t0)
        other._states.extend(arr.copy() for arr in self._states)
        other._inputs.extend(arr.copy() for arr in self._inputs)
        other._outputs.extend(arr.copy() for arr in self._outputs)
        other._evicted = self._evicted
        return other


def regressor_matrix(states: np.ndarray, inputs: np.ndarray) -> np.ndarray:
    ''' Stack states, inputs and a row of ones.

    :param states: An n x N matrix of transition start states.
    :param inputs: An m x N matrix of inputs.
    :return: The (n+m+1) x N regressor.
    '''
    if states.shape[1] != inputs.shape[1]:
        raise DimensionError('States and inputs have different sample counts')
    return np.vstack([states, inputs, np.ones((1, states.shape[1]))])


def least_squares(states, inputs, next_states, outputs, lam: float = DEFAULT_LAMBDA) -> AffineModel:
    ''' Regularized least-squares fit of an affine model to transitions.

    Each column k is one transition
    ``(states[:, k], inputs[:, k]) -> (next_states[:, k], outputs[:, k])``.
    The coefficients are

    .. math::
        [\\hat{A}\\ \\hat{B}\\ \\hat{e}] = X^+ Z^T (Z Z^T + \\lambda I)^{-1}

    and likewise for the output map, computed by factorization.

    :param lam: The nonnegative regularization weight.
    :return: The fitted model.
    :raise SingularRegressorError: If ``lam`` is zero and :math:`Z Z^T` is
        numerically singular.
    '''
    if lam < 0:
        raise ValueError(f'Regularization must be nonnegative, got {lam}')
    states = np.atleast_2d(np.asarray(states, dtype=float))
    inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
    next_states = np.atleast_2d(np.asarray(next_states, dtype=float))
    outputs = np.atleast_2d(np.asarray(outputs, dtype=float))
    n, m, p = states.shape[0], inputs.shape[0], outputs.shape[0]
    count = states.shape[1]
    if next_states.shape != states.shape or outputs.shape[1] != count:
        raise DimensionError('Transition arrays have inconsistent shapes')

    zmat = regressor_matrix(states, inputs)
    gram = zmat @ zmat.T
    rhs = zmat @ np.vstack([next_states, outputs]).T

    if lam > 0:
        try:
            factor = scipy.linalg.cho_factor(gram + lam * np.eye(gram.shape[0]))
            theta = scipy.linalg.cho_solve(factor, rhs).T
        except np.linalg.LinAlgError:
            LOGGER.warning('Cholesky of regularized Gram matrix failed, using stacked least-squares')
            stacked = np.vstack([zmat.T, np.sqrt(lam) * np.eye(gram.shape[0])])
            target = np.vstack([np.vstack([next_states, outputs]).T, np.zeros((gram.shape[0], n + p))])
            theta = scipy.linalg.lstsq(stacked, target)[0].T
    else:
        sing = scipy.linalg.svdvals(gram)
        if count < gram.shape[0] or sing[-1] < SINGULAR_RTOL * sing[0]:
            raise SingularRegressorError(float(sing[-1]), float(sing[0]))
        theta = scipy.linalg.solve(gram, rhs, assume_a='pos').T

    return AffineModel(
        A=theta[:n, :n], B=theta[:n, n:n + m], e=theta[:n, n + m],
        C=theta[n:, :n], D=theta[n:, n:n + m], r=theta[n:, n + m],
    )


def identify(window: DataWindow, lam: float = DEFAULT_LAMBDA) -> AffineModel:
    ''' Identify the affine model for the current window contents.

    :param window: A full data window.
    :param lam: Regularization weight; zero gives the plain least-squares fit.
    :return: The identified model.
    '''
    if not window.full:
        raise ValueError(f'Window holds {len(window)} of {window.length} transitions')
    states = window.states
    return least_squares(states[:, :-1], window.inputs, states[:, 1:], window.outputs, lam)


def pe_metric(window: DataWindow) -> float:
    ''' The smallest singular value of the window regressor.

    A value of zero indicates the window is not persistently exciting.
    '''
    if not window.full:
        raise ValueError(f'Window holds {len(window)} of {window.length} transitions')
    zmat = window.regressor()
    if zmat.shape[1] < zmat.shape[0]:
        return 0.0
    return float(scipy.linalg.svdvals(zmat)[-1])


def _sigma_min(mat: np.ndarray) -> float:
    sing = scipy.linalg.svdvals(mat)
    return float(sing[-1]) if sing.size else 0.0


def _full_column_sigma(mat: np.ndarray) -> float:
    if mat.shape[0] < mat.shape[1]:
        return 0.0
    return _sigma_min(mat)


def _full_row_sigma(mat: np.ndarray) -> float:
    if mat.shape[1] < mat.shape[0]:
        return 0.0
    return _sigma_min(mat)


def controllability_matrix(model: AffineModel) -> np.ndarray:
    blocks = [model.B]
    for _ in range(model.n - 1):
        blocks.append(model.A @ blocks[-1])
    return np.hstack(blocks)


@dataclass
class AssumptionThresholds:
    ''' Lower bounds on the singular values of the standing assumptions. '''
    sigma_s: float = DEFAULT_SIGMA
    sigma_c: float = DEFAULT_SIGMA
    sigma_l: float = DEFAULT_SIGMA
    sigma_z: float = DEFAULT_SIGMA


@dataclass
class AssumptionReport:
    ''' Raw singular values and their pass/fail state for one model.

    :ivar sigma_steady: Smallest singular value of ``[[A-I, B], [C, D]]``.
    :ivar sigma_ctrb: Smallest singular value of the controllability matrix.
    :ivar sigma_l: Smallest singular value of ``I-A``.
    '''
    sigma_steady: float
    sigma_ctrb: float
    sigma_l: float
    thresholds: AssumptionThresholds = field(default_factory=AssumptionThresholds)

    @property
    def steady_ok(self) -> bool:
        return self.sigma_steady > self.thresholds.sigma_s

    @property
    def ctrb_ok(self) -> bool:
        return self.sigma_ctrb > self.thresholds.sigma_c

    @property
    def sigma_l_ok(self) -> bool:
        return self.sigma_l > self.thresholds.sigma_l

    def rows(self) -> Tuple[Tuple[str, float, bool], ...]:
        ''' Report lines as (label, value, passed). '''
        return (
            ('steady-state map full column rank', self.sigma_steady, self.steady_ok),
            ('uniform controllability', self.sigma_ctrb, self.ctrb_ok),
            ('I-A nonsingular', self.sigma_l, self.sigma_l_ok),
        )


def assumption_report(model: AffineModel,
                      thresholds: Optional[AssumptionThresholds] = None) -> AssumptionReport:
    ''' Evaluate the rank assumptions of the tracking scheme on a model.
    '''
    eye = np.eye(model.n)
    stacked = np.block([[model.A - eye, model.B], [model.C, model.D]])
    return AssumptionReport(
        sigma_steady=_full_column_sigma(stacked),
        sigma_ctrb=_full_row_sigma(controllability_matrix(model)),
        sigma_l=_sigma_min(eye - model.A),
        thresholds=thresholds or AssumptionThresholds(),
    )
