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
''' Plant models: the interface, the CSTR benchmark, input-rate augmentation,
simulation and a finite-difference linearization oracle.
'''
import abc
import logging
import math
from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence
import numpy as np
from idmpc.sysid import AffineModel


LOGGER = logging.getLogger(__name__)

#: Relative central-difference step for :func:`linearize`
FD_STEP = 1e-6


class PlantDomainError(ValueError):
    ''' A plant was evaluated outside of its domain.

    :ivar time_index: The simulation step at which this happened, if known.
    '''

    def __init__(self, message: str, time_index: Optional[int] = None):
        if time_index is not None:
            message = f'{message} (at time index {time_index})'
        super().__init__(message)
        self.time_index = time_index


class Plant(abc.ABC):
    ''' Interface for discrete-time plants
    :math:`x^+ = f(x, u)`, :math:`y = h(x, u)`.

    Implementations are immutable after construction.
    '''

    @property
    @abc.abstractmethod
    def state_dim(self) -> int:
        raise NotImplementedError

    @property
    @abc.abstractmethod
    def input_dim(self) -> int:
        raise NotImplementedError

    @property
    @abc.abstractmethod
    def output_dim(self) -> int:
        raise NotImplementedError

    @abc.abstractmethod
    def step(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        ''' Evaluate the state update :math:`f(x, u)`. '''
        raise NotImplementedError

    @abc.abstractmethod
    def output(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        ''' Evaluate the output map :math:`h(x, u)`. '''
        raise NotImplementedError

    def nominal_state(self) -> np.ndarray:
        ''' A representative state used to seed equilibrium searches. '''
        return np.zeros(self.state_dim)


class FunctionPlant(Plant):
    ''' A plant defined by plain callables. '''

    def __init__(self, n: int, m: int, p: int,
                 step_fn: Callable[[np.ndarray, np.ndarray], np.ndarray],
                 output_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self._dims = (n, m, p)
        self._step_fn = step_fn
        self._output_fn = output_fn

    @property
    def state_dim(self) -> int:
        return self._dims[0]

    @property
    def input_dim(self) -> int:
        return self._dims[1]

    @property
    def output_dim(self) -> int:
        return self._dims[2]

    def step(self, x, u):
        return np.asarray(self._step_fn(np.asarray(x, dtype=float), np.asarray(u, dtype=float)),
                          dtype=float).reshape(self.state_dim)

    def output(self, x, u):
        return np.asarray(self._output_fn(np.asarray(x, dtype=float), np.asarray(u, dtype=float)),
                          dtype=float).reshape(self.output_dim)


class AffinePlant(Plant):
    ''' A plant whose dynamics are exactly an affine model. '''

    def __init__(self, model: AffineModel):
        self.model = model

    @property
    def state_dim(self) -> int:
        return self.model.n

    @property
    def input_dim(self) -> int:
        return self.model.m

    @property
    def output_dim(self) -> int:
        return self.model.p

    def step(self, x, u):
        return self.model.step(np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def output(self, x, u):
        return self.model.output(np.asarray(x, dtype=float), np.asarray(u, dtype=float))


@dataclass(frozen=True)
class CstrParams:
    ''' Parameters of the Euler-discretized stirred tank reactor.

    :ivar reaction_form: Either ``printed``, where the reaction term of the
        first state omits the :math:`x_1` factor, or ``bilinear``, where both
        reaction terms carry :math:`x_1 e^{-M/x_2}`.
    '''
    ts: float = 0.2
    theta: float = 20.0
    kbar: float = 300.0
    M: float = 5.0
    xf: float = 0.3947
    xc: float = 0.3816
    alpha: float = 0.117
    reaction_form: str = 'printed'

    REACTION_FORMS = ('printed', 'bilinear')

    def __post_init__(self):
        if self.reaction_form not in CstrParams.REACTION_FORMS:
            raise ValueError(f'Bad reaction form: {self.reaction_form}')


def cstr_step(x, u, params: CstrParams = CstrParams()) -> np.ndarray:
    ''' One step of the stirred tank reactor.

    :param x: State (temperature, concentration).
    :param u: Coolant flow rate, a length-1 vector or scalar.
    :return: The successor state.
    :raise PlantDomainError: If the concentration is not positive.
    '''
    x1, x2 = (float(val) for val in np.asarray(x, dtype=float).reshape(2))
    uval = float(np.asarray(u, dtype=float).reshape(-1)[0])
    if not x2 > 0:
        raise PlantDomainError(f'CSTR requires x2 > 0, got {x2}')

    rate = params.ts * params.kbar * math.exp(-params.M / x2)
    first_rate = rate * x1 if params.reaction_form == 'bilinear' else rate
    return np.array([
        x1 + (params.ts / params.theta) * (1.0 - x1) - first_rate,
        x2 + (params.ts / params.theta) * (params.xf - x2) + rate * x1
        - params.ts * params.alpha * uval * (x2 - params.xc),
    ])


class CstrPlant(Plant):
    ''' The stirred tank reactor with output :math:`y = x_2`. '''

    def __init__(self, params: CstrParams = CstrParams()):
        self.params = params

    @property
    def state_dim(self) -> int:
        return 2

    @property
    def input_dim(self) -> int:
        return 1

    @property
    def output_dim(self) -> int:
        return 1

    def step(self, x, u):
        return cstr_step(x, u, self.params)

    def output(self, x, u):
        return np.array([float(np.asarray(x, dtype=float).reshape(2)[1])])

    def nominal_state(self) -> np.ndarray:
        return np.array([0.4, 0.6])


class AugmentedPlant(Plant):
    ''' Input-rate augmentation of an inner plant.

    The state is :math:`(x, u)` and the input is the increment
    :math:`\\Delta u`. The inner dynamics see the stored :math:`u_k`; the
    increment takes effect on the next step.
    '''

    def __init__(self, inner: Plant):
        self.inner = inner

    @property
    def state_dim(self) -> int:
        return self.inner.state_dim + self.inner.input_dim

    @property
    def input_dim(self) -> int:
        return self.inner.input_dim

    @property
    def output_dim(self) -> int:
        return self.inner.output_dim

    @property
    def input_slice(self) -> slice:
        ''' Where the stored inner input sits in the augmented state. '''
        return slice(self.inner.state_dim, self.state_dim)

    def split(self, xa) -> tuple:
        xa = np.asarray(xa, dtype=float).reshape(self.state_dim)
        return xa[:self.inner.state_dim], xa[self.input_slice]

    def step(self, x, u):
        inner_x, inner_u = self.split(x)
        delta = np.asarray(u, dtype=float).reshape(self.input_dim)
        return np.concatenate([self.inner.step(inner_x, inner_u), inner_u + delta])

    def output(self, x, u):
        inner_x, inner_u = self.split(x)
        return self.inner.output(inner_x, inner_u)

    def nominal_state(self) -> np.ndarray:
        return np.concatenate([self.inner.nominal_state(), np.zeros(self.input_dim)])


@dataclass
class Trajectory:
    ''' A simulated open-loop trajectory.

    :ivar states: (T+1) x n array.
    :ivar outputs: T x p array.
    '''
    states: np.ndarray
    outputs: np.ndarray


def simulate(plant: Plant, x0, inputs: Sequence) -> Trajectory:
    ''' Roll a plant forward under a given input sequence.

    :raise PlantDomainError: With the failing time index set.
    '''
    inputs = [np.asarray(u, dtype=float).reshape(plant.input_dim) for u in inputs]
    if not inputs:
        raise ValueError('At least one input is required')
    states: List[np.ndarray] = [np.asarray(x0, dtype=float).reshape(plant.state_dim)]
    outputs: List[np.ndarray] = []
    for idx, u in enumerate(inputs):
        try:
            outputs.append(plant.output(states[-1], u))
            states.append(plant.step(states[-1], u))
        except PlantDomainError as err:
            raise PlantDomainError(str(err), time_index=idx) from err
    return Trajectory(states=np.array(states), outputs=np.array(outputs))


def jacobian(func, point: np.ndarray, rows: int) -> np.ndarray:
    ''' Central finite-difference Jacobian of a vector function. '''
    jac = np.zeros((rows, point.size))
    for idx in range(point.size):
        delta = FD_STEP * max(1.0, abs(point[idx]))
        upper = point.copy()
        lower = point.copy()
        upper[idx] += delta
        lower[idx] -= delta
        jac[:, idx] = (func(upper) - func(lower)) / (2.0 * delta)
    return jac


def linearize(plant: Plant, x, u=None) -> AffineModel:
    ''' Linearize a plant by central finite differences.

    The offsets absorb the input term so that the affine model reproduces
    :math:`f(\\tilde{x}, \\tilde{u})` and :math:`h(\\tilde{x}, \\tilde{u})` exactly.

    :param x: The linearization state.
    :param u: The linearization input, zero if omitted.
    :return: The local affine model.
    '''
    n, m, p = plant.state_dim, plant.input_dim, plant.output_dim
    x = np.asarray(x, dtype=float).reshape(n)
    u = np.zeros(m) if u is None else np.asarray(u, dtype=float).reshape(m)

    amat = jacobian(lambda xx: plant.step(xx, u), x, n)
    bmat = jacobian(lambda uu: plant.step(x, uu), u, n)
    cmat = jacobian(lambda xx: plant.output(xx, u), x, p)
    dmat = jacobian(lambda uu: plant.output(x, uu), u, p)
    return AffineModel(
        A=amat, B=bmat, e=plant.step(x, u) - amat @ x - bmat @ u,
        C=cmat, D=dmat, r=plant.output(x, u) - cmat @ x - dmat @ u,
    )
