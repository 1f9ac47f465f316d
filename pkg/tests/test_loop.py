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
''' Verify behavior of the bootstrap and the adaptive closed loop.
'''
import math
import unittest
import numpy as np
from idmpc.loop import (
    MAX_SHRINKAGE, BootstrapError, BootstrapStrategy, bootstrap, excitation_floor, input_violation,
    run_closed_loop,
)
from idmpc.mpc import ConfigError, MpcConfig
from idmpc.plant import AffinePlant, FunctionPlant, PlantDomainError
from idmpc.sysid import AffineModel, pe_metric
from .util import cstr_setup, cstr_trace


def scalar_plant(A=0.5, B=1.0) -> AffinePlant:
    return AffinePlant(AffineModel(A=A, B=B, e=0.0, C=1.0, D=0.0, r=0.0))


def scalar_cfg(**kwargs) -> MpcConfig:
    params = dict(Q=1.0, R=1.0, S=100.0, y_r=0.5, u_lo=-1.0, u_hi=1.0, us_lo=-0.9, us_hi=0.9,
                  L=5, N=5)
    params.update(kwargs)
    return MpcConfig(**params)


EXCITED = BootstrapStrategy(variant='excited_rollout', seed=7)


class TestBootstrapStrategy(unittest.TestCase):

    def test_defaults(self):
        strategy = BootstrapStrategy()
        self.assertEqual('model_based_mpc', strategy.variant)
        self.assertEqual(0, strategy.seed)

    def test_bad_variant(self):
        with self.assertRaises(ValueError):
            BootstrapStrategy(variant='random')

    def test_bad_amplitude(self):
        with self.assertRaises(ValueError):
            BootstrapStrategy(amplitude=1.5)


class TestBootstrap(unittest.TestCase):

    def test_excited_scalar(self):
        window = bootstrap(scalar_plant(), [0.0], scalar_cfg(), EXCITED)
        self.assertTrue(window.full)
        self.assertEqual((1, 6), window.states.shape)
        self.assertEqual((1, 5), window.inputs.shape)
        self.assertGreater(pe_metric(window), 0.0)
        self.assertTrue(np.all(np.abs(window.inputs) <= 1.0))

    def test_excited_seeded(self):
        first = bootstrap(scalar_plant(), [0.0], scalar_cfg(), EXCITED)
        second = bootstrap(scalar_plant(), [0.0], scalar_cfg(), EXCITED)
        np.testing.assert_array_equal(first.inputs, second.inputs)
        other = bootstrap(scalar_plant(), [0.0], scalar_cfg(),
                          BootstrapStrategy(variant='excited_rollout', seed=8))
        self.assertFalse(np.array_equal(first.inputs, other.inputs))

    def test_nominal_input(self):
        strategy = BootstrapStrategy(variant='excited_rollout', nominal=[-0.2], amplitude=0.1)
        window = bootstrap(scalar_plant(), [0.0], scalar_cfg(), strategy)
        self.assertTrue(np.all(window.inputs <= -0.1 + 1e-12))
        self.assertTrue(np.all(window.inputs >= -0.3 - 1e-12))

    def test_short_window(self):
        with self.assertRaises(ValueError):
            bootstrap(scalar_plant(), [0.0], scalar_cfg(N=2), EXCITED)

    def test_constant_input_flagged(self):
        strategy = BootstrapStrategy(variant='excited_rollout', amplitude=0.0)
        with self.assertRaises(BootstrapError) as ctx:
            bootstrap(scalar_plant(), [0.0], scalar_cfg(), strategy)
        self.assertIsNotNone(ctx.exception.sigma_min)

    def test_dimension_mismatch(self):
        with self.assertRaises(ValueError):
            bootstrap(scalar_plant(), [0.0], scalar_cfg(Q=np.eye(2)), EXCITED)

    def test_model_based_cstr(self):
        plant, cfg, x0 = cstr_setup()
        window = bootstrap(plant, x0, cfg, BootstrapStrategy())
        self.assertTrue(window.full)
        stored = window.states[2]
        self.assertTrue(np.all(stored >= 0.1 - 1e-8))
        self.assertTrue(np.all(stored <= 2.0 + 1e-8))
        self.assertGreater(pe_metric(window), 0.0)


class TestExcitationFloor(unittest.TestCase):

    def test_ridge_bound(self):
        cfg = scalar_cfg(lam=1e-12)
        floor = excitation_floor(cfg)
        self.assertAlmostEqual(math.sqrt(999e-12), floor, delta=1e-12)
        self.assertAlmostEqual(MAX_SHRINKAGE, cfg.lam / (floor ** 2 + cfg.lam))

    def test_configured_threshold(self):
        self.assertEqual(1e-6, excitation_floor(scalar_cfg(lam=0.0)))
        self.assertEqual(0.5, excitation_floor(scalar_cfg(lam=1e-12, pe_threshold=0.5)))

    def test_negative_threshold(self):
        with self.assertRaises(ConfigError):
            scalar_cfg(pe_threshold=-1.0)


class TestInputViolation(unittest.TestCase):

    def test_inside(self):
        self.assertEqual(0.0, input_violation(scalar_plant(), scalar_cfg(), np.zeros(1), np.array([0.5])))

    def test_outside(self):
        viol = input_violation(scalar_plant(), scalar_cfg(), np.zeros(1), np.array([1.25]))
        self.assertAlmostEqual(0.25, viol)


class TestClosedLoop(unittest.TestCase):

    def test_bad_source(self):
        with self.assertRaises(ValueError):
            run_closed_loop(scalar_plant(), [0.0], scalar_cfg(), EXCITED, 50, model_source='oracle')

    def test_end_before_bootstrap(self):
        with self.assertRaises(ValueError):
            run_closed_loop(scalar_plant(), [0.0], scalar_cfg(), EXCITED, 4)

    def test_end_at_bootstrap(self):
        trace = run_closed_loop(scalar_plant(), [0.0], scalar_cfg(), EXCITED, 5)
        self.assertTrue(trace.complete)
        self.assertEqual([], trace.solves)
        self.assertEqual(5, trace.final_time)
        self.assertEqual(6, len(trace.outputs))
        self.assertEqual(5, len(trace.inputs))

    def test_exact_affine_converges(self):
        trace = run_closed_loop(scalar_plant(), [0.0], scalar_cfg(), EXCITED, 200)
        self.assertTrue(trace.complete, trace.message)
        self.assertEqual(200, trace.final_time)
        self.assertLessEqual(abs(trace.outputs[-1][0] - 0.5), 1e-6)
        self.assertTrue(np.all(np.abs(trace.input_array()) <= 1.0 + 1e-8))

        first = trace.solves[0]
        self.assertEqual('optimal', first.status)
        self.assertFalse(first.frozen)
        self.assertLessEqual(first.id_error, 1e-6)
        self.assertGreater(first.sigma_min_Z, 0.0)
        self.assertTrue(np.isfinite(first.V))

    def test_linearized_source(self):
        trace = run_closed_loop(scalar_plant(), [0.0], scalar_cfg(), EXCITED, 100,
                                model_source='linearized')
        self.assertTrue(trace.complete, trace.message)
        self.assertLessEqual(abs(trace.outputs[-1][0] - 0.5), 1e-8)
        for rec in trace.solves:
            self.assertFalse(rec.frozen)
            self.assertLessEqual(rec.id_error, 1e-12)

    def test_freeze_is_permanent(self):
        trace = run_closed_loop(scalar_plant(), [0.0], scalar_cfg(), EXCITED, 200)
        flags = [rec.frozen for rec in trace.solves]
        self.assertIn(True, flags)
        start = flags.index(True)
        self.assertTrue(all(flags[start:]))
        model = trace.solves[start].model
        for rec in trace.solves[start:]:
            self.assertIs(model, rec.model)

    def test_poor_excitation_keeps_model(self):
        cfg = scalar_cfg()
        floor = excitation_floor(cfg)
        with self.assertLogs('idmpc.loop', level='WARNING') as logs:
            trace = run_closed_loop(scalar_plant(), [0.0], cfg, EXCITED, 200)
        self.assertTrue(trace.complete, trace.message)
        self.assertTrue(any('keeping the previous model' in line for line in logs.output))
        self.assertTrue(any(rec.held for rec in trace.solves))

        fresh = None
        for rec in trace.solves:
            if rec.frozen:
                break
            if rec.held:
                self.assertLess(rec.sigma_min_Z, floor)
                self.assertIs(fresh.model, rec.model)
            else:
                self.assertGreaterEqual(rec.sigma_min_Z, floor)
                fresh = rec
        frozen = [rec for rec in trace.solves if rec.frozen]
        self.assertTrue(frozen)
        self.assertIs(fresh.model, frozen[0].model)
        self.assertFalse(any(rec.held for rec in frozen))

    def test_linearized_never_holds(self):
        trace = run_closed_loop(scalar_plant(), [0.0], scalar_cfg(), EXCITED, 60,
                                model_source='linearized')
        self.assertFalse(any(rec.held for rec in trace.solves))

    def test_deterministic(self):
        first = run_closed_loop(scalar_plant(), [0.0], scalar_cfg(), EXCITED, 60)
        second = run_closed_loop(scalar_plant(), [0.0], scalar_cfg(), EXCITED, 60)
        np.testing.assert_array_equal(first.state_array(), second.state_array())
        np.testing.assert_array_equal(first.input_array(), second.input_array())
        self.assertEqual(first.solve_times(), second.solve_times())

    def test_solve_schedule(self):
        plant = AffinePlant(AffineModel(A=[[0.9, 0.2], [0.0, 0.7]], B=[[0.0], [1.0]], e=[0.05, 0.0],
                                        C=[[1.0, 0.0]], D=0.0, r=0.0))
        cfg = scalar_cfg(Q=np.eye(2), S=1.0, y_r=1.0, L=8, N=8)
        strategy = BootstrapStrategy(variant='excited_rollout', amplitude=0.2, seed=3)
        trace = run_closed_loop(plant, [0.5, 0.0], cfg, strategy, 21)
        self.assertTrue(trace.complete, trace.message)
        self.assertEqual([8, 10, 12, 14, 16, 18, 20], trace.solve_times())
        self.assertEqual(21, trace.final_time)
        self.assertIsNotNone(trace.solve_at(14))
        self.assertIsNone(trace.solve_at(15))

    def test_infeasible_stops(self):
        cfg = scalar_cfg(S=1.0, y_r=0.0, L=1, N=3)
        trace = run_closed_loop(scalar_plant(), [100.0], cfg, EXCITED, 50)
        self.assertEqual('infeasible', trace.status)
        self.assertEqual(3, trace.final_time)
        self.assertEqual(['infeasible'], [rec.status for rec in trace.solves])
        self.assertTrue(trace.message)

    def test_domain_error_stops(self):
        def step(x, u):
            if x[0] > 0.3:
                raise PlantDomainError('state left the model domain')
            return 0.5 * x + u

        plant = FunctionPlant(1, 1, 1, step, lambda x, u: x.copy())
        strategy = BootstrapStrategy(variant='excited_rollout', nominal=[-0.2], amplitude=0.1)
        trace = run_closed_loop(plant, [0.0], scalar_cfg(), strategy, 100)
        self.assertEqual('domain_error', trace.status)
        self.assertLess(trace.final_time, 100)
        self.assertGreater(trace.states[-1][0], 0.3)
        self.assertEqual(len(trace.states), len(trace.outputs))


class TestCstrClosedLoop(unittest.TestCase):
    ''' The reactor case study over its full horizon. '''

    def setUp(self):
        self.trace = cstr_trace()

    def test_complete(self):
        self.assertTrue(self.trace.complete, self.trace.message)
        self.assertEqual(2500, self.trace.final_time)
        self.assertTrue(all(rec.status == 'optimal' for rec in self.trace.solves))

    def test_input_constraints(self):
        stored = self.trace.state_array()[:, 2]
        self.assertTrue(np.all(stored >= 0.1 - 1e-8))
        self.assertTrue(np.all(stored <= 2.0 + 1e-8))
        self.assertTrue(np.all(np.abs(self.trace.input_array()) <= 10.0 + 1e-8))

    def test_tracks_reference(self):
        outputs = self.trace.output_array()[2000:, 0]
        self.assertLessEqual(float(np.max(np.abs(outputs - 0.6519))), 1e-3)

    def test_schedule(self):
        times = self.trace.solve_times()
        self.assertEqual(25, times[0])
        self.assertTrue(all(b - a == 3 for a, b in zip(times, times[1:])))

    def test_lyapunov_settles(self):
        for rec in self.trace.solves[-10:]:
            self.assertGreaterEqual(rec.V, 0.0)
            self.assertLessEqual(rec.V, 1e-4)

    def test_lyapunov_decays_once_frozen(self):
        values = [rec.V for rec in self.trace.solves if rec.frozen]
        self.assertGreater(len(values), 10)
        for prev, cur in zip(values, values[1:]):
            self.assertLessEqual(cur, 0.999 * prev + 1e-6)

    def test_identification_error_settles(self):
        errors = [rec.id_error for rec in self.trace.solves[-10:]]
        for err in errors:
            self.assertLessEqual(err, 1e-3)
        for prev, cur in zip(errors, errors[1:]):
            self.assertLessEqual(cur, prev + 1e-5)

    def test_frozen_model_well_excited(self):
        _plant, cfg, _x0 = cstr_setup()
        floor = excitation_floor(cfg)
        solves = self.trace.solves
        start = [rec.frozen for rec in solves].index(True)
        fresh = [rec for rec in solves[:start] if not rec.held][-1]
        self.assertGreaterEqual(fresh.sigma_min_Z, floor)
        self.assertIs(fresh.model, solves[start].model)
        self.assertIs(fresh.model, solves[-1].model)

    def test_frozen_at_end(self):
        self.assertTrue(self.trace.solves[-1].frozen)


if __name__ == '__main__':
    unittest.main()
