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
''' Verify behavior of the "idmpc" command tool.
'''
import argparse
import io
import logging
import os
import unittest
from unittest import mock
import numpy as np
from idmpc import config
from idmpc.loop import run_closed_loop
from idmpc.tools import idmpc
from idmpc.writers.trace_csv import SOLVE_COLUMNS, header, read_trace
from .util import TmpDir, render_config


LOGGER = logging.getLogger(__name__)


class TestIdmpc(unittest.TestCase):

    def setUp(self):
        self.maxDiff = None
        self._dir = TmpDir()

    def tearDown(self):
        del self._dir

    def _args(self, command: str, config_path, out=None, **kwargs) -> argparse.Namespace:
        args = argparse.Namespace()
        args.command = command
        args.config = config_path
        args.out = out
        args.seed = None
        if command == 'sweep':
            args.workers = None
            args.lambda_values = None
            args.window_values = None
        for key, val in kwargs.items():
            setattr(args, key, val)
        return args

    def _run(self, args: argparse.Namespace):
        ''' Run the tool and capture its standard output. '''
        with mock.patch('sys.stdout', new_callable=io.StringIO) as stdout:
            exitcode = idmpc.run(args)
        LOGGER.info('Output:\n%s', stdout.getvalue())
        return exitcode, stdout.getvalue()

    def _out(self, name: str) -> str:
        return os.path.join(self._dir.name, 'out', name)

    def _read(self, path: str) -> str:
        with open(path, 'r') as infile:
            return infile.read()

    def test_parser(self):
        parser = idmpc.get_parser()
        self.assertIsInstance(parser, argparse.ArgumentParser)
        args = parser.parse_args(['sweep', '--config', 'run.cfg', '--lambda', '1e-12,1e-8',
                                  '--window', '5', '--workers', '2'])
        self.assertEqual('sweep', args.command)
        self.assertEqual('1e-12,1e-8', args.lambda_values)
        self.assertEqual(2, args.workers)
        args = parser.parse_args(['simulate', '-o', 'out.csv', '--seed', '3'])
        self.assertEqual('out.csv', args.out)
        self.assertEqual(3, args.seed)
        self.assertIsNone(args.config)

    def test_parser_needs_command(self):
        with mock.patch('sys.stderr', new_callable=io.StringIO):
            with self.assertRaises(SystemExit):
                idmpc.get_parser().parse_args([])

    def test_simulate(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        args = self._args('simulate', path, out=self._out('trace.csv'))
        exitcode, stdout = self._run(args)
        self.assertEqual(0, exitcode)
        self.assertTrue(stdout.startswith('tracking_error = '))

        lines = self._read(args.out).splitlines()
        self.assertEqual(62, len(lines))
        self.assertEqual(','.join(header(1, 1, 1)), lines[0])

        cols = read_trace(args.out)
        np.testing.assert_array_equal(np.arange(61), cols['t'])
        self.assertTrue(np.isnan(cols['u1'][-1]))
        self.assertTrue(np.all(np.isnan(cols['J_star'][:5])))
        self.assertFalse(np.isnan(cols['J_star'][5]))
        self.assertEqual('optimal', cols['status'][5])
        self.assertTrue(np.all(cols['y_ref'] == 0.5))
        for name in SOLVE_COLUMNS:
            self.assertIn(name, cols)

        value = float(stdout.split('=')[1])
        expect = float(np.sum(np.abs(cols['y1'] - 0.5)))
        self.assertAlmostEqual(expect, value, places=12)

    def test_simulate_round_trip(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        args = self._args('simulate', path, out=self._out('trace.csv'))
        self.assertEqual(0, self._run(args)[0])
        cols = read_trace(args.out)

        runcfg = config.read(path)
        trace = run_closed_loop(runcfg.plant, runcfg.x0, runcfg.controller, runcfg.strategy,
                                runcfg.t_end, runcfg.model_source)
        np.testing.assert_array_equal(trace.state_array()[:, 0], cols['x1'])
        np.testing.assert_array_equal(trace.input_array()[:, 0], cols['u1'][:-1])
        np.testing.assert_array_equal(trace.output_array()[:, 0], cols['y1'])
        for rec in trace.solves:
            for name in SOLVE_COLUMNS:
                self.assertEqual(getattr(rec, name), cols[name][rec.t], name)
            self.assertEqual(rec.status, cols['status'][rec.t])
            self.assertEqual('1' if rec.frozen else '0', cols['frozen'][rec.t])
        solved = {rec.t for rec in trace.solves}
        for t in range(trace.final_time + 1):
            if t not in solved:
                self.assertEqual('', cols['status'][t])

    def test_simulate_reactor_defaults(self):
        args = self._args('simulate', None, out=self._out('reactor.csv'))
        exitcode, stdout = self._run(args)
        self.assertEqual(0, exitcode)
        self.assertTrue(stdout.startswith('tracking_error = '))
        self.assertEqual(2502, len(self._read(args.out).splitlines()))
        cols = read_trace(args.out)
        self.assertEqual(2501, cols['t'].size)
        self.assertIn('x3', cols)

    def test_simulate_deterministic(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        first = self._args('simulate', path, out=self._out('first.csv'))
        second = self._args('simulate', path, out=self._out('second.csv'))
        self.assertEqual(0, self._run(first)[0])
        self.assertEqual(0, self._run(second)[0])
        self.assertEqual(self._read(first.out), self._read(second.out))

        other = self._args('simulate', path, out=self._out('other.csv'), seed=8)
        self.assertEqual(0, self._run(other)[0])
        self.assertNotEqual(self._read(first.out), self._read(other.out))

    def test_simulate_out_directory(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        os.makedirs(self._out(''))
        args = self._args('simulate', path, out=self._out(''))
        self.assertEqual(0, self._run(args)[0])
        self.assertTrue(os.path.exists(self._out('trace.csv')))

    def test_simulate_configured_path(self):
        target = self._out('configured.csv')
        path = render_config(self._dir, 'affine.cfg.jinja', trace=target)
        self.assertEqual(0, self._run(self._args('simulate', path))[0])
        self.assertTrue(os.path.exists(target))

    def test_default_config(self):
        target = self._out('default.csv')
        cfg_dir = os.path.join(os.environ['XDG_CONFIG_HOME'], 'idmpc')
        os.makedirs(cfg_dir)
        render_config(self._dir, 'affine.cfg.jinja', file_name=os.path.join(cfg_dir, 'run.cfg'),
                      trace=target, t_end=20)
        exitcode, _stdout = self._run(self._args('simulate', None))
        self.assertEqual(0, exitcode)
        self.assertEqual(22, len(self._read(target).splitlines()))

    def test_missing_config(self):
        args = self._args('simulate', os.path.join(self._dir.name, 'absent.cfg'))
        self.assertEqual(1, self._run(args)[0])

    def test_horizon_too_short(self):
        path = render_config(self._dir, 'two_state.cfg.jinja', L=1)
        args = self._args('simulate', path, out=self._out('trace.csv'))
        self.assertEqual(1, self._run(args)[0])
        self.assertFalse(os.path.exists(args.out))

    def test_unknown_key(self):
        path = render_config(self._dir, 'affine.cfg.jinja', extra='[extra]\nfoo = 1')
        self.assertEqual(1, self._run(self._args('simulate', path))[0])

    def test_invalid_value(self):
        path = render_config(self._dir, 'affine.cfg.jinja', N='many')
        self.assertEqual(1, self._run(self._args('simulate', path))[0])

    def test_end_before_bootstrap(self):
        path = render_config(self._dir, 'affine.cfg.jinja', t_end=3)
        self.assertEqual(1, self._run(self._args('simulate', path))[0])

    def test_two_state(self):
        path = render_config(self._dir, 'two_state.cfg.jinja')
        args = self._args('simulate', path, out=self._out('trace.csv'))
        self.assertEqual(0, self._run(args)[0])
        cols = read_trace(args.out)
        self.assertIn('x2', cols)
        solved = [idx for idx, val in enumerate(cols['status']) if val]
        self.assertEqual([8, 10, 12, 14, 16, 18, 20], solved)

    def test_sweep(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        args = self._args('sweep', path, out=self._out('sweep.csv'))
        exitcode, stdout = self._run(args)
        self.assertEqual(0, exitcode)
        self.assertEqual('cells succeeded = 2/4', stdout.strip())

        lines = self._read(args.out).splitlines()
        self.assertEqual(3, len(lines))
        self.assertEqual('N,1e-12,1e-08', lines[0])
        self.assertEqual('2,config_error,config_error', lines[1])
        row = lines[2].split(',')
        self.assertEqual('5', row[0])
        self.assertTrue(all(np.isfinite(float(val)) for val in row[1:]))

    def test_sweep_overrides(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        args = self._args('sweep', path, out=self._out('sweep.csv'),
                          lambda_values='1e-10', window_values='5,6,8')
        exitcode, stdout = self._run(args)
        self.assertEqual(0, exitcode)
        self.assertEqual('cells succeeded = 3/3', stdout.strip())
        lines = self._read(args.out).splitlines()
        self.assertEqual(['N,1e-10', '5', '6', '8'], [lines[0]] + [line.split(',')[0] for line in lines[1:]])

    def test_sweep_all_fail(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        args = self._args('sweep', path, out=self._out('sweep.csv'), window_values='2')
        exitcode, stdout = self._run(args)
        self.assertEqual(2, exitcode)
        self.assertEqual('cells succeeded = 0/2', stdout.strip())
        self.assertTrue(os.path.exists(args.out))

    def test_sweep_empty_lambda(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        args = self._args('sweep', path, out=self._out('sweep.csv'), lambda_values=',')
        self.assertEqual(1, self._run(args)[0])
        self.assertFalse(os.path.exists(args.out))

    def test_sweep_bad_workers(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        args = self._args('sweep', path, out=self._out('sweep.csv'), workers=0)
        self.assertEqual(1, self._run(args)[0])

    def test_diagnose(self):
        path = render_config(self._dir, 'affine.cfg.jinja')
        exitcode, stdout = self._run(self._args('diagnose', path))
        self.assertEqual(0, exitcode)
        lines = stdout.splitlines()
        self.assertTrue(lines[0].startswith('sigma_min(Z) = '))
        self.assertTrue(lines[0].endswith(' ok'))
        self.assertTrue(any(line.startswith('id_error = ') for line in lines))
        self.assertEqual('identified model recovers the plant linearization exactly', lines[-1])

    def test_diagnose_constant_input(self):
        path = render_config(self._dir, 'affine.cfg.jinja', amplitude=0.0)
        exitcode, stdout = self._run(self._args('diagnose', path))
        self.assertEqual(0, exitcode)
        self.assertIn('FLAGGED', stdout)
        self.assertNotIn('id_error', stdout)


if __name__ == '__main__':
    unittest.main()
