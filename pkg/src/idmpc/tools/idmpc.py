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
''' Adaptive tracking MPC of unknown plants through online least-squares
identification.
'''
import argparse
import logging
import os
import sys
from idmpc import config
from idmpc.analysis import (
    DEFAULT_HORIZON, SweepSpec, id_error_diagnostic, run_sweep, tracking_error,
)
from idmpc.loop import BootstrapError, bootstrap, run_closed_loop
from idmpc.plant import PlantDomainError
from idmpc.sysid import SingularRegressorError, assumption_report, identify, pe_metric
from idmpc.writers import sweep_csv, trace_csv
from idmpc.writers.base import format_number


LOGGER = logging.getLogger(__name__)

#: Identification error below which a model is reported as exact
EXACT_RECOVERY_TOL = 1e-8


def get_parser() -> argparse.ArgumentParser:
    ''' Construct the argument parser. '''
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config',
                        help='The run configuration file; defaults to the per-user file')
    common.add_argument('-o', '--out',
                        help='The output file, overriding the configured path')
    common.add_argument('--seed', type=int,
                        help='The bootstrap seed, overriding bootstrap.seed')

    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument('--log-level', choices=('debug', 'info', 'warning', 'error'),
                   default='info',
                   help='The minimum log severity.')
    sub = p.add_subparsers(dest='command', metavar='COMMAND')
    sub.required = True
    sub.add_parser('simulate', parents=[common],
                   help='Run one closed loop and write its trace')
    sweep = sub.add_parser('sweep', parents=[common],
                           help='Run the regularization and window-length grid')
    sweep.add_argument('--workers', type=int,
                       help='Concurrent worker processes, overriding output.workers')
    sweep.add_argument('--lambda', dest='lambda_values',
                       help='Comma-separated regularization values')
    sweep.add_argument('--window', dest='window_values',
                       help='Comma-separated window lengths')
    sub.add_parser('diagnose', parents=[common],
                   help='Bootstrap, identify once and report the rank assumptions')
    return p


def _parse_list(text: str, kind, name: str) -> list:
    try:
        values = [kind(item) for item in text.split(',') if item.strip()]
    except ValueError as err:
        raise config.ConfigError(f'Bad {name} list "{text}": {err}') from err
    if not values:
        raise config.ConfigError(f'Empty {name} list')
    return values


def _write(writer) -> bool:
    ''' Write one output file, creating its directory.

    :return: True if the file was written.
    '''
    file_path = writer.file_path()
    dir_path = os.path.dirname(file_path)
    try:
        if dir_path and not os.path.exists(dir_path):
            os.makedirs(dir_path)
        LOGGER.info('Writing %s ...', file_path)
        with open(file_path, 'w', newline='') as outfile:
            writer.write(outfile)
    except IOError as err:
        LOGGER.error('Failed to write %s: %s', file_path, err)
        return False
    return True


def cmd_simulate(args: argparse.Namespace, runcfg: config.RunConfig) -> int:
    cfg = runcfg.controller
    try:
        trace = run_closed_loop(runcfg.plant, runcfg.x0, cfg, runcfg.strategy, runcfg.t_end,
                                runcfg.model_source)
    except (BootstrapError, PlantDomainError) as err:
        LOGGER.error('Run aborted: %s', err)
        return 2

    if not _write(trace_csv.Writer(trace, args.out or runcfg.trace_path)):
        return 2
    if not trace.complete:
        LOGGER.error('Run aborted at t=%d: %s', trace.final_time, trace.message)
        return 2

    err = tracking_error(trace, cfg.y_r, T=min(DEFAULT_HORIZON, trace.final_time),
                         start=runcfg.error_offset)
    print(f'tracking_error = {format_number(err)}')
    return 0


def cmd_sweep(args: argparse.Namespace, runcfg: config.RunConfig) -> int:
    lambdas = runcfg.lambda_values
    windows = runcfg.N_values
    if args.lambda_values is not None:
        lambdas = _parse_list(args.lambda_values, float, 'lambda')
    if args.window_values is not None:
        windows = _parse_list(args.window_values, int, 'window')
    try:
        spec = SweepSpec(lambda_values=lambdas, N_values=windows)
    except ValueError as err:
        raise config.ConfigError(str(err)) from err
    workers = args.workers if args.workers is not None else runcfg.workers
    if workers < 1:
        raise config.ConfigError(f'Worker count must be positive, got {workers}')

    grid = run_sweep(runcfg.plant, runcfg.controller, spec, runcfg.x0, runcfg.strategy,
                     runcfg.t_end, workers=workers, model_source=runcfg.model_source,
                     error_offset=runcfg.error_offset)
    if not _write(sweep_csv.Writer(grid, args.out or runcfg.sweep_path)):
        return 2
    print(f'cells succeeded = {grid.success_count}/{len(grid.cells)}')
    return 0 if grid.success_count else 2


def cmd_diagnose(_args: argparse.Namespace, runcfg: config.RunConfig) -> int:
    cfg = runcfg.controller
    limits = runcfg.thresholds
    try:
        window = bootstrap(runcfg.plant, runcfg.x0, cfg, runcfg.strategy)
    except BootstrapError as err:
        if err.sigma_min is None:
            LOGGER.error('Bootstrap failed: %s', err)
            return 2
        print(f'sigma_min(Z) = {err.sigma_min:.6e} FLAGGED (not persistently exciting)')
        return 0
    except PlantDomainError as err:
        LOGGER.error('Bootstrap failed: %s', err)
        return 2

    sigma_z = pe_metric(window)
    flag = 'ok' if sigma_z > limits.sigma_z else 'FLAGGED'
    print(f'sigma_min(Z) = {sigma_z:.6e} {flag}')
    try:
        model = identify(window, cfg.lam)
    except SingularRegressorError as err:
        print(f'identification failed: {err}')
        return 0

    report = assumption_report(model, limits)
    for label, value, passed in report.rows():
        print(f'{label} = {value:.6e} {"ok" if passed else "FLAGGED"}')
    id_err = id_error_diagnostic(model, runcfg.plant, window.states[:, -1])
    print(f'id_error = {id_err:.6e}')
    if id_err <= EXACT_RECOVERY_TOL:
        print('identified model recovers the plant linearization exactly')
    return 0


COMMANDS = {
    'simulate': cmd_simulate,
    'sweep': cmd_sweep,
    'diagnose': cmd_diagnose,
}


def run(args: argparse.Namespace) -> int:
    ''' Execute one subcommand.

    :return: 0 on success, 1 on a configuration error, 2 when the run was
        aborted.
    '''
    try:
        conf = config.load(args.config)
        if args.seed is not None:
            conf['bootstrap']['seed'] = args.seed
        runcfg = config.build(conf, source=args.config)
    except config.ConfigError as err:
        LOGGER.error('Config error: %s', err)
        return 1

    try:
        return COMMANDS[args.command](args, runcfg)
    except config.ConfigError as err:
        LOGGER.error('Config error: %s', err)
        return 1


def main():
    ''' Script entrypoint. '''
    parser = get_parser()
    args = parser.parse_args()
    logging.basicConfig(level=args.log_level.upper())
    return run(args)


if __name__ == '__main__':
    sys.exit(main())
