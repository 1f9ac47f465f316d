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
''' Run configuration files and their mapping onto plants and controllers.

Files are INI-style and validated against the schema shipped in
``idmpc/data/runconfig.spec``. Keys are named ``section.key`` in messages.
'''
import logging
import os
from dataclasses import dataclass, field
from typing import List, Optional
import numpy as np
from configobj import ConfigObj, ConfigObjError, flatten_errors, get_extra_values
try:
    from configobj.validate import Validator
except ImportError:
    from validate import Validator
import xdg
from idmpc.loop import BootstrapStrategy
from idmpc.mpc import ConfigError as MpcConfigError, MpcConfig, StateBox
from idmpc.plant import AffinePlant, AugmentedPlant, CstrParams, CstrPlant, Plant
from idmpc.sysid import AffineModel, AssumptionThresholds


LOGGER = logging.getLogger(__name__)

#: The configuration schema
SPEC_PATH = os.path.join(os.path.dirname(__file__), 'data', 'runconfig.spec')


class ConfigError(ValueError):
    ''' A configuration file is unreadable, malformed or inconsistent. '''


def default_config_path() -> str:
    ''' The per-user configuration file location. '''
    return os.path.join(str(xdg.xdg_config_home()), 'idmpc', 'run.cfg')


@dataclass
class RunConfig:
    ''' Everything needed to run the scheme, resolved from a file.

    :ivar source: The file it was read from, if any.
    '''
    plant: Plant
    controller: MpcConfig
    strategy: BootstrapStrategy
    x0: np.ndarray
    t_end: int
    model_source: str = 'identified'
    error_offset: int = 0
    thresholds: AssumptionThresholds = field(default_factory=AssumptionThresholds)
    lambda_values: List[float] = field(default_factory=list)
    N_values: List[int] = field(default_factory=list)
    trace_path: str = 'trace.csv'
    sweep_path: str = 'sweep.csv'
    workers: int = 1
    source: Optional[str] = None


def load(path: Optional[str] = None) -> ConfigObj:
    ''' Read and validate a configuration file.

    :param path: The file to read. When omitted the per-user file is used if
        it exists, otherwise all defaults apply.
    :return: The validated contents with defaults filled in.
    :raise ConfigError: For unreadable files, invalid values or unknown keys.
    '''
    if path is None:
        candidate = default_config_path()
        if os.path.exists(candidate):
            path = candidate
    elif not os.path.exists(path):
        raise ConfigError(f'Config file does not exist: {path}')

    spec = ConfigObj(SPEC_PATH, interpolation=False, list_values=False, _inspec=True)
    try:
        conf = ConfigObj(path, configspec=spec, file_error=path is not None)
    except (ConfigObjError, IOError) as err:
        raise ConfigError(f'Cannot parse {path}: {err}') from err
    if path is not None:
        LOGGER.info('Loading config from %s', path)

    result = conf.validate(Validator(), preserve_errors=True)
    if result is not True:
        problems = []
        for sections, key, err in flatten_errors(conf, result):
            name = '.'.join(sections + [key]) if key else '.'.join(sections)
            problems.append(f'{name}: {err if err else "missing"}')
        raise ConfigError('Invalid config: ' + '; '.join(problems))

    extra = get_extra_values(conf)
    if extra:
        names = ['.'.join(list(sections) + [key]) for sections, key in extra]
        raise ConfigError('Unknown config keys: ' + ', '.join(sorted(names)))
    return conf


def _matrix(values, rows: int, cols: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.size != rows * cols:
        raise ConfigError(f'{name} has {arr.size} values, expected {rows * cols}')
    return arr.reshape(rows, cols)


def _weight(values, dim: int, name: str) -> np.ndarray:
    arr = np.array(values, dtype=float)
    if arr.size == 1:
        return float(arr[0]) * np.eye(dim)
    if arr.size == dim:
        return np.diag(arr)
    if arr.size == dim * dim:
        return arr.reshape(dim, dim)
    raise ConfigError(f'{name} needs 1, {dim} or {dim * dim} values, got {arr.size}')


def build_plant(conf: ConfigObj) -> Plant:
    ''' Construct the configured plant. '''
    section = conf['plant']
    if section['kind'] == 'cstr':
        cstr = conf['cstr']
        try:
            plant = CstrPlant(CstrParams(
                ts=cstr['ts'], theta=cstr['theta'], kbar=cstr['kbar'], M=cstr['M'],
                xf=cstr['xf'], xc=cstr['xc'], alpha=cstr['alpha'],
                reaction_form=cstr['reaction_form'],
            ))
        except ValueError as err:
            raise ConfigError(f'cstr: {err}') from err
    else:
        aff = conf['affine']
        n, m, p = aff['n'], aff['m'], aff['p']
        plant = AffinePlant(AffineModel(
            A=_matrix(aff['A'], n, n, 'affine.A'), B=_matrix(aff['B'], n, m, 'affine.B'),
            e=_matrix(aff['e'], n, 1, 'affine.e').reshape(n),
            C=_matrix(aff['C'], p, n, 'affine.C'), D=_matrix(aff['D'], p, m, 'affine.D'),
            r=_matrix(aff['r'], p, 1, 'affine.r').reshape(p),
        ))
    if section['augment']:
        plant = AugmentedPlant(plant)
    return plant


def build_mpc(conf: ConfigObj, plant: Plant) -> MpcConfig:
    ''' Construct the controller configuration for a plant.

    For augmented plants the physical input sets move onto the stored-input
    state components and the increment bounds become the input sets.
    '''
    sec = conf['mpc']
    n, m, p = plant.state_dim, plant.input_dim, plant.output_dim
    kwargs = {}
    if isinstance(plant, AugmentedPlant):
        index = tuple(range(plant.inner.state_dim, n))
        kwargs['state_box'] = StateBox(
            index=index, lo=sec['u_lo'], hi=sec['u_hi'], s_lo=sec['us_lo'], s_hi=sec['us_hi'],
        )
        bounds = ('du_lo', 'du_hi', 'dus_lo', 'dus_hi')
    else:
        bounds = ('u_lo', 'u_hi', 'us_lo', 'us_hi')
    try:
        return MpcConfig(
            Q=_weight(sec['Q'], n, 'mpc.Q'), R=_weight(sec['R'], m, 'mpc.R'),
            S=_weight(sec['S'], p, 'mpc.S'), y_r=sec['y_r'],
            u_lo=sec[bounds[0]], u_hi=sec[bounds[1]], us_lo=sec[bounds[2]], us_hi=sec[bounds[3]],
            L=sec['L'], N=sec['N'], n_apply=sec['n_apply'] or None,
            lam=conf['sysid']['lam'], stop_threshold=conf['sysid']['stop_threshold'],
            pe_threshold=conf['sysid']['sigma_z'],
            ss_tol=sec['ss_tol'], qp_tol=sec['qp_tol'], qp_max_iter=sec['qp_max_iter'],
            **kwargs
        )
    except MpcConfigError as err:
        raise ConfigError(f'mpc: {err}') from err


def build(conf: ConfigObj, source: Optional[str] = None) -> RunConfig:
    ''' Resolve validated file contents into a :class:`RunConfig`.

    :raise ConfigError: If the contents are inconsistent.
    '''
    plant = build_plant(conf)
    cfg = build_mpc(conf, plant)

    run = conf['run']
    x0 = np.array(run['x0'], dtype=float)
    if x0.size != plant.state_dim:
        raise ConfigError(f'run.x0 has {x0.size} values, the plant has {plant.state_dim} states')
    if run['t_end'] < cfg.N:
        raise ConfigError(f'run.t_end={run["t_end"]} is before the bootstrap end N={cfg.N}')

    boot = conf['bootstrap']
    nominal = np.array(boot['nominal'], dtype=float) if boot['nominal'] else None
    strategy = BootstrapStrategy(variant=boot['variant'], amplitude=boot['amplitude'],
                                 seed=boot['seed'], nominal=nominal)
    sysid = conf['sysid']
    return RunConfig(
        plant=plant, controller=cfg, strategy=strategy, x0=x0, t_end=run['t_end'],
        model_source=run['model_source'], error_offset=run['error_offset'],
        thresholds=AssumptionThresholds(
            sigma_s=sysid['sigma_s'], sigma_c=sysid['sigma_c'],
            sigma_l=sysid['sigma_l'], sigma_z=sysid['sigma_z'],
        ),
        lambda_values=list(conf['sweep']['lambda_values']),
        N_values=list(conf['sweep']['N_values']),
        trace_path=conf['output']['trace'], sweep_path=conf['output']['sweep'],
        workers=conf['output']['workers'], source=source,
    )


def read(path: Optional[str] = None) -> RunConfig:
    ''' Load, validate and resolve a configuration file. '''
    return build(load(path), source=path)
