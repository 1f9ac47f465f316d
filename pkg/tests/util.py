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
''' Shared test fixture utilities.
'''
import os
import tempfile
import jinja2
import numpy as np
from idmpc.loop import BootstrapStrategy, run_closed_loop
from idmpc.mpc import MpcConfig, StateBox
from idmpc.plant import AugmentedPlant, CstrParams, CstrPlant

#: Directory containing this file
SELFDIR = os.path.dirname(__file__)


class TmpDir:
    ''' A temporary test directory with associated XDG environment.

    :param kwargs: Arguments to pass down to :class:`tempfile.TemporaryDirectory`.
    '''

    def __init__(self, **kwargs):
        self._dir = tempfile.TemporaryDirectory(**kwargs)  # pylint: disable=consider-using-with
        os.environ['XDG_CONFIG_HOME'] = os.path.join(self._dir.name, 'home', 'config')
        os.environ['XDG_CACHE_HOME'] = os.path.join(self._dir.name, 'home', 'cache')
        os.environ['XDG_DATA_HOME'] = os.path.join(self._dir.name, 'home', 'data')
        os.environ['XDG_DATA_DIRS'] = os.path.join(self._dir.name, 'usr', 'data')

    def __del__(self):
        self._dir.cleanup()

    @property
    def name(self) -> str:
        return self._dir.name


def render_config(tmpdir: TmpDir, template: str, file_name: str = 'run.cfg', **params) -> str:
    ''' Render a config template from the 'tests/data' directory into a
    temporary file.

    :return: The path of the rendered file.
    '''
    env = jinja2.Environment(
        loader=jinja2.FileSystemLoader(os.path.join(SELFDIR, 'data')),
        keep_trailing_newline=True
    )
    path = os.path.join(tmpdir.name, file_name)
    with open(path, 'w') as outfile:
        outfile.write(env.get_template(template).render(**params))
    return path


def cstr_setup():
    ''' The augmented reactor with the case-study controller settings.

    :return: Tuple of plant, controller config and initial state.
    '''
    plant = AugmentedPlant(CstrPlant(CstrParams(reaction_form='bilinear')))
    cfg = MpcConfig(
        Q=np.eye(3), R=0.05, S=100.0, y_r=0.6519,
        u_lo=-10.0, u_hi=10.0, us_lo=-9.99, us_hi=9.99, L=41, N=25, lam=1e-12,
        state_box=StateBox(index=(2,), lo=0.1, hi=2.0, s_lo=0.11, s_hi=1.99),
    )
    return plant, cfg, np.array([0.4, 0.6, 0.1])


_CSTR_TRACE = []


def cstr_trace():
    ''' The full-length reactor run, computed once per test session. '''
    if not _CSTR_TRACE:
        plant, cfg, x0 = cstr_setup()
        _CSTR_TRACE.append(run_closed_loop(plant, x0, cfg, BootstrapStrategy(), 2500))
    return _CSTR_TRACE[0]
