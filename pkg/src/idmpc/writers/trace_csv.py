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
''' The per-time-step closed-loop trace as CSV.

Solve-instant columns are empty on rows without a solve, and the input
columns are empty on the final row.
'''
import csv
from collections import OrderedDict
from typing import Dict, List, TextIO
import numpy as np
from idmpc.loop import ClosedLoopTrace
from idmpc.writers.base import AbstractWriter, format_number

#: Columns filled only at solve instants
SOLVE_COLUMNS = ('J_star', 'J_hat_star', 'V', 'sigma_min_Z', 'id_error')
#: Text columns
TEXT_COLUMNS = ('status', 'frozen')


def header(n: int, m: int, p: int) -> List[str]:
    ''' Column names for given dimensions. '''
    names = ['t']
    names += [f'x{idx + 1}' for idx in range(n)]
    names += [f'u{idx + 1}' for idx in range(m)]
    names += [f'y{idx + 1}' for idx in range(p)]
    names += ['y_ref'] if p == 1 else [f'y_ref{idx + 1}' for idx in range(p)]
    names += list(SOLVE_COLUMNS) + list(TEXT_COLUMNS)
    return names


class Writer(AbstractWriter):
    ''' Writes one closed-loop trace. '''
    default_name = 'trace.csv'

    def __init__(self, trace: ClosedLoopTrace, out_path: str):
        super().__init__(out_path)
        self.trace = trace

    def write(self, outfile: TextIO):
        trace = self.trace
        states = trace.state_array()
        n = states.shape[1]
        m = len(trace.inputs[0]) if trace.inputs else 0
        p = trace.y_r.size
        solves = {rec.t: rec for rec in trace.solves}

        out = csv.writer(outfile, lineterminator='\n')
        out.writerow(header(n, m, p))
        for t in range(trace.final_time + 1):
            row = [str(t)]
            row += [format_number(val) for val in states[t]]
            if t < len(trace.inputs):
                row += [format_number(val) for val in trace.inputs[t]]
            else:
                row += [''] * m
            row += [format_number(val) for val in trace.outputs[t]]
            row += [format_number(val) for val in trace.y_r]
            rec = solves.get(t)
            if rec is None:
                row += [''] * (len(SOLVE_COLUMNS) + len(TEXT_COLUMNS))
            else:
                row += [format_number(getattr(rec, name)) for name in SOLVE_COLUMNS]
                row += [rec.status, '1' if rec.frozen else '0']
            out.writerow(row)


def read_trace(path: str) -> Dict[str, np.ndarray]:
    ''' Parse a written trace back into columns.

    Numeric columns become float arrays with NaN for empty cells; text
    columns become object arrays.
    '''
    with open(path, 'r', newline='') as infile:
        reader = csv.reader(infile)
        names = next(reader)
        rows = list(reader)

    columns = OrderedDict()
    for idx, name in enumerate(names):
        cells = [row[idx] for row in rows]
        if name in TEXT_COLUMNS:
            columns[name] = np.array(cells, dtype=object)
        elif name == 't':
            columns[name] = np.array([int(cell) for cell in cells], dtype=int)
        else:
            columns[name] = np.array([float(cell) if cell else np.nan for cell in cells])
    return columns
