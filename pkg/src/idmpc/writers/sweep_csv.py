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
''' The robustness sweep as a CSV matrix with window lengths as rows and
regularization values as columns. Failed cells hold their status token.
'''
import csv
from typing import TextIO
from idmpc.analysis import SweepGrid
from idmpc.writers.base import AbstractWriter, format_number


class Writer(AbstractWriter):
    ''' Writes one sweep grid. '''
    default_name = 'sweep.csv'

    def __init__(self, grid: SweepGrid, out_path: str):
        super().__init__(out_path)
        self.grid = grid

    def write(self, outfile: TextIO):
        grid = self.grid
        out = csv.writer(outfile, lineterminator='\n')
        out.writerow(['N'] + [repr(float(lam)) for lam in grid.lambda_values])
        for win in grid.N_values:
            row = [str(win)]
            for lam in grid.lambda_values:
                cell = grid.cell(win, lam)
                row.append(format_number(cell.tracking_error) if cell.succeeded else cell.status)
            out.writerow(row)
