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
''' Abstract base behavior for all output writers.
'''
import os
from typing import TextIO

#: Significant digits of every written number
DIGITS = 17


def format_number(value) -> str:
    ''' Locale-independent decimal text that parses back to the same float. '''
    return format(float(value), f'.{DIGITS}g')


class AbstractWriter:
    ''' Interface for any writer class.

    :ivar out_path: The output file, or a directory to place the default
        file name under.
    '''
    #: File name used when :attr:`out_path` is a directory
    default_name = None

    def __init__(self, out_path: str):
        self.out_path = out_path

    def file_path(self) -> str:
        ''' Get the path to the file to be written.
        This is derived from :attr:`out_path`.

        :return: The full path for the file.
        '''
        if os.path.isdir(self.out_path) and self.default_name:
            return os.path.join(self.out_path, self.default_name)
        return self.out_path

    def write(self, outfile: TextIO):
        ''' Write the whole file contents.

        :param outfile: The file object to write to.
        '''
        raise NotImplementedError
