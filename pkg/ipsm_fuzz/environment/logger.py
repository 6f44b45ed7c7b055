import csv
import math
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

STATS_HEADER = ('unix_time', 'total_execs', 'corpus_size', 'branches',
                'states', 'transitions', 'crashes')
STATS_INTERVAL_S = 5.


class CampaignLogger:
    """ Class to log the coverage time series of a fuzzing campaign. Rows
    are kept in memory and, when a path is given, appended to a CSV file
    as they are taken. Time is campaign-relative seconds. """
    def __init__(self, csv_path: Optional[Path] = None,
                 interval_s: float = STATS_INTERVAL_S) -> None:
        if interval_s <= 0:
            raise ValueError("interval_s must be positive")
        self.csv_path = Path(csv_path) if csv_path is not None else None
        self.interval_s = interval_s
        self.log_all: List[Tuple] = []
        self._next_mark = interval_s

        if self.csv_path is not None:
            with self.csv_path.open('w', newline='') as fh:
                csv.writer(fh).writerow(STATS_HEADER)

    def clear_all(self) -> None:
        """ Clear all rows (the CSV file is left alone). """
        self.log_all = []
        self._next_mark = self.interval_s

    def log(self, now_s: float, total_execs: int, corpus_size: int,
            branches: int, states: int, transitions: int,
            crashes: int) -> None:
        """ Take one row unconditionally. """
        row = (round(now_s, 3), total_execs, corpus_size, branches, states,
               transitions, crashes)
        self.log_all.append(row)
        if self.csv_path is not None:
            with self.csv_path.open('a', newline='') as fh:
                csv.writer(fh).writerow(
                    (f'{row[0]:.3f}',) + tuple(str(v) for v in row[1:]))

    def due(self, now_s: float) -> bool:
        return now_s >= self._next_mark

    def maybe_log(self, now_s: float, *values: int) -> bool:
        """ Take a row if the clock passed the next interval mark.
        :return whether a row was taken """
        if not self.due(now_s):
            return False
        self.log(now_s, *values)
        self._next_mark = (math.floor(now_s / self.interval_s) + 1) \
            * self.interval_s
        return True

    def extract_stats_data(self) -> dict:
        """ Columns of the logged rows as numpy arrays, keyed by the CSV
        header names. """
        data = {}
        for i, key in enumerate(STATS_HEADER):
            dtype = float if key == 'unix_time' else np.int64
            data[key] = np.array([row[i] for row in self.log_all],
                                 dtype=dtype)
        return data


def read_stats_csv(path: Path) -> dict:
    """ Load a stats.csv written by CampaignLogger into numpy columns. """
    with Path(path).open(newline='') as fh:
        rows = list(csv.DictReader(fh))
    data = {}
    for key in STATS_HEADER:
        if key == 'unix_time':
            data[key] = np.array([float(row[key]) for row in rows])
        else:
            data[key] = np.array([int(row[key]) for row in rows],
                                 dtype=np.int64)
    return data
