"""
Retained message sequences (the queue) with the per-entry execution data
the scheduler needs, and AFL-style favored-entry culling.
"""
import logging
from dataclasses import dataclass
from typing import Iterator, List, Optional

import numpy as np

from ipsm_fuzz.utils.coverage import MAP_SIZE
from ipsm_fuzz.utils.message_model import MessageSequence

logger = logging.getLogger(__name__)

ORIGIN_INITIAL = 'initial'
ORIGIN_MUTATED = 'mutated'


@dataclass
class SeedEntry:
    """ One corpus sequence.
    :param seq: the annotated sequence
    :param exec_time: microseconds of its last execution
    :param trace_hash: digest of its hit-count trace
    :param covered: bitmap indices its trace hit
    :param found_at: campaign clock (seconds) at insertion
    :param origin: 'initial' for captures, 'mutated' for finds
    :param source: corpus index of the seed it was mutated from """
    seq: MessageSequence
    exec_time: int
    trace_hash: str
    covered: np.ndarray
    found_at: float = 0.
    origin: str = ORIGIN_INITIAL
    source: Optional[int] = None
    index: int = -1
    favored: bool = False
    fuzz_level: int = 0

    @property
    def length(self) -> int:
        return self.seq.length

    @property
    def depth(self) -> int:
        return self.seq.depth

    @property
    def bitmap_size(self) -> int:
        return len(self.covered)

    @property
    def fav_factor(self) -> int:
        return max(self.exec_time, 1) * self.length


class Corpus:
    """ Queue of retained sequences in insertion order.

    For every bitmap index the entry with the smallest exec_time x length
    that covers it is its top-rated entry; a greedy pass over the indices
    marks a set of top-rated entries covering everything seen as favored. """

    def __init__(self, map_size: int = MAP_SIZE) -> None:
        self.entries: List[SeedEntry] = []
        self.map_size = map_size
        self._top_rated = np.full(map_size, -1, dtype=np.int64)
        self._top_score = np.full(map_size, np.iinfo(np.int64).max,
                                  dtype=np.int64)

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, index: int) -> SeedEntry:
        return self.entries[index]

    def __iter__(self) -> Iterator[SeedEntry]:
        return iter(self.entries)

    @property
    def n_favored(self) -> int:
        return sum(1 for e in self.entries if e.favored)

    def add(self, entry: SeedEntry) -> int:
        """ Append an entry and refresh the favored set.
        :return the corpus index of the entry """
        entry.index = len(self.entries)
        self.entries.append(entry)
        if len(entry.covered):
            idx = entry.covered
            better = entry.fav_factor < self._top_score[idx]
            self._top_rated[idx[better]] = entry.index
            self._top_score[idx[better]] = entry.fav_factor
        self.cull()
        return entry.index

    def cull(self) -> None:
        for entry in self.entries:
            entry.favored = False
        remaining = np.ones(self.map_size, dtype=bool)
        for idx in np.flatnonzero(self._top_rated >= 0):
            if not remaining[idx]:
                continue
            best = self.entries[self._top_rated[idx]]
            best.favored = True
            remaining[best.covered] = False

    def avg_exec_time(self) -> float:
        if not self.entries:
            return 0.
        return float(np.mean([e.exec_time for e in self.entries]))

    def avg_bitmap_size(self) -> float:
        if not self.entries:
            return 0.
        return float(np.mean([e.bitmap_size for e in self.entries]))
