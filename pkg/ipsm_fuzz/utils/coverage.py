"""
Shared coverage bitmap: state-transition hits live in the low SHIFT_SIZE
entries, code-edge hits above them.
"""
from collections import Counter
from dataclasses import dataclass
from hashlib import blake2b
from typing import Iterable, NamedTuple, Tuple

import numpy as np

from .protocol_codec import STATE_SIZE

MAP_SIZE = 1 << 16
SHIFT_SIZE = MAP_SIZE // 2

REGION_STATE = 'state'
REGION_CODE = 'code'
ALL_REGIONS = (REGION_STATE, REGION_CODE)


class CoverageShapeError(ValueError):
    pass


def _count_class_lookup() -> np.ndarray:
    """ Hit-count buckets: 0, 1, 2, 3, 4-7, 8-15, 16-31, 32-127, 128-255,
    each mapped to its own bit. """
    lookup = np.zeros(256, dtype=np.uint8)
    lookup[1] = 1
    lookup[2] = 2
    lookup[3] = 4
    lookup[4:8] = 8
    lookup[8:16] = 16
    lookup[16:32] = 32
    lookup[32:128] = 64
    lookup[128:256] = 128
    return lookup


COUNT_CLASS_LOOKUP = _count_class_lookup()


class EdgeKey(NamedTuple):
    """ Branch keys of the source and destination basic blocks. """
    prev_loc: int
    cur_loc: int


@dataclass(frozen=True)
class CoverageDelta:
    """ Novelty of one execution.
    new_bits: an entry never hit before was hit
    new_bucket: a hit entry moved into a hit-count bucket not seen before
    new_state_bits / new_code_bits: any novelty inside that region """
    new_bits: bool = False
    new_bucket: bool = False
    new_state_bits: bool = False
    new_code_bits: bool = False

    @property
    def interesting(self) -> bool:
        return self.new_bits or self.new_bucket


def _check_sizes(map_size: int, shift_size: int) -> None:
    if not 0 <= shift_size < map_size:
        raise ValueError(f"need 0 <= shift_size < map_size, got "
                         f"shift_size={shift_size}, map_size={map_size}")
    for name, value in (('map_size', map_size), ('shift_size', shift_size)):
        if value and value & (value - 1):
            raise ValueError(f"{name} must be a power of two, got {value}")


def code_index(prev_loc: int, cur_loc: int, map_size: int = MAP_SIZE,
               shift_size: int = SHIFT_SIZE) -> int:
    """ Bitmap index of a code edge, shifted past the state region. """
    return ((cur_loc ^ (prev_loc >> 1)) % (map_size - shift_size)) \
        + shift_size


def state_index(prev_state: int, cur_state: int,
                state_size: int = STATE_SIZE,
                shift_size: int = SHIFT_SIZE) -> int:
    """ Bitmap index of a state transition, inside the state region. """
    if shift_size == 0:
        raise ValueError("no state region reserved (shift_size == 0)")
    return (prev_state * state_size + cur_state) % shift_size


def new_trace(map_size: int = MAP_SIZE) -> np.ndarray:
    """ Fresh per-execution hit-count map. """
    return np.zeros(map_size, dtype=np.uint8)


def _bump(trace: np.ndarray, idx: int) -> None:
    if trace[idx] < 255:
        trace[idx] += 1


def record_edge(trace: np.ndarray, key: EdgeKey,
                shift_size: int = SHIFT_SIZE) -> int:
    """ Count one hit of a code edge (saturating at 255).
    :return the bitmap index that was incremented """
    idx = code_index(key.prev_loc, key.cur_loc, trace.shape[0], shift_size)
    _bump(trace, idx)
    return idx


def record_transition(trace: np.ndarray, prev_state: int, cur_state: int,
                      state_size: int = STATE_SIZE,
                      shift_size: int = SHIFT_SIZE) -> int:
    """ Count one hit of a state transition (saturating at 255).
    :return the bitmap index that was incremented """
    idx = state_index(prev_state, cur_state, state_size, shift_size)
    _bump(trace, idx)
    return idx


def record_state_walk(trace: np.ndarray, state_seq: Iterable[int],
                      state_size: int = STATE_SIZE,
                      shift_size: int = SHIFT_SIZE) -> None:
    """ Record every consecutive transition of a state sequence, starting
    from the implicit initial state 0. """
    if shift_size == 0:
        return
    prev = 0
    for state in state_seq:
        record_transition(trace, prev, state, state_size, shift_size)
        prev = state


def trace_hash(trace: np.ndarray) -> str:
    return blake2b(trace.tobytes(), digest_size=8).hexdigest()


class CoverageBitmap:
    """ Campaign-wide coverage record.
    :param map_size: number of bitmap entries (power of two)
    :param shift_size: entries reserved for state transitions, 0 disables
    the state region
    :param state_size: maximum number of state keys """

    def __init__(self, map_size: int = MAP_SIZE,
                 shift_size: int = SHIFT_SIZE,
                 state_size: int = STATE_SIZE) -> None:
        _check_sizes(map_size, shift_size)
        self.map_size = map_size
        self.shift_size = shift_size
        self.state_size = state_size
        # Union of the bucketed classes seen so far, per entry.
        self.map = np.zeros(map_size, dtype=np.uint8)
        self.virgin_map = np.full(map_size, 0xFF, dtype=np.uint8)
        # How often classify looked at each region; used to audit that a
        # campaign mode only reads the regions it is allowed to.
        self.inspections: Counter = Counter()

    def new_trace(self) -> np.ndarray:
        return new_trace(self.map_size)

    def region_slice(self, region: str) -> slice:
        if region == REGION_STATE:
            return slice(0, self.shift_size)
        if region == REGION_CODE:
            return slice(self.shift_size, self.map_size)
        raise ValueError(f"unknown bitmap region '{region}'")

    def classify(self, trace: np.ndarray,
                 regions: Tuple[str, ...] = ALL_REGIONS) -> CoverageDelta:
        """ Bucket the raw hit counts of one execution and compare them with
        everything seen so far, inside the enabled regions only. The virgin
        map of those regions is updated.
        :param trace: per-execution hit-count map
        :param regions: bitmap regions to inspect
        :return novelty summary """
        if trace.shape != self.virgin_map.shape:
            raise CoverageShapeError(
                f"trace has shape {trace.shape}, bitmap has "
                f"{self.virgin_map.shape}")

        classified = COUNT_CLASS_LOOKUP[trace]
        flags = {}
        new_bits = False
        new_bucket = False
        for region in ALL_REGIONS:
            if region not in regions:
                flags[region] = False
                continue
            self.inspections[region] += 1
            part = self.region_slice(region)
            virgin = self.virgin_map[part]
            hits = classified[part] & virgin
            novel = hits != 0
            if not novel.any():
                flags[region] = False
                continue
            untouched = virgin == 0xFF
            new_bits |= bool(np.any(novel & untouched))
            new_bucket |= bool(np.any(novel & ~untouched))
            virgin &= ~classified[part]
            self.map[part] |= classified[part]
            flags[region] = True

        return CoverageDelta(new_bits=new_bits, new_bucket=new_bucket,
                             new_state_bits=flags[REGION_STATE],
                             new_code_bits=flags[REGION_CODE])

    def count_nonzero(self, region: str) -> int:
        return int(np.count_nonzero(self.map[self.region_slice(region)]))


class CoverageMeasure:
    """ Cumulative hit record fed by every execution, independent of the
    feedback regions a campaign mode uses. Backs the branch count reported
    in the campaign statistics. """

    def __init__(self, map_size: int = MAP_SIZE,
                 shift_size: int = SHIFT_SIZE) -> None:
        _check_sizes(map_size, shift_size)
        self.shift_size = shift_size
        self.seen = np.zeros(map_size, dtype=bool)

    def add(self, trace: np.ndarray) -> None:
        self.seen |= trace != 0

    @property
    def branches_covered(self) -> int:
        return int(np.count_nonzero(self.seen[self.shift_size:]))

    @property
    def transitions_covered(self) -> int:
        return int(np.count_nonzero(self.seen[:self.shift_size]))
