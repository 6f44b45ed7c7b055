"""
Request sequence parsing and response status-code extraction.

A capture is a file of concatenated request payloads; the codec of the
protocol tells where one request ends and how a server states its status.
"""
import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

from .message_model import MessageSequence, Region, StateId

logger = logging.getLogger(__name__)

STATE_SIZE = 256

# Shared raw code for responses without a parseable status code.
UNKNOWN_RAW_CODE = 0


class CodecError(ValueError):
    pass


class StateRegistryFull(RuntimeError):
    pass


@dataclass(frozen=True)
class CodecSpec:
    """ Protocol-specific message boundary and status code rules.
    :param name: protocol identifier
    :param terminator: boundary rule, requests end with these bytes
    :param length_width: boundary rule, requests start with a big-endian
    length prefix of this many bytes (1, 2 or 4) counting the payload after
    the prefix. Exactly one of terminator / length_width is set.
    :param status_max_digits: status rule 'leading_decimal', the number of
    digits of a line-initial status code
    :param status_offset: status rule 'fixed_offset', byte offset of the code
    in the response
    :param status_width: width of the fixed-offset code in bytes
    :param status_ascii: fixed-offset code is ASCII decimal (True) or a
    big-endian integer (False) """
    name: str
    terminator: Optional[bytes] = None
    length_width: Optional[int] = None
    status_max_digits: Optional[int] = 3
    status_offset: Optional[int] = None
    status_width: Optional[int] = None
    status_ascii: bool = True

    def __post_init__(self) -> None:
        if (self.terminator is None) == (self.length_width is None):
            raise CodecError(f"codec {self.name}: set exactly one of "
                             f"terminator and length_width")
        if self.terminator is not None and len(self.terminator) == 0:
            raise CodecError(f"codec {self.name}: empty terminator")
        if self.length_width is not None and \
                self.length_width not in (1, 2, 4):
            raise CodecError(f"codec {self.name}: length prefix width must "
                             f"be 1, 2 or 4, got {self.length_width}")
        if self.status_offset is not None:
            if self.status_width is None or self.status_width < 1:
                raise CodecError(f"codec {self.name}: fixed offset status "
                                 f"rule needs a positive width")
        elif self.status_max_digits is None or self.status_max_digits < 1:
            raise CodecError(f"codec {self.name}: leading decimal status "
                             f"rule needs max_digits >= 1")

    @property
    def boundary_rule(self) -> str:
        return 'terminator' if self.terminator is not None \
            else 'length_prefix'

    @property
    def status_rule(self) -> str:
        return 'fixed_offset' if self.status_offset is not None \
            else 'leading_decimal'


CODECS: Dict[str, CodecSpec] = {
    'ftp': CodecSpec('ftp', terminator=b'\r\n', status_max_digits=3),
    'ftp-like': CodecSpec('ftp-like', terminator=b'\n', status_max_digits=3),
    'rtsp': CodecSpec('rtsp', terminator=b'\r\n\r\n', status_max_digits=None,
                      status_offset=9, status_width=3),
    'linemux': CodecSpec('linemux', length_width=2, status_max_digits=None,
                         status_offset=0, status_width=2,
                         status_ascii=False),
}


def get_codec(name: str) -> CodecSpec:
    try:
        return CODECS[name]
    except KeyError:
        raise CodecError(f"unknown codec '{name}', choose one of "
                         f"{sorted(CODECS)}") from None


def split_requests(codec: CodecSpec, raw: bytes) -> MessageSequence:
    """ Split a raw capture into its requests. Trailing bytes that do not
    form a complete request are kept as a last region flagged incomplete.
    :param codec: protocol codec
    :param raw: concatenated request payloads
    :return unannotated message sequence covering raw exactly """
    if not raw:
        raise CodecError("cannot split an empty capture")

    bounds = []
    pos = 0
    n = len(raw)
    while pos < n:
        if codec.terminator is not None:
            hit = raw.find(codec.terminator, pos)
            if hit < 0:
                bounds.append((pos, n, True))
                break
            end = hit + len(codec.terminator)
            bounds.append((pos, end, False))
            pos = end
        else:
            width = codec.length_width
            if n - pos < width:
                bounds.append((pos, n, True))
                break
            size = int.from_bytes(raw[pos:pos + width], 'big')
            end = pos + width + size
            if end > n:
                bounds.append((pos, n, True))
                break
            bounds.append((pos, end, False))
            pos = end

    regions = [Region(start, end, (), incomplete)
               for start, end, incomplete in bounds]
    return MessageSequence(buffer=raw, regions=regions)


_LEADING_CODE_CACHE: Dict[int, 're.Pattern'] = {}


def _leading_code_pattern(max_digits: int) -> 're.Pattern':
    pattern = _LEADING_CODE_CACHE.get(max_digits)
    if pattern is None:
        # A code is max_digits digits at line start, followed by a space,
        # a dash (multi-line reply) or the end of the line.
        pattern = re.compile(
            rb'^([0-9]{%d})(?=[ \-\r\n]|$)' % max_digits, re.MULTILINE)
        _LEADING_CODE_CACHE[max_digits] = pattern
    return pattern


def extract_status_codes(codec: CodecSpec, response: bytes) -> List[int]:
    """ Parse the raw status codes a server response carries, in order.
    Never raises; unparseable input yields an empty list. """
    if not response:
        return []
    try:
        if codec.status_offset is None:
            pattern = _leading_code_pattern(codec.status_max_digits)
            return [int(m.group(1)) for m in pattern.finditer(response)]

        start = codec.status_offset
        chunk = response[start:start + codec.status_width]
        if len(chunk) < codec.status_width:
            return []
        if codec.status_ascii:
            if not chunk.isdigit():
                return []
            return [int(chunk)]
        return [int.from_bytes(chunk, 'big')]
    except Exception:  # garbage in, nothing out
        logger.debug("unparseable response %r", response[:32])
        return []


class StateRegistry:
    """ Dense numbering of raw status codes into state keys 1..STATE_SIZE,
    in order of first appearance. """

    def __init__(self, state_size: int = STATE_SIZE) -> None:
        if state_size < 1:
            raise ValueError("state_size must be positive")
        self.state_size = state_size
        self._keys: Dict[int, StateId] = {}
        self._raw: Dict[StateId, int] = {}

    def __len__(self) -> int:
        return len(self._keys)

    def __contains__(self, raw_code: int) -> bool:
        return raw_code in self._keys

    def number(self, raw_code: int) -> StateId:
        if raw_code < 0:
            raise ValueError(f"raw status code must be >= 0, got {raw_code}")
        key = self._keys.get(raw_code)
        if key is not None:
            return key
        if len(self._keys) >= self.state_size:
            raise StateRegistryFull(
                f"state registry holds {len(self._keys)} states; raise "
                f"STATE_SIZE (currently {self.state_size}) to number raw "
                f"code {raw_code}")
        key = len(self._keys) + 1
        self._keys[raw_code] = key
        self._raw[key] = raw_code
        logger.debug("new state key %d for raw code %d", key, raw_code)
        return key

    def raw_code(self, key: StateId) -> int:
        return self._raw[key]

    def items(self):
        return self._keys.items()

    def save(self, path: Path) -> None:
        """ Write 'raw_code TAB key' lines, ordered by key. """
        lines = [f"{raw}\t{key}\n" for raw, key in self._keys.items()]
        Path(path).write_text(''.join(lines))

    @classmethod
    def load(cls, path: Path, state_size: int = STATE_SIZE) \
            -> 'StateRegistry':
        registry = cls(state_size)
        for line_no, line in enumerate(Path(path).read_text().splitlines()):
            if not line.strip():
                continue
            raw, key = (int(v) for v in line.split('\t'))
            if key != len(registry) + 1:
                raise ValueError(f"{path}:{line_no + 1}: keys must be dense "
                                 f"and ordered, got {key}")
            registry.number(raw)
        return registry


def number_state(raw_code: int, registry: StateRegistry) -> StateId:
    """ Map a raw status code to its dense state key, allocating the next
    key on first sight. """
    return registry.number(raw_code)


def response_states(codec: CodecSpec, response: bytes,
                    registry: StateRegistry) -> List[StateId]:
    """ State keys for one response. A non-empty response without any code
    maps to the shared unknown state; silence maps to no state at all. """
    if not response:
        return []
    codes = extract_status_codes(codec, response)
    if not codes:
        codes = [UNKNOWN_RAW_CODE]
    return [registry.number(c) for c in codes]
