"""
Sequence splitting around a target state and the stacked mutators applied
to the candidate part: protocol-aware operators that add, drop or swap
whole messages, and byte-level operators inside one message.
"""
import logging
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from ipsm_fuzz.utils.message_model import (
    Message, MessageSequence, StateId, messages_of, reindex)

logger = logging.getLogger(__name__)

PROTOCOL_OPS = ('msg_replace', 'msg_insert', 'msg_duplicate', 'msg_delete')
BYTE_OPS = ('bit_flip', 'byte_set', 'block_insert', 'block_delete',
            'interesting_value_overwrite')
ALL_OPS = PROTOCOL_OPS + BYTE_OPS

INTERESTING_8 = (-128, -1, 0, 1, 16, 32, 64, 100, 127)
INTERESTING_16 = (-32768, -129, 128, 255, 256, 512, 1000, 1024, 4096, 32767)
INTERESTING_32 = (-2147483648, -100663046, -32769, 32768, 65535, 65536,
                  100663045, 2147483647)


class SplitError(ValueError):
    pass


@dataclass(frozen=True)
class SplitResult:
    """ Prefix m1 drives the server into the target state, candidate m2 is
    mutated, suffix m3 is replayed as it is. """
    m1: Tuple[Message, ...]
    m2: Tuple[Message, ...]
    m3: Tuple[Message, ...]

    def messages(self) -> List[Message]:
        return list(self.m1 + self.m2 + self.m3)


@dataclass
class MutationConfig:
    """
    :param max_stack_power: stack depths are drawn from 2**1 .. 2**power
    :param protocol_ratio: share of protocol-aware operators among draws
    :param max_redraws: attempts to find an applicable operator per slot
    :param ops: operators allowed to be drawn
    :param max_block: longest block inserted or deleted by byte operators
    """
    max_stack_power: int = 7
    protocol_ratio: float = 0.5
    max_redraws: int = 16
    ops: Tuple[str, ...] = ALL_OPS
    max_block: int = 32

    def __post_init__(self) -> None:
        self.ops = tuple(self.ops)
        unknown = set(self.ops) - set(ALL_OPS)
        if unknown:
            raise ValueError(f"unknown mutation operators {sorted(unknown)}")
        if not self.ops:
            raise ValueError("need at least one mutation operator")
        if not 1 <= self.max_stack_power <= 7:
            raise ValueError("max_stack_power must be in [1, 7]")
        if not 0. <= self.protocol_ratio <= 1.:
            raise ValueError("protocol_ratio must be in [0, 1]")


class MessagePool:
    """ Deduplicated collection of every message seen in the corpus, in
    order of first appearance. Only grows. """

    def __init__(self, messages: Iterable[Message] = ()) -> None:
        self._entries: List[Message] = []
        self._seen = set()
        for msg in messages:
            self.add(msg)

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, msg: Message) -> bool:
        return msg.data in self._seen

    def __iter__(self):
        return iter(self._entries)

    def add(self, msg: Message) -> bool:
        if msg.data in self._seen:
            return False
        self._seen.add(msg.data)
        self._entries.append(msg)
        return True

    def add_sequence(self, seq: MessageSequence) -> int:
        """ :return the number of messages that were new to the pool """
        return sum(self.add(m) for m in messages_of(seq))

    def sample(self, rng: np.random.Generator) -> Message:
        if not self._entries:
            raise ValueError("the message pool is empty")
        return self._entries[rng.integers(len(self._entries))]


def split_sequence(seq: MessageSequence, s: StateId) -> SplitResult:
    """ Split seq around target state s using its stored annotation.

    m1 ends with the first message whose cumulative annotation contains s.
    m2 is the longest following run of messages that are all sent while
    the server has not left the states reached by m1; its last message may
    be the one that leaves them. m3 is the rest. """
    regions = seq.regions
    first = next((i for i, r in enumerate(regions)
                  if s in r.states_observed), None)
    if first is None:
        raise SplitError(f"state {s} is not observed in the sequence")

    reached = set(regions[first].states_observed)
    end = first + 1
    while end < len(regions):
        end += 1
        if not set(regions[end - 1].states_observed) <= reached:
            break

    msgs = tuple(messages_of(seq))
    return SplitResult(msgs[:first + 1], msgs[first + 1:end], msgs[end:])


def split_random(seq: MessageSequence,
                 rng: np.random.Generator) -> SplitResult:
    """ Split with a uniformly drawn non-empty contiguous candidate. """
    msgs = tuple(messages_of(seq))
    start = int(rng.integers(len(msgs)))
    end = int(rng.integers(start + 1, len(msgs) + 1))
    return SplitResult(msgs[:start], msgs[start:end], msgs[end:])


def draw_stack_depth(rng: np.random.Generator,
                     cfg: MutationConfig = MutationConfig()) -> int:
    return 1 << int(rng.integers(1, cfg.max_stack_power + 1))


# Byte-level operators: pure functions on one message payload.

def bit_flip(data: bytes, pos: int, bit: int) -> bytes:
    buf = bytearray(data)
    buf[pos] ^= 1 << bit
    return bytes(buf)


def byte_set(data: bytes, pos: int, value: bytes) -> bytes:
    """ Overwrite the bytes at pos with value, clipped to the payload. """
    value = bytes(value)[:len(data) - pos]
    return data[:pos] + value + data[pos + len(value):]


def block_insert(data: bytes, pos: int, block: bytes) -> bytes:
    return data[:pos] + bytes(block) + data[pos:]


def block_delete(data: bytes, pos: int, length: int) -> bytes:
    if length >= len(data):
        raise ValueError("block_delete would empty the message")
    return data[:pos] + data[pos + length:]


def interesting_value_overwrite(data: bytes, pos: int, width: int,
                                value: int, byteorder: str = 'big') -> bytes:
    mask = (1 << (8 * width)) - 1
    raw = (value & mask).to_bytes(width, byteorder)
    return byte_set(data, pos, raw)


def _apply_byte_op(op: str, data: bytes, rng: np.random.Generator,
                   cfg: MutationConfig) -> Optional[bytes]:
    """ Random arguments for a byte-level operator; None when the
    operator cannot apply to data. """
    n = len(data)
    if op == 'bit_flip':
        return bit_flip(data, int(rng.integers(n)), int(rng.integers(8)))
    if op == 'byte_set':
        pos = int(rng.integers(n))
        width = int(rng.integers(1, min(4, n - pos) + 1))
        return byte_set(data, pos, rng.bytes(width))
    if op == 'block_insert':
        pos = int(rng.integers(n + 1))
        length = int(rng.integers(1, cfg.max_block + 1))
        if rng.random() < 0.5:
            # Clone a block of the message itself.
            src = int(rng.integers(n))
            block = (data[src:] * (length // max(n - src, 1) + 1))[:length]
        else:
            block = bytes([int(rng.integers(256))]) * length
        return block_insert(data, pos, block)
    if op == 'block_delete':
        if n < 2:
            return None
        length = int(rng.integers(1, min(cfg.max_block, n - 1) + 1))
        pos = int(rng.integers(n - length + 1))
        return block_delete(data, pos, length)
    if op == 'interesting_value_overwrite':
        widths = [w for w in (1, 2, 4) if w <= n]
        width = widths[int(rng.integers(len(widths)))]
        table = {1: INTERESTING_8,
                 2: INTERESTING_8 + INTERESTING_16,
                 4: INTERESTING_8 + INTERESTING_16 + INTERESTING_32}[width]
        value = table[int(rng.integers(len(table)))]
        order = 'big' if rng.random() < 0.5 else 'little'
        pos = int(rng.integers(n - width + 1))
        return interesting_value_overwrite(data, pos, width, value, order)
    raise ValueError(f"unknown byte operator '{op}'")


def _draw_op(rng: np.random.Generator, cfg: MutationConfig) -> str:
    protocol = [op for op in cfg.ops if op in PROTOCOL_OPS]
    byte = [op for op in cfg.ops if op in BYTE_OPS]
    if protocol and (not byte or rng.random() < cfg.protocol_ratio):
        return protocol[int(rng.integers(len(protocol)))]
    return byte[int(rng.integers(len(byte)))]


def mutate_candidate(m2: Sequence[Message], pool: MessagePool,
                     rng: np.random.Generator, stack_depth: int,
                     cfg: MutationConfig = MutationConfig(),
                     keep_one: bool = False) -> List[Message]:
    """ Apply stack_depth stacked operators to the candidate messages.
    Operators that cannot apply are redrawn a bounded number of times.
    :param m2: candidate messages, may be empty
    :param pool: source of messages for replace and insert
    :param rng: campaign random generator
    :param stack_depth: number of stacked operators, 0 leaves m2 as it is
    :param cfg: operator set and limits
    :param keep_one: m2 is the whole sequence and must not become empty
    :return the mutated candidate """
    # Byte-level operators edit regions of a working sequence in place.
    work: Optional[MessageSequence] = \
        MessageSequence.from_messages(list(m2)) if m2 else None

    for _ in range(stack_depth):
        for _attempt in range(cfg.max_redraws):
            op = _draw_op(rng, cfg)
            updated = _apply(op, work, pool, rng, cfg, keep_one)
            if updated is not False:
                work = updated
                break
        else:
            logger.debug("no applicable mutation operator after %d draws",
                         cfg.max_redraws)

    return messages_of(work) if work is not None else []


def _apply(op: str, work: Optional[MessageSequence], pool: MessagePool,
           rng: np.random.Generator, cfg: MutationConfig, keep_one: bool):
    """ :return the new working sequence (None when empty), or False if op
    does not apply """
    msgs = messages_of(work) if work is not None else []
    n = len(msgs)

    if op in BYTE_OPS:
        if not n:
            return False
        i = int(rng.integers(n))
        old = msgs[i].data
        new = _apply_byte_op(op, old, rng, cfg)
        if new is None:
            return False
        region = work.regions[i]
        buffer = work.buffer[:region.start] + new + work.buffer[region.end:]
        return reindex(work, i, len(new) - len(old), buffer)

    if op == 'msg_replace':
        if not n or not len(pool):
            return False
        msgs[int(rng.integers(n))] = pool.sample(rng)
    elif op == 'msg_insert':
        if not len(pool):
            return False
        msgs.insert(int(rng.integers(n + 1)), pool.sample(rng))
    elif op == 'msg_duplicate':
        if not n:
            return False
        i = int(rng.integers(n))
        msgs.insert(i + 1, msgs[i])
    elif op == 'msg_delete':
        if not n or (n == 1 and keep_one):
            return False
        del msgs[int(rng.integers(n))]
    else:
        raise ValueError(f"unknown mutation operator '{op}'")
    return MessageSequence.from_messages(msgs) if msgs else None


def mutate_split(split: SplitResult, pool: MessagePool,
                 rng: np.random.Generator, depth: int = 0,
                 cfg: MutationConfig = MutationConfig(),
                 stack_depth: Optional[int] = None) -> MessageSequence:
    """ Build m1 + mutate(m2) + m3 from a precomputed split. """
    if stack_depth is None:
        stack_depth = draw_stack_depth(rng, cfg)
    keep_one = not split.m1 and not split.m3
    m2 = mutate_candidate(split.m2, pool, rng, stack_depth, cfg, keep_one)
    messages = list(split.m1) + m2 + list(split.m3)
    return MessageSequence.from_messages(messages, depth=depth + 1)


def mutate(seq: MessageSequence, s: StateId, pool: MessagePool,
           rng: np.random.Generator, cfg: MutationConfig = MutationConfig(),
           stack_depth: Optional[int] = None) -> MessageSequence:
    """ Mutate the candidate part of seq for target state s. The prefix is
    kept byte-identical so the result still reaches s; the suffix is
    replayed unchanged. """
    split = split_sequence(seq, s)
    return mutate_split(split, pool, rng, seq.depth, cfg, stack_depth)
