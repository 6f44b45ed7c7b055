from dataclasses import dataclass, replace
from typing import Iterator, List, Optional, Sequence, Set, Tuple

# Reserved key of the implicit state the server is in before the first
# response. Numbered states start at 1.
INITIAL_STATE = 0

StateId = int


class EmptyRegionError(ValueError):
    pass


@dataclass(frozen=True)
class Message:
    """ A single request payload, without transport framing. """
    data: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.data, (bytes, bytearray)):
            raise TypeError(f"message data must be bytes, got "
                            f"{type(self.data).__name__}")
        if len(self.data) == 0:
            raise ValueError("a message cannot be empty")
        object.__setattr__(self, 'data', bytes(self.data))

    def __len__(self) -> int:
        return len(self.data)


@dataclass(frozen=True)
class Region:
    """ Byte range [start, end) of one message inside the sequence buffer.
    states_observed is cumulative: all states seen in the server responses
    up to and including this message, in order of arrival. """
    start: int
    end: int
    states_observed: Tuple[StateId, ...] = ()
    incomplete: bool = False

    def __len__(self) -> int:
        return self.end - self.start


@dataclass
class MessageSequence:
    """ Messages stored back to back in one buffer, addressed by regions.
    :param buffer: concatenated request bytes
    :param regions: one region per message, contiguous and in order
    :param exec_time: last measured execution time (microseconds)
    :param depth: mutation generation, 0 for captured sequences """
    buffer: bytes
    regions: List[Region]
    exec_time: int = 0
    depth: int = 0

    def __post_init__(self) -> None:
        self.buffer = bytes(self.buffer)
        self.regions = list(self.regions)
        self.validate()

    @property
    def length(self) -> int:
        return len(self.buffer)

    def __len__(self) -> int:
        """ Number of messages. """
        return len(self.regions)

    def validate(self) -> None:
        """ Check the region invariants, raise ValueError if broken. """
        if not self.regions:
            raise ValueError("a message sequence needs at least one region")
        if self.regions[0].start != 0:
            raise ValueError("first region must start at offset 0")
        previous: Optional[Region] = None
        for i, region in enumerate(self.regions):
            if region.start >= region.end:
                raise EmptyRegionError(f"region {i} is empty "
                                       f"[{region.start}, {region.end})")
            if previous is not None:
                if region.start != previous.end:
                    raise ValueError(f"region {i} does not start where "
                                     f"region {i - 1} ends")
                prefix = previous.states_observed
                if region.states_observed[:len(prefix)] != prefix:
                    raise ValueError(f"annotation of region {i} does not "
                                     f"extend the one of region {i - 1}")
            previous = region
        if self.regions[-1].end != len(self.buffer):
            raise ValueError(
                f"regions cover {self.regions[-1].end} bytes but the buffer "
                f"holds {len(self.buffer)}")

    @classmethod
    def from_messages(cls, messages: Sequence[Message],
                      annotations: Optional[Sequence[Sequence[StateId]]]
                      = None, depth: int = 0) -> 'MessageSequence':
        """ Build a sequence by concatenating messages.
        :param messages: at least one message
        :param annotations: optional per-message state lists (states
        produced by each message alone); they are accumulated into the
        cumulative region annotation
        :param depth: mutation generation of the new sequence
        :return the new sequence """
        if not messages:
            raise ValueError("a message sequence needs at least one message")
        if annotations is not None and len(annotations) != len(messages):
            raise ValueError("need exactly one annotation per message")

        regions = []
        offset = 0
        cumulative: Tuple[StateId, ...] = ()
        for i, msg in enumerate(messages):
            if annotations is not None:
                cumulative = cumulative + tuple(annotations[i])
            regions.append(Region(offset, offset + len(msg), cumulative))
            offset += len(msg)
        buffer = b''.join(m.data for m in messages)
        return cls(buffer=buffer, regions=regions, depth=depth)

    def message(self, i: int) -> Message:
        region = self.regions[i]
        return Message(self.buffer[region.start:region.end])

    def all_states(self) -> Tuple[StateId, ...]:
        """ The full ordered state list observed for this sequence. """
        return self.regions[-1].states_observed

    def distinct_states(self) -> Set[StateId]:
        return set(self.all_states())

    def is_annotated(self) -> bool:
        return len(self.all_states()) > 0


def messages_of(seq: MessageSequence) -> List[Message]:
    """ Slice the sequence buffer into its messages, in order. """
    return [Message(seq.buffer[r.start:r.end]) for r in seq.regions]


def reindex(seq: MessageSequence, from_region: int, delta: int,
            buffer: bytes) -> MessageSequence:
    """ Shift region boundaries after the byte length of region
    from_region changed by delta. The end of from_region and every later
    boundary move by delta; annotations are kept as they are.
    :param seq: sequence with stale region offsets
    :param from_region: index of the region whose length changed
    :param delta: signed change in bytes
    :param buffer: the already modified buffer, its length must match the
    shifted regions
    :return new validated sequence with contiguous regions """
    if not 0 <= from_region < len(seq.regions):
        raise IndexError(f"region {from_region} out of range")
    if delta == 0 and buffer == seq.buffer:
        return seq

    regions = list(seq.regions)
    target = regions[from_region]
    if len(target) + delta <= 0:
        raise EmptyRegionError(
            f"delta {delta} would empty region {from_region} "
            f"of length {len(target)}")
    regions[from_region] = replace(target, end=target.end + delta)
    for i in range(from_region + 1, len(regions)):
        r = regions[i]
        regions[i] = replace(r, start=r.start + delta, end=r.end + delta)

    return MessageSequence(buffer=buffer, regions=regions,
                           exec_time=seq.exec_time, depth=seq.depth)


def annotate(seq: MessageSequence,
             per_message_states: Sequence[Sequence[StateId]],
             leading_states: Sequence[StateId] = ()) -> MessageSequence:
    """ Attach cumulative state annotations to a sequence.
    :param seq: the executed sequence
    :param per_message_states: states parsed from the response to each
    message; may be shorter than the sequence when the server stopped
    answering, later messages then add nothing
    :param leading_states: states announced before the first request (e.g.
    a greeting banner); they open the first annotation
    :return annotated copy of seq """
    cumulative: Tuple[StateId, ...] = tuple(leading_states)
    regions = []
    for i, region in enumerate(seq.regions):
        if i < len(per_message_states):
            cumulative = cumulative + tuple(per_message_states[i])
        regions.append(replace(region, states_observed=cumulative))
    return MessageSequence(buffer=seq.buffer, regions=regions,
                           exec_time=seq.exec_time, depth=seq.depth)


def transition_walk(seq: MessageSequence) -> Iterator[Tuple[StateId, bytes]]:
    """ Yield (state, request bytes) for every state in the annotation,
    pairing each newly observed state with the message that produced it. """
    seen = 0
    for region in seq.regions:
        request = seq.buffer[region.start:region.end]
        for state in region.states_observed[seen:]:
            yield state, request
        seen = len(region.states_observed)
