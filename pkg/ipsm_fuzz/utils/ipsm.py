"""
The implemented protocol state machine (IPSM): states and transitions
learned from the server responses, with the per-state statistics used to
pick target states.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

from .message_model import INITIAL_STATE, StateId
from .protocol_codec import StateRegistry

logger = logging.getLogger(__name__)

# Bytes of the first request seen on a transition kept as its DOT label.
LABEL_SAMPLE_BYTES = 32


class UnknownStateError(KeyError):
    pass


@dataclass
class StateStats:
    """ Scheduling statistics of one state.
    fuzz_count: mutated sequences that executed the state (#fuzz)
    selected_count: times chosen as target state (#selected)
    paths_discovered: interesting sequences found while it was the target
    (#paths)
    round_robin_mark: set once ROUND_ROBIN has visited the state in the
    current round """
    fuzz_count: int = 0
    selected_count: int = 0
    paths_discovered: int = 0
    round_robin_mark: bool = False


@dataclass
class Transition:
    hits: int = 0
    label_sample: Optional[bytes] = None


class IpsmUpdate(NamedTuple):
    new_states: int
    new_transitions: int

    @property
    def is_new(self) -> bool:
        return self.new_states > 0 or self.new_transitions > 0


@dataclass
class Ipsm:
    """ Directed labelled graph of observed states (insertion order is
    discovery order) and transitions with hit counts. seeds_by_state maps a
    state to the corpus indices of the sequences exercising it. """
    states: Dict[StateId, StateStats] = field(default_factory=dict)
    transitions: Dict[Tuple[StateId, StateId], Transition] = \
        field(default_factory=dict)
    seeds_by_state: Dict[StateId, List[int]] = field(default_factory=dict)

    @property
    def n_states(self) -> int:
        return len(self.states)

    @property
    def n_transitions(self) -> int:
        return len(self.transitions)

    def __bool__(self) -> bool:
        return bool(self.states)

    def update(self, state_seq: Sequence[StateId],
               requests: Optional[Sequence[bytes]] = None) -> IpsmUpdate:
        """ Insert the transitions of one executed sequence. The implicit
        initial state is prepended, so [1, 2] yields 0->1 and 1->2.
        :param state_seq: state keys in order of observation
        :param requests: optional request bytes that produced each state,
        aligned with state_seq; the first one seen on a new transition is
        kept as its label sample
        :return counts of newly added states and transitions """
        new_states = 0
        new_transitions = 0
        prev = INITIAL_STATE
        for i, state in enumerate(state_seq):
            if state == INITIAL_STATE:
                raise ValueError("state key 0 is reserved for the initial "
                                 "state")
            if state not in self.states:
                self.states[state] = StateStats()
                self.seeds_by_state[state] = []
                new_states += 1
            edge = self.transitions.get((prev, state))
            if edge is None:
                sample = None
                if requests is not None:
                    sample = bytes(requests[i][:LABEL_SAMPLE_BYTES])
                edge = Transition(label_sample=sample)
                self.transitions[(prev, state)] = edge
                new_transitions += 1
            edge.hits += 1
            prev = state

        if new_states or new_transitions:
            logger.debug("IPSM grew by %d states, %d transitions",
                         new_states, new_transitions)
        return IpsmUpdate(new_states, new_transitions)

    def record_fuzz_hits(self, state_seq: Sequence[StateId]) -> None:
        """ Count one #fuzz hit per distinct known state of an executed
        mutant. """
        for state in set(state_seq):
            stats = self.states.get(state)
            if stats is not None:
                stats.fuzz_count += 1

    def register_seed(self, state: StateId, corpus_index: int) -> None:
        if state not in self.states:
            raise UnknownStateError(f"state {state} is not in the IPSM")
        seeds = self.seeds_by_state[state]
        if corpus_index not in seeds:
            seeds.append(corpus_index)

    def export_dot(self, registry: Optional[StateRegistry] = None) -> str:
        """ Render the machine as a DOT digraph. Nodes are labelled with the
        raw status codes when a registry is given, edges with hit counts
        and the first request seen on them. """
        def label(state: StateId) -> str:
            if state == INITIAL_STATE:
                return 'init'
            if registry is not None:
                return str(registry.raw_code(state))
            return str(state)

        lines = ['digraph ipsm {']
        if self.states:
            lines.append('  node [shape=ellipse];')
            lines.append(f'  s{INITIAL_STATE} [label="init", '
                         f'shape=point];')
            for state in self.states:
                lines.append(f'  s{state} [label={_quote(label(state))}];')
            for (src, dst), edge in self.transitions.items():
                text = f'{edge.hits}'
                if edge.label_sample:
                    text += '\n' + edge.label_sample.decode(
                        'latin-1').strip()
                lines.append(f'  s{src} -> s{dst} [label={_quote(text)}];')
        lines.append('}')
        return '\n'.join(lines) + '\n'


def _quote(text: str) -> str:
    escaped = text.replace('\\', '\\\\').replace('"', '\\"')
    escaped = escaped.replace('\r', '\\r').replace('\n', '\\n')
    return f'"{escaped}"'


def update_ipsm(ipsm: Ipsm, state_seq: Sequence[StateId],
                requests: Optional[Sequence[bytes]] = None) -> IpsmUpdate:
    return ipsm.update(state_seq, requests)


def export_dot(ipsm: Ipsm, registry: Optional[StateRegistry] = None) -> str:
    return ipsm.export_dot(registry)
