"""
Seed scheduling: which IPSM state to target, which sequence to mutate for
it, when to fall back from queue order to state-driven selection, and how
many mutants a seed gets.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from ipsm_fuzz.agents.corpus import Corpus, SeedEntry
from ipsm_fuzz.utils.ipsm import Ipsm, StateStats
from ipsm_fuzz.utils.message_model import StateId

logger = logging.getLogger(__name__)

MAX_TIME_GAP = 60.
SKIP_NONFAVORED_PROB = 0.75


class StateAlgo(str, Enum):
    FAVOR = 'FAVOR'
    RANDOM = 'RANDOM'
    ROUND_ROBIN = 'ROUND_ROBIN'


class SelectionMode(str, Enum):
    QUEUE_DRIVEN = 'QUEUE_DRIVEN'
    STATE_DRIVEN = 'STATE_DRIVEN'


class SelectionPolicy(str, Enum):
    """ How cycles pick their seed: interleave both ways by the time since
    the last find, or always use one of them. """
    INTERLEAVED = 'interleaved'
    QUEUE_ONLY = 'queue_only'
    STATE_ONLY = 'state_only'


@dataclass
class SchedulerConfig:
    """
    :param state_algo: target state selection algorithm
    :param max_time_gap: seconds without a find after which interleaved
    selection switches to state-driven cycles
    :param rng_seed: campaign seed
    :param policy: interleaving policy, overridden by the campaign mode
    :param skip_nonfavored_prob: chance a non-favored queue entry is passed
    over while favored entries exist """
    state_algo: StateAlgo = StateAlgo.FAVOR
    max_time_gap: float = MAX_TIME_GAP
    rng_seed: int = 0
    policy: SelectionPolicy = SelectionPolicy.INTERLEAVED
    skip_nonfavored_prob: float = SKIP_NONFAVORED_PROB

    def __post_init__(self) -> None:
        self.state_algo = StateAlgo(self.state_algo)
        self.policy = SelectionPolicy(self.policy)
        if self.max_time_gap <= 0:
            raise ValueError(f"max_time_gap must be positive, got "
                             f"{self.max_time_gap}")
        if not 0. <= self.skip_nonfavored_prob < 1.:
            raise ValueError("skip_nonfavored_prob must be in [0, 1)")


@dataclass
class EnergyConfig:
    """ Power schedule constants. perf_score starts at base_score and is
    scaled by the speed, coverage and depth factors; the number of mutants
    is havoc_cycles * perf_score / base_score / havoc_div, clamped to
    [min_trials, max_trials]. """
    base_score: float = 100.
    havoc_cycles: int = 128
    havoc_div: float = 1.
    min_trials: int = 8
    max_trials: int = 1024

    def __post_init__(self) -> None:
        if not 1 <= self.min_trials <= self.max_trials:
            raise ValueError("need 1 <= min_trials <= max_trials")
        if self.havoc_div <= 0 or self.base_score <= 0:
            raise ValueError("havoc_div and base_score must be positive")


def speed_factor(exec_time: float, avg_exec_time: float) -> float:
    """ Slow seeds get less energy, fast ones more (x0.25 ... x3). """
    if exec_time <= 0 or avg_exec_time <= 0:
        return 1.
    ratio = exec_time / avg_exec_time
    if ratio >= 4:
        return 0.25
    if ratio >= 2:
        return 0.5
    if ratio >= 1.33:
        return 0.75
    if ratio <= 0.25:
        return 3.
    if ratio <= 1 / 3:
        return 2.
    if ratio <= 0.5:
        return 1.5
    return 1.


def coverage_factor(bitmap_size: float, avg_bitmap_size: float) -> float:
    """ Seeds covering more of the bitmap than average get more energy
    (x0.25 ... x3). """
    if bitmap_size <= 0 or avg_bitmap_size <= 0:
        return 1.
    if bitmap_size * 0.3 > avg_bitmap_size:
        return 3.
    if bitmap_size * 0.5 > avg_bitmap_size:
        return 2.
    if bitmap_size * 0.75 > avg_bitmap_size:
        return 1.5
    if bitmap_size * 3 < avg_bitmap_size:
        return 0.25
    if bitmap_size * 2 < avg_bitmap_size:
        return 0.5
    if bitmap_size * 1.5 < avg_bitmap_size:
        return 0.75
    return 1.


def depth_factor(depth: int) -> float:
    """ Bonus for sequences deep in the mutation tree (x1 ... x4). """
    if depth <= 3:
        return 1.
    if depth <= 7:
        return 2.
    if depth <= 13:
        return 3.
    return 4.


def perf_score(exec_time: float, avg_exec_time: float, bitmap_size: float,
               avg_bitmap_size: float, depth: int,
               cfg: EnergyConfig = EnergyConfig()) -> float:
    return cfg.base_score * speed_factor(exec_time, avg_exec_time) \
        * coverage_factor(bitmap_size, avg_bitmap_size) * depth_factor(depth)


def trials_for(score: float, cfg: EnergyConfig = EnergyConfig()) -> int:
    trials = int(cfg.havoc_cycles * score / cfg.base_score / cfg.havoc_div)
    return int(np.clip(trials, cfg.min_trials, cfg.max_trials))


def energy(seed: SeedEntry, corpus: Corpus,
           cfg: EnergyConfig = EnergyConfig()) -> int:
    """ Number of mutants to derive from seed in one cycle. """
    score = perf_score(seed.exec_time, corpus.avg_exec_time(),
                       seed.bitmap_size, corpus.avg_bitmap_size(),
                       seed.depth, cfg)
    return trials_for(score, cfg)


def favor_score(stats: StateStats) -> float:
    """ Rarely fuzzed, rarely selected and productive states score high. """
    return (stats.paths_discovered + 1) / \
        ((stats.selected_count + 1) * (stats.fuzz_count + 1))


def choose_state(ipsm: Ipsm, cfg: SchedulerConfig,
                 rng: np.random.Generator) -> StateId:
    """ Pick the target state of a state-driven cycle and count the
    selection. """
    if not ipsm:
        raise ValueError("cannot choose a state from an empty IPSM")
    states = list(ipsm.states)

    if cfg.state_algo == StateAlgo.FAVOR:
        scores = np.array([favor_score(ipsm.states[s]) for s in states])
        state = states[rng.choice(len(states), p=scores / scores.sum())]
    elif cfg.state_algo == StateAlgo.RANDOM:
        state = states[rng.integers(len(states))]
    else:
        unmarked = [s for s in states
                    if not ipsm.states[s].round_robin_mark]
        if not unmarked:
            for s in states:
                ipsm.states[s].round_robin_mark = False
            unmarked = states
        state = unmarked[0]
        ipsm.states[state].round_robin_mark = True

    ipsm.states[state].selected_count += 1
    return state


def sequence_weight(entry: SeedEntry) -> float:
    """ Lower is better: short, quick sequences reaching many states. """
    return entry.exec_time * entry.length / \
        (1 + len(entry.seq.distinct_states()))


def choose_sequence_to_state(corpus: Corpus, ipsm: Ipsm,
                             state: StateId) -> Optional[SeedEntry]:
    """ The best-weighted corpus sequence exercising state, ties going to
    the earliest entry; None when no sequence exercises it. """
    candidates = ipsm.seeds_by_state.get(state, [])
    best = None
    best_weight = None
    for index in sorted(candidates):
        entry = corpus[index]
        weight = sequence_weight(entry)
        if best is None or weight < best_weight:
            best, best_weight = entry, weight
    if best is None:
        logger.debug("no corpus sequence exercises state %d", state)
    return best


def pick_mode(now: float, last_path_time: float,
              cfg: SchedulerConfig) -> SelectionMode:
    if cfg.policy == SelectionPolicy.STATE_ONLY:
        return SelectionMode.STATE_DRIVEN
    if cfg.policy == SelectionPolicy.QUEUE_ONLY:
        return SelectionMode.QUEUE_DRIVEN
    if now - last_path_time > cfg.max_time_gap:
        return SelectionMode.STATE_DRIVEN
    return SelectionMode.QUEUE_DRIVEN


class Scheduler:
    """ Stateful front of the scheduling functions: owns the random
    generator and the queue cursor of one campaign. """

    def __init__(self, config: SchedulerConfig = SchedulerConfig(),
                 energy_config: EnergyConfig = EnergyConfig(),
                 rng: Optional[np.random.Generator] = None) -> None:
        self.config = config
        self.energy_config = energy_config
        self.rng = rng if rng is not None \
            else np.random.default_rng(config.rng_seed)
        self.queue_cursor = 0
        self.skipped = 0

    def pick_mode(self, now: float, last_path_time: float) -> SelectionMode:
        return pick_mode(now, last_path_time, self.config)

    def choose_state(self, ipsm: Ipsm) -> StateId:
        return choose_state(ipsm, self.config, self.rng)

    def choose_sequence_to_state(self, corpus: Corpus, ipsm: Ipsm,
                                 state: StateId) -> Optional[SeedEntry]:
        return choose_sequence_to_state(corpus, ipsm, state)

    def choose_sequence_from_queue(self, corpus: Corpus) -> SeedEntry:
        """ Walk the queue cyclically. While favored entries exist, a
        non-favored entry is passed over with skip_nonfavored_prob. """
        if not len(corpus):
            raise ValueError("cannot choose from an empty corpus")
        any_favored = corpus.n_favored > 0
        while True:
            entry = corpus[self.queue_cursor % len(corpus)]
            self.queue_cursor = (self.queue_cursor + 1) % len(corpus)
            if any_favored and not entry.favored and \
                    self.rng.random() < self.config.skip_nonfavored_prob:
                self.skipped += 1
                continue
            return entry

    def energy(self, seed: SeedEntry, corpus: Corpus) -> int:
        return energy(seed, corpus, self.energy_config)
