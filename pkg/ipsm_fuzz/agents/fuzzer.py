"""
The stateful fuzzing loop: pre-processing of captured sequences, then
cycles of seed selection, splitting and mutation, keeping the sequences
that reach new coverage and learning the protocol state machine on the way.
"""
import json
import logging
import re
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import List, Optional, Sequence, Set, Tuple

import numpy as np
import tqdm

from ipsm_fuzz.agents.corpus import (
    ORIGIN_INITIAL, ORIGIN_MUTATED, Corpus, SeedEntry)
from ipsm_fuzz.agents.mutators import (
    MessagePool, MutationConfig, SplitError, SplitResult, mutate_split,
    split_random, split_sequence)
from ipsm_fuzz.agents.scheduler import (
    EnergyConfig, Scheduler, SchedulerConfig, SelectionMode, SelectionPolicy)
from ipsm_fuzz.environment.harness import (
    ExecOutcome, RetriableHarnessError, TargetAdapter, TargetConfig,
    make_target)
from ipsm_fuzz.environment.logger import STATS_INTERVAL_S, CampaignLogger
from ipsm_fuzz.utils.coverage import (
    ALL_REGIONS, MAP_SIZE, REGION_CODE, REGION_STATE, SHIFT_SIZE,
    CoverageBitmap, CoverageMeasure, record_state_walk, trace_hash)
from ipsm_fuzz.utils.ipsm import Ipsm
from ipsm_fuzz.utils.message_model import (
    INITIAL_STATE, MessageSequence, StateId, annotate, transition_walk)
from ipsm_fuzz.utils.protocol_codec import (
    STATE_SIZE, CodecError, StateRegistry, get_codec, split_requests)

logger = logging.getLogger(__name__)

QUEUE_DIR = 'queue'
CRASH_DIR = 'crashes'
DOT_FILE = 'ipsm.dot'
STATE_KEYS_FILE = 'state_keys.tsv'
STATS_FILE = 'stats.csv'

MAX_HARNESS_RETRIES = 3


class CampaignSetupError(RuntimeError):
    pass


class CampaignMode(str, Enum):
    """ Feedback and seed selection variants.
    FULL: code + state feedback, interleaved selection
    QUEUE: code + state feedback, queue order only
    IPSM_ONLY: code + state feedback, state-driven only
    CODE_ONLY: code feedback, queue order only
    DARK: state feedback only, interleaved selection
    BLACK: no feedback, the corpus stays the initial seeds """
    FULL = 'FULL'
    QUEUE = 'QUEUE'
    IPSM_ONLY = 'IPSM'
    CODE_ONLY = 'CODE'
    DARK = 'DARK'
    BLACK = 'BLACK'

    @property
    def regions(self) -> Tuple[str, ...]:
        return {
            CampaignMode.CODE_ONLY: (REGION_CODE,),
            CampaignMode.DARK: (REGION_STATE,),
            CampaignMode.BLACK: (),
        }.get(self, ALL_REGIONS)

    @property
    def policy(self) -> SelectionPolicy:
        return {
            CampaignMode.FULL: SelectionPolicy.INTERLEAVED,
            CampaignMode.DARK: SelectionPolicy.INTERLEAVED,
            CampaignMode.IPSM_ONLY: SelectionPolicy.STATE_ONLY,
        }.get(self, SelectionPolicy.QUEUE_ONLY)

    @property
    def needs_code_coverage(self) -> bool:
        return REGION_CODE in self.regions


@dataclass
class CampaignConfig:
    """ Everything one campaign needs.
    :param codec: protocol codec name
    :param target: where sequences are executed
    :param mode: feedback and selection variant
    :param max_execs: stop after this many executions (pre-processing
    included), None for no limit
    :param budget_seconds: stop after this much wall-clock time, None for
    no limit
    :param out_dir: artifact directory, None keeps everything in memory """
    codec: str
    target: TargetConfig
    mode: CampaignMode = CampaignMode.FULL
    scheduler: SchedulerConfig = field(default_factory=SchedulerConfig)
    energy: EnergyConfig = field(default_factory=EnergyConfig)
    mutation: MutationConfig = field(default_factory=MutationConfig)
    map_size: int = MAP_SIZE
    shift_size: int = SHIFT_SIZE
    state_size: int = STATE_SIZE
    max_execs: Optional[int] = None
    budget_seconds: Optional[float] = None
    out_dir: Optional[Path] = None
    stats_interval_s: float = STATS_INTERVAL_S
    max_harness_retries: int = MAX_HARNESS_RETRIES
    progress: bool = False

    def __post_init__(self) -> None:
        self.mode = CampaignMode(self.mode)
        if self.out_dir is not None:
            self.out_dir = Path(self.out_dir)
        if self.max_execs is not None and self.max_execs < 0:
            raise ValueError("max_execs must be >= 0")
        if self.budget_seconds is not None and self.budget_seconds < 0:
            raise ValueError("budget_seconds must be >= 0")

    @property
    def rng_seed(self) -> int:
        return self.scheduler.rng_seed


@dataclass
class CampaignStats:
    """ Counters of a campaign. states/transitions count everything any
    execution observed, branches the code-region entries any execution
    hit, so all modes are measured on the same scale. crashes counts saved
    unique crashes, total_crashes every crashing execution. """
    total_execs: int = 0
    branches_covered: int = 0
    states_covered: int = 0
    transitions_covered: int = 0
    crashes: int = 0
    total_crashes: int = 0
    harness_errors: int = 0
    last_path_time: float = 0.
    corpus_size: int = 0
    ipsm_states: int = 0
    ipsm_transitions: int = 0
    cycles: int = 0
    state_driven_cycles: int = 0
    elapsed_s: float = 0.
    aborted: bool = False

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class CrashRecord:
    seq: MessageSequence
    state_seq: List[int]
    found_at: float
    source: Optional[int]
    name: str


class CampaignClock:
    """ Campaign-relative time. Deterministic targets run on virtual time
    advanced by each execution's cost; others on the monotonic clock. """

    def __init__(self, virtual: bool) -> None:
        self.virtual = virtual
        self._virtual_us = 0
        self._start = time.monotonic()

    def advance(self, exec_time_us: int) -> None:
        self._virtual_us += exec_time_us

    def now(self) -> float:
        if self.virtual:
            return self._virtual_us / 1e6
        return time.monotonic() - self._start


_ID_PREFIX = re.compile(r'^id:\d+,(orig:)?')


class StatefulFuzzer:
    """ One fuzzing campaign against one target. """

    def __init__(self, config: CampaignConfig,
                 target: Optional[TargetAdapter] = None,
                 registry: Optional[StateRegistry] = None) -> None:
        self.config = config
        self.mode = config.mode
        self.codec = get_codec(config.codec)
        self.registry = registry if registry is not None \
            else StateRegistry(config.state_size)
        self.target = target if target is not None else make_target(
            config.target, self.codec, self.registry, config.map_size,
            config.shift_size)
        if self.mode.needs_code_coverage and \
                not self.target.provides_code_coverage:
            raise CampaignSetupError(
                f"mode {self.mode.name} needs code coverage, which this "
                f"target does not report; use DARK or BLACK")

        rng_sched, rng_mut = [
            np.random.default_rng(s) for s in
            np.random.SeedSequence(config.rng_seed).spawn(2)]
        scheduler_cfg = replace(config.scheduler, policy=self.mode.policy)
        self.scheduler = Scheduler(scheduler_cfg, config.energy, rng_sched)
        self.rng = rng_mut

        self.bitmap = CoverageBitmap(config.map_size, config.shift_size,
                                     config.state_size)
        self.crash_bitmap = CoverageBitmap(config.map_size,
                                           config.shift_size,
                                           config.state_size)
        self.measure = CoverageMeasure(config.map_size, config.shift_size)
        self.ipsm = Ipsm()
        self.corpus = Corpus(config.map_size)
        self.pool = MessagePool()
        self.crashes: List[CrashRecord] = []
        self._traceless_crashes: Set[Tuple[StateId, ...]] = set()
        self.stats = CampaignStats()
        self.clock = CampaignClock(virtual=self.target.deterministic)
        self._seen_states = set()
        self._seen_transitions = set()
        self._stop = False
        self._pbar: Optional[tqdm.tqdm] = None
        self._crash_offset = 0
        self.preprocessed = False
        self._wall_start = time.monotonic()

        out = config.out_dir
        if out is not None:
            (out / QUEUE_DIR).mkdir(parents=True, exist_ok=True)
            (out / CRASH_DIR).mkdir(parents=True, exist_ok=True)
            # A resumed campaign numbers its crashes after the earlier ones.
            self._crash_offset = sum(
                1 for p in (out / CRASH_DIR).iterdir()
                if p.suffix != '.json')
        self.stats_logger = CampaignLogger(
            out / STATS_FILE if out is not None else None,
            config.stats_interval_s)

    # Execution

    def _execute(self, seq: MessageSequence) -> Optional[ExecOutcome]:
        """ Run one sequence, retrying connect failures.
        :return the outcome, or None when every attempt failed """
        for attempt in range(self.config.max_harness_retries + 1):
            try:
                outcome = self.target.send_sequence(seq)
                break
            except RetriableHarnessError as e:
                self.stats.harness_errors += 1
                logger.warning("harness error (attempt %d): %s",
                               attempt + 1, e)
        else:
            return None

        if self.config.shift_size:
            record_state_walk(outcome.trace_map, outcome.state_seq,
                              self.config.state_size,
                              self.config.shift_size)
        self.measure.add(outcome.trace_map)
        prev = INITIAL_STATE
        for state in outcome.state_seq:
            self._seen_states.add(state)
            self._seen_transitions.add((prev, state))
            prev = state
        self.stats.total_execs += 1
        self.clock.advance(outcome.exec_time)
        if self._pbar is not None:
            self._pbar.update(1)
        return outcome

    def _annotated(self, seq: MessageSequence,
                   outcome: ExecOutcome) -> MessageSequence:
        out = annotate(seq, outcome.per_message_states,
                       outcome.banner_states)
        out.exec_time = outcome.exec_time
        return out

    def _retain(self, seq: MessageSequence, outcome: ExecOutcome,
                origin: str, source: Optional[int] = None,
                orig_name: str = '') -> SeedEntry:
        """ Add an annotated sequence to the corpus, the message pool and
        the IPSM. """
        entry = SeedEntry(seq=seq, exec_time=outcome.exec_time,
                          trace_hash=trace_hash(outcome.trace_map),
                          covered=np.flatnonzero(outcome.trace_map),
                          found_at=self.clock.now(), origin=origin,
                          source=source)
        index = self.corpus.add(entry)
        self.pool.add_sequence(seq)

        walk = list(transition_walk(seq))
        self.ipsm.update([s for s, _ in walk], [r for _, r in walk])
        for state in seq.distinct_states():
            self.ipsm.register_seed(state, index)

        if self.config.out_dir is not None:
            if origin == ORIGIN_INITIAL:
                name = f'id:{index:06d},orig:' \
                       f'{_ID_PREFIX.sub("", orig_name) or "capture"}'
            else:
                name = f'id:{index:06d},src:{source:06d},' \
                       f'execs:{self.stats.total_execs}'
            (self.config.out_dir / QUEUE_DIR / name).write_bytes(seq.buffer)
        return entry

    def _save_crash(self, seq: MessageSequence, outcome: ExecOutcome,
                    source: Optional[int]) -> None:
        self.stats.total_crashes += 1
        delta = self.crash_bitmap.classify(outcome.trace_map)
        if not delta.interesting:
            # A crash without any recorded coverage is told apart by its
            # state sequence alone.
            if outcome.trace_map.any():
                return
            key = tuple(outcome.state_seq)
            if key in self._traceless_crashes:
                return
            self._traceless_crashes.add(key)
        name = f'id:{self._crash_offset + len(self.crashes):06d},src:' \
               f'{"-" if source is None else f"{source:06d}"},' \
               f'execs:{self.stats.total_execs}'
        record = CrashRecord(seq=seq, state_seq=list(outcome.state_seq),
                             found_at=self.clock.now(), source=source,
                             name=name)
        self.crashes.append(record)
        self.stats.crashes = len(self.crashes)
        logger.info("unique crash #%d after %d executions",
                    len(self.crashes), self.stats.total_execs)

        if self.config.out_dir is not None:
            crash_dir = self.config.out_dir / CRASH_DIR
            (crash_dir / name).write_bytes(seq.buffer)
            sidecar = {
                'codec': self.codec.name,
                'regions': [[r.start, r.end] for r in seq.regions],
                'mode': self.mode.value,
                'rng_seed': self.config.rng_seed,
                'found_at': round(record.found_at, 6),
                'total_execs': self.stats.total_execs,
                'source': source,
                'state_seq': [self.registry.raw_code(s)
                              for s in record.state_seq],
            }
            (crash_dir / f'{name}.json').write_text(
                json.dumps(sidecar, indent=2))

    # Campaign phases

    def preprocess(self, captures: Sequence[Tuple[str, bytes]]) -> None:
        """ Parse, run and annotate every capture, seeding the corpus, the
        bitmaps and the IPSM.
        :param captures: (name, raw bytes) pairs in corpus order """
        if not captures:
            raise CampaignSetupError("no capture files to start from")

        for name, raw in captures:
            try:
                seq = split_requests(self.codec, raw)
            except CodecError as e:
                logger.warning("skipping capture %s: %s", name, e)
                continue
            outcome = self._execute(seq)
            if outcome is None:
                raise CampaignSetupError("target unreachable while replaying "
                                         f"capture {name}")
            if outcome.crashed:
                self._save_crash(seq, outcome, None)
            if self.mode.regions:
                self.bitmap.classify(outcome.trace_map, self.mode.regions)
            self._retain(self._annotated(seq, outcome), outcome,
                         ORIGIN_INITIAL, orig_name=name)

        if not len(self.corpus):
            raise CampaignSetupError("none of the captures could be parsed")
        self.preprocessed = True
        self.stats.last_path_time = self.clock.now()
        self._refresh_stats()
        logger.info("pre-processing done: %d seeds, %d states, %d "
                    "transitions", len(self.corpus), self.ipsm.n_states,
                    self.ipsm.n_transitions)

    def _select(self) -> Tuple[SeedEntry, SplitResult, Optional[int]]:
        """ Seed, split and target state (None when queue-driven) of the
        next cycle. """
        mode = self.scheduler.pick_mode(self.clock.now(),
                                        self.stats.last_path_time)
        if mode == SelectionMode.STATE_DRIVEN and self.ipsm:
            state = self.scheduler.choose_state(self.ipsm)
            seed = self.scheduler.choose_sequence_to_state(
                self.corpus, self.ipsm, state)
            if seed is not None:
                try:
                    split = split_sequence(seed.seq, state)
                    self.stats.state_driven_cycles += 1
                    return seed, split, state
                except SplitError as e:
                    logger.debug("falling back to the queue: %s", e)

        seed = self.scheduler.choose_sequence_from_queue(self.corpus)
        return seed, split_random(seed.seq, self.rng), None

    def fuzz_one_cycle(self) -> None:
        """ Select a seed, then derive and run energy-many mutants of it. """
        seed, split, target_state = self._select()
        trials = self.scheduler.energy(seed, self.corpus)

        for _ in range(trials):
            if self._exhausted():
                break
            mutant = mutate_split(split, self.pool, self.rng, seed.depth,
                                  self.config.mutation)
            outcome = self._execute(mutant)
            if outcome is None:
                logger.warning("skipping the rest of the cycle after %d "
                               "failed attempts",
                               self.config.max_harness_retries + 1)
                break
            self.ipsm.record_fuzz_hits(outcome.state_seq)

            if outcome.crashed:
                self._save_crash(mutant, outcome, seed.index)
                self.stats.last_path_time = self.clock.now()
            elif self.mode.regions:
                delta = self.bitmap.classify(outcome.trace_map,
                                             self.mode.regions)
                if delta.interesting:
                    self._retain(self._annotated(mutant, outcome), outcome,
                                 ORIGIN_MUTATED, source=seed.index)
                    if target_state is not None:
                        self.ipsm.states[target_state].paths_discovered += 1
                    self.stats.last_path_time = self.clock.now()
            self._log_stats()

        seed.fuzz_level += 1
        self.stats.cycles += 1

    def run_campaign(self, captures: Sequence[Tuple[str, bytes]]) \
            -> CampaignStats:
        """ Pre-process the captures and fuzz until a budget runs out or
        the campaign is interrupted. Artifacts are flushed in every case. """
        self._wall_start = time.monotonic()
        self._pbar = tqdm.tqdm(total=self.config.max_execs, unit='exec',
                               desc=f'Fuzzing ({self.mode.name})',
                               disable=not self.config.progress)
        try:
            self.preprocess(captures)
            while not self._exhausted():
                self.fuzz_one_cycle()
        except KeyboardInterrupt:
            logger.warning("campaign interrupted, flushing artifacts")
            self.stats.aborted = True
        finally:
            self._pbar.close()
            self._pbar = None
            self._refresh_stats()
            self.stats_logger.log(self.clock.now(), *self._stats_row())
            self.flush()
        return self.stats

    def request_stop(self) -> None:
        self._stop = True

    # Bookkeeping

    def _exhausted(self) -> bool:
        if self._stop:
            return True
        cfg = self.config
        if cfg.max_execs is not None and \
                self.stats.total_execs >= cfg.max_execs:
            return True
        return cfg.budget_seconds is not None and \
            time.monotonic() - self._wall_start >= cfg.budget_seconds

    def _refresh_stats(self) -> None:
        s = self.stats
        s.branches_covered = self.measure.branches_covered
        s.states_covered = len(self._seen_states)
        s.transitions_covered = len(self._seen_transitions)
        s.corpus_size = len(self.corpus)
        s.ipsm_states = self.ipsm.n_states
        s.ipsm_transitions = self.ipsm.n_transitions
        s.elapsed_s = self.clock.now()

    def _stats_row(self) -> Tuple[int, ...]:
        s = self.stats
        return (s.total_execs, s.corpus_size, s.branches_covered,
                s.states_covered, s.transitions_covered, s.crashes)

    def _log_stats(self) -> None:
        now = self.clock.now()
        if self.stats_logger.due(now):
            self._refresh_stats()
            self.stats_logger.maybe_log(now, *self._stats_row())

    def flush(self) -> None:
        """ Write the IPSM and the state-key table. Queue, crash and stats
        files are written as they come. """
        out = self.config.out_dir
        if out is None:
            return
        (out / DOT_FILE).write_text(self.ipsm.export_dot(self.registry))
        self.registry.save(out / STATE_KEYS_FILE)

    def close(self) -> None:
        self.target.close()

    def __enter__(self) -> 'StatefulFuzzer':
        return self

    def __exit__(self, *exc) -> None:
        self.close()
