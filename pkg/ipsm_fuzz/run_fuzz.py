"""
Command-line entry points: run a campaign, replay a sequence, run a
multi-trial experiment over several modes, or serve a bench server over
TCP.

    ipsm-fuzz fuzz -i captures/ -o out/ -P ftp -N builtin:ftp -E 50000
    ipsm-fuzz replay -P ftp -N builtin:ftp out/crashes/id:000000,...
    ipsm-fuzz experiment -i captures/ -o exp/ -P ftp -N builtin:ftp \
        -m FULL BLACK -t 10 -E 100000
    ipsm-fuzz bench-server ftp --port 2121
"""
import argparse
import json
import logging
import multiprocessing
import os
import re
import shutil
import sys
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import tqdm

from ipsm_fuzz.agents.fuzzer import (
    DOT_FILE, QUEUE_DIR, STATE_KEYS_FILE, CampaignConfig,
    CampaignMode, CampaignSetupError, StatefulFuzzer)
from ipsm_fuzz.agents.scheduler import (
    MAX_TIME_GAP, SchedulerConfig, StateAlgo)
from ipsm_fuzz.environment.bench_servers import BUILTIN_SERVERS
from ipsm_fuzz.environment.harness import (
    HarnessError, TargetConfig, make_target)
from ipsm_fuzz.environment.tcp_server import serve
from ipsm_fuzz.utils.coverage import MAP_SIZE, SHIFT_SIZE
from ipsm_fuzz.utils.helpers import summarize_experiment, write_summary_tsv
from ipsm_fuzz.utils.protocol_codec import (
    CODECS, STATE_SIZE, StateRegistry, StateRegistryFull, get_codec,
    split_requests)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CRASHES = 1
EXIT_SETUP_ERROR = 2

MANIFEST = 'manifest.txt'
RESULTS_FILE = 'results.json'
SUMMARY_FILE = 'summary.tsv'
MIN_EXPERIMENT_MODES = 2
MIN_EXPERIMENT_TRIALS = 3
# Queue of the campaign being resumed, kept until its corpus is rebuilt.
RESUME_DIR = 'queue.resume'

_QUEUE_PREFIX = re.compile(r'^id:\d+,(orig:)?')


def load_captures(in_dir: Path) -> List[Tuple[str, bytes]]:
    """ Read the initial captures, in manifest.txt order when present and
    sorted by file name otherwise. Hidden files are ignored. """
    in_dir = Path(in_dir)
    if not in_dir.is_dir():
        raise CampaignSetupError(f"input directory {in_dir} does not exist")
    manifest = in_dir / MANIFEST
    if manifest.is_file():
        names = [line.strip() for line in manifest.read_text().splitlines()
                 if line.strip() and not line.startswith('#')]
    else:
        names = sorted(p.name for p in in_dir.iterdir()
                       if p.is_file() and not p.name.startswith('.'))
    captures = []
    for name in names:
        path = in_dir / name
        if not path.is_file():
            raise CampaignSetupError(f"capture {path} listed in the "
                                     f"manifest does not exist")
        captures.append((name, path.read_bytes()))
    if not captures:
        raise CampaignSetupError(f"no capture files in {in_dir}")
    return captures


def prepare_out_dir(out_dir: Path, state_size: int = STATE_SIZE) \
        -> Optional[Tuple[List[Tuple[str, bytes]], StateRegistry]]:
    """ Check the output directory. A directory left by an earlier campaign
    is resumed: its queue becomes the initial captures and its state-key
    table is reloaded. Nothing on disk is removed here.
    :return (captures, registry) to resume from, or None for a new
    campaign """
    out_dir = Path(out_dir)
    if not out_dir.exists() or not any(out_dir.iterdir()):
        out_dir.mkdir(parents=True, exist_ok=True)
        return None

    keys = out_dir / STATE_KEYS_FILE
    queue = out_dir / QUEUE_DIR
    staging = out_dir / RESUME_DIR
    if staging.is_dir():
        logger.warning("restoring the queue of an unfinished resume from %s",
                       staging)
        if queue.exists():
            shutil.rmtree(queue)
        os.replace(staging, queue)
    if not keys.is_file() or not queue.is_dir():
        raise CampaignSetupError(
            f"output directory {out_dir} is neither empty nor a campaign "
            f"to resume (needs {STATE_KEYS_FILE} and {QUEUE_DIR}/)")

    registry = StateRegistry.load(keys, state_size)
    files = sorted(p for p in queue.iterdir() if p.is_file())
    captures = [(_QUEUE_PREFIX.sub('', p.name), p.read_bytes())
                for p in files]
    if not captures:
        raise CampaignSetupError(f"nothing to resume from, {queue} is empty")
    logger.info("resuming from %d queue entries and %d known states",
                len(captures), len(registry))
    return captures, registry


def finish_resume(out_dir: Path, rebuilt: bool) -> None:
    """ Drop the staged queue of a resumed campaign once the new one has
    re-seeded its corpus, or put it back when setup failed. """
    staging = Path(out_dir) / RESUME_DIR
    queue = Path(out_dir) / QUEUE_DIR
    if rebuilt:
        shutil.rmtree(staging)
        return
    logger.warning("resume did not rebuild the corpus, restoring %s", queue)
    if queue.exists():
        shutil.rmtree(queue)
    os.replace(staging, queue)


def target_config_from_args(args: argparse.Namespace) -> TargetConfig:
    kwargs = dict(delay_us=args.delay_us, use_poll=not args.no_poll,
                  keep_alive=args.keep_alive,
                  cleanup_command=args.cleanup,
                  crash_grace_s=args.crash_grace)
    if args.launch is not None:
        kwargs['launch_command'] = args.launch
    return TargetConfig.from_spec(args.target, **kwargs)


def campaign_config_from_args(args: argparse.Namespace,
                              out_dir: Optional[Path] = None,
                              mode: Optional[str] = None,
                              rng_seed: Optional[int] = None) \
        -> CampaignConfig:
    scheduler = SchedulerConfig(
        state_algo=StateAlgo(args.state_algo),
        max_time_gap=args.max_time_gap,
        rng_seed=args.seed if rng_seed is None else rng_seed)
    return CampaignConfig(
        codec=args.codec,
        target=target_config_from_args(args),
        mode=CampaignMode(mode or args.mode),
        scheduler=scheduler,
        map_size=args.map_size,
        shift_size=args.shift_size,
        state_size=args.state_size,
        max_execs=args.max_execs,
        budget_seconds=args.budget_seconds,
        out_dir=out_dir,
        progress=not args.quiet)


def cmd_fuzz(args: argparse.Namespace) -> int:
    """ Run one campaign. Exit status 0 when it finished without crashes,
    1 when crashes were saved. """
    out_dir = Path(args.out_dir)
    resumed = prepare_out_dir(out_dir, args.state_size)
    if resumed is None:
        if args.in_dir is None:
            raise CampaignSetupError("a new campaign needs captures (-i)")
        captures = load_captures(args.in_dir)
        registry = None
    else:
        captures, registry = resumed
        if args.in_dir is not None:
            logger.warning("resuming %s, ignoring -i %s", out_dir,
                           args.in_dir)
    config = campaign_config_from_args(args, out_dir=out_dir)

    if resumed is not None:
        # The resumed campaign writes its own queue.
        os.replace(out_dir / QUEUE_DIR, out_dir / RESUME_DIR)
    rebuilt = False
    try:
        with StatefulFuzzer(config, registry=registry) as fuzzer:
            try:
                stats = fuzzer.run_campaign(captures)
            finally:
                rebuilt = fuzzer.preprocessed
    finally:
        if resumed is not None:
            finish_resume(out_dir, rebuilt)

    print(f"executions:  {stats.total_execs}")
    print(f"corpus:      {stats.corpus_size}")
    print(f"branches:    {stats.branches_covered}")
    print(f"states:      {stats.states_covered}")
    print(f"transitions: {stats.transitions_covered}")
    print(f"crashes:     {stats.crashes} unique / {stats.total_crashes}")
    print(f"IPSM written to {out_dir / DOT_FILE}")
    return EXIT_CRASHES if stats.crashes else EXIT_OK


def _crash_sidecar(path: Path) -> Optional[dict]:
    sidecar = path.with_name(path.name + '.json')
    if sidecar.is_file():
        return json.loads(sidecar.read_text())
    return None


def cmd_replay(args: argparse.Namespace) -> int:
    """ Send one sequence to a freshly reset target and dump every
    response. Exit status 1 when the target crashed. """
    path = Path(args.sequence)
    raw = path.read_bytes()
    sidecar = _crash_sidecar(path)
    codec_name = args.codec
    if sidecar is not None:
        if codec_name is None:
            codec_name = sidecar['codec']
        elif codec_name != sidecar['codec']:
            raise CampaignSetupError(
                f"{path.name} was recorded with codec {sidecar['codec']}, "
                f"not {codec_name}")
    if codec_name is None:
        raise CampaignSetupError("no codec given (-P) and no crash sidecar "
                                 "to take it from")
    codec = get_codec(codec_name)
    seq = split_requests(codec, raw)

    registry = StateRegistry(args.state_size)
    with make_target(target_config_from_args(args), codec, registry,
                     args.map_size, args.shift_size) as target:
        target.reset()
        outcome = target.send_sequence(seq)

    if outcome.banner:
        print(f"<< {outcome.banner!r}")
    for i, region in enumerate(seq.regions):
        print(f">> {seq.buffer[region.start:region.end]!r}")
        if i < len(outcome.responses):
            print(f"<< {outcome.responses[i]!r}")
    codes = [registry.raw_code(s) for s in outcome.state_seq]
    print(f"status codes: {' '.join(str(c) for c in codes)}")
    print(f"crashed: {outcome.crashed}")
    return EXIT_CRASHES if outcome.crashed else EXIT_OK


def run_trial(config: CampaignConfig,
              captures: Sequence[Tuple[str, bytes]]) -> dict:
    """ One experiment trial; module level so worker processes can run
    it. """
    with StatefulFuzzer(config) as fuzzer:
        return fuzzer.run_campaign(captures).as_dict()


def cmd_experiment(args: argparse.Namespace) -> int:
    """ Run every mode for the same number of trials, trial k with seed
    seed + k, and summarize them against the baseline mode. """
    modes = [CampaignMode(m).value for m in args.modes]
    if len(set(modes)) < MIN_EXPERIMENT_MODES:
        raise CampaignSetupError(f"an experiment needs at least "
                                 f"{MIN_EXPERIMENT_MODES} distinct modes")
    if args.trials < MIN_EXPERIMENT_TRIALS:
        raise CampaignSetupError(f"an experiment needs at least "
                                 f"{MIN_EXPERIMENT_TRIALS} trials")
    if args.max_execs is None and args.budget_seconds is None:
        raise CampaignSetupError("an experiment needs a budget (-E or -T)")
    baseline = CampaignMode(args.baseline).value if args.baseline \
        else modes[0]
    if baseline not in modes:
        raise CampaignSetupError(f"baseline {baseline} is not among the "
                                 f"modes {modes}")

    captures = load_captures(args.in_dir)
    out_dir = Path(args.out_dir)
    jobs: Dict[Tuple[str, int], CampaignConfig] = {}
    for mode in modes:
        for k in range(args.trials):
            trial_dir = out_dir / mode / f'trial_{k}'
            if trial_dir.exists() and any(trial_dir.iterdir()):
                raise CampaignSetupError(f"{trial_dir} is not empty")
            trial_dir.mkdir(parents=True, exist_ok=True)
            config = campaign_config_from_args(
                args, out_dir=trial_dir, mode=mode, rng_seed=args.seed + k)
            jobs[(mode, k)] = replace(config, progress=False)

    results: Dict[str, Dict[int, dict]] = {mode: {} for mode in modes}
    failure: Optional[BaseException] = None
    pbar = tqdm.tqdm(total=len(jobs), unit='trial', desc='Experiment',
                     disable=args.quiet)
    if args.jobs > 1:
        ctx = multiprocessing.get_context('spawn')
        with ProcessPoolExecutor(max_workers=args.jobs,
                                 mp_context=ctx) as pool:
            futures = {pool.submit(run_trial, cfg, captures): key
                       for key, cfg in jobs.items()}
            for future in as_completed(futures):
                mode, k = futures[future]
                try:
                    results[mode][k] = future.result()
                except (CampaignSetupError, StateRegistryFull,
                        HarnessError) as e:
                    failure = failure or e
                    logger.error("trial %s/%d failed: %s", mode, k, e)
                pbar.update(1)
    else:
        for (mode, k), cfg in jobs.items():
            try:
                results[mode][k] = run_trial(cfg, captures)
            except (CampaignSetupError, StateRegistryFull,
                    HarnessError) as e:
                failure = e
                logger.error("trial %s/%d failed: %s", mode, k, e)
                break
            finally:
                pbar.update(1)
    pbar.close()

    ordered = {mode: [trials[k] for k in sorted(trials)]
               for mode, trials in results.items()}
    (out_dir / RESULTS_FILE).write_text(json.dumps(ordered, indent=2))
    if failure is not None:
        logger.error("experiment aborted, partial results in %s",
                     out_dir / RESULTS_FILE)
        return EXIT_SETUP_ERROR

    rows = summarize_experiment(ordered, baseline)
    write_summary_tsv(rows, out_dir / SUMMARY_FILE)
    print('\t'.join(('mode', 'trials', 'branches', 'states', 'a12',
                     'effect')))
    for row in rows:
        print(f"{row['mode']}\t{row['trials']}\t"
              f"{row['mean_branches']:.1f}\t{row['mean_states']:.1f}\t"
              f"{row['a12_vs_baseline']:.3f}\t{row['effect']}")
    return EXIT_OK


def cmd_bench_server(args: argparse.Namespace) -> int:
    serve(args.server, args.host, args.port)
    return EXIT_OK


def _add_target_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('-P', dest='codec', choices=sorted(CODECS),
                        help='protocol codec')
    parser.add_argument('-N', dest='target', required=True,
                        help='builtin:<name> or tcp://host:port')
    parser.add_argument('-c', dest='launch', default=None,
                        help='command line that starts a tcp server')
    parser.add_argument('-D', dest='delay_us', type=int, default=0,
                        help='wait after each send in microseconds '
                             '(with --no-poll)')
    parser.add_argument('--cleanup', default=None,
                        help='shell command run before a server restart')
    parser.add_argument('--no-poll', action='store_true',
                        help='wait a static delay instead of polling')
    parser.add_argument('--keep-alive', action='store_true',
                        help='keep a tcp server running between sequences')
    parser.add_argument('--crash-grace', type=float, default=1.,
                        help='seconds an unanswered tcp server may take to '
                             'exit before it counts as alive')
    parser.add_argument('--map-size', type=int, default=MAP_SIZE)
    parser.add_argument('--shift-size', type=int, default=SHIFT_SIZE)
    parser.add_argument('--state-size', type=int, default=STATE_SIZE)


def _add_campaign_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument('-i', dest='in_dir', type=Path,
                        help='directory of captured request sequences')
    parser.add_argument('-o', dest='out_dir', type=Path, required=True)
    parser.add_argument('-q', dest='state_algo', default='FAVOR',
                        choices=[a.value for a in StateAlgo],
                        help='target state selection algorithm')
    parser.add_argument('-E', dest='max_execs', type=int, default=None,
                        help='execution budget')
    parser.add_argument('-T', dest='budget_seconds', type=float,
                        default=None, help='wall-clock budget in seconds')
    parser.add_argument('-s', dest='seed', type=int, default=0,
                        help='random seed')
    parser.add_argument('--max-time-gap', type=float, default=MAX_TIME_GAP,
                        help='seconds without a find before state-driven '
                             'cycles take over')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog='ipsm-fuzz',
        description='Stateful greybox fuzzer for network protocol servers.')
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument('-v', '--verbose', action='store_true')
    verbosity.add_argument('--quiet', action='store_true')
    sub = parser.add_subparsers(dest='command', required=True)

    fuzz = sub.add_parser('fuzz', help='run one campaign')
    _add_target_args(fuzz)
    _add_campaign_args(fuzz)
    fuzz.add_argument('-m', dest='mode', default=CampaignMode.FULL.value,
                      choices=[m.value for m in CampaignMode])
    fuzz.set_defaults(func=cmd_fuzz, needs_codec=True)

    replay = sub.add_parser('replay', help='replay one sequence')
    _add_target_args(replay)
    replay.add_argument('sequence', type=Path)
    replay.set_defaults(func=cmd_replay, needs_codec=False)

    exp = sub.add_parser('experiment', help='compare modes over trials')
    _add_target_args(exp)
    _add_campaign_args(exp)
    exp.add_argument('-m', dest='modes', nargs='+', required=True,
                     choices=[m.value for m in CampaignMode])
    exp.add_argument('-t', dest='trials', type=int, default=10)
    exp.add_argument('--baseline', default=None,
                     choices=[m.value for m in CampaignMode],
                     help='mode the others are compared with (default: '
                          'the first one)')
    exp.add_argument('-j', dest='jobs', type=int, default=1,
                     help='trials run in parallel processes')
    exp.set_defaults(func=cmd_experiment, needs_codec=True)

    bench = sub.add_parser('bench-server',
                           help='serve a bench server over TCP')
    bench.add_argument('server', choices=sorted(BUILTIN_SERVERS))
    bench.add_argument('--host', default='127.0.0.1')
    bench.add_argument('--port', type=int, default=2121)
    bench.set_defaults(func=cmd_bench_server, needs_codec=False)
    return parser


def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else \
        logging.WARNING if quiet else logging.INFO
    logging.basicConfig(
        level=level,
        format='%(asctime)s %(levelname)s %(name)s: %(message)s')


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    if args.needs_codec and args.codec is None:
        parser.error('-P is required')

    try:
        return args.func(args)
    except (CampaignSetupError, StateRegistryFull, HarnessError,
            ValueError, OSError) as e:
        logger.error("%s", e)
        return EXIT_SETUP_ERROR


if __name__ == '__main__':
    sys.exit(main())
