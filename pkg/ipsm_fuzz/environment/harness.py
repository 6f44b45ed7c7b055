"""
Execution backends. A target adapter sends one message sequence per
session and reports what came back: responses, the state keys parsed from
them, the per-execution coverage trace and whether the server crashed.
"""
import logging
import selectors
import shlex
import socket
import subprocess
import time
from abc import ABC, abstractmethod
from dataclasses import dataclass
from hashlib import blake2b
from typing import List, Optional, Sequence, Union

import numpy as np
import psutil

from ipsm_fuzz.environment.bench_servers import BenchServer, make_server
from ipsm_fuzz.utils.coverage import (
    MAP_SIZE, SHIFT_SIZE, EdgeKey, new_trace, record_edge)
from ipsm_fuzz.utils.message_model import (
    Message, MessageSequence, StateId, messages_of)
from ipsm_fuzz.utils.protocol_codec import (
    CodecSpec, StateRegistry, response_states)

logger = logging.getLogger(__name__)

KIND_IN_PROCESS = 'in_process'
KIND_TCP = 'tcp'

# Deterministic cost model of in-process executions (microseconds).
MESSAGE_COST_US = 1000
BYTES_PER_US = 16

RECV_CHUNK = 4096


class HarnessError(RuntimeError):
    pass


class RetriableHarnessError(HarnessError):
    pass


@dataclass
class ExecOutcome:
    """ Result of sending one message sequence.
    :param responses: one response per message that was answered
    :param banner: greeting sent by the server on connect
    :param state_seq: banner states followed by every response's states
    :param per_message_states: states of each answered message
    :param trace_map: per-execution hit counts (zeros without code feedback)
    :param crashed: the server died while handling the sequence
    :param exec_time: microseconds spent on the sequence """
    responses: List[bytes]
    banner: bytes
    state_seq: List[StateId]
    per_message_states: List[List[StateId]]
    trace_map: np.ndarray
    crashed: bool = False
    exec_time: int = 0

    @property
    def banner_states(self) -> List[StateId]:
        n_msg = sum(len(s) for s in self.per_message_states)
        return self.state_seq[:len(self.state_seq) - n_msg]


@dataclass
class TargetConfig:
    """ Where and how sequences are executed.
    :param kind: 'in_process' (bundled bench server) or 'tcp'
    :param server: bench server name for in_process targets
    :param host: tcp server address
    :param port: tcp server port
    :param launch_command: command line that starts the tcp server
    :param delay_us: static wait after each send when polling is off
    :param poll_timeout_ms: how long to wait for a response to become
    readable
    :param cleanup_command: shell command run before each server restart
    :param keep_alive: keep the tcp server running between sequences
    :param use_poll: readiness polling instead of the static delay
    :param restart_timeout_s: time allowed for a restarted server to accept
    connections
    :param crash_grace_s: how long an unanswered server may take to exit
    before it is judged alive """
    kind: str = KIND_IN_PROCESS
    server: Optional[str] = None
    host: str = '127.0.0.1'
    port: Optional[int] = None
    launch_command: Optional[str] = None
    delay_us: int = 0
    poll_timeout_ms: int = 100
    cleanup_command: Optional[str] = None
    keep_alive: bool = False
    use_poll: bool = True
    restart_timeout_s: float = 5.0
    crash_grace_s: float = 1.0

    def __post_init__(self) -> None:
        if self.delay_us < 0:
            raise ValueError(f"delay_us must be >= 0, got {self.delay_us}")
        if self.poll_timeout_ms <= 0:
            raise ValueError("poll_timeout_ms must be positive")
        if self.crash_grace_s < 0:
            raise ValueError(f"crash_grace_s must be >= 0, got "
                             f"{self.crash_grace_s}")
        if self.kind == KIND_IN_PROCESS:
            if self.server is None:
                raise ValueError("in_process targets need a bench server")
            if self.launch_command is not None:
                raise ValueError("builtin targets take no launch command")
        elif self.kind == KIND_TCP:
            if self.port is None or not self.launch_command:
                raise ValueError("tcp targets need an address and a launch "
                                 "command")
        else:
            raise ValueError(f"unknown target kind '{self.kind}'")

    @classmethod
    def from_spec(cls, spec: str, **kwargs) -> 'TargetConfig':
        """ Build a config from 'builtin:<name>' or 'tcp://host:port'. """
        if spec.startswith('builtin:'):
            return cls(kind=KIND_IN_PROCESS, server=spec[len('builtin:'):],
                       **kwargs)
        if spec.startswith('tcp://'):
            address = spec[len('tcp://'):]
            host, sep, port = address.rpartition(':')
            if not sep or not host or not port.isdigit():
                raise ValueError(f"bad tcp address '{spec}', expected "
                                 f"tcp://host:port")
            return cls(kind=KIND_TCP, host=host, port=int(port), **kwargs)
        raise ValueError(f"bad target '{spec}', expected builtin:<name> or "
                         f"tcp://host:port")


Sendable = Union[MessageSequence, Sequence[Message]]


def _as_messages(seq: Sendable) -> List[Message]:
    if isinstance(seq, MessageSequence):
        return messages_of(seq)
    return list(seq)


class TargetAdapter(ABC):
    """ Execution contract shared by all backends. """

    def __init__(self, codec: CodecSpec, registry: StateRegistry,
                 map_size: int = MAP_SIZE,
                 shift_size: int = SHIFT_SIZE) -> None:
        self.codec = codec
        self.registry = registry
        self.map_size = map_size
        self.shift_size = shift_size

    @property
    @abstractmethod
    def provides_code_coverage(self) -> bool:
        ...

    @property
    def deterministic(self) -> bool:
        return False

    @abstractmethod
    def send_sequence(self, seq: Sendable) -> ExecOutcome:
        ...

    @abstractmethod
    def probe_crash(self) -> bool:
        ...

    @abstractmethod
    def reset(self) -> None:
        ...

    def close(self) -> None:
        pass

    def __enter__(self) -> 'TargetAdapter':
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def _states(self, response: bytes) -> List[StateId]:
        return response_states(self.codec, response, self.registry)


def location_key(server_name: str, branch_id: int) -> int:
    """ Fixed pseudo-random basic-block key of an instrumented branch. """
    digest = blake2b(f'{server_name}:{branch_id}'.encode(), digest_size=4)
    return int.from_bytes(digest.digest(), 'big')


class InProcessTarget(TargetAdapter):
    """ Runs a bundled bench server inside the fuzzer process. The server
    session is reset before every sequence, so an execution is a pure
    function of the sequence. Branch hits are chained into code edges the
    way compile-time instrumentation would record them. """

    def __init__(self, server: BenchServer, codec: CodecSpec,
                 registry: StateRegistry, map_size: int = MAP_SIZE,
                 shift_size: int = SHIFT_SIZE) -> None:
        super(InProcessTarget, self).__init__(codec, registry, map_size,
                                              shift_size)
        self.server = server
        name = type(server).__name__
        self._keys = [location_key(name, i)
                      for i in range(server.edge_count())]

    @property
    def provides_code_coverage(self) -> bool:
        return True

    @property
    def deterministic(self) -> bool:
        return True

    def send_sequence(self, seq: Sendable) -> ExecOutcome:
        messages = _as_messages(seq)
        banner = self.server.reset()
        trace = new_trace(self.map_size)
        state_seq = list(self._states(banner))
        per_message: List[List[StateId]] = []
        responses: List[bytes] = []
        exec_time = 0
        prev_loc = 0
        crashed = False

        for msg in messages:
            _, _, done, info = self.server.step(msg.data)
            crashed = info['crashed']
            exec_time += MESSAGE_COST_US + len(msg) // BYTES_PER_US
            for branch in info['branches']:
                cur_loc = self._keys[branch]
                record_edge(trace, EdgeKey(prev_loc, cur_loc),
                            self.shift_size)
                prev_loc = cur_loc
            if crashed:
                break
            states = self._states(info['response'])
            responses.append(info['response'])
            per_message.append(states)
            state_seq.extend(states)
            if done:
                break

        return ExecOutcome(responses=responses, banner=banner,
                           state_seq=state_seq,
                           per_message_states=per_message,
                           trace_map=trace, crashed=crashed,
                           exec_time=exec_time)

    def probe_crash(self) -> bool:
        return self.server.crashed

    def reset(self) -> None:
        self.server = type(self.server)()


class TcpTarget(TargetAdapter):
    """ Socket client for a server running as a separate process. The
    server is restarted after every sequence unless keep_alive is set.
    Responses are awaited with readiness polling, or with a fixed delay
    after each send when polling is switched off. No code coverage is
    available, the trace stays all zeros. """

    def __init__(self, config: TargetConfig, codec: CodecSpec,
                 registry: StateRegistry, map_size: int = MAP_SIZE,
                 shift_size: int = SHIFT_SIZE) -> None:
        super(TcpTarget, self).__init__(codec, registry, map_size,
                                        shift_size)
        if config.kind != KIND_TCP:
            raise ValueError("TcpTarget needs a tcp target config")
        self.config = config
        self.proc: Optional[subprocess.Popen] = None
        self.run_count = 0
        self._poll_timeout = config.poll_timeout_ms / 1000.
        self._delay = config.delay_us / 1e6

    @property
    def provides_code_coverage(self) -> bool:
        return False

    @property
    def alive(self) -> bool:
        return self.proc is not None and self.proc.poll() is None

    def start(self) -> None:
        if self.alive:
            return
        self.run_count += 1
        try:
            self.proc = subprocess.Popen(
                shlex.split(self.config.launch_command),
                stdout=subprocess.DEVNULL, stderr=subprocess.DEVNULL)
        except OSError as e:
            raise HarnessError(f"cannot launch '{self.config.launch_command}'"
                               f": {e}") from e
        if not self._wait_for_port(self.config.restart_timeout_s):
            self.stop()
            raise HarnessError(
                f"server did not accept connections on "
                f"{self.config.host}:{self.config.port} within "
                f"{self.config.restart_timeout_s} s")
        logger.debug("server started, pid %d (run #%d)", self.proc.pid,
                     self.run_count)

    def stop(self) -> None:
        if self.proc is None:
            return
        if self.proc.poll() is None:
            try:
                for child in psutil.Process(self.proc.pid).children(
                        recursive=True):
                    child.kill()
            except psutil.NoSuchProcess:
                pass
            self.proc.terminate()
            try:
                self.proc.wait(timeout=3.)
            except subprocess.TimeoutExpired:
                logger.warning("server pid %d did not exit, killing it",
                               self.proc.pid)
                self.proc.kill()
                self.proc.wait(timeout=3.)
        self.proc = None

    def reset(self) -> None:
        if self.config.cleanup_command:
            result = subprocess.run(self.config.cleanup_command, shell=True,
                                    stdout=subprocess.DEVNULL,
                                    stderr=subprocess.PIPE)
            if result.returncode != 0:
                raise HarnessError(
                    f"cleanup command exited with {result.returncode}: "
                    f"{result.stderr.decode(errors='replace')[:200]}")
        self.stop()
        self.start()

    def close(self) -> None:
        self.stop()

    def probe_crash(self, grace_s: float = 0.) -> bool:
        """ Decide whether the server process died.
        :param grace_s: how long to wait for the process to exit, used when
        the server stopped answering without closing the session
        :return True on an abnormal exit or when the server is unreachable """
        if self.proc is None:
            return False
        try:
            code = self.proc.wait(timeout=grace_s) if grace_s > 0 \
                else self.proc.poll()
        except subprocess.TimeoutExpired:
            code = None
        if code is not None:
            # Negative codes are fatal signals, positive ones failed exits.
            return code != 0
        try:
            status = psutil.Process(self.proc.pid).status()
        except psutil.NoSuchProcess:
            return True
        if status in (psutil.STATUS_ZOMBIE, psutil.STATUS_DEAD):
            return True
        return not self._wait_for_port(self._poll_timeout)

    def send_sequence(self, seq: Sendable) -> ExecOutcome:
        messages = _as_messages(seq)
        self.start()
        start = time.perf_counter()
        try:
            sock = socket.create_connection(
                (self.config.host, self.config.port),
                timeout=self.config.restart_timeout_s)
        except OSError as e:
            raise RetriableHarnessError(
                f"cannot connect to {self.config.host}:{self.config.port}: "
                f"{e}") from e

        responses: List[bytes] = []
        per_message: List[List[StateId]] = []
        with sock, selectors.DefaultSelector() as sel:
            sock.setblocking(False)
            sel.register(sock, selectors.EVENT_READ)
            banner, dropped = self._receive(sock, sel)
            # The last exchange went unanswered.
            silent = dropped and not banner
            state_seq = list(self._states(banner))
            for msg in messages:
                if dropped:
                    break
                if not self._send(sock, sel, msg.data):
                    dropped = silent = True
                    break
                response, dropped = self._receive(sock, sel)
                silent = not response
                if dropped and silent:
                    break
                states = self._states(response)
                responses.append(response)
                per_message.append(states)
                state_seq.extend(states)

        exec_time = int((time.perf_counter() - start) * 1e6)
        crashed = False
        if silent:
            crashed = self.probe_crash(self.config.crash_grace_s)
        elif dropped:
            crashed = self.probe_crash()
        if not self.config.keep_alive:
            self.reset()
        return ExecOutcome(responses=responses, banner=banner,
                           state_seq=state_seq,
                           per_message_states=per_message,
                           trace_map=new_trace(self.map_size),
                           crashed=crashed, exec_time=exec_time)

    def _send(self, sock: socket.socket, sel: selectors.BaseSelector,
              data: bytes) -> bool:
        """ Write one request, waiting for the socket to become writable.
        :return False if the peer is gone or the socket stayed full """
        sel.modify(sock, selectors.EVENT_WRITE)
        view = memoryview(data)
        try:
            while view:
                if not sel.select(self._poll_timeout):
                    logger.debug("socket not writable after %.3f s",
                                 self._poll_timeout)
                    return False
                try:
                    sent = sock.send(view)
                except BlockingIOError:
                    continue
                except ConnectionError as e:
                    logger.debug("send failed: %s", e)
                    return False
                view = view[sent:]
        finally:
            sel.modify(sock, selectors.EVENT_READ)
        return True

    def _receive(self, sock: socket.socket, sel: selectors.BaseSelector) \
            -> (bytes, bool):
        """ Collect one response.
        :return the bytes read and whether the peer closed the connection """
        if not self.config.use_poll:
            time.sleep(self._delay)
            timeout = 0.
        else:
            timeout = self._poll_timeout
        buf = b''
        while sel.select(timeout):
            try:
                chunk = sock.recv(RECV_CHUNK)
            except BlockingIOError:
                break
            except ConnectionError:
                return buf, True
            if not chunk:
                return buf, True
            buf += chunk
            # Drain whatever else is already buffered.
            timeout = 0.
        return buf, False

    def _wait_for_port(self, timeout: float) -> bool:
        deadline = time.monotonic() + timeout
        while True:
            if self.proc is not None and self.proc.poll() is not None:
                return False
            try:
                with socket.create_connection(
                        (self.config.host, self.config.port), timeout=0.1):
                    return True
            except OSError:
                if time.monotonic() >= deadline:
                    return False
                time.sleep(0.01)


def make_target(config: TargetConfig, codec: CodecSpec,
                registry: StateRegistry, map_size: int = MAP_SIZE,
                shift_size: int = SHIFT_SIZE) -> TargetAdapter:
    if config.kind == KIND_IN_PROCESS:
        return InProcessTarget(make_server(config.server), codec, registry,
                               map_size, shift_size)
    return TcpTarget(config, codec, registry, map_size, shift_size)
