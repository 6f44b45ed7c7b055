import selectors
import shlex
import socket
import sys
import time

import numpy as np
import pytest

from ipsm_fuzz.environment.bench_servers import FtpLikeServer, make_server
from ipsm_fuzz.environment.harness import (
    KIND_IN_PROCESS, KIND_TCP, MESSAGE_COST_US, InProcessTarget, TargetConfig,
    TcpTarget, location_key, make_target)
from ipsm_fuzz.tests.conftest import (
    FTP_SESSION, FTP_SESSION_CODES, RTSP_RANGE_PATH, STOR_CRASH, TEST_MAP_SIZE,
    TEST_SHIFT_SIZE)
from ipsm_fuzz.utils.message_model import Message, messages_of
from ipsm_fuzz.utils.protocol_codec import split_requests


def test_target_config_from_spec():
    builtin = TargetConfig.from_spec('builtin:ftp')
    assert builtin.kind == KIND_IN_PROCESS and builtin.server == 'ftp'
    tcp = TargetConfig.from_spec('tcp://127.0.0.1:2200',
                                 launch_command='server --port 2200')
    assert tcp.kind == KIND_TCP
    assert (tcp.host, tcp.port) == ('127.0.0.1', 2200)


@pytest.mark.parametrize('spec, kwargs', [
    ('builtin:ftp', dict(launch_command='./server')),
    ('tcp://127.0.0.1:2200', dict()),
    ('tcp://127.0.0.1', dict(launch_command='./server')),
    ('udp://127.0.0.1:2200', dict()),
    ('builtin:ftp', dict(delay_us=-1)),
])
def test_target_config_rejects(spec, kwargs):
    with pytest.raises(ValueError):
        TargetConfig.from_spec(spec, **kwargs)


def test_location_keys_are_stable():
    assert location_key('FtpLikeServer', 3) == \
        location_key('FtpLikeServer', 3)
    assert location_key('FtpLikeServer', 3) != \
        location_key('FtpLikeServer', 4)


def test_in_process_lightftp(ftp_codec, ftp_target, registry):
    seq = split_requests(ftp_codec, FTP_SESSION)
    outcome = ftp_target.send_sequence(seq)
    assert [registry.raw_code(s) for s in outcome.state_seq] == \
        FTP_SESSION_CODES
    assert outcome.banner.startswith(b'220')
    assert outcome.banner_states == [registry.number(220)]
    assert len(outcome.responses) == len(outcome.per_message_states) == 7
    assert outcome.exec_time == 7 * MESSAGE_COST_US
    assert not outcome.crashed
    assert ftp_target.deterministic and ftp_target.provides_code_coverage


def test_in_process_trace_is_code_only(ftp_codec, ftp_target):
    outcome = ftp_target.send_sequence(split_requests(ftp_codec, FTP_SESSION))
    trace = outcome.trace_map
    assert trace.shape == (TEST_MAP_SIZE,)
    assert not trace[:TEST_SHIFT_SIZE].any()
    assert np.count_nonzero(trace[TEST_SHIFT_SIZE:]) > 0


def test_in_process_is_a_pure_function(ftp_codec, ftp_target):
    seq = split_requests(ftp_codec, FTP_SESSION)
    first = ftp_target.send_sequence(seq)
    second = ftp_target.send_sequence(seq)
    assert first.state_seq == second.state_seq
    assert np.array_equal(first.trace_map, second.trace_map)


def test_in_process_crash(ftp_codec, ftp_target, registry):
    outcome = ftp_target.send_sequence(split_requests(ftp_codec, STOR_CRASH))
    assert outcome.crashed
    assert ftp_target.probe_crash()
    # The crashing request gets no response.
    assert len(outcome.responses) == 4
    ftp_target.reset()
    assert not ftp_target.probe_crash()


def test_in_process_stops_after_quit(ftp_target, registry):
    outcome = ftp_target.send_sequence(
        [Message(b'QUIT\r\n'), Message(b'NOOP\r\n')])
    assert len(outcome.responses) == 1
    assert registry.raw_code(outcome.state_seq[-1]) == 221
    assert outcome.exec_time == MESSAGE_COST_US


class SteppedFtpServer(FtpLikeServer):
    def __init__(self) -> None:
        super(SteppedFtpServer, self).__init__()
        self.steps = 0

    def step(self, message):
        self.steps += 1
        return super(SteppedFtpServer, self).step(message)


def test_in_process_drives_server_steps(ftp_codec, registry):
    target = InProcessTarget(SteppedFtpServer(), ftp_codec, registry,
                             TEST_MAP_SIZE, TEST_SHIFT_SIZE)
    outcome = target.send_sequence(
        [Message(b'USER foo\r\n'), Message(b'QUIT\r\n'),
         Message(b'NOOP\r\n')])
    assert target.server.steps == 2
    assert len(outcome.responses) == 2


def test_rtsp_without_banner(rtsp_codec, rtsp_target):
    outcome = rtsp_target.send_sequence(
        [Message(b'OPTIONS rtsp://x RTSP/1.0\r\nCSeq: 1\r\n\r\n')])
    assert outcome.banner == b''
    assert outcome.banner_states == []
    assert len(outcome.state_seq) == 1


def test_range_play_before_setup_crashes(rtsp_codec, rtsp_target):
    msgs = messages_of(split_requests(rtsp_codec, RTSP_RANGE_PATH))
    assert not rtsp_target.send_sequence(msgs).crashed
    del msgs[2]
    outcome = rtsp_target.send_sequence(msgs)
    assert outcome.crashed
    assert len(outcome.responses) == 3


def test_make_target_kinds(ftp_codec, registry):
    target = make_target(TargetConfig.from_spec('builtin:ftp'), ftp_codec,
                         registry)
    assert isinstance(target, InProcessTarget)
    tcp = make_target(TargetConfig.from_spec(
        'tcp://127.0.0.1:1', launch_command='true'), ftp_codec, registry)
    assert isinstance(tcp, TcpTarget)
    assert not tcp.provides_code_coverage
    assert not tcp.deterministic


def _free_port() -> int:
    with socket.socket() as sock:
        sock.bind(('127.0.0.1', 0))
        return sock.getsockname()[1]


@pytest.fixture
def tcp_ftp_target(ftp_codec, registry):
    port = _free_port()
    config = TargetConfig.from_spec(
        f'tcp://127.0.0.1:{port}',
        launch_command=f'{sys.executable} -m ipsm_fuzz.run_fuzz --quiet '
                       f'bench-server ftp --port {port}',
        poll_timeout_ms=500, restart_timeout_s=20.)
    target = TcpTarget(config, ftp_codec, registry, TEST_MAP_SIZE,
                       TEST_SHIFT_SIZE)
    yield target
    target.close()


def test_tcp_target_session(ftp_codec, tcp_ftp_target, registry):
    outcome = tcp_ftp_target.send_sequence(
        split_requests(ftp_codec, FTP_SESSION))
    assert [registry.raw_code(s) for s in outcome.state_seq] == \
        FTP_SESSION_CODES
    assert not outcome.crashed
    assert not outcome.trace_map.any()


def test_tcp_target_detects_crash(ftp_codec, tcp_ftp_target):
    outcome = tcp_ftp_target.send_sequence(
        split_requests(ftp_codec, STOR_CRASH))
    assert len(outcome.responses) == 4
    assert outcome.crashed
    # The server was restarted for the next sequence.
    assert tcp_ftp_target.alive


# Answers the banner and one request, then aborts while its listening
# socket is still open.
LATE_ABORT_SERVER = '''
import os, socket, sys, time
srv = socket.create_server(("127.0.0.1", int(sys.argv[1])))
while True:
    conn, _ = srv.accept()
    try:
        conn.sendall(b"220 ready\\r\\n")
        if conn.recv(1024):
            conn.sendall(b"200 ok\\r\\n")
            if conn.recv(1024):
                time.sleep(0.2)
                os.abort()
    except OSError:
        pass
    conn.close()
'''


@pytest.fixture
def late_abort_target(ftp_codec, registry):
    port = _free_port()
    config = TargetConfig.from_spec(
        f'tcp://127.0.0.1:{port}',
        launch_command=f'{shlex.quote(sys.executable)} -c '
                       f'{shlex.quote(LATE_ABORT_SERVER)} {port}',
        poll_timeout_ms=100, restart_timeout_s=20., crash_grace_s=10.)
    target = TcpTarget(config, ftp_codec, registry, TEST_MAP_SIZE,
                       TEST_SHIFT_SIZE)
    yield target
    target.close()


def test_tcp_crash_after_last_response(late_abort_target):
    outcome = late_abort_target.send_sequence(
        [Message(b'USER foo\r\n'), Message(b'PASS foo\r\n')])
    assert outcome.banner == b'220 ready\r\n'
    assert outcome.responses == [b'200 ok\r\n']
    assert outcome.crashed
    assert late_abort_target.alive


def test_crash_check_waits_for_exit(late_abort_target):
    late_abort_target.start()
    with socket.create_connection(
            ('127.0.0.1', late_abort_target.config.port)) as sock:
        sock.recv(64)
        sock.sendall(b'USER foo\r\n')
        sock.recv(64)
        sock.sendall(b'PASS foo\r\n')
        # Still listening, so only the exit status tells.
        assert late_abort_target.probe_crash(10.)


def test_crash_check_on_live_server(tcp_ftp_target):
    tcp_ftp_target.start()
    assert not tcp_ftp_target.probe_crash(0.2)
    assert tcp_ftp_target.alive


def test_crash_grace_must_not_be_negative():
    with pytest.raises(ValueError):
        TargetConfig.from_spec('tcp://127.0.0.1:2200', launch_command='x',
                               crash_grace_s=-1.)


def test_send_waits_for_writable_socket(ftp_codec, registry):
    target = TcpTarget(TargetConfig.from_spec(
        'tcp://127.0.0.1:1', launch_command='true'), ftp_codec, registry)
    left, right = socket.socketpair()
    with left, right, selectors.DefaultSelector() as sel:
        left.setblocking(False)
        sel.register(left, selectors.EVENT_READ)
        assert target._send(left, sel, b'NOOP\r\n' * 100)
        assert sel.get_key(left).events == selectors.EVENT_READ
        assert right.recv(4096) == b'NOOP\r\n' * 100
        right.close()
        assert not target._send(left, sel, b'NOOP\r\n')
        assert sel.get_key(left).events == selectors.EVENT_READ


def kept_ftp_server(ftp_codec, registry, **kwargs) -> TcpTarget:
    port = _free_port()
    config = TargetConfig.from_spec(
        f'tcp://127.0.0.1:{port}',
        launch_command=f'{sys.executable} -m ipsm_fuzz.run_fuzz --quiet '
                       f'bench-server ftp --port {port}',
        keep_alive=True, restart_timeout_s=20., **kwargs)
    return TcpTarget(config, ftp_codec, registry, TEST_MAP_SIZE,
                     TEST_SHIFT_SIZE)


def sequences_per_second(target, seq, n=20) -> float:
    target.start()
    start = time.perf_counter()
    for _ in range(n):
        target.send_sequence(seq)
    return n / (time.perf_counter() - start)


@pytest.mark.slow
def test_polling_outpaces_static_delay(ftp_codec, registry):
    seq = split_requests(ftp_codec, FTP_SESSION)
    with kept_ftp_server(ftp_codec, registry) as polled:
        poll_rate = sequences_per_second(polled, seq)
    with kept_ftp_server(ftp_codec, registry, use_poll=False,
                         delay_us=10000) as delayed:
        delay_rate = sequences_per_second(delayed, seq)
    assert poll_rate >= 2 * delay_rate
