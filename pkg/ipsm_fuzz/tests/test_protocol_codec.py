import pytest
from hypothesis import given, strategies as st

from ipsm_fuzz.tests.conftest import FTP_SESSION
from ipsm_fuzz.utils.protocol_codec import (
    UNKNOWN_RAW_CODE, CodecError, CodecSpec, StateRegistry,
    StateRegistryFull, extract_status_codes, get_codec, number_state,
    response_states, split_requests)


def test_split_on_terminator(ftp_codec):
    seq = split_requests(ftp_codec, b'USER foo\r\nPASS foo\r\n')
    assert [(r.start, r.end) for r in seq.regions] == [(0, 10), (10, 20)]
    assert not any(r.incomplete for r in seq.regions)


def test_split_single_message(ftp_codec):
    seq = split_requests(ftp_codec, b'QUIT\r\n')
    assert len(seq) == 1
    assert seq.regions[0].end == 6


def test_split_keeps_incomplete_tail(ftp_codec):
    seq = split_requests(ftp_codec, b'USER foo\r\nPAS')
    assert len(seq) == 2
    assert seq.regions[1].incomplete
    assert seq.buffer[seq.regions[1].start:] == b'PAS'


def test_split_empty_capture(ftp_codec):
    with pytest.raises(CodecError):
        split_requests(ftp_codec, b'')


def test_split_lightftp_session(ftp_codec):
    assert len(split_requests(ftp_codec, FTP_SESSION)) == 7


def test_split_rtsp_on_blank_line(rtsp_codec):
    raw = (b'OPTIONS rtsp://x RTSP/1.0\r\nCSeq: 1\r\n\r\n'
           b'PLAY rtsp://x RTSP/1.0\r\nCSeq: 2\r\n\r\n')
    seq = split_requests(rtsp_codec, raw)
    assert len(seq) == 2
    assert seq.buffer[:seq.regions[0].end].endswith(b'\r\n\r\n')


def test_split_length_prefix():
    codec = get_codec('linemux')
    raw = b'\x00\x03abc\x00\x01z\x00\x09short'
    seq = split_requests(codec, raw)
    assert [(r.start, r.end, r.incomplete) for r in seq.regions] == \
        [(0, 5, False), (5, 8, False), (8, 15, True)]


@given(st.lists(st.binary(min_size=1, max_size=12).filter(
    lambda b: b'\r\n' not in b), min_size=1, max_size=6))
def test_split_is_a_partition(parts):
    raw = b'\r\n'.join(parts)
    seq = split_requests(get_codec('ftp'), raw)
    assert b''.join(seq.buffer[r.start:r.end] for r in seq.regions) == raw
    for region in seq.regions[:-1]:
        assert seq.buffer[:region.end].endswith(b'\r\n')


@pytest.mark.parametrize('response, codes', [
    (b'331 User foo OK. Password required\r\n', [331]),
    (b'', []),
    (b'150 File status okay\r\n226 Transfer complete\r\n', [150, 226]),
    (b'hello there\r\n', []),
    (b'230-Welcome\r\n230 Logged in\r\n', [230, 230]),
])
def test_extract_leading_decimal(ftp_codec, response, codes):
    assert extract_status_codes(ftp_codec, response) == codes


def test_extract_fixed_offset(rtsp_codec):
    assert extract_status_codes(
        rtsp_codec, b'RTSP/1.0 455 Method Not Valid\r\n\r\n') == [455]
    assert extract_status_codes(rtsp_codec, b'RTSP/1.0') == []
    assert extract_status_codes(rtsp_codec, b'RTSP/1.0 abc x\r\n') == []


def test_extract_binary_status():
    assert extract_status_codes(get_codec('linemux'), b'\x01\x2cok') == [300]


def test_number_state_dense_and_stable(registry):
    assert number_state(220, registry) == 1
    assert number_state(331, registry) == 2
    assert number_state(220, registry) == 1
    assert registry.raw_code(2) == 331


def test_registry_full():
    registry = StateRegistry(state_size=256)
    for code in range(256):
        registry.number(code)
    with pytest.raises(StateRegistryFull):
        registry.number(1000)


def test_registry_save_load(tmp_path, registry):
    for code in (220, 331, 230):
        registry.number(code)
    path = tmp_path / 'state_keys.tsv'
    registry.save(path)
    assert path.read_text() == '220\t1\n331\t2\n230\t3\n'
    loaded = StateRegistry.load(path)
    assert dict(loaded.items()) == dict(registry.items())


def test_response_states_unknown_and_silence(ftp_codec, registry):
    assert response_states(ftp_codec, b'', registry) == []
    key = response_states(ftp_codec, b'garbage\r\n', registry)
    assert key == [registry.number(UNKNOWN_RAW_CODE)]


@pytest.mark.parametrize('kwargs', [
    dict(),
    dict(terminator=b'\n', length_width=2),
    dict(terminator=b''),
    dict(length_width=3),
    dict(terminator=b'\n', status_offset=0),
])
def test_codec_spec_validation(kwargs):
    with pytest.raises(CodecError):
        CodecSpec('broken', **kwargs)


def test_unknown_codec():
    with pytest.raises(CodecError):
        get_codec('smtp')
