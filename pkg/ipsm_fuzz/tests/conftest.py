from pathlib import Path

import numpy as np
import pytest

from ipsm_fuzz.agents.fuzzer import CampaignConfig, CampaignMode
from ipsm_fuzz.agents.scheduler import SchedulerConfig
from ipsm_fuzz.environment.bench_servers import make_server
from ipsm_fuzz.environment.harness import InProcessTarget, TargetConfig
from ipsm_fuzz.utils.protocol_codec import StateRegistry, get_codec

# Smaller bitmaps keep the campaign tests quick.
TEST_MAP_SIZE = 1 << 12
TEST_SHIFT_SIZE = 1 << 11

# The LightFTP session used throughout: 7 requests, answered with the
# banner and 9 further status lines.
FTP_SESSION = (b'USER foo\r\n'
               b'PASS foo\r\n'
               b'MKD demo\r\n'
               b'CWD demo\r\n'
               b'STOR test.txt\r\n'
               b'LIST\r\n'
               b'QUIT\r\n')
FTP_SESSION_CODES = [220, 331, 230, 257, 250, 150, 226, 150, 226, 221]

STOR_CRASH = (b'USER foo\r\n'
              b'PASS foo\r\n'
              b'MKD demo\r\n'
              b'CWD demo\r\n'
              b'STOR ' + b'A' * 80 + b'\r\n')

RTSP_HAPPY_PATH = (b'OPTIONS rtsp://bench/media RTSP/1.0\r\nCSeq: 1\r\n\r\n'
                   b'DESCRIBE rtsp://bench/media RTSP/1.0\r\nCSeq: 2\r\n\r\n'
                   b'SETUP rtsp://bench/media RTSP/1.0\r\nCSeq: 3\r\n\r\n'
                   b'PLAY rtsp://bench/media RTSP/1.0\r\nCSeq: 4\r\n\r\n'
                   b'TEARDOWN rtsp://bench/media RTSP/1.0\r\nCSeq: 5\r\n\r\n')

# Same session with a Range header on PLAY, the header the undocumented
# INIT -PLAY-> PLAY shortcut looks for.
RTSP_RANGE_PATH = RTSP_HAPPY_PATH.replace(
    b'PLAY rtsp://bench/media RTSP/1.0\r\nCSeq: 4\r\n',
    b'PLAY rtsp://bench/media RTSP/1.0\r\nCSeq: 4\r\nRange: npt=0-\r\n')


@pytest.fixture
def ftp_codec():
    return get_codec('ftp')


@pytest.fixture
def rtsp_codec():
    return get_codec('rtsp')


@pytest.fixture
def registry():
    return StateRegistry()


@pytest.fixture
def ftp_target(ftp_codec, registry):
    return InProcessTarget(make_server('ftp'), ftp_codec, registry,
                           TEST_MAP_SIZE, TEST_SHIFT_SIZE)


@pytest.fixture
def rtsp_target(rtsp_codec, registry):
    return InProcessTarget(make_server('rtsp'), rtsp_codec, registry,
                           TEST_MAP_SIZE, TEST_SHIFT_SIZE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def capture_dir(tmp_path) -> Path:
    path = tmp_path / 'captures'
    path.mkdir()
    (path / 'lightftp.raw').write_bytes(FTP_SESSION)
    return path


def campaign_config(mode=CampaignMode.FULL, max_execs=2000, seed=1,
                    server='ftp', codec='ftp', out_dir=None,
                    **kwargs) -> CampaignConfig:
    scheduler = kwargs.pop('scheduler', SchedulerConfig(rng_seed=seed))
    return CampaignConfig(
        codec=codec,
        target=TargetConfig.from_spec(f'builtin:{server}'),
        mode=mode,
        scheduler=scheduler,
        map_size=TEST_MAP_SIZE,
        shift_size=TEST_SHIFT_SIZE,
        max_execs=max_execs,
        out_dir=out_dir,
        **kwargs)
