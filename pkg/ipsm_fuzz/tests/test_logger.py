import pytest

from ipsm_fuzz.environment.logger import (
    STATS_HEADER, CampaignLogger, read_stats_csv)


def test_rows_follow_interval_marks(tmp_path):
    path = tmp_path / 'stats.csv'
    log = CampaignLogger(path, interval_s=5.)
    assert not log.maybe_log(4.9, 10, 1, 5, 2, 2, 0)
    assert log.maybe_log(5.2, 20, 1, 6, 3, 3, 0)
    assert not log.maybe_log(9.9, 30, 2, 7, 3, 3, 0)
    assert log.maybe_log(17., 40, 2, 8, 4, 4, 1)
    assert log.due(20.)
    assert not log.due(19.99)
    log.log(18.5, 50, 3, 9, 4, 4, 1)

    lines = path.read_text().splitlines()
    assert lines[0] == ','.join(STATS_HEADER)
    assert lines[1] == '5.200,20,1,6,3,3,0'
    assert len(lines) == 4


def test_extract_and_read_back(tmp_path):
    path = tmp_path / 'stats.csv'
    log = CampaignLogger(path)
    log.log(1., 1, 1, 1, 1, 1, 0)
    log.log(2.5, 9, 2, 3, 4, 5, 0)
    data = log.extract_stats_data()
    assert data['total_execs'].tolist() == [1, 9]
    assert data['unix_time'].tolist() == [1., 2.5]
    loaded = read_stats_csv(path)
    for key in STATS_HEADER:
        assert loaded[key].tolist() == data[key].tolist()


def test_in_memory_logger():
    log = CampaignLogger()
    log.log(0., 0, 0, 0, 0, 0, 0)
    assert len(log.log_all) == 1
    log.clear_all()
    assert log.log_all == []


def test_interval_must_be_positive():
    with pytest.raises(ValueError):
        CampaignLogger(interval_s=0)
