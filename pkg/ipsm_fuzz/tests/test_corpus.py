import numpy as np

from ipsm_fuzz.agents.corpus import ORIGIN_INITIAL, Corpus, SeedEntry
from ipsm_fuzz.utils.message_model import Message, MessageSequence


def entry(covered, exec_time=1000, data=b'NOOP\r\n') -> SeedEntry:
    seq = MessageSequence.from_messages([Message(data)])
    return SeedEntry(seq=seq, exec_time=exec_time, trace_hash='',
                     covered=np.array(covered, dtype=np.int64))


def test_add_assigns_indices():
    corpus = Corpus(16)
    assert corpus.add(entry([1])) == 0
    assert corpus.add(entry([2])) == 1
    assert len(corpus) == 2
    assert [e.index for e in corpus] == [0, 1]
    assert corpus[1].origin == ORIGIN_INITIAL


def test_faster_entry_takes_over_favored_slot():
    corpus = Corpus(16)
    slow = entry([1, 2], exec_time=5000)
    fast = entry([1, 2], exec_time=1000)
    corpus.add(slow)
    assert slow.favored
    corpus.add(fast)
    assert fast.favored and not slow.favored
    assert corpus.n_favored == 1


def test_favored_set_covers_everything():
    corpus = Corpus(16)
    entries = [entry([1, 2]), entry([2, 3], exec_time=500),
               entry([4]), entry([1, 2, 3, 4], exec_time=9000,
                                 data=b'LIST a b c d e\r\n')]
    for e in entries:
        corpus.add(e)
    covered = set()
    for e in corpus:
        if e.favored:
            covered |= set(e.covered.tolist())
    assert covered == {1, 2, 3, 4}
    assert not entries[3].favored


def test_averages():
    corpus = Corpus(16)
    assert corpus.avg_exec_time() == 0.
    corpus.add(entry([1], exec_time=1000))
    corpus.add(entry([1, 2, 3], exec_time=3000))
    assert corpus.avg_exec_time() == 2000.
    assert corpus.avg_bitmap_size() == 2.
