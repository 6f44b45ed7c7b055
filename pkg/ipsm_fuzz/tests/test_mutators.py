import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from ipsm_fuzz.agents.mutators import (
    BYTE_OPS, MessagePool, MutationConfig, SplitError, block_delete,
    block_insert, bit_flip, byte_set, draw_stack_depth,
    interesting_value_overwrite, mutate, mutate_candidate, mutate_split,
    split_random, split_sequence)
from ipsm_fuzz.tests.conftest import FTP_SESSION
from ipsm_fuzz.utils.message_model import (
    Message, MessageSequence, annotate, messages_of)
from ipsm_fuzz.utils.protocol_codec import get_codec, split_requests

# FTP session annotated with dense keys: banner 1, then
# USER 2, PASS 3, MKD 4, CWD 5, STOR 6 7, LIST 6 7, QUIT 8.
PER_MESSAGE = [[2], [3], [4], [5], [6, 7], [6, 7], [8]]


@pytest.fixture
def lightftp() -> MessageSequence:
    seq = split_requests(get_codec('ftp'), FTP_SESSION)
    return annotate(seq, PER_MESSAGE, [1])


def verbs(msgs):
    return [m.data.split(b' ')[0].strip() for m in msgs]


def test_split_around_cwd_state(lightftp):
    split = split_sequence(lightftp, 5)
    assert verbs(split.m1) == [b'USER', b'PASS', b'MKD', b'CWD']
    assert verbs(split.m2) == [b'STOR']
    assert verbs(split.m3) == [b'LIST', b'QUIT']


def test_split_candidate_stays_in_reached_states(lightftp):
    split = split_sequence(lightftp, 7)
    assert verbs(split.m2) == [b'LIST', b'QUIT']
    assert split.m3 == ()


def test_split_at_last_state(lightftp):
    split = split_sequence(lightftp, 8)
    assert len(split.m1) == 7
    assert split.m2 == () and split.m3 == ()


def test_split_on_banner_state(lightftp):
    split = split_sequence(lightftp, 1)
    assert verbs(split.m1) == [b'USER']
    assert verbs(split.m2) == [b'PASS']


def test_split_unknown_state(lightftp):
    with pytest.raises(SplitError):
        split_sequence(lightftp, 42)


@given(st.integers(1, 8))
def test_split_properties(state):
    seq = annotate(split_requests(get_codec('ftp'), FTP_SESSION), PER_MESSAGE,
                   [1])
    split = split_sequence(seq, state)
    assert b''.join(m.data for m in split.messages()) == seq.buffer
    n1, n2 = len(split.m1), len(split.m2)
    assert state in seq.regions[n1 - 1].states_observed
    assert n1 == 1 or state not in seq.regions[n1 - 2].states_observed
    reached = set(seq.regions[n1 - 1].states_observed)
    for i in range(n1, n1 + n2 - 1):
        assert set(seq.regions[i].states_observed) <= reached
    if split.m3:
        assert not set(seq.regions[n1 + n2 - 1].states_observed) <= reached
    if not split.m2:
        assert not split.m3


annotations = st.lists(st.lists(st.integers(1, 6), max_size=3), min_size=1,
                       max_size=10)


@settings(max_examples=1000, deadline=None)
@given(annotations, st.lists(st.integers(1, 6), max_size=2), st.data())
def test_split_matches_annotation_scan(per_message, leading, data):
    seq = MessageSequence.from_messages(
        [Message(b'REQ %d\r\n' % i) for i in range(len(per_message))])
    seq = annotate(seq, per_message, leading)
    reached_after = []
    states = list(leading)
    for answer in per_message:
        states += answer
        reached_after.append(set(states))
    assume(reached_after[-1])
    target = data.draw(st.sampled_from(sorted(reached_after[-1])))

    split = split_sequence(seq, target)
    n1, n2 = len(split.m1), len(split.m2)
    assert b''.join(m.data for m in split.messages()) == seq.buffer
    # The prefix is the shortest one that reaches the target.
    assert target in reached_after[n1 - 1]
    assert not any(target in r for r in reached_after[:n1 - 1])
    # Only the last candidate message may leave the reached states.
    reached = reached_after[n1 - 1]
    assert all(r <= reached for r in reached_after[n1:n1 + n2 - 1])
    if split.m3:
        assert split.m2
        assert not reached_after[n1 + n2 - 1] <= reached


@given(st.integers(0, 2 ** 32 - 1))
def test_split_random_candidate_not_empty(seed):
    seq = split_requests(get_codec('ftp'), FTP_SESSION)
    split = split_random(seq, np.random.default_rng(seed))
    assert split.m2
    assert b''.join(m.data for m in split.messages()) == seq.buffer


def test_byte_operators():
    assert bit_flip(b'\x00\x00', 1, 3) == b'\x00\x08'
    assert byte_set(b'abcd', 2, b'XYZ') == b'abXY'
    assert block_insert(b'abc', 1, b'ZZ') == b'aZZbc'
    assert block_delete(b'abcd', 1, 2) == b'ad'
    with pytest.raises(ValueError):
        block_delete(b'ab', 0, 2)
    assert interesting_value_overwrite(b'\x00\x00\x00', 1, 2, -1) == \
        b'\x00\xff\xff'
    assert interesting_value_overwrite(b'\x00\x00\x00', 1, 2, 256,
                                       'little') == b'\x00\x00\x01'


def test_message_pool_deduplicates(lightftp):
    pool = MessagePool()
    assert pool.add_sequence(lightftp) == 7
    assert pool.add_sequence(lightftp) == 0
    assert Message(b'QUIT\r\n') in pool
    assert len(pool) == 7
    assert pool.sample(np.random.default_rng(0)) in pool
    with pytest.raises(ValueError):
        MessagePool().sample(np.random.default_rng(0))


@pytest.mark.parametrize('kwargs', [
    dict(ops=('swap_bits',)), dict(ops=()), dict(max_stack_power=0),
    dict(max_stack_power=8), dict(protocol_ratio=1.5)])
def test_mutation_config_validation(kwargs):
    with pytest.raises(ValueError):
        MutationConfig(**kwargs)


def test_stack_depth_is_a_power_of_two():
    rng = np.random.default_rng(5)
    depths = {draw_stack_depth(rng) for _ in range(500)}
    assert depths <= {2, 4, 8, 16, 32, 64, 128}
    assert len(depths) > 3


def test_zero_stack_leaves_candidate(lightftp, rng):
    m2 = messages_of(lightftp)[2:4]
    assert mutate_candidate(m2, MessagePool(), rng, 0) == m2


def test_insert_draws_from_pool(lightftp, rng):
    pool = MessagePool(messages_of(lightftp))
    out = mutate_candidate([], pool, rng, 4,
                           MutationConfig(ops=('msg_insert',)))
    assert len(out) == 4
    assert all(m in pool for m in out)


def test_duplicate_grows_candidate(lightftp, rng):
    m2 = messages_of(lightftp)[:2]
    out = mutate_candidate(m2, MessagePool(), rng, 3,
                           MutationConfig(ops=('msg_duplicate',)))
    assert len(out) == 5


def test_delete_keeps_one_message(lightftp, rng):
    m2 = messages_of(lightftp)[:3]
    out = mutate_candidate(m2, MessagePool(), rng, 10,
                           MutationConfig(ops=('msg_delete',)),
                           keep_one=True)
    assert len(out) == 1


def test_byte_ops_keep_message_count(lightftp, rng):
    m2 = messages_of(lightftp)
    out = mutate_candidate(m2, MessagePool(), rng, 64,
                           MutationConfig(ops=BYTE_OPS))
    assert len(out) == len(m2)
    assert all(len(m) > 0 for m in out)
    assert out != m2


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2 ** 32 - 1))
def test_mutation_preserves_prefix(state, seed):
    seq = annotate(split_requests(get_codec('ftp'), FTP_SESSION), PER_MESSAGE,
                   [1])
    pool = MessagePool(messages_of(seq))
    rng = np.random.default_rng(seed)
    prefix = split_sequence(seq, state).m1
    out = mutate(seq, state, pool, rng)
    assert out.buffer.startswith(b''.join(m.data for m in prefix))
    assert out.depth == seq.depth + 1
    assert len(out) >= len(prefix)


def test_whole_sequence_candidate_never_empties():
    seq = split_requests(get_codec('ftp'), b'NOOP\r\n')
    split = split_random(seq, np.random.default_rng(0))
    cfg = MutationConfig(ops=('msg_delete',))
    for seed in range(20):
        out = mutate_split(split, MessagePool(), np.random.default_rng(seed),
                           cfg=cfg)
        assert len(out) == 1
