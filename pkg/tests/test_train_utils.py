import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from megrez_moe.checks import packing_check, toy_config
from megrez_moe.model import InputError, build, forward
from megrez_moe.moe import GateDecision
from megrez_moe.train_utils import (
    SegmentationError,
    Turn,
    TurnSegmentation,
    balance_metrics,
    block_causal_mask,
    build_packed_batch,
    turn_level_loss,
)


def seg(*turns):
    return TurnSegmentation([[Turn(*t) for t in turns]])


def test_turn_loss_hand_example():
    assert turn_level_loss(np.array([2.0, 4.0, 6.0]), seg((0, 1), (1, 3))) == 3.5
    # the sequence-level mean would be 4.0
    assert np.mean([2.0, 4.0, 6.0]) == 4.0


def test_single_turn_is_token_mean():
    x = np.array([0.1, 0.7, 0.2, 3.0, 1.1])
    assert turn_level_loss(x, seg((0, 5))) == sum(x.tolist()) / 5


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(1, 6), min_size=1, max_size=6), st.floats(0.0, 10.0))
def test_constant_loss_is_fixed_point(lengths, c):
    bounds, at = [], 0
    for n in lengths:
        bounds.append((at, at + n))
        at += n
    assert turn_level_loss(np.full(at, c), seg(*bounds)) == pytest.approx(c, rel=1e-15, abs=0)


def test_non_trainable_turns_and_gaps_ignored():
    x = np.array([100.0, 2.0, 100.0, 4.0, 6.0])
    s = TurnSegmentation([[Turn(0, 1, False), Turn(1, 2)], [Turn(3, 5)]])
    assert turn_level_loss(x, s) == (2.0 + 5.0) / 2


def test_turn_order_does_not_matter():
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0, 9.0])
    a = turn_level_loss(x, seg((0, 2), (2, 3), (3, 6)))
    b = turn_level_loss(x[[3, 4, 5, 2, 0, 1]], seg((0, 3), (3, 4), (4, 6)))
    assert a == b


def test_segmentation_errors():
    with pytest.raises(SegmentationError):
        turn_level_loss(np.ones(3), seg((0, 1), (1, 1)))
    with pytest.raises(SegmentationError):
        turn_level_loss(np.ones(3), seg((0, 2), (1, 3)))
    with pytest.raises(SegmentationError):
        turn_level_loss(np.ones(3), seg((0, 4)))
    with pytest.raises(SegmentationError):
        turn_level_loss(np.ones(3), seg((0, 3, False)))


def test_segmentation_roundtrip():
    s = TurnSegmentation([[Turn(0, 2), Turn(2, 3, False)], [Turn(3, 7)]])
    assert TurnSegmentation.loads(s.dumps()) == s


def test_packing_two_samples():
    (batch,) = build_packed_batch([[5, 6], [7, 8]], 4)
    assert batch.token_ids.tolist() == [5, 6, 7, 8]
    assert batch.positions.tolist() == [0, 1, 0, 1]
    assert batch.sample_bounds == [(0, 2), (2, 4)]
    expected = np.array([[1, 0, 0, 0],
                         [1, 1, 0, 0],
                         [0, 0, 1, 0],
                         [0, 0, 1, 1]], dtype=bool)
    assert np.array_equal(batch.attention_mask, expected)


def test_single_sample_is_plain_causal():
    (batch,) = build_packed_batch([[1, 2, 3]], 8)
    assert np.array_equal(batch.attention_mask, np.tril(np.ones((3, 3), dtype=bool)))
    assert batch.positions.tolist() == [0, 1, 2]


def test_greedy_split_and_padding():
    batches = build_packed_batch([[1] * 3, [2] * 3, [3] * 2], 5, pad_id=0)
    assert [b.sample_bounds for b in batches] == [[(0, 3)], [(0, 3), (3, 5)]]
    first = batches[0]
    assert first.token_ids.tolist() == [1, 1, 1, 0, 0]
    assert first.sample_ids.tolist() == [0, 0, 0, -1, -1]
    # padding sees only itself, real tokens never see padding
    assert not first.attention_mask[:3, 3:].any()
    assert np.array_equal(first.attention_mask[3:, :], np.array([[0, 0, 0, 1, 0], [0, 0, 0, 0, 1]], dtype=bool))


def test_oversized_or_empty_sample():
    with pytest.raises(InputError):
        build_packed_batch([[1] * 5], 4)
    with pytest.raises(InputError):
        build_packed_batch([[1], []], 4)


def test_block_causal_mask_brute_force():
    ids = np.array([0, 0, 1, 1, 1, 2, -1])
    m = block_causal_mask(ids)
    for q in range(len(ids)):
        for k in range(len(ids)):
            want = (q == k) if ids[q] < 0 else (ids[q] == ids[k] and k <= q)
            assert m[q, k] == want


def test_packed_forward_isolation():
    assert packing_check(0) <= 1e-10


def test_padded_forward_isolation():
    cfg = toy_config()
    model = build(cfg)
    samples = [[3, 4, 5], [6, 7]]
    (batch,) = build_packed_batch(samples, 8, pad_id=0)
    logits = forward(model, batch.token_ids, batch.attention_mask, batch.positions)
    for b, s in enumerate(samples):
        assert np.max(np.abs(logits[batch.sample_slice(b)] - forward(model, s))) <= 1e-10


def test_balance_metrics():
    d = GateDecision(np.array([[0, 1], [0, 2], [0, 1]]), np.full((3, 2), 0.5))
    m = balance_metrics([d], 4)
    assert m.counts.tolist() == [3, 2, 1, 0]
    assert m.max_over_mean == 3 / 1.5
    p = np.array([3, 2, 1]) / 6
    assert m.entropy == pytest.approx(-np.sum(p * np.log(p)), rel=1e-15)
    with pytest.raises(ValueError):
        balance_metrics([], 4)
