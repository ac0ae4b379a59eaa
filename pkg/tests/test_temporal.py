import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import frame_targets_bf, iou_bf, nms_bf
from storycut.pipeline import apply_refinement
from storycut.temporal import (
    FrameLabel,
    Interval,
    ProposalLabel,
    ScoredInterval,
    assign_proposal_labels,
    dilated_merge,
    extract_runs,
    frame_targets,
    iou,
    nms,
    regression_targets,
)


@st.composite
def intervals(draw, max_frame=60):
    s = draw(st.integers(0, max_frame - 1))
    e = draw(st.integers(s + 1, max_frame))
    return Interval(s, e)


def random_runs(rng, n, horizon=200):
    cuts = np.sort(rng.choice(np.arange(horizon), size=2 * n, replace=False))
    return [Interval(int(cuts[2 * k]), int(cuts[2 * k + 1])) for k in range(n)]


def test_interval_validation():
    with pytest.raises(ValueError):
        Interval(5, 5)
    with pytest.raises(ValueError):
        Interval(-1, 3)
    with pytest.raises(ValueError):
        ScoredInterval(Interval(0, 2), 1.5)
    assert Interval(2, 9).length == 7


def test_iou_examples():
    assert iou(Interval(0, 10), Interval(0, 10)) == 1.0
    assert iou(Interval(0, 10), Interval(20, 30)) == 0.0
    assert iou(Interval(0, 10), Interval(5, 15)) == pytest.approx(1 / 3)


@given(intervals(), intervals())
def test_iou_properties(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0
    assert (v == 1.0) == (a == b)
    assert v == pytest.approx(iou_bf((a.start, a.end), (b.start, b.end)), abs=1e-15)


def test_dilated_merge_examples():
    assert dilated_merge([Interval(0, 10), Interval(14, 20)]) == [Interval(0, 20)]
    assert dilated_merge([Interval(0, 10), Interval(16, 20)]) == [Interval(0, 10), Interval(16, 20)]
    assert dilated_merge([Interval(0, 5), Interval(8, 12), Interval(15, 30)]) == [Interval(0, 30)]


def test_dilated_merge_rejects_unsorted():
    with pytest.raises(ValueError):
        dilated_merge([Interval(10, 20), Interval(0, 5)])
    with pytest.raises(ValueError):
        dilated_merge([Interval(0, 10), Interval(5, 12)])


def test_dilated_merge_veto():
    runs = [Interval(0, 10), Interval(12, 20)]
    assert dilated_merge(runs, 5, lambda a, b: False) == runs


@settings(max_examples=200)
@given(st.integers(0, 2**32 - 1), st.integers(0, 12), st.integers(0, 8))
def test_dilated_merge_idempotent(seed, n, gap):
    runs = random_runs(np.random.default_rng(seed), n)
    once = dilated_merge(runs, gap)
    assert dilated_merge(once, gap) == once
    covered = set().union(*(range(r.start, r.end) for r in runs)) if runs else set()
    assert all(any(m.start <= f < m.end for m in once) for f in covered)


def test_extract_runs():
    assert extract_runs([0, 1, 1, 0, 1]) == [Interval(1, 3), Interval(4, 5)]
    assert extract_runs([]) == []


def test_nms_examples():
    one = [ScoredInterval(Interval(3, 9), 0.4)]
    assert nms(one, 0.5) == one
    a = ScoredInterval(Interval(0, 10), 0.9)
    b = ScoredInterval(Interval(0, 10), 0.4)
    assert nms([b, a], 0.99) == [a]


def test_nms_tie_break():
    a = ScoredInterval(Interval(5, 15), 0.5)
    b = ScoredInterval(Interval(4, 16), 0.5)
    c = ScoredInterval(Interval(4, 14), 0.5)
    # equal scores: earlier start first, then shorter
    assert nms([a, b, c], 1.0) == [c, b, a]


@settings(max_examples=60)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.5, 0.8]))
def test_nms_matches_oracle(seed, thresh):
    rng = np.random.default_rng(seed)
    cands = []
    for _ in range(50):
        s = int(rng.integers(0, 80))
        e = int(rng.integers(s + 1, 100))
        cands.append(ScoredInterval(Interval(s, e), float(rng.choice([0.1, 0.5, rng.uniform()]))))
    got = nms(cands, thresh)
    want = nms_bf([((c.start, c.end), c.score) for c in cands], thresh)
    assert [((c.start, c.end), c.score) for c in got] == want
    for i, x in enumerate(got):
        for y in got[i + 1:]:
            assert iou(x.interval, y.interval) <= thresh
    assert [c.score for c in got] == sorted((c.score for c in got), reverse=True)


def test_frame_targets_examples():
    assert (frame_targets(10, []) == FrameLabel.BACKGROUND).all()
    lab = frame_targets(12, [Interval(3, 9)], 1)
    expect = [1, 1, 2, 2, 2, 0, 0, 3, 3, 3, 1, 1]
    assert lab.tolist() == expect


def test_frame_targets_rejects_overlap():
    with pytest.raises(ValueError):
        frame_targets(20, [Interval(0, 10), Interval(5, 12)])


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 3))
def test_frame_targets_match_oracle(seed, hw):
    rng = np.random.default_rng(seed)
    T = int(rng.integers(5, 120))
    n = int(rng.integers(0, 6))
    stories = [iv for iv in random_runs(rng, n, T)] if 2 * n <= T else []
    lab = frame_targets(T, stories, hw)
    assert len(lab) == T
    assert set(lab.tolist()) <= {0, 1, 2, 3}
    assert lab.tolist() == frame_targets_bf(T, [(s.start, s.end) for s in stories], hw)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1), st.integers(1, 2))
def test_begin_window_count_equals_story_count(seed, hw):
    rng = np.random.default_rng(seed)
    stories = []
    pos = int(rng.integers(0, 5))
    for _ in range(int(rng.integers(1, 6))):
        pos += int(rng.integers(2 * hw + 1, 10))
        L = int(rng.integers(2 * hw + 2, 20))
        stories.append(Interval(pos, pos + L))
        pos += L
    lab = frame_targets(pos + 5, stories, hw)
    assert len(extract_runs(lab == FrameLabel.BEGIN)) == len(stories)


def test_assign_labels_examples():
    gt = [Interval(5, 15), Interval(40, 60)]
    out = assign_proposal_labels([Interval(40, 60), Interval(20, 30), Interval(0, 10)], gt)
    assert out[0].label == ProposalLabel.POSITIVE and out[0].matched_gt == Interval(40, 60)
    assert out[0].reg_targets == (0.0, 0.0)
    assert out[1].label == ProposalLabel.NEGATIVE and out[1].matched_gt is None
    assert out[2].label == ProposalLabel.IGNORE


def test_assign_labels_without_gt():
    out = assign_proposal_labels([Interval(0, 3)], [])
    assert out[0].label == ProposalLabel.NEGATIVE


def test_assign_labels_argmax_tie_goes_to_earliest_gt():
    gt = [Interval(20, 30), Interval(0, 10)]
    out = assign_proposal_labels([Interval(5, 25)], gt, hi=0.19, lo=0.1)
    assert out[0].matched_gt == Interval(0, 10)


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_assign_labels_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    gt = random_runs(rng, int(rng.integers(1, 6)), 150)
    props = [Interval(int(s), int(s + rng.integers(1, 40))) for s in rng.integers(0, 140, 20)] + list(gt)
    a = assign_proposal_labels(props, gt)
    perm = [gt[i] for i in rng.permutation(len(gt))]
    b = assign_proposal_labels(props, perm)
    assert a == b
    for lp, p in zip(a[-len(gt):], gt):
        assert lp.label == ProposalLabel.POSITIVE and lp.matched_gt == p


def test_regression_targets_examples():
    assert regression_targets(Interval(3, 9), Interval(3, 9)) == (0.0, 0.0)
    ts, te = regression_targets(Interval(10, 20), Interval(12, 22))
    assert ts == pytest.approx(0.2) and te == pytest.approx(0.2)


@settings(max_examples=100)
@given(intervals(300), intervals(300))
def test_regression_round_trip(p, g):
    ts, te = regression_targets(p, g)
    assert apply_refinement(p, ts, te, 1000) == g
