import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from storycut.data_io import SynthConfig, synth_generate
from storycut.models import BanModel, ProposalHead, ban_window_forward
from storycut.pipeline import (
    HeadDataConfig,
    PipelineConfig,
    apply_refinement,
    augment_proposals,
    build_head_samples,
    detect_from_proposals,
    generate_proposals,
    head_inputs,
    propose,
    refine_and_score,
    score_frames,
    sliding_window_proposals,
    truncate_video,
)
from storycut.temporal import FrameLabel, Interval, ProposalLabel, ScoredInterval, iou, nms


def zero_model(model):
    for name in model.store:
        model.store.value(name)[...] = 0.0
    return model


def test_score_frames_zero_model_uniform():
    s = score_frames(zero_model(BanModel(3, hidden=2)), np.full((9, 3), 2.0))
    np.testing.assert_array_equal(s, np.full((9, 4), 0.25))


def test_score_frames_windows():
    m = BanModel(3, hidden=4, seed=1)
    x = np.random.default_rng(0).normal(size=(12, 3))
    s = score_frames(m, x, chunk=5)
    for t in range(12):
        idx = [min(max(t + k, 0), 11) for k in range(-3, 4)]
        np.testing.assert_allclose(s[t], ban_window_forward(m.params(), x[idx]), rtol=0, atol=1e-15)
    one = score_frames(m, x[:1])
    np.testing.assert_allclose(one[0], ban_window_forward(m.params(), np.repeat(x[:1], 7, axis=0)), rtol=0, atol=1e-15)


def _scores(T, within_runs, marks=()):
    s = np.zeros((T, 4))
    s[:, FrameLabel.WITHIN] = 0.1
    s[:, FrameLabel.BACKGROUND] = 0.9
    for a, b in within_runs:
        s[a:b] = [0.9, 0.1 / 3, 0.1 / 3, 0.1 / 3]
    for f, lab in marks:
        s[f] = 0.05
        s[f, lab] = 0.85
    return s


def test_generate_proposals_examples():
    assert generate_proposals(_scores(50, [])) == []
    s = _scores(80, [(10, 40), (44, 60)])
    props = generate_proposals(s)
    assert [p.interval for p in props] == [Interval(10, 60)]
    assert props[0].score == pytest.approx(s[10:60, 0].mean(), abs=1e-15)


def test_boundary_gating_blocks_merge():
    s = _scores(80, [(10, 40), (44, 60)], marks=[(42, FrameLabel.BEGIN)])
    assert sorted(p.interval for p in generate_proposals(s)) == [Interval(10, 40), Interval(44, 60)]
    assert [p.interval for p in generate_proposals(s, boundary_gating=False)] == [Interval(10, 60)]


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.3, 0.5, 0.8]))
def test_proposals_respect_nms(seed, thresh):
    rng = np.random.default_rng(seed)
    s = rng.dirichlet(np.ones(4), size=int(rng.integers(1, 200)))
    props = generate_proposals(s, nms_thresh=thresh)
    for i, a in enumerate(props):
        assert 0 <= a.score <= 1
        for b in props[i + 1:]:
            assert iou(a.interval, b.interval) <= thresh


def test_zero_model_proposes_whole_video():
    # uniform scores: argmax ties resolve to category 0 (within), so every frame is in a story
    props = propose(zero_model(BanModel(3, hidden=2)), np.ones((30, 3)), PipelineConfig())
    assert props == [ScoredInterval(Interval(0, 30), 0.25)]


def test_augment_examples():
    p = [Interval(10, 20)]
    assert augment_proposals(p, 0.0, 100) == p
    assert augment_proposals(p, 0.25, 100) == [Interval(7, 23)]
    assert augment_proposals([Interval(2, 10)], 0.5) == [Interval(0, 14)]
    assert augment_proposals([Interval(2, 10)], 0.5, 12) == [Interval(0, 12)]
    assert augment_proposals([ScoredInterval(Interval(10, 20), 0.3)], 0.25, 100) == [ScoredInterval(Interval(7, 23), 0.3)]


def test_sliding_window_examples():
    w = [x.interval for x in sliding_window_proposals(100, (50,), 0.5)]
    assert w == [Interval(0, 50), Interval(25, 75), Interval(50, 100)]
    assert [x.interval for x in sliding_window_proposals(40, (50,))] == [Interval(0, 40)]
    assert all(x.score == 1.0 for x in sliding_window_proposals(300))


@settings(max_examples=100)
@given(st.integers(1, 400), st.lists(st.integers(1, 300), min_size=1, max_size=4, unique=True), st.sampled_from([0.25, 0.5, 1.0]))
def test_sliding_window_enumeration(T, scales, frac):
    expect = []
    for L in scales:
        if L >= T:
            cand = [(0, T)]
        else:
            stride = math.ceil(frac * L)
            cand = [(s, s + L) for s in range(0, T) if s % stride == 0 and s + L <= T]
        expect += [c for c in cand if c not in expect]
    got = [(w.start, w.end) for w in sliding_window_proposals(T, scales, frac)]
    assert got == expect


def test_apply_refinement_examples():
    p = Interval(10, 20)
    assert apply_refinement(p, 0.0, 0.0, 100) == p
    assert apply_refinement(p, 0.2, 0.2, 100) == Interval(12, 22)
    assert apply_refinement(p, -5.0, 5.0, 30) == Interval(0, 30)
    assert apply_refinement(p, 2.0, -2.0, 100) == p  # degenerate result falls back


def test_detection_stage_zero_head():
    x = np.random.default_rng(0).normal(size=(50, 3))
    head = zero_model(ProposalHead(3, hidden=2, num_layers=2))
    assert refine_and_score(head, x, []) == []
    props = [ScoredInterval(Interval(5, 15), 0.9), ScoredInterval(Interval(30, 45), 0.4)]
    dets = refine_and_score(head, x, props)
    assert [d.interval for d in dets] == [p.interval for p in props]
    assert all(d.score == 0.5 for d in dets)


def test_truncate_video_is_composition():
    data = synth_generate(SynthConfig.easy(num_videos=1, feature_dim=6, audio_channels=2, seed=3))
    x = data[0][0].values
    ban = BanModel(6, hidden=4, seed=1)
    head = ProposalHead(6, hidden=3, num_layers=2, seed=2)
    cfg = PipelineConfig()
    scores = score_frames(ban, x)
    props = generate_proposals(scores, cfg.max_gap, cfg.proposal_nms, cfg.boundary_gating)
    aug = augment_proposals(props, cfg.rho, len(x))
    p, off = head.predict(head_inputs(x, aug))
    refined = [ScoredInterval(apply_refinement(a.interval, o[0], o[1], len(x)), float(q)) for a, q, o in zip(aug, p, off)]
    manual = nms(refined, cfg.detection_nms)
    assert truncate_video(ban, head, x, cfg) == manual
    assert detect_from_proposals(head, x, props, cfg) == manual
    scores_sorted = [d.score for d in manual]
    assert scores_sorted == sorted(scores_sorted, reverse=True)


def test_head_samples_exclude_ignored():
    data = synth_generate(SynthConfig.easy(num_videos=2, seed=4))
    x = [f.values for f, _ in data]
    anns = [a for _, a in data]
    samples = build_head_samples(x, anns, None, HeadDataConfig())
    labels = {s.labeled.label for s in samples}
    assert labels == {ProposalLabel.POSITIVE, ProposalLabel.NEGATIVE}
    for s in samples:
        assert len(s.features) == s.labeled.proposal.length
