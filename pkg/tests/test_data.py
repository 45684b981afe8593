from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sesgcn.data import (
    MotionSequence,
    SkeletonTopology,
    build_dataset,
    default_corpus,
    default_topology,
    load_corpus,
    make_split,
    save_corpus,
    synth_generate,
    window_sequences,
)
from sesgcn.data.corpus import format_sequence, mm_to_m, m_to_mm, overlaps_collision, parse_sequence
from sesgcn.data.split import split_counts
from sesgcn.data.synth import MotionParams, ReachEvent, forward_kinematics, speed_bound_mm_s
from sesgcn.errors import ConfigError, ContractViolation, EmptyCorpusError, ParseError, SchemaError
from sesgcn.metrics import mpjpe_at_frame, zero_velocity_forecast


def seq(n=45, V=2, fps=25.0, collisions=(), sid="a", subject="S0", action="lift"):
    frames = np.arange(n * V * 3, dtype=float).reshape(n, V, 3)
    return MotionSequence(frames, fps, subject, action, collisions, sid)


def bone_lengths(frames, topo):
    b = np.array(topo.bones)
    return np.linalg.norm(frames[:, b[:, 1]] - frames[:, b[:, 0]], axis=-1)


# ---------------------------------------------------------------------------
# topology


def test_default_topology_is_a_15_joint_tree():
    topo = default_topology()
    assert topo.V == 15 and len(topo.bones) == 14
    assert topo.root == 0 and sorted(topo.topological_order()) == list(range(15))
    assert all(r > 0 for r in topo.limb_radius_m)
    assert topo.limb_radius_m[topo.bones.index((3, 4))] == 0.05  # upper arm


@pytest.mark.parametrize(
    "bones",
    [
        [(0, 1), (1, 2), (2, 0)],  # cycle
        [(0, 1)],  # disconnected
        [(0, 1), (0, 1)],  # duplicate
    ],
)
def test_topology_rejects_non_trees(bones):
    with pytest.raises(SchemaError):
        SkeletonTopology(("a", "b", "c"), tuple(bones), (0.05,) * len(bones))


def test_topology_rejects_nonpositive_radius():
    with pytest.raises(SchemaError):
        SkeletonTopology(("a", "b"), ((0, 1),), (0.0,))


def test_topology_json_round_trip(tmp_path):
    topo = default_topology()
    topo.save(tmp_path / "t.json")
    assert SkeletonTopology.load(tmp_path / "t.json") == topo


# ---------------------------------------------------------------------------
# sequences and corpus files


def test_sequence_validation():
    with pytest.raises(ContractViolation, match="frame 1"):
        MotionSequence(np.array([[[0, 0, 0]], [[np.nan, 0, 0]]], dtype=float), 25.0, "S", "a")
    with pytest.raises(ContractViolation):
        MotionSequence(np.zeros((3, 1, 3)), 25.0, "S", "a", (3,))
    with pytest.raises(ContractViolation):
        MotionSequence(np.zeros((0, 1, 3)), 25.0, "S", "a")


def test_sequence_text_format():
    s = seq(n=2, V=1, collisions=(1,))
    text = format_sequence(s)
    lines = text.split("\n")
    assert lines[0] == "SEQ v1 fps=25.0 subject=S0 action=lift V=1"
    assert lines[1] == "collisions=1"
    assert lines[2].split() == ["0", "1", "2"]
    assert text.endswith("\n") and "\r" not in text


def test_corpus_round_trip_is_bitwise(tmp_path):
    seqs, topo = default_corpus(length=30)
    seqs = seqs[:5]
    seqs[0] = MotionSequence(seqs[0].frames, 25.0, seqs[0].subject_id, seqs[0].action_label, (3, 7), seqs[0].sequence_id)
    save_corpus(tmp_path, seqs, topo)
    back, topo2 = load_corpus(tmp_path)
    assert topo2 == topo
    by_id = {s.sequence_id: s for s in back}
    for s in seqs:
        b = by_id[s.sequence_id]
        assert b.frames.tobytes() == s.frames.tobytes()
        assert (b.subject_id, b.action_label, b.collision_frames, b.fps) == (s.subject_id, s.action_label, s.collision_frames, s.fps)


def test_nan_coordinate_rejected_with_position():
    text = "SEQ v1 fps=25 subject=S action=a V=1\n0 0 0\n1 nan 2\n"
    with pytest.raises(ParseError, match=r"x\.seq:3.*record 1"):
        parse_sequence(text, "x", "x.seq")


@pytest.mark.parametrize(
    "text",
    [
        "HELLO\n0 0 0\n",
        "SEQ v1 fps=25 subject=S action=a V=1\n0 0\n",
        "SEQ v1 fps=25 subject=S action=a V=1\n0 0 zero\n",
        "SEQ v1 fps=25 subject=S V=1\n0 0 0\n",
        "SEQ v1 fps=25 subject=S action=a V=1\ncollisions=4\n0 0 0\n",
    ],
)
def test_malformed_sequences(text):
    with pytest.raises(ParseError):
        parse_sequence(text)


def test_empty_corpus(tmp_path):
    with pytest.raises(EmptyCorpusError):
        load_corpus(tmp_path)


def test_inconsistent_corpus(tmp_path):
    topo = default_topology()
    s = seq(V=15, n=3)
    save_corpus(tmp_path, [s], topo)
    (tmp_path / "b.seq").write_text(format_sequence(seq(V=2, n=3, sid="b")))
    with pytest.raises(SchemaError, match="V=2"):
        load_corpus(tmp_path)
    (tmp_path / "b.seq").write_text(format_sequence(seq(V=15, n=3, sid="b", fps=20.0)))
    with pytest.raises(SchemaError, match="frame rates"):
        load_corpus(tmp_path)


def test_unit_conversion():
    assert mm_to_m(1500.0) == 1.5 and m_to_mm(0.13) == 130.0


# ---------------------------------------------------------------------------
# windowing


def test_window_count_by_hand():
    w = window_sequences([seq(n=45)], T=10, K=25, stride=10)
    assert [e.start for e in w] == [0, 10]
    np.testing.assert_array_equal(w[1].input, seq(n=45).frames[10:20])
    np.testing.assert_array_equal(w[1].target, seq(n=45).frames[20:45])


def test_stride_equal_to_length_gives_at_most_one_window():
    assert len(window_sequences([seq(n=40)], 10, 25, stride=40)) == 1
    assert window_sequences([seq(n=30)], 10, 25, stride=30) == []


def test_collision_guard_excludes_overlapping_windows():
    s = seq(n=100, collisions=(12,))
    kept = [e.start for e in window_sequences([s], 10, 25, stride=1, exclude_collisions=True)]
    # windows [s, s + 34] overlapping [12, 37] are dropped: s <= 37
    assert kept == list(range(38, 66))
    assert len(window_sequences([s], 10, 25, stride=1, exclude_collisions=False)) == 66


def test_window_collision_labels_cover_forecast_span_only():
    s = seq(n=60, collisions=(15, 40))
    w = {e.start: e for e in window_sequences([s], 10, 25, stride=5)}
    assert w[0].collision_frames == (15,)
    assert w[5].collision_frames == (15,)
    # frame 15 lies in the observed part of this window, so only 40 counts
    assert w[10].collision_frames == (40,)
    assert list(w[10].forecast_frames) == list(range(20, 45))


@settings(max_examples=60, deadline=None)
@given(n=st.integers(1, 80), T=st.integers(1, 10), K=st.integers(1, 20), stride=st.integers(1, 15))
def test_windowing_covers_every_eligible_start_once(n, T, K, stride):
    w = window_sequences([seq(n=n, V=1)], T, K, stride)
    assert [e.start for e in w] == list(range(0, n - T - K + 1, stride))
    assert all(e.start + T + K <= n for e in w)


@settings(max_examples=60, deadline=None)
@given(start=st.integers(0, 50), span=st.integers(1, 40), c=st.integers(0, 100), guard=st.integers(0, 30))
def test_overlap_matches_set_oracle(start, span, c, guard):
    window = set(range(start, start + span))
    blocked = set(range(c, c + guard + 1))
    assert overlaps_collision(start, span, [c], guard) == bool(window & blocked)


# ---------------------------------------------------------------------------
# synthetic generator


def test_synth_is_deterministic():
    topo = default_topology()
    a = synth_generate(topo, 3, 40, 25.0, seed=5)
    b = synth_generate(topo, 3, 40, 25.0, seed=5)
    c = synth_generate(topo, 3, 40, 25.0, seed=6)
    assert all(x.frames.tobytes() == y.frames.tobytes() for x, y in zip(a, b))
    assert not np.array_equal(a[0].frames, c[0].frames)


def test_zero_amplitude_gives_constant_pose_and_perfect_baseline():
    topo = default_topology()
    params = MotionParams(amplitude_deg=(0.0, 0.0), drift_mm_s=0.0)
    s = synth_generate(topo, 1, 40, 25.0, params, seed=1)[0]
    np.testing.assert_array_equal(s.frames, np.broadcast_to(s.frames[0], s.frames.shape))
    pred = zero_velocity_forecast(s.frames[:10], 25)
    assert all(mpjpe_at_frame(pred, s.frames[10:35], t) == 0.0 for t in range(25))


def test_invalid_motion_params():
    with pytest.raises(ConfigError):
        MotionParams(amplitude_deg=(-1.0, 5.0))
    with pytest.raises(ConfigError):
        MotionParams(actions=("dance",))


@settings(max_examples=8, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_bone_lengths_constant_and_speed_bounded(seed):
    topo = default_topology()
    params = MotionParams()
    s = synth_generate(topo, 1, 60, 25.0, params, seed=seed)[0]
    L = bone_lengths(s.frames, topo)
    assert np.max(np.abs(L / L[0] - 1.0)) < 1e-9
    speed = np.linalg.norm(np.diff(s.frames, axis=0), axis=-1).max() * 25.0
    assert speed <= speed_bound_mm_s(topo, params, 25.0)


def test_reach_event_keeps_bones_and_reaches_target():
    topo = default_topology()
    rest = synth_generate(topo, 1, 80, 25.0, MotionParams(amplitude_deg=(0, 0), drift_mm_s=0), seed=0)[0]
    wrist = topo.index("r_wrist")
    target = tuple(rest.frames[0, topo.index("pelvis")] + np.array([600.0, -200.0, 300.0]))
    ev = ReachEvent(10, 30, target)
    s = synth_generate(topo, 1, 80, 25.0, MotionParams(amplitude_deg=(0, 0), drift_mm_s=0), seed=0, reach_events={0: [ev]})[0]
    L = bone_lengths(s.frames, topo)
    assert np.max(np.abs(L / L[0] - 1.0)) < 1e-9
    d_before = np.linalg.norm(rest.frames[25, wrist] - target)
    d_peak = np.linalg.norm(s.frames[10:40, wrist] - np.array(target), axis=-1).min()
    assert d_peak < 0.5 * d_before
    np.testing.assert_allclose(s.frames[:10], rest.frames[:10])
    speed = np.linalg.norm(np.diff(s.frames, axis=0), axis=-1).max() * 25.0
    assert speed <= speed_bound_mm_s(topo, MotionParams(amplitude_deg=(0, 0), drift_mm_s=0), 25.0, [ev])


def test_forward_kinematics_rest_pose():
    topo = default_topology()
    pos = forward_kinematics(topo, np.zeros((1, topo.V, 3)), np.array([[0.0, 0.0, 950.0]]))
    np.testing.assert_allclose(pos[0], topo.rest_pose_mm(), atol=1e-9)


def test_default_corpus_layout():
    seqs, topo = default_corpus(length=20)
    assert len(seqs) == 60 and len({s.subject_id for s in seqs}) == 20
    assert len({s.sequence_id for s in seqs}) == 60


# ---------------------------------------------------------------------------
# splits


def test_twenty_subjects_split_14_2_4():
    seqs, _ = default_corpus(length=20)
    split = make_split(seqs, (0.7, 0.1, 0.2), seed=0)
    assert tuple(len(split.subjects[k]) for k in ("train", "validation", "test")) == (14, 2, 4)
    assert make_split(seqs, seed=0) == split
    assert json.loads(json.dumps(split.to_json()))["seed"] == 0


def test_single_subject_cannot_be_split():
    with pytest.raises(ConfigError):
        make_split([seq()], (0.7, 0.1, 0.2))
    with pytest.raises(ConfigError):
        split_counts(10, (0.5, 0.5, 0.5))


@settings(max_examples=40, deadline=None)
@given(n_subj=st.integers(3, 30), per=st.integers(1, 3), seed=st.integers(0, 1000))
def test_splits_are_subject_disjoint_and_cover(n_subj, per, seed):
    seqs = [seq(n=3, V=1, sid=f"s{i}_{k}", subject=f"P{i}") for i in range(n_subj) for k in range(per)]
    try:
        split = make_split(seqs, (0.6, 0.2, 0.2), seed)
    except ConfigError:
        return
    subj = {k: set(v) for k, v in split.subjects.items()}
    assert not (subj["train"] & subj["validation"]) and not (subj["train"] & subj["test"]) and not (subj["validation"] & subj["test"])
    ids = split.train + split.validation + split.test
    assert sorted(ids) == sorted(s.sequence_id for s in seqs)


def test_build_dataset_windows_each_split():
    seqs, _ = default_corpus(length=60)
    ds = build_dataset(seqs, make_split(seqs, seed=0), T=10, K=25, stride=10)
    assert len(ds.train) == 42 * 3 and len(ds.validation) == 6 * 3 and len(ds.test) == 12 * 3
    test_subj = {e.subject_id for e in ds.test}
    assert not test_subj & {e.subject_id for e in ds.train}
