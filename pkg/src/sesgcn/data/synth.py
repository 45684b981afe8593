"""Deterministic synthetic motion from forward kinematics over a bone tree.

Every joint carries three Euler angles oscillating as ``A sin(2 pi f t + phi)``.
Joint rotations compose down the tree, so bone lengths stay fixed. The root
drifts linearly in the horizontal plane. Optional reach events swing one arm
about its shoulder towards a target point, with a short root step, using a
``sin^2`` blend that starts and ends at rest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial.transform import Rotation

from ..errors import ConfigError
from .corpus import MotionSequence
from .topology import SkeletonTopology, default_topology

# (amplitude multiplier, frequency multiplier) per joint group and action.
ACTION_PROFILES: dict[str, dict[str, tuple[float, float]]] = {
    "polish": {"root": (0.2, 1.0), "spine": (0.3, 1.0), "head": (0.3, 1.0),
               "r_arm": (1.2, 1.3), "l_arm": (0.6, 1.0), "r_leg": (0.2, 1.0), "l_leg": (0.2, 1.0)},
    "lift": {"root": (0.3, 0.8), "spine": (1.0, 0.8), "head": (0.4, 0.8),
             "r_arm": (0.8, 0.8), "l_arm": (0.8, 0.8), "r_leg": (1.0, 0.8), "l_leg": (1.0, 0.8)},
    "pick_place": {"root": (0.4, 1.0), "spine": (1.2, 1.0), "head": (0.5, 1.0),
                   "r_arm": (1.0, 1.0), "l_arm": (0.7, 1.0), "r_leg": (0.3, 1.0), "l_leg": (0.3, 1.0)},
    "hammer": {"root": (0.2, 1.5), "spine": (0.4, 1.5), "head": (0.3, 1.0),
               "r_arm": (1.5, 1.5), "l_arm": (0.4, 1.0), "r_leg": (0.2, 1.0), "l_leg": (0.2, 1.0)},
}


def joint_group(name: str) -> str:
    if name == "pelvis":
        return "root"
    if name == "neck":
        return "spine"
    if name == "head":
        return "head"
    for side in ("r", "l"):
        if name.startswith(side + "_"):
            limb = name[2:]
            if limb in ("shoulder", "elbow", "wrist"):
                return f"{side}_arm"
            if limb in ("hip", "knee", "ankle"):
                return f"{side}_leg"
    return "other"


@dataclass(frozen=True)
class MotionParams:
    amplitude_deg: tuple[float, float] = (3.0, 20.0)
    frequency_hz: tuple[float, float] = (0.25, 1.0)
    drift_mm_s: float = 60.0
    body_scale: tuple[float, float] = (0.9, 1.1)
    actions: tuple[str, ...] = ("polish", "lift", "pick_place", "hammer")

    def __post_init__(self):
        for name in ("amplitude_deg", "frequency_hz", "body_scale"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigError(f"{name} must be a range 0 <= lo <= hi, got ({lo}, {hi})")
        if self.body_scale[0] <= 0:
            raise ConfigError("body_scale must be positive")
        if self.drift_mm_s < 0:
            raise ConfigError(f"drift_mm_s must be >= 0, got {self.drift_mm_s}")
        if not self.actions:
            raise ConfigError("need at least one action")
        unknown = [a for a in self.actions if a not in ACTION_PROFILES]
        if unknown:
            raise ConfigError(f"unknown actions {unknown}; known: {sorted(ACTION_PROFILES)}")

    def multipliers(self, action: str, group: str) -> tuple[float, float]:
        return ACTION_PROFILES[action].get(group, (1.0, 1.0))


@dataclass(frozen=True)
class ReachEvent:
    """Swing one arm towards ``target_mm`` over ``duration_frames`` starting at ``start_frame``."""

    start_frame: int
    duration_frames: int
    target_mm: tuple[float, float, float]
    arm: str = "r"
    max_root_step_mm: float = 300.0

    def __post_init__(self):
        if self.start_frame < 0 or self.duration_frames < 2:
            raise ConfigError("reach events need start_frame >= 0 and duration_frames >= 2")
        if self.arm not in ("r", "l"):
            raise ConfigError(f"arm must be 'r' or 'l', got {self.arm!r}")
        if self.max_root_step_mm < 0:
            raise ConfigError("max_root_step_mm must be >= 0")


@dataclass
class _SeqDraw:
    amp: np.ndarray  # [V, 3] radians
    freq: np.ndarray  # [V, 3] Hz
    phase: np.ndarray  # [V, 3]
    drift: np.ndarray  # [3] mm/s
    scale: float


def _offsets(topology: SkeletonTopology) -> np.ndarray:
    if topology.rest_offsets_mm is None:
        raise ConfigError("synthetic generation needs a topology with rest_offsets_mm")
    return np.asarray(topology.rest_offsets_mm, dtype=np.float64)


def forward_kinematics(topology: SkeletonTopology, angles: np.ndarray, root_pos: np.ndarray, scale: float = 1.0) -> np.ndarray:
    """Joint positions ``[F, V, 3]`` from per-joint Euler angles ``[F, V, 3]`` (radians).

    Joint ``j``'s rotation turns the offsets of its children; the root offset is
    replaced by ``root_pos [F, 3]``.
    """
    F = angles.shape[0]
    V = topology.V
    off = _offsets(topology) * scale
    parents = topology.parents
    glob = np.empty((F, V, 3, 3))
    pos = np.empty((F, V, 3))
    for j in topology.topological_order():
        local = Rotation.from_euler("xyz", angles[:, j, :]).as_matrix()
        p = parents[j]
        if p < 0:
            glob[:, j] = local
            pos[:, j] = root_pos
        else:
            glob[:, j] = glob[:, p] @ local
            pos[:, j] = pos[:, p] + glob[:, p] @ off[j]
    return pos


def _draw(topology: SkeletonTopology, params: MotionParams, action: str, rng: np.random.Generator, scale: float) -> _SeqDraw:
    V = topology.V
    amp = np.empty((V, 3))
    freq = np.empty((V, 3))
    for j, name in enumerate(topology.joint_names):
        am, fm = params.multipliers(action, joint_group(name))
        amp[j] = np.deg2rad(rng.uniform(*params.amplitude_deg, size=3)) * am
        freq[j] = rng.uniform(*params.frequency_hz, size=3) * fm
    phase = rng.uniform(0.0, 2.0 * math.pi, size=(V, 3))
    heading = rng.uniform(0.0, 2.0 * math.pi)
    speed = rng.uniform(0.0, params.drift_mm_s)
    drift = speed * np.array([math.cos(heading), math.sin(heading), 0.0])
    return _SeqDraw(amp, freq, phase, drift, scale)


def _arm_joints(topology: SkeletonTopology, arm: str) -> tuple[int, int, list[int]]:
    shoulder = topology.index(f"{arm}_shoulder")
    wrist = topology.index(f"{arm}_wrist")
    moving = [j for j in topology.subtree(shoulder) if j != shoulder]
    return shoulder, wrist, moving


def _arm_length(topology: SkeletonTopology, arm: str, scale: float) -> float:
    shoulder, wrist, _ = _arm_joints(topology, arm)
    off = _offsets(topology)
    parents = topology.parents
    length, j = 0.0, wrist
    while j != shoulder:
        length += float(np.linalg.norm(off[j])) * scale
        j = parents[j]
    return length


def apply_reach(pos: np.ndarray, topology: SkeletonTopology, event: ReachEvent, scale: float = 1.0) -> np.ndarray:
    """Blend a reach towards ``event.target_mm`` into ``pos [F, V, 3]`` (returns a new array)."""
    out = pos.copy()
    F = pos.shape[0]
    t0, D = event.start_frame, event.duration_frames
    if t0 >= F:
        return out
    shoulder, wrist, moving = _arm_joints(topology, event.arm)
    target = np.asarray(event.target_mm, dtype=np.float64)
    arm_len = _arm_length(topology, event.arm, scale)

    horiz = target - pos[t0, shoulder]
    horiz[2] = 0.0
    dist = float(np.linalg.norm(horiz))
    step_len = min(event.max_root_step_mm, max(0.0, dist - 0.8 * arm_len))
    step = horiz / dist * step_len if dist > 0 else np.zeros(3)

    u = pos[t0, wrist] - pos[t0, shoulder]
    w = target - (pos[t0, shoulder] + step)
    axis = np.cross(u, w)
    n = float(np.linalg.norm(axis))
    cosang = float(np.dot(u, w) / max(np.linalg.norm(u) * np.linalg.norm(w), 1e-12))
    angle = math.acos(min(1.0, max(-1.0, cosang)))
    rotvec_unit = axis / n if n > 1e-12 else np.zeros(3)

    frames = np.arange(t0, min(F, t0 + D))
    b = np.sin(math.pi * (frames - t0) / D) ** 2
    R = Rotation.from_rotvec(np.outer(b * angle, rotvec_unit)).as_matrix()  # [n, 3, 3]
    pivot = out[frames, shoulder][:, None, :]
    rel = out[frames][:, moving] - pivot
    out[frames[:, None], np.array(moving)[None, :]] = pivot + np.einsum("fij,fmj->fmi", R, rel)
    out[frames] += b[:, None, None] * step
    return out


def _synth_one(topology, length, fps, draw: _SeqDraw, events: Sequence[ReachEvent]) -> np.ndarray:
    t = np.arange(length) / fps
    angles = draw.amp[None] * np.sin(2.0 * math.pi * draw.freq[None] * t[:, None, None] + draw.phase[None])
    root_rest = _offsets(topology)[topology.root] * draw.scale
    root = root_rest[None, :] + t[:, None] * draw.drift[None, :]
    pos = forward_kinematics(topology, angles, root, draw.scale)
    last_end = -1
    for ev in sorted(events, key=lambda e: e.start_frame):
        if ev.start_frame < last_end:
            raise ConfigError("reach events of one sequence must not overlap")
        last_end = ev.start_frame + ev.duration_frames
        pos = apply_reach(pos, topology, ev, draw.scale)
    return pos


def synth_generate(
    topology: SkeletonTopology,
    n_sequences: int,
    length: int,
    fps: float,
    motion_params: MotionParams | None = None,
    seed: int = 0,
    n_subjects: int | None = None,
    reach_events: Mapping[int, Sequence[ReachEvent]] | None = None,
) -> list[MotionSequence]:
    """Generate ``n_sequences`` sequences spread over ``n_subjects`` subjects.

    Subjects own contiguous blocks of sequences and share a body scale.
    ``reach_events`` maps a sequence index to the reach events it contains.
    """
    params = motion_params or MotionParams()
    if n_sequences < 1 or length < 1 or not fps > 0:
        raise ConfigError("need n_sequences >= 1, length >= 1 and fps > 0")
    n_subjects = n_subjects or n_sequences
    if not 1 <= n_subjects <= n_sequences:
        raise ConfigError(f"n_subjects must lie in [1, {n_sequences}], got {n_subjects}")
    reach_events = reach_events or {}
    scales = {}
    seqs = []
    counters: dict[int, int] = {}
    for i in range(n_sequences):
        subj = i * n_subjects // n_sequences
        if subj not in scales:
            scales[subj] = float(np.random.default_rng([seed, 1, subj]).uniform(*params.body_scale))
        k = counters.get(subj, 0)
        counters[subj] = k + 1
        action = params.actions[i % len(params.actions)]
        draw = _draw(topology, params, action, np.random.default_rng([seed, 0, i]), scales[subj])
        frames = _synth_one(topology, length, fps, draw, reach_events.get(i, ()))
        seqs.append(MotionSequence(frames, float(fps), f"S{subj:02d}", action, (), f"S{subj:02d}_{k}_{action}"))
    return seqs


def speed_bound_mm_s(
    topology: SkeletonTopology,
    params: MotionParams | None = None,
    fps: float = 25.0,
    events: Sequence[ReachEvent] = (),
) -> float:
    """Upper bound on any joint's speed for every seed, implied by the parameters.

    A joint's velocity is the root drift plus, for each bone on its root path,
    the bone offset times the angular speed of the parent frame. That angular
    speed is at most the sum of the Euler-rate magnitudes ``A * 2 pi f`` of the
    parent and all its ancestors. Reach events add the arm swing (at most pi
    radians over the event) and the root step.
    """
    params = params or MotionParams()
    off = _offsets(topology) * params.body_scale[1]
    parents = topology.parents
    rate = np.zeros(topology.V)
    for j, name in enumerate(topology.joint_names):
        group = joint_group(name)
        am = max(params.multipliers(a, group)[0] for a in params.actions)
        fm = max(params.multipliers(a, group)[1] for a in params.actions)
        rate[j] = 3 * math.radians(params.amplitude_deg[1]) * am * 2 * math.pi * params.frequency_hz[1] * fm
    omega = np.zeros(topology.V)
    bound = np.zeros(topology.V)
    for j in topology.topological_order():
        p = parents[j]
        if p < 0:
            omega[j] = rate[j]
            bound[j] = params.drift_mm_s
        else:
            omega[j] = omega[p] + rate[j]
            bound[j] = bound[p] + omega[p] * float(np.linalg.norm(off[j]))
    extra = 0.0
    for ev in events:
        dur_s = ev.duration_frames / fps
        swing = math.pi * math.pi / dur_s * _arm_length(topology, ev.arm, params.body_scale[1])
        extra = max(extra, swing + ev.max_root_step_mm * math.pi / dur_s)
    return float(bound.max() + extra)


def default_corpus(seed: int = 0, length: int = 200, fps: float = 25.0) -> tuple[list[MotionSequence], SkeletonTopology]:
    """20 subjects with 3 sequences each on the default 15-joint skeleton."""
    topo = default_topology()
    return synth_generate(topo, 60, length, fps, MotionParams(), seed, n_subjects=20), topo
