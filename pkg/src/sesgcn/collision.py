"""Capsule geometry, scripted cobot trajectories and windowed collision scoring.

Human limbs and cobot links are capsules (a segment swept by a sphere). All
geometry here is in metres; forecasts arrive in millimetres and are converted
on entry.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data.corpus import MotionSequence, WindowedExample, mm_to_m, window_sequences
from .data.synth import MotionParams, synth_generate
from .data.topology import SkeletonTopology, default_topology
from .errors import ConfigError, ContractViolation
from .metrics import Forecaster, forecast

CLEARANCE_MODES = ("axis", "surface")
_MODE_ALIASES = {"axis_distance": "axis", "surface_distance": "surface"}


def normalize_mode(mode: str) -> str:
    mode = _MODE_ALIASES.get(mode, mode)
    if mode not in CLEARANCE_MODES:
        raise ConfigError(f"clearance mode must be one of {CLEARANCE_MODES}, got {mode!r}")
    return mode


DEFAULT_COBOT_RADIUS_M = 0.04


@dataclass(frozen=True)
class Capsule:
    a: tuple[float, float, float]
    b: tuple[float, float, float]
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "a", tuple(float(v) for v in self.a))
        object.__setattr__(self, "b", tuple(float(v) for v in self.b))
        if len(self.a) != 3 or len(self.b) != 3:
            raise ContractViolation("capsule endpoints must be 3D points")
        if not all(math.isfinite(v) for v in self.a + self.b):
            raise ContractViolation("capsule endpoints must be finite")
        if not self.radius > 0:
            raise ContractViolation(f"capsule radius must be positive, got {self.radius}")


@dataclass(frozen=True)
class CollisionConfig:
    threshold_m: float = 0.13
    clearance_mode: str = "surface"

    def __post_init__(self):
        if not self.threshold_m > 0:
            raise ConfigError(f"threshold_m must be > 0, got {self.threshold_m}")
        object.__setattr__(self, "clearance_mode", normalize_mode(self.clearance_mode))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CollisionConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown collision config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# segment distance


def _closest_params(p1, q1, p2, q2):
    """Clamped segment parameters (s, t) of the closest points, vectorised.

    Follows the standard closest-point construction for two segments; point
    segments are handled by the degenerate branches.
    """
    d1 = q1 - p1
    d2 = q2 - p2
    r = p1 - p2
    a = np.einsum("...i,...i->...", d1, d1)
    e = np.einsum("...i,...i->...", d2, d2)
    f = np.einsum("...i,...i->...", d2, r)
    c = np.einsum("...i,...i->...", d1, r)
    b = np.einsum("...i,...i->...", d1, d2)
    tiny = 1e-300
    pa = a > tiny
    pe = e > tiny
    safe_a = np.where(pa, a, 1.0)
    safe_e = np.where(pe, e, 1.0)
    denom = a * e - b * b
    # Near-parallel segments: any s works, start from 0.
    general = denom > 1e-14 * a * e
    s = np.where(general, np.clip((b * f - c * e) / np.where(general, denom, 1.0), 0.0, 1.0), 0.0)
    t = (b * s + f) / safe_e
    s = np.where(t < 0.0, np.clip(-c / safe_a, 0.0, 1.0), np.where(t > 1.0, np.clip((b - c) / safe_a, 0.0, 1.0), s))
    t = np.clip(t, 0.0, 1.0)
    # Degenerate cases.
    s = np.where(pa & ~pe, np.clip(-c / safe_a, 0.0, 1.0), s)
    t = np.where(pa & ~pe, 0.0, t)
    t = np.where(~pa & pe, np.clip(f / safe_e, 0.0, 1.0), t)
    s = np.where(~pa, 0.0, s)
    t = np.where(~pa & ~pe, 0.0, t)
    return s, t


def _point_on(p, q, u):
    """``p + u (q - p)`` that returns the endpoints exactly at u = 0 and u = 1."""
    u = u[..., None]
    x = p + u * (q - p)
    x = np.where(u == 0.0, p, x)
    return np.where(u == 1.0, q, x)


def _one_way(p1, q1, p2, q2):
    s, t = _closest_params(p1, q1, p2, q2)
    diff = _point_on(p1, q1, s) - _point_on(p2, q2, t)
    return np.sqrt(np.einsum("...i,...i->...", diff, diff))


def segment_distances(p1, q1, p2, q2) -> np.ndarray:
    """Minimum distance between closed segments ``[p1, q1]`` and ``[p2, q2]`` (broadcasting).

    Evaluated in both argument orders and the smaller value kept, which makes
    the result exactly symmetric.
    """
    p1, q1, p2, q2 = (np.asarray(v, dtype=np.float64) for v in (p1, q1, p2, q2))
    p1, q1, p2, q2 = np.broadcast_arrays(p1, q1, p2, q2)
    return np.minimum(_one_way(p1, q1, p2, q2), _one_way(p2, q2, p1, q1))


def segment_distance(p1, q1, p2, q2) -> float:
    return float(segment_distances(p1, q1, p2, q2))


def capsule_clearance(c1: Capsule, c2: Capsule, mode: str = "surface") -> float:
    """Axis distance, or axis distance minus both radii in surface mode (negative on overlap)."""
    mode = normalize_mode(mode)
    d = segment_distance(c1.a, c1.b, c2.a, c2.b)
    return d - (c1.radius + c2.radius) if mode == "surface" else d


# ---------------------------------------------------------------------------
# cobot


@dataclass(frozen=True)
class CobotTrajectory:
    """Per-frame link chains: ``points [F, P, 3]`` metres, ``P - 1`` links."""

    points: np.ndarray
    link_radii: tuple[float, ...]
    fps: float

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[2] != 3 or pts.shape[1] < 2:
            raise ContractViolation(f"cobot points must be [F, P >= 2, 3], got {pts.shape}")
        if not np.isfinite(pts).all():
            raise ContractViolation("cobot points must be finite")
        object.__setattr__(self, "points", pts)
        radii = tuple(float(r) for r in self.link_radii)
        if len(radii) != pts.shape[1] - 1:
            raise ContractViolation(f"{len(radii)} link radii for {pts.shape[1] - 1} links")
        if any(not r > 0 for r in radii):
            raise ContractViolation("link radii must be positive")
        object.__setattr__(self, "link_radii", radii)
        if not self.fps > 0:
            raise ContractViolation("fps must be positive")

    def __len__(self) -> int:
        return self.points.shape[0]

    @property
    def n_links(self) -> int:
        return self.points.shape[1] - 1

    def window(self, start: int, length: int) -> "CobotTrajectory":
        if start < 0 or start + length > len(self):
            raise ConfigError(f"cobot trajectory has {len(self)} frames, window needs [{start}, {start + length})")
        return CobotTrajectory(self.points[start : start + length], self.link_radii, self.fps)


def script_cobot(waypoints: Sequence[tuple[float, Sequence[Sequence[float]]]], fps: float, radius=DEFAULT_COBOT_RADIUS_M) -> CobotTrajectory:
    """Piecewise-linear interpolation of ``(time_s, chain_points)`` waypoints.

    Frames are sampled at ``t0 + i / fps`` for ``i = 0 .. round(duration * fps)``.
    ``radius`` is one value for every link or a per-link sequence.
    """
    if len(waypoints) < 2:
        raise ConfigError("need at least two waypoints")
    if not fps > 0:
        raise ConfigError("fps must be positive")
    times = np.array([float(t) for t, _ in waypoints])
    if np.any(np.diff(times) <= 0):
        raise ConfigError("waypoint times must be strictly increasing")
    try:
        chains = np.array([np.asarray(p, dtype=np.float64) for _, p in waypoints])
    except ValueError:
        raise ConfigError("waypoints have differing numbers of chain points") from None
    if chains.ndim != 3 or chains.shape[2] != 3 or chains.shape[1] < 2:
        raise ConfigError(f"each waypoint needs >= 2 points of dimension 3, got shape {chains.shape[1:]}")
    n = int(round((times[-1] - times[0]) * fps)) + 1
    t = times[0] + np.arange(n) / fps
    flat = chains.reshape(len(times), -1)
    pts = np.stack([np.interp(t, times, flat[:, k]) for k in range(flat.shape[1])], axis=1)
    pts = pts.reshape(n, chains.shape[1], 3)
    n_links = chains.shape[1] - 1
    radii = [float(radius)] * n_links if np.isscalar(radius) else list(radius)
    if len(radii) != n_links:
        raise ConfigError(f"{len(radii)} radii for {n_links} links")
    return CobotTrajectory(pts, tuple(radii), float(fps))


def cobot_to_json(waypoints, fps: float, link_radii: Sequence[float]) -> dict:
    return {
        "fps": fps,
        "link_radii": list(link_radii),
        "waypoints": [{"t": float(t), "points": np.asarray(p, dtype=float).tolist()} for t, p in waypoints],
    }


def cobot_from_json(d: dict) -> CobotTrajectory:
    unknown = set(d) - {"fps", "link_radii", "waypoints"}
    if unknown:
        raise ConfigError(f"cobot script has unknown keys {sorted(unknown)}")
    try:
        wps = [(w["t"], w["points"]) for w in d["waypoints"]]
        return script_cobot(wps, float(d["fps"]), d.get("link_radii", DEFAULT_COBOT_RADIUS_M))
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed cobot script: {exc}") from None


def load_cobots(directory: str | Path) -> dict[str, CobotTrajectory]:
    """``<sequence_id>.json`` cobot scripts in a directory."""
    return {p.stem: cobot_from_json(json.loads(p.read_text())) for p in sorted(Path(directory).glob("*.json"))}


# ---------------------------------------------------------------------------
# detection


@dataclass(frozen=True)
class CollisionResult:
    flag: bool
    min_clearance_m: float
    frame: int
    limb: int
    link: int


def clearance_grid(poses_mm: np.ndarray, topology: SkeletonTopology, cobot: CobotTrajectory, mode: str) -> np.ndarray:
    """Clearance (m) for every frame x limb x link: ``[F, n_bones, n_links]``."""
    poses = mm_to_m(poses_mm)
    if poses.ndim != 3 or poses.shape[1:] != (topology.V, 3):
        raise ContractViolation(f"poses must be [F, {topology.V}, 3], got {poses.shape}")
    if poses.shape[0] != len(cobot):
        raise ContractViolation(f"{poses.shape[0]} pose frames but {len(cobot)} cobot frames")
    mode = normalize_mode(mode)
    bones = np.array(topology.bones)
    ha = poses[:, bones[:, 0]][:, :, None, :]
    hb = poses[:, bones[:, 1]][:, :, None, :]
    ca = cobot.points[:, :-1][:, None, :, :]
    cb = cobot.points[:, 1:][:, None, :, :]
    d = segment_distances(ha, hb, ca, cb)
    if mode == "surface":
        d = d - (np.array(topology.limb_radius_m)[None, :, None] + np.array(cobot.link_radii)[None, None, :])
    return d


def detect_collision(forecast_mm, topology: SkeletonTopology, cobot: CobotTrajectory, cfg: CollisionConfig) -> CollisionResult:
    """Flag a window whose minimum clearance over frames, limbs and links is below threshold."""
    grid = clearance_grid(np.asarray(forecast_mm, dtype=np.float64), topology, cobot, cfg.clearance_mode)
    k = int(np.argmin(grid))
    f, limb, link = np.unravel_index(k, grid.shape)
    m = float(grid.flat[k])
    return CollisionResult(m < cfg.threshold_m, m, int(f), int(limb), int(link))


def label_collisions(seq: MotionSequence, topology: SkeletonTopology, cobot: CobotTrajectory, cfg: CollisionConfig) -> tuple[int, ...]:
    """Frames whose true clearance is below threshold (same test as :func:`detect_collision`)."""
    n = len(seq)
    grid = clearance_grid(seq.frames, topology, cobot.window(0, n), cfg.clearance_mode)
    per_frame = grid.reshape(n, -1).min(axis=1)
    return tuple(int(i) for i in np.flatnonzero(per_frame < cfg.threshold_m))


def collision_runs(frames: Sequence[int]) -> list[tuple[int, int]]:
    """Maximal runs of consecutive frame indices as ``(first, last)`` pairs."""
    runs: list[tuple[int, int]] = []
    for f in sorted(frames):
        if runs and f == runs[-1][1] + 1:
            runs[-1] = (runs[-1][0], f)
        else:
            runs.append((f, f))
    return runs


@dataclass(frozen=True)
class WindowLog:
    sequence: str
    start_frame: int
    predicted: bool
    truth: bool
    min_clearance_m: float
    witness_frame: int
    witness_limb: str
    witness_link: int


@dataclass
class CollisionReport:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    tn: int
    log: list[WindowLog] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "tp": self.tp,
            "fp": self.fp,
            "fn": self.fn,
            "tn": self.tn,
            "n_windows": len(self.log),
        }

    def log_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["sequence", "start_frame", "predicted", "truth", "min_clearance_m",
                    "witness_frame", "witness_limb", "witness_link"])
        for r in self.log:
            w.writerow([r.sequence, r.start_frame, int(r.predicted), int(r.truth), repr(r.min_clearance_m),
                        r.witness_frame, r.witness_limb, r.witness_link])
        return buf.getvalue()


def prf(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return precision, recall, f1


def evaluate_collisions(
    forecaster: Forecaster,
    sequences: Sequence[MotionSequence],
    topology: SkeletonTopology,
    cobots: Mapping[str, CobotTrajectory],
    cfg: CollisionConfig,
    T: int = 10,
    K: int = 25,
    stride: int = 10,
) -> CollisionReport:
    """Score windowed collision forecasts against labelled collision frames.

    A window is truly positive when a labelled collision frame lies in its
    forecast span. The witness frame in the log is an index into the source
    sequence.
    """
    missing = [s.sequence_id for s in sequences if s.sequence_id not in cobots]
    if missing:
        raise ConfigError(f"no cobot trajectory for sequences {missing}")
    windows: list[WindowedExample] = window_sequences(sequences, T, K, stride, exclude_collisions=False)
    log: list[WindowLog] = []
    preds = forecast(forecaster, windows) if windows else np.zeros((0, K, topology.V, 3))
    tp = fp = fn = tn = 0
    for w, pred in zip(windows, preds):
        cobot = cobots[w.sequence_id].window(w.start + T, K)
        res = detect_collision(pred, topology, cobot, cfg)
        truth = bool(w.collision_frames)
        tp += res.flag and truth
        fp += res.flag and not truth
        fn += truth and not res.flag
        tn += not truth and not res.flag
        a, b = topology.bones[res.limb]
        log.append(WindowLog(
            w.sequence_id, w.start, res.flag, truth, res.min_clearance_m, w.start + T + res.frame,
            f"{topology.joint_names[a]}-{topology.joint_names[b]}", res.link,
        ))
    p, r, f1 = prf(tp, fp, fn)
    return CollisionReport(p, r, f1, tp, fp, fn, tn, log)


def all_negative_forecaster(example: WindowedExample) -> np.ndarray:
    """Places the person 1 km away, so no window is ever flagged."""
    return np.full_like(example.target, 1.0e6)


# ---------------------------------------------------------------------------
# scripted scenario


def collision_scenario(
    seed: int = 0,
    n_events: int = 10,
    spacing: int = 60,
    fps: float = 25.0,
    cfg: CollisionConfig | None = None,
    link_radius: float = DEFAULT_COBOT_RADIUS_M,
) -> tuple[list[MotionSequence], SkeletonTopology, dict[str, CobotTrajectory], dict]:
    """One human sequence plus a two-link cobot that reaches for the right wrist ``n_events`` times.

    Returns sequences (with geometric collision labels), the topology, the
    cobot per sequence id, and the cobot script as JSON. Between approaches the
    tool is parked 0.9 m in front of the person, far beyond the threshold.
    """
    cfg = cfg or CollisionConfig()
    topo = default_topology()
    margin = spacing
    length = margin + n_events * spacing + margin
    params = MotionParams(amplitude_deg=(2.0, 8.0), frequency_hz=(0.2, 0.6), drift_mm_s=0.0)
    seq = synth_generate(topo, 1, length, fps, params, seed)[0]
    wrist = topo.index("r_wrist")
    pelvis = mm_to_m(seq.frames[0, topo.root])
    base = pelvis + np.array([1.0, 0.0, -0.95])  # on the floor, 1 m in front
    elbow = base + np.array([0.0, 0.0, 1.0])
    parked = pelvis + np.array([0.9, -0.2, 0.3])
    half = 12  # frames from parked to contact
    waypoints = [(0.0, [base, elbow, parked])]
    for e in range(n_events):
        c = margin + e * spacing + spacing // 2
        contact = mm_to_m(seq.frames[c, wrist])
        for f, tool in ((c - half, parked), (c, contact), (c + half, parked)):
            waypoints.append((f / fps, [base, elbow, tool]))
    waypoints.append(((length - 1) / fps, [base, elbow, parked]))
    cobot = script_cobot(waypoints, fps, link_radius)
    labels = label_collisions(seq, topo, cobot, cfg)
    seq = MotionSequence(seq.frames, seq.fps, seq.subject_id, seq.action_label, labels, "scenario")
    script = cobot_to_json(waypoints, fps, [link_radius] * 2)
    return [seq], topo, {"scenario": cobot}, script
