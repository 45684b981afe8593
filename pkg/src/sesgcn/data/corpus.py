"""Motion sequences, the on-disk corpus format, and sliding-window extraction.

A corpus directory holds ``topology.json`` plus one ``<sequence_id>.seq`` file
per sequence::

    SEQ v1 fps=25.0 subject=S00 action=polish V=15
    collisions=12,80            (optional)
    x0 y0 z0 x1 y1 z1 ...       (one line per frame, 3*V values in mm)

Values are written with 17 significant digits so a save/load round trip is
bitwise exact.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import ContractViolation, EmptyCorpusError, ParseError, SchemaError
from .topology import SkeletonTopology

MM_PER_M = 1000.0

_HEADER = re.compile(
    r"^SEQ v1 fps=(?P<fps>\S+) subject=(?P<subject>\S+) action=(?P<action>\S+) V=(?P<V>\d+)$"
)


def mm_to_m(x):
    return np.asarray(x, dtype=np.float64) / MM_PER_M


def m_to_mm(x):
    return np.asarray(x, dtype=np.float64) * MM_PER_M


@dataclass
class MotionSequence:
    frames: np.ndarray
    fps: float
    subject_id: str
    action_label: str
    collision_frames: tuple[int, ...] = ()
    sequence_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise ContractViolation(f"frames must be [T_total, V, 3], got {self.frames.shape}")
        if self.frames.shape[0] < 1:
            raise ContractViolation("a sequence needs at least one frame")
        if not np.isfinite(self.frames).all():
            bad = int(np.argwhere(~np.isfinite(self.frames))[0][0])
            raise ContractViolation(f"sequence {self.sequence_id!r} has a non-finite value at frame {bad}")
        if not self.fps > 0:
            raise ContractViolation(f"fps must be positive, got {self.fps}")
        self.collision_frames = tuple(sorted(int(c) for c in self.collision_frames))
        for c in self.collision_frames:
            if not 0 <= c < len(self):
                raise ContractViolation(f"collision frame {c} outside [0, {len(self)})")
        for name, value in (("subject_id", self.subject_id), ("action_label", self.action_label)):
            if not value or any(ch.isspace() for ch in value):
                raise ContractViolation(f"{name} must be a non-empty token without whitespace, got {value!r}")

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def V(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class WindowedExample:
    input: np.ndarray
    target: np.ndarray
    sequence_id: str
    start: int
    subject_id: str = ""
    action_label: str = ""
    collision_frames: tuple[int, ...] = field(default=())

    @property
    def forecast_frames(self) -> range:
        """Source-sequence frame indices covered by ``target``."""
        T = self.input.shape[0]
        return range(self.start + T, self.start + T + self.target.shape[0])


# ---------------------------------------------------------------------------
# corpus IO


def format_sequence(seq: MotionSequence) -> str:
    lines = [f"SEQ v1 fps={seq.fps!r} subject={seq.subject_id} action={seq.action_label} V={seq.V}"]
    if seq.collision_frames:
        lines.append("collisions=" + ",".join(str(c) for c in seq.collision_frames))
    flat = seq.frames.reshape(len(seq), -1)
    for row in flat:
        lines.append(" ".join(format(float(v), ".17g") for v in row))
    return "\n".join(lines) + "\n"


def parse_sequence(text: str, sequence_id: str = "", source: str = "<string>") -> MotionSequence:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise ParseError(f"{source}: empty file")
    m = _HEADER.match(lines[0])
    if m is None:
        raise ParseError(f"{source}:1: malformed header {lines[0][:80]!r}")
    try:
        fps = float(m["fps"])
    except ValueError:
        raise ParseError(f"{source}:1: bad fps {m['fps']!r}") from None
    if not (math.isfinite(fps) and fps > 0):
        raise ParseError(f"{source}:1: fps must be positive and finite, got {m['fps']}")
    V = int(m["V"])
    body_start = 1
    collisions: list[int] = []
    if len(lines) > 1 and lines[1].startswith("collisions="):
        spec = lines[1][len("collisions="):]
        try:
            collisions = [int(c) for c in spec.split(",") if c != ""]
        except ValueError:
            raise ParseError(f"{source}:2: bad collisions line {lines[1][:80]!r}") from None
        body_start = 2
    rows = []
    for i, line in enumerate(lines[body_start:]):
        lineno = body_start + i + 1
        parts = line.split()
        if len(parts) != 3 * V:
            raise ParseError(f"{source}:{lineno}: frame record {i} has {len(parts)} values, expected {3 * V}")
        try:
            row = [float(p) for p in parts]
        except ValueError:
            raise ParseError(f"{source}:{lineno}: frame record {i} has a non-numeric value") from None
        if not all(math.isfinite(v) for v in row):
            raise ParseError(f"{source}:{lineno}: frame record {i} has a NaN/Inf coordinate")
        rows.append(row)
    if not rows:
        raise ParseError(f"{source}: no frame records")
    frames = np.array(rows, dtype=np.float64).reshape(len(rows), V, 3)
    bad = [c for c in collisions if not 0 <= c < len(rows)]
    if bad:
        raise ParseError(f"{source}:{body_start}: collision frames {bad} outside the {len(rows)} frames")
    return MotionSequence(frames, fps, m["subject"], m["action"], tuple(collisions), sequence_id)


def save_corpus(path: str | Path, seqs: Sequence[MotionSequence], topology: SkeletonTopology) -> None:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    topology.save(out / "topology.json")
    ids = set()
    for k, seq in enumerate(seqs):
        sid = seq.sequence_id or f"seq{k:04d}"
        if sid in ids:
            raise SchemaError(f"duplicate sequence id {sid!r}")
        ids.add(sid)
        if seq.V != topology.V:
            raise SchemaError(f"sequence {sid!r} has V={seq.V}, topology has V={topology.V}")
        (out / f"{sid}.seq").write_text(format_sequence(seq), encoding="utf-8")


def load_corpus(path: str | Path) -> tuple[list[MotionSequence], SkeletonTopology]:
    """Read and validate a corpus directory; sequences are returned sorted by id."""
    root = Path(path)
    if not root.is_dir():
        raise EmptyCorpusError(f"{root} is not a directory")
    files = sorted(root.glob("*.seq"))
    topo_path = root / "topology.json"
    if not files:
        raise EmptyCorpusError(f"no .seq files in {root}")
    if not topo_path.exists():
        raise SchemaError(f"{root} has no topology.json")
    topology = SkeletonTopology.load(topo_path)
    seqs = []
    for f in files:
        seq = parse_sequence(f.read_text(encoding="utf-8"), f.stem, str(f))
        if seq.V != topology.V:
            raise SchemaError(f"{f}: V={seq.V} but topology has V={topology.V}")
        seqs.append(seq)
    rates = {s.fps for s in seqs}
    if len(rates) > 1:
        raise SchemaError(f"corpus mixes frame rates {sorted(rates)}")
    return seqs, topology


# ---------------------------------------------------------------------------
# windowing


def window_starts(length: int, T: int, K: int, stride: int) -> range:
    if stride < 1:
        raise ContractViolation("stride must be >= 1")
    return range(0, length - T - K + 1, stride)


def overlaps_collision(start: int, span: int, collision_frames: Iterable[int], guard: int) -> bool:
    """True if frames ``[start, start + span)`` meet any ``[c, c + guard]``."""
    end = start + span - 1
    return any(start <= c + guard and c <= end for c in collision_frames)


def window_sequences(
    seqs: Sequence[MotionSequence],
    T: int,
    K: int,
    stride: int,
    exclude_collisions: bool = False,
) -> list[WindowedExample]:
    """Sliding windows of T observed plus K target frames at the given stride.

    With ``exclude_collisions`` a window is dropped when it touches a labelled
    collision frame or the one-second guard interval after it.
    """
    if T < 1 or K < 1:
        raise ContractViolation("T and K must be >= 1")
    out = []
    for k, seq in enumerate(seqs):
        guard = int(round(seq.fps))
        sid = seq.sequence_id or f"seq{k:04d}"
        for s in window_starts(len(seq), T, K, stride):
            if exclude_collisions and overlaps_collision(s, T + K, seq.collision_frames, guard):
                continue
            out.append(
                WindowedExample(
                    input=seq.frames[s : s + T],
                    target=seq.frames[s + T : s + T + K],
                    sequence_id=sid,
                    start=s,
                    subject_id=seq.subject_id,
                    action_label=seq.action_label,
                    collision_frames=tuple(c for c in seq.collision_frames if s + T <= c < s + T + K),
                )
            )
    return out


def stack_examples(examples: Sequence[WindowedExample]) -> tuple[np.ndarray, np.ndarray]:
    """``([N, T, V, 3], [N, K, V, 3])`` arrays from a list of windows."""
    if not examples:
        raise ContractViolation("no examples to stack")
    return np.stack([e.input for e in examples]), np.stack([e.target for e in examples])
