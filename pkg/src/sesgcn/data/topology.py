"""Skeleton trees: joint names, bones, limb radii and rest-pose offsets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import SchemaError

# Limb radii in metres, a coarse adult atlas keyed by bone (parent, child) names.
RADIUS_ATLAS_M = {
    ("pelvis", "neck"): 0.15,
    ("neck", "head"): 0.10,
    ("neck", "r_shoulder"): 0.06,
    ("neck", "l_shoulder"): 0.06,
    ("r_shoulder", "r_elbow"): 0.05,
    ("l_shoulder", "l_elbow"): 0.05,
    ("r_elbow", "r_wrist"): 0.045,
    ("l_elbow", "l_wrist"): 0.045,
    ("pelvis", "r_hip"): 0.08,
    ("pelvis", "l_hip"): 0.08,
    ("r_hip", "r_knee"): 0.07,
    ("l_hip", "l_knee"): 0.07,
    ("r_knee", "r_ankle"): 0.055,
    ("l_knee", "l_ankle"): 0.055,
}

_DEFAULT_JOINTS = (
    "pelvis", "neck", "head",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
)
_DEFAULT_BONES = (
    (0, 1), (1, 2), (1, 3), (3, 4), (4, 5), (1, 6), (6, 7), (7, 8),
    (0, 9), (9, 10), (10, 11), (0, 12), (12, 13), (13, 14),
)
# z up, facing +x, the body's right side towards -y. The root entry is its
# absolute rest position; every other entry is the offset from its parent.
_DEFAULT_OFFSETS_MM = (
    (0.0, 0.0, 950.0),
    (0.0, 0.0, 550.0),
    (0.0, 0.0, 200.0),
    (0.0, -180.0, -20.0),
    (0.0, 0.0, -290.0),
    (0.0, 0.0, -260.0),
    (0.0, 180.0, -20.0),
    (0.0, 0.0, -290.0),
    (0.0, 0.0, -260.0),
    (0.0, -100.0, -50.0),
    (0.0, 0.0, -430.0),
    (0.0, 0.0, -420.0),
    (0.0, 100.0, -50.0),
    (0.0, 0.0, -430.0),
    (0.0, 0.0, -420.0),
)


@dataclass(frozen=True)
class SkeletonTopology:
    joint_names: tuple[str, ...]
    bones: tuple[tuple[int, int], ...]
    limb_radius_m: tuple[float, ...]
    rest_offsets_mm: tuple[tuple[float, float, float], ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "joint_names", tuple(self.joint_names))
        object.__setattr__(self, "bones", tuple((int(a), int(b)) for a, b in self.bones))
        object.__setattr__(self, "limb_radius_m", tuple(float(r) for r in self.limb_radius_m))
        if self.rest_offsets_mm is not None:
            object.__setattr__(
                self, "rest_offsets_mm", tuple(tuple(float(c) for c in o) for o in self.rest_offsets_mm)
            )
        self._validate()

    def _validate(self) -> None:
        V = self.V
        if V < 1:
            raise SchemaError("topology needs at least one joint")
        if len(set(self.joint_names)) != V:
            raise SchemaError("joint names must be unique")
        if len(self.bones) != V - 1:
            raise SchemaError(f"a tree over {V} joints needs {V - 1} bones, got {len(self.bones)}")
        if len(self.limb_radius_m) != len(self.bones):
            raise SchemaError(f"{len(self.limb_radius_m)} radii for {len(self.bones)} bones")
        if any(not r > 0 for r in self.limb_radius_m):
            raise SchemaError("limb radii must be positive")
        parent = [-1] * V
        for a, b in self.bones:
            if not (0 <= a < V and 0 <= b < V) or a == b:
                raise SchemaError(f"bone ({a}, {b}) is out of range for {V} joints")
            if parent[b] != -1:
                raise SchemaError(f"joint {b} has two parents")
            parent[b] = a
        roots = [j for j in range(V) if parent[j] == -1]
        if len(roots) != 1:
            raise SchemaError(f"bones must form a single rooted tree, found roots {roots}")
        if len(self.topological_order()) != V:
            raise SchemaError("bones contain a cycle or a disconnected joint")
        if self.rest_offsets_mm is not None:
            if len(self.rest_offsets_mm) != V or any(len(o) != 3 for o in self.rest_offsets_mm):
                raise SchemaError("rest_offsets_mm needs one 3-vector per joint")

    @property
    def V(self) -> int:
        return len(self.joint_names)

    @property
    def parents(self) -> tuple[int, ...]:
        parent = [-1] * self.V
        for a, b in self.bones:
            parent[b] = a
        return tuple(parent)

    @property
    def root(self) -> int:
        return self.parents.index(-1)

    def children(self, j: int) -> list[int]:
        return [b for a, b in self.bones if a == j]

    def topological_order(self) -> list[int]:
        """Root first; every joint after its parent."""
        root = self.parents.index(-1)
        order, frontier = [], [root]
        seen = set()
        while frontier:
            j = frontier.pop(0)
            if j in seen:
                break
            seen.add(j)
            order.append(j)
            frontier.extend(self.children(j))
        return order

    def subtree(self, j: int) -> list[int]:
        out, stack = [], [j]
        while stack:
            k = stack.pop()
            out.append(k)
            stack.extend(self.children(k))
        return sorted(out)

    def index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise SchemaError(f"unknown joint {name!r}") from None

    def rest_pose_mm(self) -> np.ndarray:
        """Absolute rest positions ``[V, 3]`` from the offsets."""
        if self.rest_offsets_mm is None:
            raise SchemaError("topology has no rest offsets")
        off = np.asarray(self.rest_offsets_mm)
        pos = np.zeros((self.V, 3))
        parents = self.parents
        for j in self.topological_order():
            pos[j] = off[j] if parents[j] < 0 else pos[parents[j]] + off[j]
        return pos

    def to_json(self) -> dict:
        d = {
            "joint_names": list(self.joint_names),
            "bones": [list(b) for b in self.bones],
            "limb_radius_m": list(self.limb_radius_m),
        }
        if self.rest_offsets_mm is not None:
            d["rest_offsets_mm"] = [list(o) for o in self.rest_offsets_mm]
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SkeletonTopology":
        required = {"joint_names", "bones"}
        missing = required - set(d)
        if missing:
            raise SchemaError(f"topology.json is missing {sorted(missing)}")
        unknown = set(d) - required - {"limb_radius_m", "rest_offsets_mm"}
        if unknown:
            raise SchemaError(f"topology.json has unknown keys {sorted(unknown)}")
        names = d["joint_names"]
        bones = d["bones"]
        radii = d.get("limb_radius_m")
        if radii is None:
            radii = [atlas_radius(names[a], names[b]) for a, b in bones]
        return cls(names, bones, radii, d.get("rest_offsets_mm"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "SkeletonTopology":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise SchemaError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_json(d)


def atlas_radius(parent: str, child: str, default: float = 0.05) -> float:
    return RADIUS_ATLAS_M.get((parent, child), default)


def default_topology() -> SkeletonTopology:
    """Generic 15-joint human tree rooted at the pelvis."""
    radii = [atlas_radius(_DEFAULT_JOINTS[a], _DEFAULT_JOINTS[b]) for a, b in _DEFAULT_BONES]
    return SkeletonTopology(_DEFAULT_JOINTS, _DEFAULT_BONES, radii, _DEFAULT_OFFSETS_MM)
