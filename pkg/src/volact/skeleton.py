"""Bones, poses, forward linear blend skinning and nearest-bone queries."""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .numcore import Transform, rotation_about_axis


@dataclass
class Bone:
    head: np.ndarray
    tail: np.ndarray
    parent: int | None = None
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))

    def __post_init__(self):
        self.head = np.asarray(self.head, dtype=np.float64).reshape(3)
        self.tail = np.asarray(self.tail, dtype=np.float64).reshape(3)
        self.axis = np.asarray(self.axis, dtype=np.float64).reshape(3)


class Skeleton:
    def __init__(self, bones: list[Bone]):
        if not bones:
            raise ValueError("skeleton needs at least one bone")
        for i, b in enumerate(bones):
            if np.allclose(b.head, b.tail):
                raise ValueError(f"bone {i} has zero length")
            if b.parent is not None and not 0 <= b.parent < len(bones):
                raise ValueError(f"bone {i} has invalid parent {b.parent}")
        self.bones = bones
        self._order = self._topological_order()

    def _topological_order(self) -> list[int]:
        order, state = [], {}

        def visit(i):
            if state.get(i) == 1:
                raise ValueError("parent graph has a cycle")
            if state.get(i) == 2:
                return
            state[i] = 1
            p = self.bones[i].parent
            if p is not None:
                visit(p)
            state[i] = 2
            order.append(i)

        for i in range(len(self.bones)):
            visit(i)
        return order

    @property
    def B(self) -> int:
        return len(self.bones)

    @property
    def heads(self) -> np.ndarray:
        return np.stack([b.head for b in self.bones])

    @property
    def tails(self) -> np.ndarray:
        return np.stack([b.tail for b in self.bones])

    @property
    def root(self) -> int:
        return next(i for i, b in enumerate(self.bones) if b.parent is None)

    def to_json(self) -> dict:
        return {
            "bones": [
                {
                    "head": b.head.tolist(),
                    "tail": b.tail.tolist(),
                    "parent": b.parent,
                    "axis": b.axis.tolist(),
                }
                for b in self.bones
            ]
        }

    @classmethod
    def from_json(cls, data: dict) -> "Skeleton":
        return cls([
            Bone(b["head"], b["tail"], b.get("parent"), b.get("axis", [0.0, 0.0, 1.0]))
            for b in data["bones"]
        ])


class Pose:
    """World transforms T_j, one per bone, applied to canonical points."""

    def __init__(self, transforms: list[Transform]):
        self.transforms = list(transforms)
        self.rotations = np.stack([t.rotation for t in self.transforms])
        self.translations = np.stack([t.translation for t in self.transforms])

    @classmethod
    def identity(cls, B: int) -> "Pose":
        return cls([Transform() for _ in range(B)])

    @property
    def B(self) -> int:
        return len(self.transforms)

    def __len__(self):
        return len(self.transforms)

    def __eq__(self, other):
        return isinstance(other, Pose) and np.array_equal(self.rotations, other.rotations) \
            and np.array_equal(self.translations, other.translations)

    def inverse_transforms(self) -> list[Transform]:
        return [t.inverse() for t in self.transforms]

    def root_removed(self, root: int = 0) -> "Pose":
        inv = self.transforms[root].inverse()
        return Pose([inv @ t for t in self.transforms])

    def feature(self, root: int = 0) -> np.ndarray:
        """Conditioning vector: root-relative rotations and translations, 12B."""
        rel = self.root_removed(root)
        return np.concatenate([rel.rotations.reshape(self.B, 9), rel.translations], axis=1).ravel()

    def to_json(self) -> dict:
        return {"transforms": [t.matrix().ravel().tolist() for t in self.transforms]}

    @classmethod
    def from_json(cls, data: dict) -> "Pose":
        return cls([Transform.from_matrix(m) for m in data["transforms"]])


def save_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj.to_json(), fh, indent=1)


# ---------------------------------------------------------------------------


def lbs(w, pose: Pose, x_c) -> np.ndarray:
    """[Σ_j w_j T_j + w_bg I] x_c.  Accepts single points or batches (N, 3)."""
    w = np.asarray(w, dtype=np.float64)
    x = np.asarray(x_c, dtype=np.float64)
    moved = np.einsum("bij,...j->...bi", pose.rotations, x) + pose.translations  # (..., B, 3)
    return np.einsum("...b,...bi->...i", w[..., :-1], moved) + w[..., -1:] * x


def point_segment_distance(x, a, b) -> np.ndarray:
    """Distance from points x (..., 3) to segments a->b (S, 3); returns (..., S)."""
    x = np.asarray(x, dtype=np.float64)[..., None, :]
    ab = b - a
    u = np.clip(((x - a) * ab).sum(-1) / (ab * ab).sum(-1), 0.0, 1.0)
    closest = a + u[..., None] * ab
    return np.linalg.norm(x - closest, axis=-1)


def posed_segments(skeleton: Skeleton, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    heads = np.einsum("bij,bj->bi", pose.rotations, skeleton.heads) + pose.translations
    tails = np.einsum("bij,bj->bi", pose.rotations, skeleton.tails) + pose.translations
    return heads, tails


def nearest_bones(x_v, skeleton: Skeleton, pose: Pose, K: int) -> np.ndarray:
    """Indices of the K nearest posed bones, ascending by distance, ties by index.

    For a batch of points returns an (N, min(K, B)) array.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    heads, tails = posed_segments(skeleton, pose)
    d = point_segment_distance(x_v, heads, tails)
    order = np.argsort(d, axis=-1, kind="stable")
    return order[..., : min(K, skeleton.B)]


def sample_bone_points(skeleton: Skeleton, n_per_bone: int, rng: np.random.Generator):
    """Uniform samples along each canonical bone; returns (points (B*n, 3), bone ids)."""
    if n_per_bone < 1:
        raise ValueError("n_per_bone must be >= 1")
    u = rng.uniform(0.0, 1.0, size=(skeleton.B, n_per_bone))
    heads, tails = skeleton.heads, skeleton.tails
    pts = heads[:, None, :] + u[..., None] * (tails - heads)[:, None, :]
    ids = np.repeat(np.arange(skeleton.B), n_per_bone)
    return pts.reshape(-1, 3), ids


def forward_kinematics(skeleton: Skeleton, joint_angles) -> Pose:
    """Each bone rotates about its own axis through its head, composed down
    the parent chain."""
    angles = np.asarray(joint_angles, dtype=np.float64).reshape(-1)
    if len(angles) != skeleton.B:
        raise ValueError(f"expected {skeleton.B} angles, got {len(angles)}")
    world: list[Transform | None] = [None] * skeleton.B
    for j in skeleton._order:
        bone = skeleton.bones[j]
        r = rotation_about_axis(bone.axis, angles[j])
        local = Transform(r, bone.head - r @ bone.head)
        world[j] = local if bone.parent is None else world[bone.parent] @ local
    return Pose(world)
