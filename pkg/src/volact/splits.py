"""Pose distances, K-Medoids clustering and the train / val_ind / val_ood split."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .skeleton import Pose, Skeleton


class DegenerateInput(ValueError):
    pass


@dataclass
class Probes:
    """Canonical probe points, each rigidly attached to one bone."""

    points: np.ndarray  # (M, 3)
    bones: np.ndarray  # (M,)


def capsule_surface_probes(skeleton: Skeleton, radius, n_per_bone: int = 256, seed: int = 0) -> Probes:
    """Area-uniform samples on each bone's capsule (cylinder plus two
    hemispherical caps). `radius` is a scalar or one value per bone."""
    rng = np.random.default_rng(seed)
    radii = np.broadcast_to(np.asarray(radius, dtype=np.float64), (skeleton.B,))
    pts, ids = [], []
    for b in range(skeleton.B):
        radius = float(radii[b])
        a, t = skeleton.heads[b], skeleton.tails[b]
        axis = t - a
        length = float(np.linalg.norm(axis))
        u = axis / length
        # orthonormal frame around the bone axis
        helper = np.array([1.0, 0.0, 0.0]) if abs(u[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        e1 = np.cross(u, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(u, e1)
        p_cyl = length / (length + 2.0 * radius)  # cylinder area 2πrL, caps 4πr²
        on_cyl = rng.random(n_per_bone) < p_cyl
        phi = rng.uniform(0.0, 2.0 * np.pi, n_per_bone)
        s = rng.random(n_per_bone)
        sph = rng.normal(size=(n_per_bone, 3))
        sph /= np.linalg.norm(sph, axis=1, keepdims=True)
        ring = radius * (np.cos(phi)[:, None] * e1 + np.sin(phi)[:, None] * e2)
        cyl = a + s[:, None] * axis + ring
        along = sph @ u
        cap = np.where((along >= 0)[:, None], t, a) + radius * sph
        pts.append(np.where(on_cyl[:, None], cyl, cap))
        ids.append(np.full(n_per_bone, b))
    return Probes(np.concatenate(pts), np.concatenate(ids))


def _deform_probes(pose: Pose, probes: Probes, root: int) -> np.ndarray:
    p = pose.root_removed(root)
    R = p.rotations[probes.bones]
    t = p.translations[probes.bones]
    return np.einsum("mij,mj->mi", R, probes.points) + t


def pose_distance(pose_a: Pose, pose_b: Pose, probes: Probes, root: int = 0) -> float:
    """Mean Euclidean distance between probes deformed by the two root-normalised poses."""
    if len(probes.points) == 0:
        raise ValueError("no probe points")
    if pose_a.B != pose_b.B:
        raise ValueError("poses belong to different skeletons")
    da = _deform_probes(pose_a, probes, root)
    db = _deform_probes(pose_b, probes, root)
    return float(np.linalg.norm(da - db, axis=1).mean())


def distance_matrix(poses: list[Pose], probes: Probes, root: int = 0) -> np.ndarray:
    deformed = [_deform_probes(p, probes, root) for p in poses]
    N = len(poses)
    D = np.zeros((N, N))
    for i in range(N):
        for j in range(i + 1, N):
            D[i, j] = D[j, i] = np.linalg.norm(deformed[i] - deformed[j], axis=1).mean()
    return D


# ---------------------------------------------------------------------------
# K-Medoids
# ---------------------------------------------------------------------------


@dataclass
class KMedoidsResult:
    assignments: np.ndarray  # cluster id per point
    medoids: np.ndarray  # point index per cluster
    costs: list[float]

    @property
    def cost(self) -> float:
        return self.costs[-1]


def _assign(dist, medoids):
    # ties go to the lowest cluster id (argmin returns the first minimum)
    return np.argmin(dist[:, medoids], axis=1)


def _cost(dist, medoids, assign):
    return float(dist[np.arange(len(dist)), medoids[assign]].sum())


def kmedoids(dist, K: int, seed: int = 0, max_iters: int = 100) -> KMedoidsResult:
    """PAM-style alternation from a seeded farthest-point initialisation."""
    dist = np.asarray(dist, dtype=np.float64)
    N = len(dist)
    if dist.shape != (N, N):
        raise ValueError("distance matrix must be square")
    if K < 1 or N < K:
        raise DegenerateInput(f"need 1 <= K <= N (K={K}, N={N})")
    rng = np.random.default_rng(seed)
    medoids = [int(rng.integers(N))]
    chosen = np.zeros(N, dtype=bool)
    chosen[medoids[0]] = True
    while len(medoids) < K:
        near = dist[:, medoids].min(axis=1)
        near[chosen] = -np.inf
        nxt = int(np.argmax(near))
        medoids.append(nxt)
        chosen[nxt] = True
    medoids = np.array(medoids)
    assign = _assign(dist, medoids)
    costs = [_cost(dist, medoids, assign)]
    for _ in range(max_iters):
        new = medoids.copy()
        for k in range(K):
            members = np.flatnonzero(assign == k)
            within = dist[np.ix_(members, members)].sum(axis=1)
            best = members[np.argmin(within)]
            # keep the current medoid on ties so the loop terminates
            cur = np.flatnonzero(members == medoids[k])
            if len(cur) and within[cur[0]] <= within.min():
                best = medoids[k]
            new[k] = best
        new_assign = _assign(dist, new)
        c = _cost(dist, new, new_assign)
        if c > costs[-1] + 1e-12 * max(1.0, costs[-1]):
            raise AssertionError("k-medoids cost increased")
        stable = np.array_equal(new, medoids)
        medoids, assign = new, new_assign
        costs.append(c)
        if stable:
            break
    return KMedoidsResult(assign, medoids, costs)


def select_ood(medoids, dist) -> int:
    """Cluster whose medoid has the largest mean distance to the other medoids."""
    medoids = np.asarray(medoids)
    K = len(medoids)
    if K < 2:
        raise ValueError("need at least two medoids")
    sub = np.asarray(dist)[np.ix_(medoids, medoids)]
    mean = sub.sum(axis=1) / (K - 1)
    return int(np.argmax(mean))


# ---------------------------------------------------------------------------
# Splits
# ---------------------------------------------------------------------------


@dataclass
class SplitResult:
    assignments: dict[int, int]  # frame -> cluster
    medoids: list[int]  # frame id per cluster
    ood_cluster: int
    train: list[int]
    val_ind: list[int]
    val_ood: list[int]
    seed: int
    test: list[int] = field(default_factory=list)

    def split(self, name: str) -> list[int]:
        if name not in ("train", "val_ind", "val_ood", "test"):
            raise KeyError(f"unknown split {name!r}")
        return getattr(self, name)

    def to_json(self) -> dict:
        d = asdict(self)
        d["assignments"] = {str(k): int(v) for k, v in sorted(self.assignments.items())}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SplitResult":
        d = dict(d)
        d["assignments"] = {int(k): int(v) for k, v in d["assignments"].items()}
        return cls(**d)

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path) -> "SplitResult":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def build_splits(frames, assignments, ood_cluster: int, seed: int = 0, ratio=(2, 1), medoids=None) -> SplitResult:
    """OOD cluster -> val_ood; every other cluster shuffled and split so that
    train gets ceil(a·n/(a+b)) of its n frames."""
    frames = [int(f) for f in frames]
    assignments = [int(a) for a in assignments]
    if len(frames) != len(assignments):
        raise ValueError("one assignment per frame")
    a, b = ratio
    rng = np.random.default_rng(seed)
    train, val_ind, val_ood = [], [], []
    for k in sorted(set(assignments)):
        members = [f for f, c in zip(frames, assignments) if c == k]
        if k == ood_cluster:
            val_ood += members
            continue
        members = [members[i] for i in rng.permutation(len(members))]
        n_train = math.ceil(a * len(members) / (a + b))
        train += members[:n_train]
        val_ind += members[n_train:]
    return SplitResult(dict(zip(frames, assignments)), list(medoids) if medoids is not None else [],
                       int(ood_cluster), sorted(train), sorted(val_ind), sorted(val_ood), seed)


def split_poses(poses: list[Pose], probes: Probes, K: int = 10, seed: int = 0, root: int = 0,
                withhold: tuple[int, int] | None = None):
    """Full protocol. `withhold=(start, length)` reserves a contiguous frame
    range as the test chunk before clustering. Returns (SplitResult, distance matrix)."""
    frames = list(range(len(poses)))
    test = []
    if withhold is not None:
        start, length = withhold
        if start < 0 or length < 0 or start + length > len(poses):
            raise ValueError("withheld chunk out of range")
        test = frames[start:start + length]
        frames = frames[:start] + frames[start + length:]
    D = distance_matrix([poses[f] for f in frames], probes, root)
    km = kmedoids(D, K, seed)
    ood = select_ood(km.medoids, D) if K >= 2 else -1
    res = build_splits(frames, km.assignments, ood, seed, medoids=[frames[m] for m in km.medoids])
    res.test = test
    return res, D


def write_distance_csv(path, D: np.ndarray, frames=None):
    frames = list(range(len(D))) if frames is None else list(frames)
    with open(path, "w") as fh:
        fh.write("frame," + ",".join(str(f) for f in frames) + "\n")
        for f, row in zip(frames, D):
            fh.write(f"{f}," + ",".join(f"{v:.9g}" for v in row) + "\n")
