"""Inverse skinning: multi-candidate Newton root finding on the forward map and
implicit-differentiation gradients at the roots."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from enum import IntEnum

import numpy as np

from .fields import ActorModel, PoseBatch
from .numcore import Tape, batched_solve3
from .skeleton import Pose, Skeleton, point_segment_distance

IDENTITY = -1


class Status(IntEnum):
    CONVERGED = 0
    MAX_ITERS = 1
    SINGULAR_JACOBIAN = 2


@dataclass
class RootFindConfig:
    K: int = 5
    tol: float = 1e-5
    max_iters: int = 10
    dedup_eps: float = 1e-4
    include_identity_candidate: bool = True
    max_halvings: int = 4

    def __post_init__(self):
        if self.tol <= 0 or self.max_iters < 1 or self.K < 1:
            raise ValueError("invalid root-finding config")

    @classmethod
    def from_dict(cls, d: dict | None) -> "RootFindConfig":
        return cls(**(d or {}))


@dataclass
class Candidate:
    x_c: np.ndarray
    status: Status
    residual: float
    init_bone: int  # IDENTITY for the background candidate
    iters: int = 0


@dataclass
class CandidateSet:
    query: np.ndarray
    candidates: list[Candidate] = field(default_factory=list)

    @property
    def failed(self) -> bool:
        return not self.candidates


class Deformer:
    """Forward map x_c -> x_v for a batch of rows, with Jacobian and
    parameter VJP. Subclasses implement `evaluate` and `vjp`."""

    def evaluate(self, x: np.ndarray, rows: np.ndarray):
        """Return (x_v (n,3), J (n,3,3)) for points x belonging to `rows`."""
        raise NotImplementedError

    def vjp(self, x: np.ndarray, rows: np.ndarray, v: np.ndarray):
        """Accumulate v^T ∂x_v/∂θ into the parameter gradient buffer."""
        raise NotImplementedError


class ModelDeformer(Deformer):
    def __init__(self, model: ActorModel, poses: PoseBatch, delta_enabled: bool | None = None):
        self.model = model
        self.poses = poses
        self.delta_enabled = model.delta_enabled if delta_enabled is None else delta_enabled

    def evaluate(self, x, rows):
        y, J, *_ = self.model.forward_map_jacobian(self.poses.take(rows), x, self.delta_enabled)
        return y, J

    def vjp(self, x, rows, v):
        tape = Tape(self.model.params)
        ys = self.model.forward_map_tape(tape, tape.input(x), self.poses.take(rows), self.delta_enabled)
        tape.backward({ys: v})


# ---------------------------------------------------------------------------


def _posed_segments(skeleton: Skeleton, poses: PoseBatch):
    heads = np.einsum("pbij,bj->pbi", poses.rotations, skeleton.heads) + poses.translations
    tails = np.einsum("pbij,bj->pbi", poses.rotations, skeleton.tails) + poses.translations
    return heads, tails


def init_candidates_batch(x_v: np.ndarray, skeleton: Skeleton, poses: PoseBatch, cfg: RootFindConfig):
    """Inverse-rigid initialisations for every query.

    Returns (x0 (N, C, 3), init_bone (N, C)) with C = min(K, B) + identity.
    """
    heads, tails = _posed_segments(skeleton, poses)
    idx = poses.index
    N = len(x_v)
    d = np.empty((N, skeleton.B))
    for p in np.unique(idx):
        sel = idx == p
        d[sel] = point_segment_distance(x_v[sel], heads[p], tails[p])
    k = min(cfg.K, skeleton.B)
    bones = np.argsort(d, axis=1, kind="stable")[:, :k]
    r = poses.rotations[idx[:, None], bones]  # (N, k, 3, 3)
    t = poses.translations[idx[:, None], bones]
    x0 = np.einsum("nkji,nkj->nki", r, x_v[:, None, :] - t)  # R^T (x - t)
    if cfg.include_identity_candidate:
        x0 = np.concatenate([x0, x_v[:, None, :]], axis=1)
        bones = np.concatenate([bones, np.full((N, 1), IDENTITY)], axis=1)
    return x0, bones


def init_candidates(x_v, skeleton: Skeleton, pose: Pose, cfg: RootFindConfig) -> list[np.ndarray]:
    x = np.asarray(x_v, dtype=np.float64).reshape(1, 3)
    x0, _ = init_candidates_batch(x, skeleton, PoseBatch.single(pose, 1), cfg)
    return list(x0[0])


@dataclass
class NewtonResult:
    x: np.ndarray
    status: np.ndarray
    residual: np.ndarray
    iters: np.ndarray


def newton_batch(deformer: Deformer, x_v: np.ndarray, x0: np.ndarray, rows: np.ndarray, cfg: RootFindConfig) -> NewtonResult:
    """Newton iteration on f(x) = forward(x) - x_v for many independent points.

    A step that increases ‖f‖ is halved up to `cfg.max_halvings` times; the
    last (smallest) trial is taken regardless.
    """
    x = np.array(x0, dtype=np.float64)
    M = len(x)
    y, J = deformer.evaluate(x, rows)
    f = y - x_v
    res = np.linalg.norm(f, axis=1)
    status = np.full(M, Status.MAX_ITERS, dtype=np.int64)
    iters = np.zeros(M, dtype=np.int64)
    bad = ~np.isfinite(res)
    status[bad] = Status.SINGULAR_JACOBIAN
    done = (res <= cfg.tol) | bad
    status[res <= cfg.tol] = Status.CONVERGED
    for _ in range(cfg.max_iters):
        act = np.flatnonzero(~done)
        if len(act) == 0:
            break
        step, ok = batched_solve3(J[act], f[act])
        sing = act[~ok]
        status[sing] = Status.SINGULAR_JACOBIAN
        done[sing] = True
        act, step = act[ok], step[ok]
        if len(act) == 0:
            break
        trial = x[act] - step
        ty, tJ = deformer.evaluate(trial, rows[act])
        tf = ty - x_v[act]
        tres = np.linalg.norm(tf, axis=1)
        for _ in range(cfg.max_halvings):
            worse = ~(tres <= res[act])
            if not worse.any():
                break
            wi = np.flatnonzero(worse)
            step[wi] *= 0.5
            trial[wi] = x[act[wi]] - step[wi]
            wy, wJ = deformer.evaluate(trial[wi], rows[act[wi]])
            ty[wi], tJ[wi] = wy, wJ
            tf[wi] = wy - x_v[act[wi]]
            tres[wi] = np.linalg.norm(tf[wi], axis=1)
        x[act], y[act], J[act], f[act], res[act] = trial, ty, tJ, tf, tres
        iters[act] += 1
        nonfinite = act[~np.isfinite(tres)]
        status[nonfinite] = Status.SINGULAR_JACOBIAN
        done[nonfinite] = True
        conv = act[tres <= cfg.tol]
        status[conv] = Status.CONVERGED
        done[conv] = True
    return NewtonResult(x, status, res, iters)


def newton_solve(deformer: Deformer, x_v, x0, cfg: RootFindConfig, row: int = 0) -> Candidate:
    r = newton_batch(deformer, np.reshape(x_v, (1, 3)), np.reshape(x0, (1, 3)), np.array([row]), cfg)
    return Candidate(r.x[0], Status(int(r.status[0])), float(r.residual[0]), IDENTITY, int(r.iters[0]))


@dataclass
class CandidateBatch:
    """Root-finding results for N queries × C candidates."""

    x: np.ndarray  # (N, C, 3)
    status: np.ndarray  # (N, C)
    residual: np.ndarray
    iters: np.ndarray
    init_bone: np.ndarray
    keep: np.ndarray  # converged and not a duplicate

    @property
    def failed(self) -> np.ndarray:
        return ~self.keep.any(axis=1)


def dedup_mask(x: np.ndarray, residual: np.ndarray, converged: np.ndarray, eps: float) -> np.ndarray:
    """Keep one representative (lowest residual, then lowest slot) of each
    group of converged roots closer than eps."""
    N, C, _ = x.shape
    keep = converged.copy()
    d = np.linalg.norm(x[:, :, None, :] - x[:, None, :, :], axis=-1)  # (N, C, C)
    slot = np.arange(C)
    # i beats j when (res_i, i) < (res_j, j)
    beats = (residual[:, :, None] < residual[:, None, :]) | (
        (residual[:, :, None] == residual[:, None, :]) & (slot[:, None] < slot[None, :])
    )
    dominated = (converged[:, :, None] & converged[:, None, :] & (d < eps) & beats).any(axis=1)
    keep &= ~dominated
    return keep


def solve_inverse_batch(deformer: Deformer, skeleton: Skeleton, poses: PoseBatch, x_v: np.ndarray, cfg: RootFindConfig) -> CandidateBatch:
    x_v = np.asarray(x_v, dtype=np.float64)
    N = len(x_v)
    x0, bones = init_candidates_batch(x_v, skeleton, poses, cfg)
    C = x0.shape[1]
    rows = np.repeat(np.arange(N), C)
    r = newton_batch(deformer, np.repeat(x_v, C, axis=0), x0.reshape(-1, 3), rows, cfg)
    xs = r.x.reshape(N, C, 3)
    status = r.status.reshape(N, C)
    res = r.residual.reshape(N, C)
    keep = dedup_mask(xs, res, status == Status.CONVERGED, cfg.dedup_eps)
    return CandidateBatch(xs, status, res, r.iters.reshape(N, C), bones, keep)


def solve_inverse(deformer: Deformer, skeleton: Skeleton, pose: Pose | PoseBatch, x_v, cfg: RootFindConfig) -> CandidateSet:
    x = np.asarray(x_v, dtype=np.float64).reshape(1, 3)
    poses = pose if isinstance(pose, PoseBatch) else PoseBatch.single(pose, 1)
    cb = solve_inverse_batch(deformer, skeleton, poses, x, cfg)
    cands = [
        Candidate(cb.x[0, j], Status(int(cb.status[0, j])), float(cb.residual[0, j]), int(cb.init_bone[0, j]), int(cb.iters[0, j]))
        for j in range(cb.x.shape[1])
        if cb.keep[0, j]
    ]
    return CandidateSet(x[0], cands)


def implicit_grad(deformer: Deformer, x_star: np.ndarray, rows: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Accumulate ∂L/∂θ = -upstream^T J^{-1} ∂x_v/∂θ for roots x_star.

    Returns the mask of roots whose Jacobian was invertible; singular ones
    contribute nothing.
    """
    x_star = np.atleast_2d(x_star)
    upstream = np.atleast_2d(upstream)
    rows = np.atleast_1d(rows)
    _, J = deformer.evaluate(x_star, rows)
    v, ok = batched_solve3(np.transpose(J, (0, 2, 1)), -upstream)
    if ok.any():
        deformer.vjp(x_star[ok], rows[ok], v[ok])
    return ok


def config_dict(cfg: RootFindConfig) -> dict:
    return asdict(cfg)
