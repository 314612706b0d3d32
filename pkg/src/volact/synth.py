"""Procedural articulated capsule actor with an exact ground-truth renderer,
and dataset writing/reading."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .fields import ActorModel, FieldConfig, RadianceOut, one_hot_weights
from .files import read_ppm, write_ppm
from .renderer import Camera, RenderConfig, composite_batch, frustum_gaussians, interval_edges, pose_bbox, ray_intervals
from .skeleton import Bone, Pose, Skeleton, forward_kinematics, point_segment_distance


def smoothstep(u):
    u = np.clip(u, 0.0, 1.0)
    return u * u * (3.0 - 2.0 * u)


@dataclass
class CapsuleActor:
    skeleton: Skeleton
    radius: np.ndarray
    falloff: np.ndarray
    sigma_max: np.ndarray
    albedo: np.ndarray  # (B, 3)
    angle_ranges: np.ndarray = field(default=None)  # (B, 2)

    def __post_init__(self):
        B = self.skeleton.B
        self.radius = np.broadcast_to(np.asarray(self.radius, dtype=np.float64), (B,)).copy()
        self.falloff = np.broadcast_to(np.asarray(self.falloff, dtype=np.float64), (B,)).copy()
        self.sigma_max = np.broadcast_to(np.asarray(self.sigma_max, dtype=np.float64), (B,)).copy()
        self.albedo = np.asarray(self.albedo, dtype=np.float64).reshape(B, 3)
        if self.angle_ranges is None:
            self.angle_ranges = np.zeros((B, 2))
        self.angle_ranges = np.asarray(self.angle_ranges, dtype=np.float64).reshape(B, 2)
        if np.any(self.radius <= 0) or np.any(self.falloff <= 0) or np.any(self.sigma_max < 0):
            raise ValueError("capsule radii, falloffs must be positive and densities non-negative")

    @property
    def B(self) -> int:
        return self.skeleton.B

    @property
    def extent(self) -> float:
        return float((self.radius + self.falloff).max())

    def capsule_densities(self, x_c) -> np.ndarray:
        """Canonical density of each capsule at canonical points: (N, B)."""
        d = point_segment_distance(np.atleast_2d(x_c), self.skeleton.heads, self.skeleton.tails)
        return self.sigma_max * (1.0 - smoothstep((d - self.radius) / self.falloff))

    def canonical_density(self, x_c):
        """(rgb, sigma) of the canonical scene."""
        dens = self.capsule_densities(x_c)
        b = np.argmax(dens, axis=1)
        return self.albedo[b], dens[np.arange(len(dens)), b]

    def dominant_bone(self, x_c) -> np.ndarray:
        """Bone whose canonical segment is nearest (ties -> lowest index)."""
        d = point_segment_distance(np.atleast_2d(x_c), self.skeleton.heads, self.skeleton.tails)
        return np.argmin(d, axis=1)

    def to_json(self) -> dict:
        return {
            "skeleton": self.skeleton.to_json(),
            "radius": self.radius.tolist(),
            "falloff": self.falloff.tolist(),
            "sigma_max": self.sigma_max.tolist(),
            "albedo": self.albedo.tolist(),
            "angle_ranges": self.angle_ranges.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "CapsuleActor":
        return cls(Skeleton.from_json(d["skeleton"]), d["radius"], d["falloff"], d["sigma_max"], d["albedo"],
                   d.get("angle_ranges"))


def default_actor() -> CapsuleActor:
    """3-bone chain along x; the root swings about z, the others about z and y."""
    sk = Skeleton([
        Bone([-0.45, 0.0, 0.0], [-0.15, 0.0, 0.0], None, [0.0, 0.0, 1.0]),
        Bone([-0.15, 0.0, 0.0], [0.15, 0.0, 0.0], 0, [0.0, 0.0, 1.0]),
        Bone([0.15, 0.0, 0.0], [0.45, 0.0, 0.0], 1, [0.0, 1.0, 0.0]),
    ])
    albedo = [[0.9, 0.25, 0.2], [0.2, 0.8, 0.3], [0.25, 0.35, 0.9]]
    ranges = [[-0.4, 0.4], [-1.2, 1.2], [-1.2, 1.2]]
    return CapsuleActor(sk, 0.08, 0.04, 50.0, albedo, ranges)


def default_cameras(n: int = 8, H: int = 64, W: int = 64, distance: float = 2.6, focal: float | None = None) -> list[Camera]:
    """Cameras on a ring around the origin with alternating elevation."""
    focal = focal if focal is not None else 1.7 * W
    cams = []
    for i in range(n):
        az = 2 * np.pi * i / n
        el = 0.45 if i % 2 == 0 else -0.25
        eye = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(Camera.look_at(eye, [0, 0, 0], [0, 0, 1], focal, H, W))
    return cams


def default_render_config(**kw) -> RenderConfig:
    base = dict(near=1.0, far=4.5, n_samples=64, bbox_margin=0.2)
    base.update(kw)
    return RenderConfig(**base)


# ---------------------------------------------------------------------------


def oracle_density(actor: CapsuleActor, pose: Pose, x_v):
    """Exact view-space (rgb, sigma, bone) of the posed actor; each capsule
    is evaluated at T_b^{-1} x_v."""
    x = np.atleast_2d(np.asarray(x_v, dtype=np.float64))
    dens = np.empty((len(x), actor.B))
    for b, t in enumerate(pose.transforms):
        xc = (x - t.translation) @ t.rotation  # R^T (x - t)
        d = point_segment_distance(xc, actor.skeleton.heads[b:b + 1], actor.skeleton.tails[b:b + 1])[:, 0]
        dens[:, b] = actor.sigma_max[b] * (1.0 - smoothstep((d - actor.radius[b]) / actor.falloff[b]))
    bone = np.argmax(dens, axis=1)
    sigma = dens[np.arange(len(x)), bone]
    rgb = actor.albedo[bone]
    if np.ndim(x_v) == 1:
        return rgb[0], float(sigma[0])
    return rgb, sigma, bone


@dataclass
class OracleImage:
    color: np.ndarray  # (H, W, 3)
    acc: np.ndarray  # (H, W)
    depth: np.ndarray  # expected depth, valid where acc > 0
    surface: np.ndarray  # (H, W, 3) expected view-space point


def oracle_render(camera: Camera, actor: CapsuleActor, pose: Pose, cfg: RenderConfig | None = None) -> OracleImage:
    """Ground-truth render: same cone sampling and compositing as the learned
    renderer, with the exact density and no shading."""
    cfg = cfg or default_render_config()
    o, d, r = camera.pixel_rays()
    R = len(o)
    box = pose_bbox(actor.skeleton, pose, max(cfg.bbox_margin, actor.extent))
    near, far, hit = ray_intervals(o, d, np.zeros(R, dtype=np.int64), (box[0][None], box[1][None]), cfg)
    color = np.zeros((R, 3))
    acc = np.zeros(R)
    depth = np.zeros(R)
    hi = np.flatnonzero(hit)
    if len(hi):
        edges = interval_edges(near[hi], far[hi], cfg.n_samples, False, None)
        mu, _ = frustum_gaussians(o[hi], d[hi], r[hi], edges)
        rgb, sigma, _ = oracle_density(actor, pose, mu.reshape(-1, 3))
        n = cfg.n_samples
        comp = composite_batch(sigma.reshape(-1, n), np.diff(edges, axis=1), rgb.reshape(-1, n, 3))
        color[hi], acc[hi] = comp.color, comp.acc
        t_mid = 0.5 * (edges[:, :-1] + edges[:, 1:])
        with np.errstate(invalid="ignore", divide="ignore"):
            depth[hi] = np.where(comp.acc > 0, (comp.weights * t_mid).sum(1) / comp.acc, 0.0)
    surface = o + depth[:, None] * d
    H, W = camera.H, camera.W
    return OracleImage(np.clip(color, 0, 1).reshape(H, W, 3), acc.reshape(H, W), depth.reshape(H, W), surface.reshape(H, W, 3))


def analytic_warp(actor: CapsuleActor, cam_a: Camera, pose_a: Pose, img_a: OracleImage, cam_b: Camera,
                  pose_b: Pose, img_b: OracleImage, pixels, depth_tol: float = 0.05):
    """Ground-truth cross-image correspondences under the piecewise-rigid warp.

    Each pixel's expected surface point in A is assigned to its nearest posed
    bone, carried to B by T_b(B)·T_b(A)^{-1} and projected. Returns
    ((n, 2) continuous (row, col) in B, visible mask); a pixel is visible when
    it lands inside B's foreground at a matching depth.
    """
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.int64))
    x_v = img_a.surface[pixels[:, 0], pixels[:, 1]]
    heads = np.stack([t.apply(h) for t, h in zip(pose_a.transforms, actor.skeleton.heads)])
    tails = np.stack([t.apply(h) for t, h in zip(pose_a.transforms, actor.skeleton.tails)])
    bone = np.argmin(point_segment_distance(x_v, heads, tails), axis=1)
    x_b = np.empty_like(x_v)
    for b in np.unique(bone):
        sel = bone == b
        x_b[sel] = (pose_b.transforms[b] @ pose_a.transforms[b].inverse()).apply(x_v[sel])
    proj, z = cam_b.project(x_b)
    ri, ci = np.round(proj[:, 0]).astype(np.int64), np.round(proj[:, 1]).astype(np.int64)
    inside = (z > 0) & (ri >= 0) & (ri < cam_b.H) & (ci >= 0) & (ci < cam_b.W)
    visible = np.zeros(len(pixels), dtype=bool)
    k = np.flatnonzero(inside)
    dist = np.linalg.norm(x_b[k] - cam_b.center, axis=1)
    visible[k] = (img_b.acc[ri[k], ci[k]] > 0.5) & (np.abs(img_b.depth[ri[k], ci[k]] - dist) < depth_tol)
    return proj, visible


def sample_pose(skeleton: Skeleton, angle_ranges, rng: np.random.Generator) -> Pose:
    angles = sample_angles(angle_ranges, rng)
    return forward_kinematics(skeleton, angles)


def sample_angles(angle_ranges, rng: np.random.Generator) -> np.ndarray:
    ranges = np.asarray(angle_ranges, dtype=np.float64).reshape(-1, 2)
    return rng.uniform(ranges[:, 0], ranges[:, 1]) if np.any(ranges[:, 1] > ranges[:, 0]) else ranges[:, 0].copy()


# ---------------------------------------------------------------------------
# Analytic reference model
# ---------------------------------------------------------------------------


class AnalyticActorModel(ActorModel):
    """Exact piecewise-rigid skinning plus the exact canonical radiance; shares
    the learned model's rendering path (root finding, merging, compositing)."""

    def __init__(self, actor: CapsuleActor):
        tiny = FieldConfig(1, 1, 1, 1, 1, 1, 1, 1, 0, 0, 0)
        super().__init__(tiny, actor.B, seed=0)
        self.actor = actor
        self.delta_enabled = False
        self.ao_enabled = False
        self.skinning_override = one_hot_weights(actor.dominant_bone, actor.B)

    def eval_radiance(self, x_c, sigma) -> RadianceOut:
        rgb, dens = self.actor.canonical_density(np.atleast_2d(x_c))
        return RadianceOut(rgb, dens, np.zeros((len(rgb), 1)))


def analytic_skinning(actor: CapsuleActor):
    return one_hot_weights(actor.dominant_bone, actor.B)


# ---------------------------------------------------------------------------
# Dataset I/O
# ---------------------------------------------------------------------------


@dataclass
class FrameRecord:
    frame: int  # pose index
    camera: int
    image: str

    def to_json(self):
        return {"frame": self.frame, "camera": self.camera, "image": self.image}


@dataclass
class Dataset:
    root: Path
    actor: CapsuleActor
    cameras: list[Camera]
    poses: list[Pose]
    records: list[FrameRecord]
    render: dict
    seed: int

    def image(self, rec: FrameRecord) -> np.ndarray:
        return read_ppm(self.root / rec.image)

    def records_for(self, frames) -> list[FrameRecord]:
        keep = set(int(f) for f in frames)
        return [r for r in self.records if r.frame in keep]


def write_dataset(directory, actor: CapsuleActor, cameras: list[Camera], poses: list[Pose],
                  render_cfg: RenderConfig | None = None, seed: int = 0, angles=None) -> dict:
    render_cfg = render_cfg or default_render_config()
    root = Path(directory)
    for sub in ("cameras", "poses", "images"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    for i, cam in enumerate(cameras):
        _write_json(root / "cameras" / f"{i:03d}.json", cam.to_json())
    records = []
    for f, pose in enumerate(poses):
        data = pose.to_json()
        if angles is not None:
            data["angles"] = np.asarray(angles[f]).tolist()
        _write_json(root / "poses" / f"{f:04d}.json", data)
        for c, cam in enumerate(cameras):
            img = oracle_render(cam, actor, pose, render_cfg).color
            rel = f"images/{f:04d}_{c:03d}.ppm"
            write_ppm(root / rel, img)
            records.append(FrameRecord(f, c, rel))
    manifest = {
        "actor": actor.to_json(),
        "n_frames": len(poses),
        "n_cameras": len(cameras),
        "render": {k: v for k, v in vars(render_cfg).items()},
        "seed": seed,
        "frames": [r.to_json() for r in records],
    }
    _write_json(root / "manifest.json", manifest)
    return manifest


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    with open(root / "manifest.json") as fh:
        man = json.load(fh)
    cams = [Camera.from_json(_read_json(root / "cameras" / f"{i:03d}.json")) for i in range(man["n_cameras"])]
    poses = [Pose.from_json(_read_json(root / "poses" / f"{f:04d}.json")) for f in range(man["n_frames"])]
    recs = [FrameRecord(int(r["frame"]), int(r["camera"]), r["image"]) for r in man["frames"]]
    for r in recs:
        if not (root / r.image).exists():
            raise FileNotFoundError(root / r.image)
    return Dataset(root, CapsuleActor.from_json(man["actor"]), cams, poses, recs, man.get("render", {}), man.get("seed", 0))


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def synthesize(directory, n_poses: int = 20, n_cameras: int = 8, H: int = 64, W: int = 64, seed: int = 0,
               actor: CapsuleActor | None = None, render_cfg: RenderConfig | None = None) -> dict:
    actor = actor or default_actor()
    rng = np.random.default_rng(seed)
    angles = [sample_angles(actor.angle_ranges, rng) for _ in range(n_poses)]
    poses = [forward_kinematics(actor.skeleton, a) for a in angles]
    cams = default_cameras(n_cameras, H, W)
    os.makedirs(directory, exist_ok=True)
    return write_dataset(directory, actor, cams, poses, render_cfg, seed, angles)
