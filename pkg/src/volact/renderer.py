"""Cone casting, canonical querying through inverse skinning, failure
handling, volumetric compositing and correspondence accumulation.

Conical-frustum moments (unit-norm ray direction d, base radius r per unit
depth, interval [t0, t1], with m = (t0 + t1) / 2 and w = (t1 - t0) / 2):

    mean_t = m + 2 m w² / (3 m² + w²)
    var_t  = w² / 3 - (4 / 15) w⁴ (12 m² - w²) / (3 m² + w²)²
    var_r  = r² (m² / 4 + (5 / 12) w² - (4 / 15) w⁴ / (3 m² + w²))
    μ      = o + mean_t d
    diag Σ = var_t d² + var_r (1 - d²)
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .fields import ActorModel, PoseBatch
from .numcore import Tape, Transform
from .rootfind import ModelDeformer, RootFindConfig, implicit_grad, solve_inverse_batch
from .skeleton import Pose, Skeleton, posed_segments

ZERO_FILL = "zero"
INTERPOLATE = "interp"
_STRATEGIES = {ZERO_FILL: ZERO_FILL, "zerofill": ZERO_FILL, INTERPOLATE: INTERPOLATE, "interpolate": INTERPOLATE}


def normalize_strategy(name: str) -> str:
    try:
        return _STRATEGIES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown failure strategy {name!r}") from None


@dataclass
class Camera:
    focal: float
    cx: float
    cy: float
    H: int
    W: int
    world_to_cam: Transform = field(default_factory=Transform)

    def __post_init__(self):
        if self.focal <= 0 or self.H < 1 or self.W < 1:
            raise ValueError("invalid camera intrinsics")

    @property
    def center(self) -> np.ndarray:
        return self.world_to_cam.inverse().translation

    @classmethod
    def look_at(cls, eye, target, up, focal, H, W) -> "Camera":
        """Camera at `eye` looking at `target` (x right, y down, z forward)."""
        eye = np.asarray(eye, dtype=np.float64)
        z = np.asarray(target, dtype=np.float64) - eye
        z /= np.linalg.norm(z)
        x = np.cross(z, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, [1.0, 0.0, 0.0])
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        return cls(focal, W / 2.0, H / 2.0, H, W, Transform(r, -r @ eye))

    def scaled(self, factor: float) -> "Camera":
        return Camera(self.focal * factor, self.cx * factor, self.cy * factor,
                      int(round(self.H * factor)), int(round(self.W * factor)), self.world_to_cam)

    def pixel_rays(self, pixels=None):
        """(origins, unit directions, radii) for pixels given as (row, col)
        pairs; defaults to every pixel in row-major order."""
        if pixels is None:
            rr, cc = np.meshgrid(np.arange(self.H), np.arange(self.W), indexing="ij")
            pixels = np.stack([rr.ravel(), cc.ravel()], axis=1)
        pixels = np.atleast_2d(pixels).astype(np.float64)
        d_cam = np.stack([
            (pixels[:, 1] + 0.5 - self.cx) / self.focal,
            (pixels[:, 0] + 0.5 - self.cy) / self.focal,
            np.ones(len(pixels)),
        ], axis=1)
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
        dirs = d_cam @ self.world_to_cam.rotation  # R^T d
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        origins = np.broadcast_to(self.center, dirs.shape).copy()
        radii = np.full(len(pixels), 2.0 / np.sqrt(12.0) / self.focal)
        return origins, dirs, radii

    def project(self, x) -> tuple[np.ndarray, np.ndarray]:
        """World points -> ((row, col) continuous pixel coords, depth)."""
        xc = self.world_to_cam.apply(np.atleast_2d(x))
        z = xc[:, 2]
        col = self.focal * xc[:, 0] / z + self.cx - 0.5
        row = self.focal * xc[:, 1] / z + self.cy - 0.5
        return np.stack([row, col], axis=1), z

    def to_json(self) -> dict:
        return {"focal": self.focal, "cx": self.cx, "cy": self.cy, "H": self.H, "W": self.W,
                "world_to_cam": self.world_to_cam.matrix().ravel().tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Camera":
        return cls(d["focal"], d["cx"], d["cy"], int(d["H"]), int(d["W"]), Transform.from_matrix(d["world_to_cam"]))


@dataclass
class Cone:
    origin: np.ndarray
    direction: np.ndarray
    pixel_radius: float


@dataclass
class GaussianSample:
    mu: np.ndarray
    sigma_diag: np.ndarray
    t_near: float
    t_far: float
    valid: bool = True


@dataclass
class ShadedSample:
    c_v: np.ndarray
    sigma_v: float
    a_v: float
    x_c: np.ndarray
    failed: bool = False
    t_near: float = 0.0
    t_far: float = 0.0


@dataclass
class RenderConfig:
    near: float = 2.0
    far: float = 6.0
    n_samples: int = 64
    stratified: bool = False
    failure_strategy: str = INTERPOLATE
    ao_enabled: bool = True
    delta_enabled: bool = True
    # restrict each ray to the posed skeleton's bounding box grown by this margin
    bbox_clip: bool = True
    bbox_margin: float = 0.2
    chunk: int = 256
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.near < self.far:
            raise ValueError("need 0 < near < far")
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        self.failure_strategy = normalize_strategy(self.failure_strategy)

    @classmethod
    def from_dict(cls, d: dict | None) -> "RenderConfig":
        return cls(**(d or {}))


@dataclass
class RenderOutput:
    color: np.ndarray
    corr: np.ndarray
    acc: np.ndarray
    stats: dict


# ---------------------------------------------------------------------------
# Cones and Gaussian samples
# ---------------------------------------------------------------------------


def generate_cone(camera: Camera, px) -> Cone:
    row, col = px
    if not (0 <= row < camera.H and 0 <= col < camera.W):
        raise ValueError("pixel outside image")
    o, d, r = camera.pixel_rays(np.array([[row, col]]))
    return Cone(o[0], d[0], float(r[0]))


def frustum_gaussians(origins, dirs, radii, t_edges):
    """Mean and diagonal covariance of conical frusta; t_edges (R, n+1)."""
    t0, t1 = t_edges[:, :-1], t_edges[:, 1:]
    m = 0.5 * (t0 + t1)
    w = 0.5 * (t1 - t0)
    denom = 3 * m**2 + w**2
    mean_t = m + 2 * m * w**2 / denom
    var_t = w**2 / 3 - (4.0 / 15.0) * (w**4 * (12 * m**2 - w**2)) / denom**2
    var_r = radii[:, None] ** 2 * (m**2 / 4 + (5.0 / 12.0) * w**2 - (4.0 / 15.0) * w**4 / denom)
    mu = origins[:, None, :] + mean_t[..., None] * dirs[:, None, :]
    d2 = dirs**2
    var = var_t[..., None] * d2[:, None, :] + var_r[..., None] * (1 - d2)[:, None, :]
    return mu, np.maximum(var, 0.0)


def interval_edges(near, far, n: int, stratified: bool, rng: np.random.Generator | None):
    """(R, n+1) boundaries tiling [near, far] per ray; interior boundaries are
    jittered within their half-intervals when stratified."""
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    u = np.linspace(0.0, 1.0, n + 1)
    u = np.broadcast_to(u, (len(near), n + 1)).copy()
    if stratified and n > 1:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        jitter = rng.uniform(-0.5, 0.5, size=(len(near), n - 1)) / n
        u[:, 1:-1] += jitter
    return near[:, None] + u * (far - near)[:, None]


def cast_cone_samples(cone: Cone, near: float, far: float, n: int, stratified: bool = False,
                      rng: np.random.Generator | None = None) -> list[GaussianSample]:
    if not 0 < near < far or n < 1:
        raise ValueError("need 0 < near < far and n >= 1")
    edges = interval_edges(near, far, n, stratified, rng)
    mu, var = frustum_gaussians(cone.origin[None], cone.direction[None], np.array([cone.pixel_radius]), edges)
    return [GaussianSample(mu[0, i], var[0, i], float(edges[0, i]), float(edges[0, i + 1])) for i in range(n)]


def ray_box_interval(origins, dirs, lo, hi):
    """Slab test; returns (t_enter, t_exit) per ray (t_exit < t_enter on miss)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        ta = (lo - origins) * inv
        tb = (hi - origins) * inv
    tmin = np.nanmax(np.minimum(ta, tb), axis=1)
    tmax = np.nanmin(np.maximum(ta, tb), axis=1)
    return tmin, tmax


def pose_bbox(skeleton: Skeleton, pose: Pose, margin: float):
    heads, tails = posed_segments(skeleton, pose)
    pts = np.concatenate([heads, tails])
    return pts.min(axis=0) - margin, pts.max(axis=0) + margin


def ray_intervals(origins, dirs, pose_index, boxes, cfg: RenderConfig):
    """Per-ray [near, far] after optional bounding-box clipping, and a hit mask."""
    R = len(origins)
    near = np.full(R, cfg.near)
    far = np.full(R, cfg.far)
    if cfg.bbox_clip and boxes is not None:
        lo, hi = boxes[0][pose_index], boxes[1][pose_index]
        t0, t1 = ray_box_interval(origins, dirs, lo, hi)
        near = np.maximum(near, t0)
        far = np.minimum(far, t1)
    hit = far > near + 1e-9
    return near, far, hit


# ---------------------------------------------------------------------------
# Querying, failure handling, compositing
# ---------------------------------------------------------------------------


@dataclass
class SampleQuery:
    """Per-sample merged attributes (flattened over rays × samples)."""

    rgb: np.ndarray
    sigma: np.ndarray
    ao: np.ndarray
    x_c: np.ndarray
    failed: np.ndarray
    winner: np.ndarray  # candidate slot of the argmax winner (-1 when failed)
    newton_iters: np.ndarray
    n_candidates: int


def merge_argmax(sigma_cand: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Index of the densest kept candidate per row, -1 for rows with none."""
    s = np.where(keep, sigma_cand, -np.inf)
    win = np.argmax(s, axis=1)
    win[~keep.any(axis=1)] = -1
    return win


def query_batch(model: ActorModel, skeleton: Skeleton, poses: PoseBatch, mu: np.ndarray, var: np.ndarray,
                rf_cfg: RootFindConfig, ao_enabled: bool = True, delta_enabled: bool = True) -> SampleQuery:
    """Inverse-skin each sample mean, evaluate the canonical fields for every
    surviving candidate and keep the densest one."""
    S = len(mu)
    deformer = ModelDeformer(model, poses, delta_enabled and model.delta_enabled)
    cb = solve_inverse_batch(deformer, skeleton, poses, mu, rf_cfg)
    C = cb.x.shape[1]
    rows, slots = np.nonzero(cb.keep)
    sigma_c = np.zeros((S, C))
    rgb = np.zeros((S, 3))
    ao = np.ones(S)
    x_c = np.zeros((S, 3))
    if len(rows):
        rad = model.eval_radiance(cb.x[rows, slots], var[rows])
        sigma_c[rows, slots] = rad.sigma
    win = merge_argmax(sigma_c, cb.keep)
    ok = win >= 0
    sigma = np.zeros(S)
    if ok.any():
        idx = np.flatnonzero(ok)
        # map each winner back to its radiance row
        lookup = np.full((S, C), -1)
        lookup[rows, slots] = np.arange(len(rows))
        r = lookup[idx, win[idx]]
        rgb[idx] = rad.c[r]
        sigma[idx] = rad.sigma[r]
        x_c[idx] = cb.x[idx, win[idx]]
        if ao_enabled:
            ao[idx] = model.eval_ao(rad.h[r], poses.take(idx))
    return SampleQuery(rgb, sigma, ao, x_c, ~ok, win, cb.iters, C)


def query_sample(sample: GaussianSample, pose: Pose, model: ActorModel, skeleton: Skeleton,
                 rf_cfg: RootFindConfig, ao_enabled: bool = True) -> ShadedSample:
    q = query_batch(model, skeleton, PoseBatch.single(pose, 1), sample.mu[None], sample.sigma_diag[None], rf_cfg, ao_enabled)
    return ShadedSample(q.rgb[0], float(q.sigma[0]), float(q.ao[0]), q.x_c[0], bool(q.failed[0]), sample.t_near, sample.t_far)


def fill_failures(t_mid: np.ndarray, attrs: np.ndarray, failed: np.ndarray, strategy: str) -> np.ndarray:
    """Replace attributes of failed samples along each ray.

    t_mid (R, n), attrs (R, n, k), failed (R, n) -> filled copy of attrs.
    Interpolate: linear in depth between the nearest valid neighbours; an
    end run copies its single nearest valid neighbour; an all-failed ray is
    zero-filled.
    """
    strategy = normalize_strategy(strategy)
    out = attrs.copy()
    if not failed.any():
        return out
    if strategy == ZERO_FILL:
        out[failed] = 0.0
        return out
    R, n = failed.shape
    idx = np.arange(n)
    valid = ~failed
    prev = np.where(valid, idx, -1)
    prev = np.maximum.accumulate(prev, axis=1)
    nxt = np.where(valid, idx, n)
    nxt = np.minimum.accumulate(nxt[:, ::-1], axis=1)[:, ::-1]
    ray = np.arange(R)[:, None].repeat(n, 1)
    has_p, has_n = prev >= 0, nxt < n
    p = np.clip(prev, 0, n - 1)
    q = np.clip(nxt, 0, n - 1)
    tp, tq = t_mid[ray, p], t_mid[ray, q]
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = np.where(tq > tp, (t_mid - tp) / (tq - tp), 0.0)
    both = has_p & has_n
    blend = (1 - alpha)[..., None] * attrs[ray, p] + alpha[..., None] * attrs[ray, q]
    fill = np.where(both[..., None], blend,
                    np.where(has_p[..., None], attrs[ray, p],
                             np.where(has_n[..., None], attrs[ray, q], 0.0)))
    out[failed] = fill[failed]
    return out


def interpolate_failures(samples: list[ShadedSample], strategy: str) -> list[ShadedSample]:
    if not samples:
        return []
    t_mid = np.array([[0.5 * (s.t_near + s.t_far) for s in samples]])
    attrs = np.array([[*s.c_v, s.sigma_v, s.a_v, *s.x_c] for s in samples])[None]
    failed = np.array([[s.failed for s in samples]])
    filled = fill_failures(t_mid, attrs, failed, strategy)[0]
    return [
        ShadedSample(a[:3].copy(), float(a[3]), float(a[4]), a[5:8].copy(), s.failed, s.t_near, s.t_far)
        for a, s in zip(filled, samples)
    ]


@dataclass
class Composite:
    color: np.ndarray
    corr: np.ndarray
    acc: np.ndarray
    weights: np.ndarray
    trans: np.ndarray  # T_i, shape (R, n + 1) including the exit transmittance


def composite_batch(sigma, delta, rgb, x_c=None) -> Composite:
    """ω_i = T_i (1 - exp(-σ_i δ_i)); T_i = exp(-Σ_{j<i} σ_j δ_j).

    `rgb` is the already-shaded colour (AO applied)."""
    tau = sigma * delta
    cum = np.concatenate([np.zeros((len(tau), 1)), np.cumsum(tau, axis=1)], axis=1)
    trans = np.exp(-cum)
    alpha = -np.expm1(-tau)
    w = trans[:, :-1] * alpha
    color = np.einsum("rn,rnk->rk", w, rgb)
    corr = np.einsum("rn,rnk->rk", w, x_c) if x_c is not None else None
    return Composite(color, corr, w.sum(axis=1), w, trans)


def composite(samples: list[ShadedSample]):
    """Composite one ray; returns (C, X, acc)."""
    if not samples:
        return np.zeros(3), np.zeros(3), 0.0
    sigma = np.array([[s.sigma_v for s in samples]])
    delta = np.array([[s.t_far - s.t_near for s in samples]])
    rgb = np.array([[s.a_v * np.asarray(s.c_v) for s in samples]])
    xc = np.array([[s.x_c for s in samples]])
    out = composite_batch(sigma, delta, rgb, xc)
    return out.color[0], out.corr[0], float(out.acc[0])


def composite_backward(comp: Composite, sigma, delta, rgb, g_color):
    """Cotangents of (sigma, shaded rgb) given dL/dC per ray."""
    g_rgb = comp.weights[..., None] * g_color[:, None, :]
    gc = np.einsum("rnk,rk->rn", rgb, g_color)  # g · c̃_i
    wgc = comp.weights * gc
    after = np.cumsum(wgc[:, ::-1], axis=1)[:, ::-1] - wgc  # Σ_{i>k}
    g_sigma = delta * (comp.trans[:, 1:] * gc - after)
    return g_sigma, g_rgb


# ---------------------------------------------------------------------------
# Ray-batch rendering with optional backward pass
# ---------------------------------------------------------------------------


@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    radii: np.ndarray
    pose_index: np.ndarray


@dataclass
class RayResult:
    color: np.ndarray
    corr: np.ndarray
    acc: np.ndarray
    n_samples: int
    n_failed: int
    iters_sum: int
    n_runs: int
    # backward cache
    cache: dict | None = None


def render_rays(model: ActorModel, skeleton: Skeleton, poses: PoseBatch, rays: RayBatch, cfg: RenderConfig,
                rf_cfg: RootFindConfig, rng: np.random.Generator | None = None, keep_cache: bool = False) -> RayResult:
    R = len(rays.origins)
    n = cfg.n_samples
    boxes = None
    if cfg.bbox_clip:
        bb = [pose_bbox(skeleton, p, cfg.bbox_margin) for p in poses.poses]
        boxes = (np.stack([b[0] for b in bb]), np.stack([b[1] for b in bb]))
    near, far, hit = ray_intervals(rays.origins, rays.dirs, rays.pose_index, boxes, cfg)
    color = np.zeros((R, 3))
    corr = np.zeros((R, 3))
    acc = np.zeros(R)
    hi = np.flatnonzero(hit)
    if len(hi) == 0:
        return RayResult(color, corr, acc, 0, 0, 0, 0, {"hit": hi} if keep_cache else None)
    edges = interval_edges(near[hi], far[hi], n, cfg.stratified, rng)
    mu, var = frustum_gaussians(rays.origins[hi], rays.dirs[hi], rays.radii[hi], edges)
    Rh = len(hi)
    sample_pose = np.repeat(rays.pose_index[hi], n)
    sp = poses.with_index(sample_pose)
    q = query_batch(model, skeleton, sp, mu.reshape(-1, 3), var.reshape(-1, 3), rf_cfg,
                    cfg.ao_enabled and model.ao_enabled, cfg.delta_enabled)
    failed = q.failed.reshape(Rh, n)
    attrs = np.concatenate([q.rgb, q.sigma[:, None], q.ao[:, None], q.x_c], axis=1).reshape(Rh, n, 8)
    t_mid = 0.5 * (edges[:, :-1] + edges[:, 1:])
    attrs = fill_failures(t_mid, attrs, failed, cfg.failure_strategy)
    rgb, sigma, ao, xc = attrs[..., :3], attrs[..., 3], attrs[..., 4], attrs[..., 5:8]
    delta = np.diff(edges, axis=1)
    shaded = ao[..., None] * rgb
    comp = composite_batch(sigma, delta, shaded, xc)
    color[hi], corr[hi], acc[hi] = comp.color, comp.corr, comp.acc
    cache = None
    if keep_cache:
        cache = dict(hit=hi, q=q, mu=mu.reshape(-1, 3), var=var.reshape(-1, 3), sp=sp, comp=comp, sigma=sigma,
                     delta=delta, shaded=shaded, rgb=rgb, ao=ao, failed=failed)
    return RayResult(color, corr, acc, Rh * n, int(q.failed.sum()), int(q.newton_iters.sum()), q.newton_iters.size, cache)


def backprop_rays(model: ActorModel, skeleton: Skeleton, result: RayResult, g_color: np.ndarray,
                  cfg: RenderConfig) -> int:
    """Accumulate parameter gradients for dL/dC (R, 3) into model.params.grads.

    Gradients flow only through argmax winners of non-failed samples; filled
    samples act as constants. Returns the number of winners whose Jacobian
    was singular (excluded from the skinning gradient).
    """
    c = result.cache
    hi = c["hit"]
    if len(hi) == 0:
        return 0
    q = c["q"]
    g_sigma, g_shaded = composite_backward(c["comp"], c["sigma"], c["delta"], c["shaded"], g_color[hi])
    g_sigma = g_sigma.reshape(-1)
    g_shaded = g_shaded.reshape(-1, 3)
    rgb = c["rgb"].reshape(-1, 3)
    ao = c["ao"].reshape(-1)
    idx = np.flatnonzero(~q.failed)
    if len(idx) == 0:
        return 0
    g_rgb = g_shaded[idx] * ao[idx, None]
    g_ao = (g_shaded[idx] * rgb[idx]).sum(axis=1)
    x_star = q.x_c[idx]
    sp = c["sp"].take(idx)
    tape = Tape(model.params)
    mu_s = tape.input(x_star)
    var_s = tape.input(c["var"][idx])
    rgb_s, sig_s, h_s = model.radiance_tape(tape, mu_s, var_s)
    seeds = {rgb_s: g_rgb, sig_s: g_sigma[idx, None]}
    if cfg.ao_enabled and model.ao_enabled:
        ao_s = model.ao_tape(tape, h_s, sp)
        seeds[ao_s] = g_ao[:, None]
    g_x = tape.backward(seeds)[mu_s]
    deformer = ModelDeformer(model, sp, cfg.delta_enabled and model.delta_enabled)
    ok = implicit_grad(deformer, x_star, np.arange(len(idx)), g_x)
    return int((~ok).sum())


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("VOLACT_THREADS", os.cpu_count() or 1)))
    except ValueError:
        return 1


def render_image(camera: Camera, pose: Pose, model: ActorModel, skeleton: Skeleton, cfg: RenderConfig,
                 rf_cfg: RootFindConfig | None = None) -> RenderOutput:
    rf_cfg = rf_cfg or RootFindConfig()
    o, d, r = camera.pixel_rays()
    poses = PoseBatch([pose])
    N = len(o)
    chunks = [slice(s, min(s + cfg.chunk, N)) for s in range(0, N, cfg.chunk)]

    def run(i_sl):
        i, sl = i_sl
        rng = np.random.default_rng([cfg.seed, i])
        rays = RayBatch(o[sl], d[sl], r[sl], np.zeros(sl.stop - sl.start, dtype=np.int64))
        return render_rays(model, skeleton, poses, rays, cfg, rf_cfg, rng)

    with ThreadPoolExecutor(max_workers=_threads()) as ex:
        results = list(ex.map(run, enumerate(chunks)))
    color = np.concatenate([res.color for res in results]).reshape(camera.H, camera.W, 3)
    corr = np.concatenate([res.corr for res in results]).reshape(camera.H, camera.W, 3)
    acc = np.concatenate([res.acc for res in results]).reshape(camera.H, camera.W)
    n_samples = sum(res.n_samples for res in results)
    n_failed = sum(res.n_failed for res in results)
    runs = sum(res.n_runs for res in results)
    stats = {
        "failure_fraction": n_failed / n_samples if n_samples else 0.0,
        "mean_newton_iters": sum(res.iters_sum for res in results) / runs if runs else 0.0,
        "n_samples": n_samples,
        "n_failed": n_failed,
    }
    return RenderOutput(np.clip(color, 0.0, 1.0), corr, np.clip(acc, 0.0, 1.0), stats)
