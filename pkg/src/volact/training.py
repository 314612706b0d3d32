"""Losses, optimisation, metrics and correspondence evaluation."""
from __future__ import annotations

import json
import math
import time
from pathlib import Path
from dataclasses import asdict, dataclass, field

import numpy as np

from .fields import ActorModel, PoseBatch
from .numcore import ParamStore, PosEnc, Tape
from .renderer import Camera, RayBatch, RenderConfig, backprop_rays, render_image, render_rays
from .rootfind import RootFindConfig
from .skeleton import Pose, Skeleton, sample_bone_points

PSNR_CAP = 99.0


class NonFiniteLoss(FloatingPointError):
    pass


class EmptyForeground(ValueError):
    pass


@dataclass
class LossWeights:
    lambda_w: float = 1.0
    beta_delta: float = 0.1

    def __post_init__(self):
        if self.lambda_w < 0 or self.beta_delta < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class TrainConfig:
    rays_per_batch: int = 256
    steps: int = 5000
    lr: float = 5e-4
    lr_final: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    bone_samples_per_step: int = 8
    seed: int = 0
    # overrides the render config's strategy during training when set
    failure_strategy: str | None = None
    log_every: int = 50
    eval_every: int = 0
    checkpoint_every: int = 1000
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if self.rays_per_batch < 1 or self.steps < 0 or self.bone_samples_per_step < 1:
            raise ValueError("invalid training config")

    @classmethod
    def from_dict(cls, d: dict | None) -> "TrainConfig":
        return cls(**(d or {}))


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def image_loss(C, C_hat) -> float:
    """Mean over rays of the squared L2 colour error."""
    C, C_hat = np.atleast_2d(C), np.atleast_2d(C_hat)
    if C.shape != C_hat.shape:
        raise ValueError("shape mismatch")
    return float(((C - C_hat) ** 2).sum(axis=-1).mean())


def image_loss_grad(C, C_hat) -> np.ndarray:
    C, C_hat = np.atleast_2d(C), np.atleast_2d(C_hat)
    return 2.0 * (C - C_hat) / len(C)


def _one_hot(ids, B):
    w = np.zeros((len(ids), B + 1))
    w[np.arange(len(ids)), ids] = 1.0
    return w


def skinning_loss(model: ActorModel, points, bone_ids, scale: float | None = None) -> float:
    """MSE between predicted weights and the one-hot bone target (background
    slot target 0). With `scale`, also accumulates scale·∂L/∂θ."""
    points = np.atleast_2d(points)
    target = _one_hot(np.asarray(bone_ids), model.B)
    tape = Tape(model.params)
    w = model.skinning_tape(tape, tape.input(points))
    diff = tape[w] - target
    loss = float((diff**2).mean())
    if scale:
        tape.backward({w: scale * 2.0 * diff / diff.size})
    return loss


def delta_loss(model: ActorModel, points, poses: Pose | PoseBatch, scale: float | None = None) -> float:
    """Mean squared norm of the non-linear offsets at bone samples."""
    points = np.atleast_2d(points)
    pb = poses if isinstance(poses, PoseBatch) else PoseBatch.single(poses, len(points))
    tape = Tape(model.params)
    enc = tape.apply(PosEnc(model.cfg.pe_degree_coords), tape.input(points))
    d = model.delta_tape(tape, enc, pb)
    loss = float((tape[d] ** 2).sum(axis=1).mean())
    if scale:
        tape.backward({d: scale * 2.0 * tape[d] / len(points)})
    return loss


def total_loss(l_im: float, l_w: float, l_delta: float, weights: LossWeights | None = None) -> float:
    weights = weights or LossWeights()
    return l_im + weights.lambda_w * l_w + weights.beta_delta * l_delta


def psnr(img, ref, cap: float = PSNR_CAP) -> float:
    img, ref = np.asarray(img, dtype=np.float64), np.asarray(ref, dtype=np.float64)
    if img.shape != ref.shape:
        raise ValueError("shape mismatch")
    mse = float(((img - ref) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(cap, 10.0 * math.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# Optimiser
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, params: ParamStore, cfg: TrainConfig):
        self.params = params
        self.cfg = cfg
        self.m = np.zeros(len(params))
        self.v = np.zeros(len(params))
        self.t = 0

    def lr_at(self, step: int) -> float:
        c = self.cfg
        if c.lr == 0.0:
            return 0.0
        frac = min(1.0, step / max(1, c.steps))
        return c.lr * (c.lr_final / c.lr) ** frac

    def step(self, grads: np.ndarray):
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grads
        self.v = c.beta2 * self.v + (1 - c.beta2) * grads**2
        mhat = self.m / (1 - c.beta1**self.t)
        vhat = self.v / (1 - c.beta2**self.t)
        lr = self.lr_at(self.t - 1)
        if lr != 0.0:
            self.params.values -= lr * mhat / (np.sqrt(vhat) + c.eps)

    def state(self) -> ParamStore:
        st = ParamStore([("m", (len(self.m),)), ("v", (len(self.v),)), ("t", (1,))])
        st["m"], st["v"], st["t"] = self.m, self.v, self.t
        return st

    def load_state(self, st: ParamStore):
        self.m = st["m"].copy()
        self.v = st["v"].copy()
        self.t = int(st["t"][0])


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class TrainingData:
    """Pre-flattened rays and reference colours for a set of (pose, camera) images."""

    origins: np.ndarray  # (I, P, 3)
    dirs: np.ndarray
    radii: np.ndarray  # (I, P)
    colors: np.ndarray  # (I, P, 3)
    pose_index: np.ndarray  # (I,)
    poses: list[Pose]

    @classmethod
    def build(cls, images: list[np.ndarray], cameras: list[Camera], pose_ids: list[int], poses: list[Pose]):
        o, d, r, c = [], [], [], []
        for img, cam in zip(images, cameras):
            oo, dd, rr = cam.pixel_rays()
            o.append(oo), d.append(dd), r.append(rr), c.append(img.reshape(-1, 3))
        return cls(np.stack(o), np.stack(d), np.stack(r), np.stack(c), np.asarray(pose_ids), poses)

    def sample(self, n: int, rng: np.random.Generator):
        I, P = self.radii.shape
        img = rng.integers(0, I, size=n)
        pix = rng.integers(0, P, size=n)
        rays = RayBatch(self.origins[img, pix], self.dirs[img, pix], self.radii[img, pix], self.pose_index[img])
        return rays, self.colors[img, pix]


@dataclass
class StepReport:
    step: int
    loss: float
    l_im: float
    l_w: float
    l_delta: float
    grad_norm: float
    failure_rate: float
    psnr_batch: float
    lr: float
    seconds: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


@dataclass
class LossBreakdown:
    total: float
    l_im: float
    l_w: float
    l_delta: float
    color: np.ndarray
    n_samples: int
    n_failed: int


def loss_and_grad(model: ActorModel, skeleton: Skeleton, poses: PoseBatch, rays: RayBatch, target: np.ndarray,
                  bone_pts: np.ndarray, bone_ids: np.ndarray, bone_pose_index: np.ndarray, weights: LossWeights,
                  render_cfg: RenderConfig, rf_cfg: RootFindConfig, rng: np.random.Generator | None = None,
                  backward: bool = True) -> LossBreakdown:
    """Total loss on a fixed batch; with `backward`, accumulates ∂L/∂θ into
    model.params.grads (implicit gradients through the root finder)."""
    res = render_rays(model, skeleton, poses, rays, render_cfg, rf_cfg, rng, keep_cache=backward)
    l_im = image_loss(res.color, target)
    if backward:
        backprop_rays(model, skeleton, res, image_loss_grad(res.color, target), render_cfg)
    l_w = 0.0
    if model.skinning_override is None:
        l_w = skinning_loss(model, bone_pts, bone_ids, scale=weights.lambda_w if backward else None)
    l_d = 0.0
    if render_cfg.delta_enabled and model.delta_enabled:
        l_d = delta_loss(model, bone_pts, poses.with_index(bone_pose_index),
                         scale=weights.beta_delta if backward else None)
    return LossBreakdown(total_loss(l_im, l_w, l_d, weights), l_im, l_w, l_d, res.color, res.n_samples, res.n_failed)


def train_step(model: ActorModel, skeleton: Skeleton, data: TrainingData, opt: Adam, cfg: TrainConfig,
               render_cfg: RenderConfig, rf_cfg: RootFindConfig, rng: np.random.Generator, step: int) -> StepReport:
    t0 = time.perf_counter()
    params = model.params
    params.zero_grad()
    if cfg.failure_strategy is not None and cfg.failure_strategy != render_cfg.failure_strategy:
        render_cfg = RenderConfig(**{**asdict(render_cfg), "failure_strategy": cfg.failure_strategy})
    rays, target = data.sample(cfg.rays_per_batch, rng)
    poses = PoseBatch(data.poses)
    pts, ids = sample_bone_points(skeleton, cfg.bone_samples_per_step, rng)
    pidx = rng.integers(0, len(data.poses), size=len(pts))
    lb = loss_and_grad(model, skeleton, poses, rays, target, pts, ids, pidx, cfg.loss_weights, render_cfg, rf_cfg, rng)
    g = params.grads
    if not (math.isfinite(lb.total) and np.all(np.isfinite(g))):
        raise NonFiniteLoss(f"step {step}: loss={lb.total} (im={lb.l_im}, w={lb.l_w}, delta={lb.l_delta})")
    gnorm = float(np.linalg.norm(g))
    lr = opt.lr_at(opt.t)
    opt.step(g.copy())
    params.zero_grad()
    mse = float(((lb.color - target) ** 2).mean())
    return StepReport(step, lb.total, lb.l_im, lb.l_w, lb.l_delta, gnorm,
                      lb.n_failed / lb.n_samples if lb.n_samples else 0.0,
                      PSNR_CAP if mse == 0 else min(PSNR_CAP, 10 * math.log10(1 / mse)), lr,
                      time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Checkpoints and the training loop
# ---------------------------------------------------------------------------


def save_checkpoint(path, model: ActorModel, skeleton: Skeleton, step: int, opt: Adam | None = None, extra: dict | None = None):
    """Writes `<path>` (parameters), `<path>.opt` (Adam moments) and `<path>.json`."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    model.params.save(path)
    if opt is not None:
        opt.state().save(str(path) + ".opt")
    meta = {"step": step, "field": asdict(model.cfg), "n_bones": model.B, "skeleton": skeleton.to_json(),
            "has_optimizer": opt is not None, **(extra or {})}
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    """Returns (model, skeleton, meta, optimizer state or None)."""
    from .fields import FieldConfig

    path = Path(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    params = ParamStore.load(path)
    model = ActorModel(FieldConfig.from_dict(meta["field"]), meta["n_bones"], params=params)
    opt_path = Path(str(path) + ".opt")
    opt_state = ParamStore.load(opt_path) if meta.get("has_optimizer") and opt_path.exists() else None
    return model, Skeleton.from_json(meta["skeleton"]), meta, opt_state


def fit(model: ActorModel, skeleton: Skeleton, data: TrainingData, cfg: TrainConfig, render_cfg: RenderConfig,
        rf_cfg: RootFindConfig, out_dir=None, start_step: int = 0, opt: Adam | None = None,
        eval_fn=None, extra_meta: dict | None = None, progress=None) -> Adam:
    """Runs steps [start_step, cfg.steps). Step k draws from a generator seeded
    with (seed, k), so a resumed run follows the same trajectory."""
    opt = opt or Adam(model.params, cfg)
    log = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / "train_log.ndjson"
        kept = []
        if start_step and path.exists():
            # drop rows written after the checkpoint we resume from
            kept = [ln for ln in path.read_text().splitlines(keepends=True)
                    if ln.strip() and json.loads(ln).get("step", -1) < start_step]
        log = open(path, "w")
        log.writelines(kept)
    try:
        for step in range(start_step, cfg.steps):
            rng = np.random.default_rng([cfg.seed, step])
            rep = train_step(model, skeleton, data, opt, cfg, render_cfg, rf_cfg, rng, step)
            row = asdict(rep)
            if eval_fn is not None and cfg.eval_every and (step + 1) % cfg.eval_every == 0:
                row["val_ind_psnr"] = eval_fn(model)
            if log is not None and (step % cfg.log_every == 0 or "val_ind_psnr" in row or step + 1 == cfg.steps):
                log.write(json.dumps({k: v for k, v in row.items() if k != "seconds"}) + "\n")
                log.flush()
            if progress is not None:
                progress(row)
            if out_dir is not None and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(out_dir / "checkpoint.vact", model, skeleton, step + 1, opt, extra_meta)
        if out_dir is not None:
            save_checkpoint(out_dir / "checkpoint.vact", model, skeleton, max(start_step, cfg.steps), opt, extra_meta)
    finally:
        if log is not None:
            log.close()
    return opt


def evaluate_frames(model: ActorModel, skeleton: Skeleton, frames, render_cfg: RenderConfig,
                    rf_cfg: RootFindConfig) -> list[dict]:
    """frames: iterable of (name, camera, pose, reference image)."""
    rows = []
    for name, cam, pose, ref in frames:
        out = render_image(cam, pose, model, skeleton, render_cfg, rf_cfg)
        rows.append({"frame": name, "psnr": psnr(out.color, ref), **{k: out.stats[k] for k in ("failure_fraction", "mean_newton_iters")}})
    return rows


# ---------------------------------------------------------------------------
# Correspondences
# ---------------------------------------------------------------------------


@dataclass
class CorrPair:
    chi_a: tuple[int, int]
    chi_b_pred: tuple[int, int]
    chi_b_true: tuple[float, float]


def match_correspondences(corr_a: np.ndarray, corr_b: np.ndarray, pixels, acc_b: np.ndarray | None = None,
                          threshold: float = 0.5, acc_a: np.ndarray | None = None,
                          normalize: bool = True) -> np.ndarray:
    """For each (row, col) in `pixels`, the foreground pixel of B whose
    canonical coordinate is nearest to corr_a[pixel]. Ties -> row-major order.

    With `normalize`, accumulated coordinates are divided by their opacity
    where one is given, so partially covered edge pixels are not pulled
    toward the origin.
    """
    H, W, _ = corr_b.shape
    fg = np.ones((H, W), dtype=bool) if acc_b is None else acc_b > threshold
    cand = np.flatnonzero(fg.ravel())
    if len(cand) == 0:
        raise EmptyForeground("image B has no foreground pixels")
    pts_b = corr_b.reshape(-1, 3)[cand]
    if normalize and acc_b is not None:
        pts_b = pts_b / acc_b.ravel()[cand, None]
    pixels = np.atleast_2d(np.asarray(pixels, dtype=np.int64))
    q = corr_a[pixels[:, 0], pixels[:, 1]]
    if normalize and acc_a is not None:
        q = q / np.maximum(acc_a[pixels[:, 0], pixels[:, 1]], 1e-12)[:, None]
    out = np.empty(len(q), dtype=np.int64)
    for s in range(0, len(q), 512):
        d2 = ((q[s:s + 512, None, :] - pts_b[None]) ** 2).sum(-1)
        out[s:s + 512] = cand[np.argmin(d2, axis=1)]
    return np.stack([out // W, out % W], axis=1)


def p2p_error(pairs: list[CorrPair]) -> float:
    if not pairs:
        raise ValueError("no correspondence pairs")
    d = [np.hypot(p.chi_b_true[0] - p.chi_b_pred[0], p.chi_b_true[1] - p.chi_b_pred[1]) for p in pairs]
    return float(np.mean(d))
