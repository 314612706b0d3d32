"""Coordinate networks of the actor: skinning, non-linear delta, canonical
radiance and ambient occlusion, plus the composed canonical->view map."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .numcore import (
    Add,
    ClippedDoubleSigmoid,
    Concat,
    Dense,
    IntegratedPosEnc,
    Op,
    ParamStore,
    PosEnc,
    Sigmoid,
    Softmax,
    Softplus,
    Tape,
)
from .skeleton import Pose


@dataclass
class FieldConfig:
    skinning_layers: int = 4
    skinning_width: int = 128
    delta_layers: int = 4
    delta_width: int = 128
    radiance_layers: int = 8
    radiance_width: int = 256
    ao_layers: int = 1
    ao_width: int = 128
    pe_degree_coords: int = 4
    ipe_degree: int = 10
    # hidden layer (0-based) whose input is concatenated with the encoded input
    radiance_skip: int = 4
    density_shift: float = -1.0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k in ("density_shift", "radiance_skip"):
                continue
            if k in ("pe_degree_coords", "ipe_degree"):
                if v < 0:
                    raise ValueError(f"{k} must be >= 0")
            elif v <= 0:
                raise ValueError(f"{k} must be positive")

    @classmethod
    def from_dict(cls, d: dict | None) -> "FieldConfig":
        return cls(**(d or {}))


@dataclass
class RadianceOut:
    c: np.ndarray
    sigma: np.ndarray
    h: np.ndarray


def positional_encoding(x, degree: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out, _ = PosEnc(degree).forward(None, x)
    return out


def integrated_pe(mu, sigma_diag, degree: int) -> np.ndarray:
    mu = np.asarray(mu, dtype=np.float64)
    var = np.asarray(sigma_diag, dtype=np.float64)
    if var.shape[-2:] == (3, 3):
        var = np.diagonal(var, axis1=-2, axis2=-1)
    if np.any(var < 0):
        raise ValueError("variances must be non-negative")
    out, _ = IntegratedPosEnc(degree).forward(None, mu, np.broadcast_to(var, mu.shape))
    return out


class PoseBatch:
    """Stacked poses plus a per-point pose index, for batched evaluation."""

    def __init__(self, poses: list[Pose], index=None, n: int | None = None):
        self.poses = poses
        self.rotations = np.stack([p.rotations for p in poses])  # (P, B, 3, 3)
        self.translations = np.stack([p.translations for p in poses])  # (P, B, 3)
        self.features = np.stack([p.feature() for p in poses])  # (P, 12B)
        if index is None:
            index = np.zeros(n or 0, dtype=np.int64)
        self.index = np.asarray(index, dtype=np.int64)

    def take(self, sel) -> "PoseBatch":
        out = PoseBatch.__new__(PoseBatch)
        out.poses = self.poses
        out.rotations, out.translations, out.features = self.rotations, self.translations, self.features
        out.index = self.index[sel]
        return out

    def with_index(self, index) -> "PoseBatch":
        out = self.take(slice(None))
        out.index = np.asarray(index, dtype=np.int64)
        return out

    def __len__(self):
        return len(self.index)

    @classmethod
    def single(cls, pose: Pose, n: int) -> "PoseBatch":
        return cls([pose], np.zeros(n, dtype=np.int64))


class LBSOp(Op):
    """Inputs: weights (N, B+1), canonical points (N, 3). Pose is constant."""

    name = "lbs"

    def __init__(self, poses: PoseBatch):
        self.poses = poses

    def forward(self, params, w, x):
        r = self.poses.rotations[self.poses.index]
        t = self.poses.translations[self.poses.index]
        moved = np.einsum("nbij,nj->nbi", r, x) + t
        out = np.einsum("nb,nbi->ni", w[:, :-1], moved) + w[:, -1:] * x
        # blended linear part, used for both backward and jvp
        a = np.einsum("nb,nbij->nij", w[:, :-1], r) + w[:, -1, None, None] * np.eye(3)
        return out, (moved, x, a)

    def backward(self, params, cache, g, grads):
        moved, x, a = cache
        gw = np.concatenate([np.einsum("ni,nbi->nb", g, moved), (g * x).sum(-1, keepdims=True)], axis=1)
        gx = np.einsum("nij,ni->nj", a, g)
        return gw, gx

    def jvp(self, params, cache, tw, tx):
        moved, x, a = cache
        out = 0.0
        if tw is not None:
            out = out + np.einsum("dnb,nbi->dni", tw[..., :-1], moved) + tw[..., -1:] * x
        if tx is not None:
            out = out + np.einsum("nij,dnj->dni", a, tx)
        return out


def _init_dense(params: ParamStore, name: str, rng: np.random.Generator, zero: bool = False, bias: float = 0.0):
    w = params[name + ".W"]
    if zero:
        w[...] = 0.0
    else:
        fan_in, fan_out = w.shape
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        w[...] = rng.uniform(-lim, lim, size=w.shape)
    params[name + ".b"][...] = bias


class ActorModel:
    """Holds the four networks' parameters and evaluates them.

    `skinning_override`, when set, replaces the learned skinning network with a
    fixed function of canonical points (used for analytic-weight references).
    """

    def __init__(self, cfg: FieldConfig, n_bones: int, seed: int = 0, params: ParamStore | None = None):
        self.cfg = cfg
        self.B = n_bones
        self.delta_enabled = True
        self.ao_enabled = True
        self.skinning_override: Callable[[np.ndarray], np.ndarray] | None = None
        self.params = params if params is not None else ParamStore(self._layout())
        if params is None:
            self.initialize(seed)
        elif set(params.layout) != {n for n, _ in self._layout()}:
            raise ValueError("parameter layout does not match the field config")

    # layout ---------------------------------------------------------------

    @property
    def pe_dim(self):
        return 3 + 6 * self.cfg.pe_degree_coords

    @property
    def ipe_dim(self):
        return 6 * self.cfg.ipe_degree

    @property
    def pose_dim(self):
        return 12 * self.B

    def _mlp_layout(self, prefix, d_in, width, layers, d_out, skip=None, skip_dim=0):
        out, d = [], d_in
        for i in range(layers):
            if skip is not None and i == skip and i > 0:
                d += skip_dim
            out += [(f"{prefix}.{i}.W", (d, width)), (f"{prefix}.{i}.b", (width,))]
            d = width
        return out, d

    def _layout(self):
        c = self.cfg
        lay = []
        part, d = self._mlp_layout("skin", self.pe_dim, c.skinning_width, c.skinning_layers, self.B + 1)
        lay += part + [("skin.out.W", (d, self.B + 1)), ("skin.out.b", (self.B + 1,))]
        part, d = self._mlp_layout("delta", self.pe_dim + self.pose_dim, c.delta_width, c.delta_layers, 3)
        lay += part + [("delta.out.W", (d, 3)), ("delta.out.b", (3,))]
        part, d = self._mlp_layout("rad", self.ipe_dim, c.radiance_width, c.radiance_layers, 4, skip=c.radiance_skip, skip_dim=self.ipe_dim)
        lay += part + [("rad.sigma.W", (d, 1)), ("rad.sigma.b", (1,)), ("rad.rgb.W", (d, 3)), ("rad.rgb.b", (3,))]
        part, d = self._mlp_layout("ao", d + self.pose_dim, c.ao_width, c.ao_layers, 1)
        lay += part + [("ao.out.W", (d, 1)), ("ao.out.b", (1,))]
        return lay

    def initialize(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        layers = list(dict.fromkeys(n.rsplit(".", 1)[0] for n in self.params.layout))
        for name in layers:
            _init_dense(self.params, name, rng, zero=name in ("delta.out", "ao.out"))

    # networks on a tape -----------------------------------------------------

    def _mlp(self, tape: Tape, prefix: str, h: int, layers: int, skip=None, skip_slot=None) -> int:
        for i in range(layers):
            if skip is not None and i == skip and i > 0:
                h = tape.apply(Concat(), h, skip_slot)
            h = tape.apply(Dense(f"{prefix}.{i}", "relu"), h)
        return h

    def skinning_tape(self, tape: Tape, x: int, enc: int | None = None) -> int:
        if self.skinning_override is not None:
            return tape.input(self.skinning_override(tape[x]))
        if enc is None:
            enc = tape.apply(PosEnc(self.cfg.pe_degree_coords), x)
        h = self._mlp(tape, "skin", enc, self.cfg.skinning_layers)
        logits = tape.apply(Dense("skin.out", "linear"), h)
        return tape.apply(Softmax(), logits)

    def delta_tape(self, tape: Tape, enc: int, poses: PoseBatch) -> int:
        pf = tape.input(poses.features[poses.index])
        h = tape.apply(Concat(), enc, pf)
        h = self._mlp(tape, "delta", h, self.cfg.delta_layers)
        return tape.apply(Dense("delta.out", "linear"), h)

    def forward_map_tape(self, tape: Tape, x: int, poses: PoseBatch, delta: bool | None = None) -> int:
        enc = tape.apply(PosEnc(self.cfg.pe_degree_coords), x)
        w = self.skinning_tape(tape, x, enc)
        y = tape.apply(LBSOp(poses), w, x)
        if self.delta_enabled if delta is None else delta:
            d = self.delta_tape(tape, enc, poses)
            y = tape.apply(Add(), y, d)
        return y

    def radiance_tape(self, tape: Tape, mu: int, var: int) -> tuple[int, int, int]:
        """Returns slots (rgb, sigma, h)."""
        enc = tape.apply(IntegratedPosEnc(self.cfg.ipe_degree), mu, var)
        h = self._mlp(tape, "rad", enc, self.cfg.radiance_layers, skip=self.cfg.radiance_skip, skip_slot=enc)
        sig = tape.apply(Softplus(self.cfg.density_shift), tape.apply(Dense("rad.sigma", "linear"), h))
        rgb = tape.apply(Sigmoid(), tape.apply(Dense("rad.rgb", "linear"), h))
        return rgb, sig, h

    def ao_tape(self, tape: Tape, h: int, poses: PoseBatch) -> int:
        pf = tape.input(poses.features[poses.index])
        z = tape.apply(Concat(), h, pf)
        z = self._mlp(tape, "ao", z, self.cfg.ao_layers)
        return tape.apply(ClippedDoubleSigmoid(), tape.apply(Dense("ao.out", "linear"), z))

    # batched evaluation -----------------------------------------------------

    def eval_skinning(self, x_c) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
        tape = Tape(self.params)
        out = tape[self.skinning_tape(tape, tape.input(x))]
        return out if np.ndim(x_c) > 1 else out[0]

    def eval_delta(self, x_c, pose: Pose | PoseBatch) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
        poses = pose if isinstance(pose, PoseBatch) else PoseBatch.single(pose, len(x))
        tape = Tape(self.params)
        enc = tape.apply(PosEnc(self.cfg.pe_degree_coords), tape.input(x))
        out = tape[self.delta_tape(tape, enc, poses)]
        return out if np.ndim(x_c) > 1 else out[0]

    def eval_radiance(self, x_c, sigma) -> RadianceOut:
        """`sigma`: per-point diagonal variances (..., 3) or full 3x3 covariances."""
        x = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
        var = np.asarray(sigma, dtype=np.float64)
        if var.shape[-2:] == (3, 3):
            var = np.diagonal(var, axis1=-2, axis2=-1)
        var = np.broadcast_to(var, x.shape).copy()
        tape = Tape(self.params)
        rgb, sig, h = self.radiance_tape(tape, tape.input(x), tape.input(var))
        out = RadianceOut(tape[rgb], tape[sig][:, 0], tape[h])
        if np.ndim(x_c) == 1:
            out = RadianceOut(out.c[0], out.sigma[0], out.h[0])
        return out

    def eval_ao(self, h, pose: Pose | PoseBatch) -> np.ndarray:
        hh = np.atleast_2d(np.asarray(h, dtype=np.float64))
        if not self.ao_enabled:
            return np.ones(len(hh)) if np.ndim(h) > 1 else 1.0
        poses = pose if isinstance(pose, PoseBatch) else PoseBatch.single(pose, len(hh))
        tape = Tape(self.params)
        out = tape[self.ao_tape(tape, tape.input(hh), poses)][:, 0]
        return out if np.ndim(h) > 1 else float(out[0])

    def forward_map(self, pose: Pose | PoseBatch, x_c) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
        poses = pose if isinstance(pose, PoseBatch) else PoseBatch.single(pose, len(x))
        tape = Tape(self.params)
        out = tape[self.forward_map_tape(tape, tape.input(x), poses)]
        return out if np.ndim(x_c) > 1 else out[0]

    def forward_map_jacobian(self, poses: PoseBatch, x: np.ndarray, delta: bool | None = None):
        """Returns (x_v (N,3), J (N,3,3), tape, x_slot, out_slot) with
        J[n, i, k] = ∂x_v_i/∂x_c_k from three forward-mode passes."""
        tape = Tape(self.params)
        xs = tape.input(x)
        ys = self.forward_map_tape(tape, xs, poses, delta)
        dirs = np.broadcast_to(np.eye(3)[:, None, :], (3, len(x), 3))
        tan = tape.jvp({xs: dirs})[ys]
        return tape[ys], np.transpose(tan, (1, 2, 0)), tape, xs, ys


def one_hot_weights(bone_of_point: Callable[[np.ndarray], np.ndarray], B: int) -> Callable[[np.ndarray], np.ndarray]:
    """Skinning override assigning each point to one bone (index B = background)."""

    def fn(x):
        idx = bone_of_point(x)
        w = np.zeros((len(x), B + 1))
        w[np.arange(len(x)), idx] = 1.0
        return w

    return fn
