"""Small linear algebra, a layer-level reverse/forward-mode tape, and a
finite-difference gradient oracle.

Everything is float64. Arrays are batched along the leading axis; forward-mode
tangents carry an extra leading "direction" axis.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np


class SingularMatrix(ValueError):
    pass


# ---------------------------------------------------------------------------
# Rigid transforms and 3x3 solves
# ---------------------------------------------------------------------------


@dataclass
class Transform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)

    @classmethod
    def identity(cls) -> "Transform":
        return cls()

    @classmethod
    def from_matrix(cls, m) -> "Transform":
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, :3].copy(), m[:3, 3].copy())

    @classmethod
    def translate(cls, t) -> "Transform":
        return cls(np.eye(3), t)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Map points (..., 3)."""
        return np.asarray(x) @ self.rotation.T + self.translation

    def inverse(self) -> "Transform":
        rt = self.rotation.T
        return Transform(rt, -rt @ self.translation)

    def compose(self, other: "Transform") -> "Transform":
        """self ∘ other (apply `other` first)."""
        return Transform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    __matmul__ = compose

    def is_rigid(self, atol: float = 1e-9) -> bool:
        r = self.rotation
        return bool(
            np.allclose(r.T @ r, np.eye(3), atol=atol) and np.linalg.det(r) > 0
        )


def rotation_about_axis(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    a = np.asarray(axis, dtype=np.float64)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def solve3(a, b) -> np.ndarray:
    """Solve a 3x3 system by Gaussian elimination with partial pivoting."""
    a = np.array(a, dtype=np.float64).reshape(3, 3)
    b = np.array(b, dtype=np.float64).reshape(3)
    scale = np.abs(a).max()
    if not np.all(np.isfinite(a)) or scale == 0.0:
        raise SingularMatrix("degenerate 3x3 matrix")
    if abs(np.linalg.det(a)) < 1e-12 * scale**3:
        raise SingularMatrix(f"|det| below threshold (det={np.linalg.det(a):.3e})")
    m = np.concatenate([a, b[:, None]], axis=1)
    for col in range(3):
        piv = col + int(np.argmax(np.abs(m[col:, col])))
        if piv != col:
            m[[col, piv]] = m[[piv, col]]
        m[col + 1:] -= np.outer(m[col + 1:, col] / m[col, col], m[col])
    x = np.zeros(3)
    for row in (2, 1, 0):
        x[row] = (m[row, 3] - m[row, row + 1:3] @ x[row + 1:]) / m[row, row]
    return x


def batched_solve3(a: np.ndarray, b: np.ndarray, det_tol: float = 1e-12):
    """Solve many 3x3 systems; returns (x, ok) where ok flags non-singular rows.

    Singular rows get x = 0.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    scale = np.abs(a).reshape(len(a), -1).max(axis=1)
    det = np.linalg.det(a)
    ok = np.isfinite(det) & (np.abs(det) >= det_tol * scale**3) & (scale > 0)
    x = np.zeros_like(b)
    if ok.any():
        x[ok] = np.linalg.solve(a[ok], b[ok][..., None])[..., 0]
    return x, ok


# ---------------------------------------------------------------------------
# Parameter storage and checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"VACT"
FORMAT_VERSION = 1


class ParamStore:
    """Flat parameter vector with named views and a matching gradient buffer."""

    def __init__(self, layout: Sequence[tuple[str, tuple[int, ...]]] = ()):
        self.layout: dict[str, tuple[int, tuple[int, ...]]] = {}
        offset = 0
        for name, shape in layout:
            if name in self.layout:
                raise ValueError(f"duplicate parameter {name!r}")
            shape = tuple(int(s) for s in shape)
            self.layout[name] = (offset, shape)
            offset += int(np.prod(shape))
        self.values = np.zeros(offset)
        self.grads = np.zeros(offset)

    def __len__(self):
        return len(self.values)

    def __contains__(self, name):
        return name in self.layout

    def slice(self, name: str) -> slice:
        off, shape = self.layout[name]
        return slice(off, off + int(np.prod(shape)))

    def __getitem__(self, name: str) -> np.ndarray:
        off, shape = self.layout[name]
        return self.values[self.slice(name)].reshape(shape)

    def __setitem__(self, name: str, value):
        self[name][...] = value

    def grad(self, name: str) -> np.ndarray:
        _, shape = self.layout[name]
        return self.grads[self.slice(name)].reshape(shape)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.layout if n.startswith(prefix)]

    def mask(self, prefix: str) -> np.ndarray:
        m = np.zeros(len(self), dtype=bool)
        for n in self.names(prefix):
            m[self.slice(n)] = True
        return m

    def zero_grad(self):
        self.grads[...] = 0.0

    def copy(self) -> "ParamStore":
        out = ParamStore([(n, s) for n, (_, s) in self.layout.items()])
        out.values[...] = self.values
        out.grads[...] = self.grads
        return out

    # binary checkpoint ----------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(self.layout))]
        for name, (off, shape) in self.layout.items():
            raw = name.encode("utf-8")
            parts.append(struct.pack("<I", len(raw)))
            parts.append(raw)
            parts.append(struct.pack("<I", len(shape)))
            parts.append(struct.pack(f"<{len(shape)}I", *shape))
            parts.append(struct.pack("<Q", off))
        parts.append(struct.pack("<Q", len(self.values)))
        parts.append(self.values.astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParamStore":
        if data[:4] != MAGIC:
            raise ValueError("not a VACT checkpoint")
        pos = 4
        (version,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", data, pos)
            pos += 4
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (ndim,) = struct.unpack_from("<I", data, pos)
            pos += 4
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            (off,) = struct.unpack_from("<Q", data, pos)
            pos += 8
            entries.append((off, name, tuple(shape)))
        entries.sort()
        store = cls([(name, shape) for _, name, shape in entries])
        for off, name, _ in entries:
            if store.layout[name][0] != off:
                raise ValueError("layout table does not tile the vector")
        (total,) = struct.unpack_from("<Q", data, pos)
        pos += 8
        if total != len(store):
            raise ValueError("value count does not match layout")
        store.values[...] = np.frombuffer(data, dtype="<f8", count=total, offset=pos)
        return store

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


# ---------------------------------------------------------------------------
# Tape ops. Each op implements forward / backward / jvp over batched arrays.
# `None` stands for a zero tangent or a non-differentiable (constant) input.
# ---------------------------------------------------------------------------

_ACTIVATIONS = ("linear", "relu")


class Op:
    name = "op"

    def forward(self, params, *xs):
        """Return (output, cache)."""
        raise NotImplementedError

    def backward(self, params, cache, g, grads):
        """Return input cotangents; accumulate parameter grads into `grads`."""
        raise NotImplementedError

    def jvp(self, params, cache, *ts):
        raise NotImplementedError


class Dense(Op):
    """act(x @ W + b) for the parameters named `<layer>.W` / `<layer>.b`."""

    def __init__(self, layer: str, activation: str = "relu"):
        if activation not in _ACTIVATIONS:
            raise ValueError(activation)
        self.layer = layer
        self.activation = activation
        self.name = f"dense[{layer}]"

    def forward(self, params, x):
        z = x @ params[self.layer + ".W"] + params[self.layer + ".b"]
        if self.activation == "relu":
            mask = z > 0
            return np.where(mask, z, 0.0), (x, mask)
        return z, (x, None)

    def backward(self, params, cache, g, grads):
        x, mask = cache
        if mask is not None:
            g = np.where(mask, g, 0.0)
        if grads is not None:
            grads.grad(self.layer + ".W")[...] += x.T @ g
            grads.grad(self.layer + ".b")[...] += g.sum(axis=0)
        return (g @ params[self.layer + ".W"].T,)

    def jvp(self, params, cache, t):
        _, mask = cache
        if t is None:
            return None
        out = t @ params[self.layer + ".W"]
        if mask is not None:
            out = np.where(mask, out, 0.0)
        return out


class Concat(Op):
    name = "concat"

    def forward(self, params, *xs):
        widths = [x.shape[-1] for x in xs]
        return np.concatenate(xs, axis=-1), (widths, xs[0].shape)

    def backward(self, params, cache, g, grads):
        widths, _ = cache
        splits = np.cumsum(widths)[:-1]
        return tuple(np.split(g, splits, axis=-1))

    def jvp(self, params, cache, *ts):
        widths, shape0 = cache
        if all(t is None for t in ts):
            return None
        ndir = next(t.shape[0] for t in ts if t is not None)
        parts = [
            t if t is not None else np.zeros((ndir,) + shape0[:-1] + (w,))
            for t, w in zip(ts, widths)
        ]
        return np.concatenate(parts, axis=-1)


class PosEnc(Op):
    """(x, sin(2^0 x), cos(2^0 x), ..., sin(2^{L-1} x), cos(2^{L-1} x))."""

    def __init__(self, degree: int):
        self.degree = degree
        self.name = f"posenc[{degree}]"

    def forward(self, params, x):
        scales = 2.0 ** np.arange(self.degree)
        xb = x[..., None, :] * scales[:, None]  # (N, L, 3)
        s, c = np.sin(xb), np.cos(xb)
        feats = [x] + [a for l in range(self.degree) for a in (s[..., l, :], c[..., l, :])]
        return np.concatenate(feats, axis=-1), (s, c, scales)

    def _dfeat(self, cache, t):
        s, c, scales = cache
        tb = t[..., None, :] * scales[:, None]
        parts = [t] + [a for l in range(self.degree) for a in (c[..., l, :] * tb[..., l, :], -s[..., l, :] * tb[..., l, :])]
        return np.concatenate(parts, axis=-1)

    def backward(self, params, cache, g, grads):
        s, c, scales = cache
        gx = g[..., :3].copy()
        for l in range(self.degree):
            gs = g[..., 3 + 6 * l: 6 + 6 * l]
            gc = g[..., 6 + 6 * l: 9 + 6 * l]
            gx += scales[l] * (gs * c[..., l, :] - gc * s[..., l, :])
        return (gx,)

    def jvp(self, params, cache, t):
        return None if t is None else self._dfeat(cache, t)


class IntegratedPosEnc(Op):
    """Expected sin/cos of 2^l x under a Gaussian with diagonal variance.

    Inputs: mean (N,3) and variance (N,3); the variance is treated as constant.
    Output layout: [sin(2^0 μ)·d0, cos(2^0 μ)·d0, ..., ] with 3 entries each.
    """

    def __init__(self, degree: int):
        self.degree = degree
        self.name = f"ipe[{degree}]"

    def forward(self, params, mu, var):
        scales = 2.0 ** np.arange(self.degree)
        mb = mu[..., None, :] * scales[:, None]
        damp = np.exp(-0.5 * var[..., None, :] * (scales**2)[:, None])
        s, c = np.sin(mb) * damp, np.cos(mb) * damp
        feats = [a for l in range(self.degree) for a in (s[..., l, :], c[..., l, :])]
        if not feats:
            return np.zeros(mu.shape[:-1] + (0,)), (s, c, scales)
        return np.concatenate(feats, axis=-1), (s, c, scales)

    def backward(self, params, cache, g, grads):
        s, c, scales = cache
        gmu = np.zeros(g.shape[:-1] + (3,))
        for l in range(self.degree):
            gs = g[..., 6 * l: 6 * l + 3]
            gc = g[..., 6 * l + 3: 6 * l + 6]
            gmu += scales[l] * (gs * c[..., l, :] - gc * s[..., l, :])
        return gmu, None

    def jvp(self, params, cache, tmu, tvar=None):
        if tmu is None:
            return None
        s, c, scales = cache
        tb = tmu[..., None, :] * scales[:, None]
        parts = [a for l in range(self.degree) for a in (c[..., l, :] * tb[..., l, :], -s[..., l, :] * tb[..., l, :])]
        return np.concatenate(parts, axis=-1)


class Softmax(Op):
    name = "softmax"

    def forward(self, params, x):
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        s = e / e.sum(axis=-1, keepdims=True)
        return s, s

    def backward(self, params, s, g, grads):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    def jvp(self, params, s, t):
        if t is None:
            return None
        return s * (t - (t * s).sum(axis=-1, keepdims=True))


class Softplus(Op):
    """log(1 + exp(x + shift))."""

    def __init__(self, shift: float = 0.0):
        self.shift = shift
        self.name = f"softplus[{shift}]"

    def forward(self, params, x):
        z = x + self.shift
        return np.logaddexp(0.0, z), z

    def backward(self, params, z, g, grads):
        return (g * _sigmoid(z),)

    def jvp(self, params, z, t):
        return None if t is None else t * _sigmoid(z)


class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, params, x):
        s = _sigmoid(x)
        return s, s

    def backward(self, params, s, g, grads):
        return (g * s * (1 - s),)

    def jvp(self, params, s, t):
        return None if t is None else t * s * (1 - s)


class ClippedDoubleSigmoid(Op):
    """min(1, 2·sigmoid(x)): range (0, 1], equal to 1 at x >= 0.

    At x = 0 the derivative of the sigmoid branch is used so a zero-initialised
    pre-activation still receives gradient.
    """

    name = "clipped2sigmoid"

    def forward(self, params, x):
        # exp form keeps 2σ(x) > 0 far into the negative range
        e = np.exp(np.minimum(x, 0.0))
        s = e / (1.0 + e)
        active = x <= 0
        return np.where(active, 2 * s, 1.0), (s, active)

    def backward(self, params, cache, g, grads):
        s, active = cache
        return (np.where(active, g * 2 * s * (1 - s), 0.0),)

    def jvp(self, params, cache, t):
        if t is None:
            return None
        s, active = cache
        return np.where(active, t * 2 * s * (1 - s), 0.0)


class Mul(Op):
    """Elementwise product of two slots."""

    name = "mul"

    def forward(self, params, a, b):
        return a * b, (a, b)

    def backward(self, params, cache, g, grads):
        a, b = cache
        return g * b, g * a

    def jvp(self, params, cache, ta, tb):
        a, b = cache
        out = 0.0
        if ta is not None:
            out = out + ta * b
        if tb is not None:
            out = out + a * tb
        return out


class Add(Op):
    name = "add"

    def forward(self, params, a, b):
        return a + b, None

    def backward(self, params, cache, g, grads):
        return g, g

    def jvp(self, params, cache, ta, tb):
        if ta is None:
            return tb
        if tb is None:
            return ta
        return ta + tb


class Sum(Op):
    """Sum over every axis, yielding a 1-element array."""

    name = "sum"

    def forward(self, params, x):
        return np.array([x.sum()]), x.shape

    def backward(self, params, shape, g, grads):
        return (np.full(shape, g[0]),)

    def jvp(self, params, shape, t):
        return None if t is None else t.reshape(t.shape[0], -1).sum(axis=1)[:, None]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------


@dataclass
class Node:
    op: Op
    inputs: tuple[int, ...]
    output: int
    cache: object = None


class Tape:
    """Records ops on slot ids; supports reverse-mode, forward-mode and replay."""

    def __init__(self, params: ParamStore):
        self.params = params
        self.values: list[np.ndarray] = []
        self.leaves: list[int] = []
        self.nodes: list[Node] = []

    def input(self, value) -> int:
        self.values.append(np.asarray(value, dtype=np.float64))
        self.leaves.append(len(self.values) - 1)
        return len(self.values) - 1

    def apply(self, op: Op, *slots: int) -> int:
        out, cache = op.forward(self.params, *(self.values[s] for s in slots))
        self.values.append(out)
        self.nodes.append(Node(op, tuple(slots), len(self.values) - 1, cache))
        return len(self.values) - 1

    def __getitem__(self, slot: int) -> np.ndarray:
        return self.values[slot]

    def backward(self, seeds: dict[int, np.ndarray], grads: ParamStore | None = None) -> dict[int, np.ndarray]:
        """Reverse sweep. Parameter gradients accumulate into `grads`
        (defaults to the tape's ParamStore). Returns cotangents of every slot
        that received one, including leaves."""
        if grads is None:
            grads = self.params
        adj: dict[int, np.ndarray] = {}
        for slot, g in seeds.items():
            adj[slot] = np.broadcast_to(np.asarray(g, dtype=np.float64), self.values[slot].shape).copy()
        for node in reversed(self.nodes):
            g = adj.get(node.output)
            if g is None:
                continue
            gins = node.op.backward(self.params, node.cache, g, grads)
            for slot, gi in zip(node.inputs, gins):
                if gi is None:
                    continue
                if slot in adj:
                    adj[slot] = adj[slot] + gi
                else:
                    adj[slot] = gi
        return adj

    def jvp(self, tangents: dict[int, np.ndarray]) -> dict[int, np.ndarray | None]:
        """Forward sweep of tangents (leading axis = direction)."""
        tan: dict[int, np.ndarray | None] = dict(tangents)
        for node in self.nodes:
            ts = [tan.get(s) for s in node.inputs]
            tan[node.output] = None if all(t is None for t in ts) else node.op.jvp(self.params, node.cache, *ts)
        return tan

    def replay(self) -> list[np.ndarray]:
        """Recompute every node from the recorded leaves."""
        vals = list(self.values)
        for node in self.nodes:
            vals[node.output], _ = node.op.forward(self.params, *(vals[s] for s in node.inputs))
        return vals


# ---------------------------------------------------------------------------
# Finite-difference oracle
# ---------------------------------------------------------------------------


def central_differences(f: Callable[[], float], values: np.ndarray, h: float, indices=None) -> np.ndarray:
    """Central differences of f() w.r.t. entries of `values` (mutated in place
    and restored)."""
    indices = range(len(values)) if indices is None else indices
    out = np.zeros(len(values))
    for i in indices:
        orig = values[i]
        values[i] = orig + h
        xp = values[i]
        fp = f()
        values[i] = orig - h
        xm = values[i]
        fm = f()
        values[i] = orig
        # divide by the step actually taken after rounding
        out[i] = (fp - fm) / (xp - xm)
    return out


def finite_diff_check(
    f: Callable[[ParamStore], float],
    grad_fn: Callable[[ParamStore], np.ndarray],
    params: ParamStore,
    h: float = 1e-5,
    indices=None,
) -> float:
    """max_i |g_ad - g_fd| / max(1, |g_fd|) over the probed parameters.

    `grad_fn(params)` returns the analytic gradient vector (same length as
    params.values); `f(params)` returns the scalar.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    idx = np.arange(len(params)) if indices is None else np.asarray(indices)
    g_ad = np.asarray(grad_fn(params), dtype=np.float64)
    g_fd = central_differences(lambda: f(params), params.values, h, idx)
    err = np.abs(g_ad[idx] - g_fd[idx]) / np.maximum(1.0, np.abs(g_fd[idx]))
    return float(err.max()) if len(idx) else 0.0


def tape_grad(build: Callable[[Tape], int], params: ParamStore) -> tuple[float, np.ndarray]:
    """Run `build` on a fresh tape (must return a scalar-valued slot) and
    return (value, gradient vector)."""
    tape = Tape(params)
    saved = params.grads.copy()
    params.zero_grad()
    out = build(tape)
    value = float(np.sum(tape[out]))
    tape.backward({out: np.ones_like(tape[out])})
    g = params.grads.copy()
    params.grads[...] = saved
    return value, g
