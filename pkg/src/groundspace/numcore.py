"""Dense numeric kernels: cosine with gradients, the 2-layer tanh MLP
projector with manual backpropagation, and bias-corrected Adam.

All training math runs in float64 so analytic gradients can be validated
against central finite differences at tight tolerance.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import _binio
from .errors import MalformedHeader, NonFiniteValue, ShapeMismatch, ZeroNorm

ZERO_NORM_EPS = 1e-12

GPRJ_MAGIC = b"GPRJ"
GPRJ_VERSION = 1


def cosine(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine similarity, clamped to [-1, 1] against rounding excursions."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx < ZERO_NORM_EPS or ny < ZERO_NORM_EPS:
        raise ZeroNorm(f"cosine of a (near-)zero vector (norms {nx:.3e}, {ny:.3e})")
    c = float(np.dot(x, y) / (nx * ny))
    return min(1.0, max(-1.0, c))


def cosine_backward(x: np.ndarray, y: np.ndarray, upstream: float):
    """Gradient of ``upstream * cos(x, y)`` with respect to x and y.

    d cos/dx = y/(|x||y|) - cos * x/|x|^2, symmetrically for y.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    nx = np.linalg.norm(x)
    ny = np.linalg.norm(y)
    if nx < ZERO_NORM_EPS or ny < ZERO_NORM_EPS:
        raise ZeroNorm(f"cosine gradient of a (near-)zero vector (norms {nx:.3e}, {ny:.3e})")
    c = np.dot(x, y) / (nx * ny)
    grad_x = upstream * (y / (nx * ny) - c * x / (nx * nx))
    grad_y = upstream * (x / (nx * ny) - c * y / (ny * ny))
    return grad_x, grad_y


@dataclass
class GroundedProjector:
    """2-layer tanh MLP: out = tanh(x @ w1 + b1) @ w2 + b2."""

    w1: np.ndarray  # (d_in, d_h)
    b1: np.ndarray  # (d_h,)
    w2: np.ndarray  # (d_h, d_out)
    b2: np.ndarray  # (d_out,)

    def __post_init__(self):
        self.w1 = np.asarray(self.w1, dtype=np.float64)
        self.b1 = np.asarray(self.b1, dtype=np.float64)
        self.w2 = np.asarray(self.w2, dtype=np.float64)
        self.b2 = np.asarray(self.b2, dtype=np.float64)
        d_in, d_h = self.w1.shape
        if self.b1.shape != (d_h,) or self.w2.shape[0] != d_h or self.b2.shape != (self.w2.shape[1],):
            raise ShapeMismatch(
                f"inconsistent projector shapes: w1 {self.w1.shape}, b1 {self.b1.shape}, "
                f"w2 {self.w2.shape}, b2 {self.b2.shape}"
            )
        for name, t in self.tensors().items():
            if not np.all(np.isfinite(t)):
                raise NonFiniteValue(f"projector tensor {name} contains non-finite values")

    @property
    def d_in(self) -> int:
        return self.w1.shape[0]

    @property
    def d_h(self) -> int:
        return self.w1.shape[1]

    @property
    def d_out(self) -> int:
        return self.w2.shape[1]

    def tensors(self) -> dict:
        """Parameter tensors in declared (checkpoint) order."""
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def copy(self) -> "GroundedProjector":
        return GroundedProjector(self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy())


def init_projector(d_in: int, d_h: int, d_out: int, rng: np.random.Generator) -> GroundedProjector:
    """Seeded init: weights uniform in +-sqrt(6/(fan_in+fan_out)), zero biases."""
    lim1 = np.sqrt(6.0 / (d_in + d_h))
    lim2 = np.sqrt(6.0 / (d_h + d_out))
    return GroundedProjector(
        w1=rng.uniform(-lim1, lim1, size=(d_in, d_h)),
        b1=np.zeros(d_h),
        w2=rng.uniform(-lim2, lim2, size=(d_h, d_out)),
        b2=np.zeros(d_out),
    )


@dataclass
class MlpCache:
    proj: GroundedProjector
    x: np.ndarray  # (b, d_in)
    h: np.ndarray  # (b, d_h) post-tanh activations


def mlp_forward(proj: GroundedProjector, x: np.ndarray):
    """Forward pass; returns (out, cache). Accepts a vector or a batch."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.shape[1] != proj.d_in:
        raise ShapeMismatch(f"input width {xb.shape[1]} != projector d_in {proj.d_in}")
    h = np.tanh(xb @ proj.w1 + proj.b1)
    out = h @ proj.w2 + proj.b2
    cache = MlpCache(proj, xb, h)
    return (out[0] if single else out), cache


@dataclass
class MlpGrads:
    """Gradients matching GroundedProjector tensor shapes."""

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def zeros_like(cls, proj: GroundedProjector) -> "MlpGrads":
        return cls(
            np.zeros_like(proj.w1),
            np.zeros_like(proj.b1),
            np.zeros_like(proj.w2),
            np.zeros_like(proj.b2),
        )

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}

    def add_scaled(self, other: "MlpGrads", weight: float) -> None:
        self.w1 += weight * other.w1
        self.b1 += weight * other.b1
        self.w2 += weight * other.w2
        self.b2 += weight * other.b2


def mlp_backward(cache: MlpCache, upstream: np.ndarray):
    """Exact gradients of the forward map for the cached batch.

    Returns (MlpGrads, grad_input) where grad_input matches the cached
    input's shape.
    """
    proj, x, h = cache.proj, cache.x, cache.h
    u = np.asarray(upstream, dtype=np.float64)
    single = u.ndim == 1
    ub = u[None, :] if single else u
    if ub.shape != (x.shape[0], proj.d_out):
        raise ShapeMismatch(f"upstream shape {ub.shape} != ({x.shape[0]}, {proj.d_out})")
    grad_w2 = h.T @ ub
    grad_b2 = ub.sum(axis=0)
    dh = ub @ proj.w2.T
    da = dh * (1.0 - h * h)
    grad_w1 = x.T @ da
    grad_b1 = da.sum(axis=0)
    grad_x = da @ proj.w1.T
    grads = MlpGrads(grad_w1, grad_b1, grad_w2, grad_b2)
    return grads, (grad_x[0] if single else grad_x)


def apply_projector(proj, space: np.ndarray) -> np.ndarray:
    """Map a whole matrix through the projector; identity when proj is None."""
    space = np.asarray(space, dtype=np.float64)
    if proj is None:
        return space
    out, _ = mlp_forward(proj, space)
    return out


@dataclass
class AdamState:
    """Bias-corrected Adam over a dict of named parameter tensors."""

    lr: float
    m: dict
    v: dict
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, params: dict, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        m = {k: np.zeros_like(p) for k, p in params.items()}
        v = {k: np.zeros_like(p) for k, p in params.items()}
        return cls(lr=lr, m=m, v=v, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(state: AdamState, params: dict, grads: dict) -> None:
    """One in-place Adam update. Deterministic: same inputs, same outputs.

    Missing keys in ``grads`` are treated as zero gradient (their moments
    still decay, as in dense Adam).
    """
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for key, p in params.items():
        g = grads.get(key)
        m, v = state.m[key], state.v[key]
        if g is None:
            m *= state.beta1
            v *= state.beta2
        else:
            if g.shape != p.shape:
                raise ShapeMismatch(f"gradient shape {g.shape} != parameter {key} shape {p.shape}")
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def save_projector(proj: GroundedProjector, path) -> None:
    """Write a GPRJ checkpoint: header dims, f64 tensors in declared order, CRC32."""
    header = GPRJ_MAGIC + struct.pack("<BIII", GPRJ_VERSION, proj.d_in, proj.d_h, proj.d_out)
    payload = _binio.pack_tensors(list(proj.tensors().values()), _binio.F64_LE)
    _binio.write_file(path, _binio.finish(header, payload))


def load_projector(path) -> GroundedProjector:
    blob = _binio.read_file(path)
    _binio.check_magic(blob, GPRJ_MAGIC, path)
    version, d_in, d_h, d_out = _binio.unpack_header(blob, "<BIII", 4, path)
    if version != GPRJ_VERSION:
        raise MalformedHeader(f"{path}: unsupported version {version} at byte offset 4")
    if min(d_in, d_h, d_out) < 1:
        raise MalformedHeader(f"{path}: projector dims must be positive, got {(d_in, d_h, d_out)}")
    count = d_in * d_h + d_h + d_h * d_out + d_out
    payload = _binio.check_payload(blob, 17, count * 8, path)
    w1, b1, w2, b2 = _binio.unpack_tensors(
        payload, [(d_in, d_h), (d_h,), (d_h, d_out), (d_out,)], _binio.F64_LE, path
    )
    return GroundedProjector(w1, b1, w2, b2)
