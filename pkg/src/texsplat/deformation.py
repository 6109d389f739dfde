"""Time-conditioned deformation field: encoding, MLP, and application to a cloud.

The network reads the canonical position through a stop-gradient, so its
backward pass only ever produces gradients for its own weights.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from .scene import Activated, GaussianCloud, activate, normalize_quaternions, sigmoid

MIN_SCALE = 1e-6
OUT_DX, OUT_DR, OUT_DS = slice(0, 3), slice(3, 7), slice(7, 10)


def positional_encoding(v, L: int) -> np.ndarray:
    """Per frequency k and component i: (sin(2^k pi v_i), cos(2^k pi v_i)).

    The raw input is not included. Output has ``2 * L * d`` trailing entries.
    """
    if L < 1:
        raise ValueError("frequency count L must be >= 1")
    v = np.asarray(v)
    if v.dtype.kind != "f":
        v = v.astype(np.float64)
    scalar = v.ndim == 0
    v = np.atleast_1d(v)
    freqs = (2.0 ** np.arange(L) * math.pi).astype(v.dtype)
    arg = v[..., None, :] * freqs[:, None]                  # (..., L, d)
    out = np.stack([np.sin(arg), np.cos(arg)], axis=-1)     # (..., L, d, 2)
    out = out.reshape(v.shape[:-1] + (2 * L * v.shape[-1],))
    return out if not scalar else out.reshape(2 * L)


def positional_encoding_vjp(v, L: int, grad_out: np.ndarray) -> np.ndarray:
    v = np.atleast_1d(np.asarray(v, dtype=np.asarray(grad_out).dtype))
    freqs = (2.0 ** np.arange(L) * math.pi).astype(v.dtype)
    arg = v[..., None, :] * freqs[:, None]
    g = np.asarray(grad_out).reshape(v.shape[:-1] + (L, v.shape[-1], 2))
    dv = (g[..., 0] * np.cos(arg) - g[..., 1] * np.sin(arg)) * freqs[:, None]
    return dv.sum(axis=-2)


def softplus(x):
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


@dataclass
class Delta:
    """Per-Gaussian offsets produced by the deformation field."""

    dx: np.ndarray
    dr: np.ndarray
    ds: np.ndarray

    @classmethod
    def zeros(cls, count: int, dtype=np.float32) -> "Delta":
        return cls(np.zeros((count, 3), dtype), np.zeros((count, 4), dtype), np.zeros((count, 3), dtype))

    @property
    def count(self) -> int:
        return len(self.dx)


@dataclass
class DeformationParams:
    """MLP weights. ``layers`` holds (W, b) for the hidden stack, ``head`` the joint
    10-wide output layer whose column blocks are the dx/dr/ds heads."""

    layers: list
    head: tuple
    L_pos: int = 10
    L_time: int = 6

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return self.layers[0][0].shape[1]

    @property
    def dtype(self):
        return self.head[0].dtype

    @staticmethod
    def input_dim(L_pos: int, L_time: int) -> int:
        return 2 * L_pos * 3 + 2 * L_time

    @classmethod
    def init(cls, seed: int, depth: int = 4, width: int = 64, L_pos: int = 10, L_time: int = 6,
             dtype=np.float32) -> "DeformationParams":
        rng = np.random.default_rng(seed)
        layers = []
        fan_in = cls.input_dim(L_pos, L_time)
        for _ in range(depth):
            bound = 1.0 / math.sqrt(fan_in)
            W = rng.uniform(-bound, bound, size=(fan_in, width)).astype(dtype)
            b = rng.uniform(-bound, bound, size=width).astype(dtype)
            layers.append((W, b))
            fan_in = width
        head = (np.zeros((width, 10), dtype), np.zeros(10, dtype))
        return cls(layers, head, L_pos, L_time)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for W, b in self.layers:
            out += [W, b]
        return out + [self.head[0], self.head[1]]

    @classmethod
    def from_arrays(cls, arrays, L_pos: int, L_time: int) -> "DeformationParams":
        arrays = list(arrays)
        layers = [(arrays[i], arrays[i + 1]) for i in range(0, len(arrays) - 2, 2)]
        return cls(layers, (arrays[-2], arrays[-1]), L_pos, L_time)

    def like(self, arrays) -> "DeformationParams":
        return DeformationParams.from_arrays(arrays, self.L_pos, self.L_time)

    def copy(self) -> "DeformationParams":
        return self.like([a.copy() for a in self.arrays()])

    def astype(self, dtype) -> "DeformationParams":
        return self.like([a.astype(dtype) for a in self.arrays()])

    def to_bytes(self) -> bytes:
        header = struct.pack("<4I", self.depth, self.width, self.L_pos, self.L_time)
        return header + b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in self.arrays())

    @classmethod
    def from_bytes(cls, data: bytes) -> "DeformationParams":
        from .scene import MalformedHeaderError, TruncatedCheckpointError

        if len(data) < 16:
            raise TruncatedCheckpointError("truncated payload in deformation block header")
        depth, width, L_pos, L_time = struct.unpack("<4I", data[:16])
        if depth < 1 or width < 1 or L_pos < 1 or L_time < 1:
            raise MalformedHeaderError(f"malformed header: deformation block declares "
                                       f"depth={depth} width={width} L_pos={L_pos} L_time={L_time}")
        shapes = []
        fan_in = cls.input_dim(L_pos, L_time)
        for _ in range(depth):
            shapes += [(fan_in, width), (width,)]
            fan_in = width
        shapes += [(width, 10), (10,)]
        need = 4 * sum(math.prod(s) for s in shapes)
        if len(data) - 16 != need:
            raise TruncatedCheckpointError(f"truncated payload in deformation block: "
                                           f"expected {need} bytes, found {len(data) - 16}")
        arrays, off = [], 16
        for s in shapes:
            n = 4 * math.prod(s)
            arrays.append(np.frombuffer(data[off:off + n], dtype="<f4").astype(np.float32).reshape(s))
            off += n
        return cls.from_arrays(arrays, L_pos, L_time)

    def equals(self, other: "DeformationParams") -> bool:
        if (self.L_pos, self.L_time, self.depth) != (other.L_pos, other.L_time, other.depth):
            return False
        return all(a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
                   for a, b in zip(self.arrays(), other.arrays()))


@dataclass
class DeformCache:
    activations: list   # inputs to each linear layer, first is the encoding
    pre: list           # pre-activations of hidden layers


def _check_finite(params: DeformationParams) -> None:
    for i, a in enumerate(params.arrays()):
        if not np.all(np.isfinite(a)):
            raise FloatingPointError(f"non-finite deformation parameter in array {i}")


def encode_inputs(params: DeformationParams, positions: np.ndarray, t: float) -> np.ndarray:
    dtype = params.dtype
    # positions enter as constants: no gradient flows back through this path
    enc_x = positional_encoding(np.asarray(positions, dtype=dtype), params.L_pos)
    enc_t = positional_encoding(np.asarray([t], dtype=dtype), params.L_time)
    return np.concatenate([enc_x, np.broadcast_to(enc_t, (len(enc_x), enc_t.shape[-1]))], axis=1)


def deform_with_cache(params: DeformationParams, positions: np.ndarray, t: float):
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"timestamp t={t} outside [0, 1]")
    _check_finite(params)
    h = encode_inputs(params, positions, t)
    acts, pre = [h], []
    for W, b in params.layers:
        z = h @ W + b
        h = softplus(z)
        pre.append(z)
        acts.append(h)
    out = h @ params.head[0] + params.head[1]
    delta = Delta(out[:, OUT_DX].copy(), out[:, OUT_DR].copy(), out[:, OUT_DS].copy())
    return delta, DeformCache(acts, pre)


def deform(params: DeformationParams, positions: np.ndarray, t: float) -> Delta:
    return deform_with_cache(params, positions, t)[0]


def deform_backward(params: DeformationParams, cache: DeformCache, d_dx, d_dr, d_ds) -> list[np.ndarray]:
    """Gradients for every array of ``params`` (same order as ``params.arrays()``)."""
    g = np.concatenate([d_dx, d_dr, d_ds], axis=1).astype(params.dtype)
    grads = []
    grads.append(g.sum(axis=0))
    grads.append(cache.activations[-1].T @ g)
    g = g @ params.head[0].T
    for i in range(params.depth - 1, -1, -1):
        W, _ = params.layers[i]
        g = g * sigmoid(cache.pre[i])
        grads.append(g.sum(axis=0))
        grads.append(cache.activations[i].T @ g)
        if i:
            g = g @ W.T
    grads.reverse()
    return grads


@dataclass
class Deformed:
    """Attributes actually handed to the rasterizer."""

    position: np.ndarray
    scale: np.ndarray
    rotation: np.ndarray        # unnormalized
    opacity: np.ndarray
    color: np.ndarray
    ti: np.ndarray
    scale_active: np.ndarray    # False where the positivity clamp fired

    def activated(self) -> Activated:
        return Activated(self.position, self.scale, normalize_quaternions(self.rotation),
                         self.opacity, self.color, self.ti)


def apply(cloud: GaussianCloud, delta: Delta | None) -> Deformed:
    base = activate(cloud)
    if delta is None:
        return Deformed(cloud.position.copy(), base.scale, cloud.rotation.copy(), base.opacity,
                        base.color, base.ti, np.ones_like(base.scale, dtype=bool))
    if delta.count != cloud.count:
        raise ValueError(f"deformation has {delta.count} entries, cloud has {cloud.count}")
    scale = base.scale + delta.ds
    active = scale >= MIN_SCALE
    scale = np.where(active, scale, np.asarray(MIN_SCALE, dtype=scale.dtype))
    return Deformed(cloud.position + delta.dx, scale, cloud.rotation + delta.dr, base.opacity,
                    base.color, base.ti, active)
