"""Canonical-cloud optimizer: adaptive gradient step plus gated Langevin noise.

Positions additionally receive two noise terms per step, one gated by the
Gaussian's opacity and one by its texture intensity. The gate is a steep
reversed sigmoid, so saturated (opaque, texture-rich) Gaussians are left
almost still while the rest keep exploring.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .deformation import DeformationParams
from .raster import CloudGrads
from .scene import RAW_FIELDS, GaussianCloud, quaternion_to_matrix, sigmoid

NOISE_MODES = ("covariance", "isotropic")


@dataclass
class NoiseConfig:
    k: float = 100.0
    t: float = 0.995
    c_noise: float = 0.0
    independent_draws: bool = True
    mode: str = "covariance"
    use_opacity_term: bool = True
    use_texture_term: bool = True

    def __post_init__(self):
        if not self.k > 0:
            raise ValueError("gate sharpness k must be positive")
        if not 0 < self.t < 1:
            raise ValueError("gate threshold t must lie in (0, 1)")
        if self.c_noise < 0:
            raise ValueError("c_noise must be non-negative")
        if self.mode not in NOISE_MODES:
            raise ValueError(f"noise mode must be one of {NOISE_MODES}")


@dataclass
class LearningRates:
    position_init: float = 1.6e-4
    position_final: float = 1.6e-6
    position_steps: int = 5000
    raw_scale: float = 5e-3
    rotation: float = 1e-3
    raw_opacity: float = 0.05
    color: float = 2.5e-3
    raw_ti: float = 0.05
    deformation_init: float = 8e-4
    deformation_final: float = 1.6e-6
    deformation_steps: int = 5000

    def __post_init__(self):
        for name, value in vars(self).items():
            if not name.endswith("_steps") and not value > 0:
                raise ValueError(f"learning rate {name} must be positive")


def exponential_decay(step: int, init: float, final: float, steps: int) -> float:
    """Log-linear interpolation from ``init`` to ``final`` over ``steps``, then flat."""
    if steps <= 0:
        return final
    frac = min(max(step / steps, 0.0), 1.0)
    return math.exp((1 - frac) * math.log(init) + frac * math.log(final))


@dataclass
class TrainState:
    lr: LearningRates = field(default_factory=LearningRates)
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    seed: int = 0
    iteration: int = 0
    moments: dict = field(default_factory=dict)
    rng: np.random.Generator = None

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError("optimizer must be 'adam' or 'sgd'")
        if self.rng is None:
            self.rng = np.random.default_rng(self.seed)

    def position_lr(self) -> float:
        return exponential_decay(self.iteration, self.lr.position_init, self.lr.position_final,
                                 self.lr.position_steps)

    def deformation_lr(self) -> float:
        return exponential_decay(self.iteration, self.lr.deformation_init, self.lr.deformation_final,
                                 self.lr.deformation_steps)

    def group_lr(self, name: str) -> float:
        if name == "position":
            return self.position_lr()
        if name.startswith("deformation"):
            return self.deformation_lr()
        return getattr(self.lr, name)

    def compact(self, keep: np.ndarray) -> None:
        """Drop optimizer moments of pruned Gaussians."""
        for name in RAW_FIELDS:
            if name in self.moments:
                m, v = self.moments[name]
                self.moments[name] = (m[keep], v[keep])


def noise_gate(v, k: float = 100.0, t: float = 0.995):
    """sigma(-k (v - t)): ~1 for small v, ~0 once v exceeds t."""
    return sigmoid(-k * (np.asarray(v, dtype=np.float64) - t))


def _step_array(name: str, param: np.ndarray, grad: np.ndarray, state: TrainState) -> None:
    lr = state.group_lr(name)
    if state.optimizer == "sgd":
        param -= np.asarray(lr * grad, dtype=param.dtype)
        return
    m, v = state.moments.get(name, (None, None))
    if m is None:
        m = np.zeros_like(param)
        v = np.zeros_like(param)
    m = state.beta1 * m + (1 - state.beta1) * grad
    v = state.beta2 * v + (1 - state.beta2) * grad * grad
    m = m.astype(param.dtype)
    v = v.astype(param.dtype)
    state.moments[name] = (m, v)
    step = state.iteration + 1
    bc1 = 1 - state.beta1 ** step
    bc2 = 1 - state.beta2 ** step
    update = (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    param -= update.astype(param.dtype)


def _check_update(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite update in parameter group {name!r}")


def optimizer_step(cloud: GaussianCloud, grads: CloudGrads | None,
                   deformation_params: DeformationParams | None, deformation_grads,
                   state: TrainState) -> None:
    """Plain adaptive (or SGD) step for every parameter group; in place."""
    if grads is not None:
        for name in RAW_FIELDS:
            g = getattr(grads, name)
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
            param = getattr(cloud, name)
            _step_array(name, param, g, state)
            _check_update(name, param)
        np.clip(cloud.color, 0.0, 1.0, out=cloud.color)
    if deformation_params is not None and deformation_grads is not None:
        for i, (param, g) in enumerate(zip(deformation_params.arrays(), deformation_grads)):
            name = f"deformation.{i}"
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in parameter group {name!r}")
            _step_array(name, param, g, state)
            _check_update(name, param)


def position_noise(cloud: GaussianCloud, state: TrainState, noise_cfg: NoiseConfig) -> np.ndarray:
    """Gated Langevin displacement for every Gaussian position (draws from ``state.rng``)."""
    n = cloud.count
    dtype = cloud.dtype
    alpha_noise = noise_cfg.c_noise * state.position_lr()
    o = sigmoid(cloud.raw_opacity.astype(np.float64))
    ti = sigmoid(cloud.raw_ti.astype(np.float64))
    gate_o = noise_gate(o, noise_cfg.k, noise_cfg.t) if noise_cfg.use_opacity_term else np.zeros(n)
    gate_t = noise_gate(ti, noise_cfg.k, noise_cfg.t) if noise_cfg.use_texture_term else np.zeros(n)
    eta_o = state.rng.standard_normal((n, 3))
    eta_t = state.rng.standard_normal((n, 3)) if noise_cfg.independent_draws else eta_o
    mix = gate_o[:, None] * eta_o + gate_t[:, None] * eta_t
    if noise_cfg.mode == "covariance":
        q = cloud.rotation.astype(np.float64)
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        # L = R diag(s) so that L eta ~ N(0, Sigma)
        L = quaternion_to_matrix(q) * np.exp(cloud.raw_scale.astype(np.float64))[:, None, :]
        mix = np.einsum("nij,nj->ni", L, mix)
    return (alpha_noise * mix).astype(dtype)


def taco_step(cloud: GaussianCloud, grads: CloudGrads | None, deformation_params, deformation_grads,
              state: TrainState, noise_cfg: NoiseConfig):
    """One optimizer step followed by gated position noise; returns (cloud, params, state)."""
    noise = None
    if noise_cfg.c_noise > 0 and cloud.count:
        # gates and covariance are read from the pre-step parameters
        noise = position_noise(cloud, state, noise_cfg)
    optimizer_step(cloud, grads, deformation_params, deformation_grads, state)
    if noise is not None:
        cloud.position += noise
        _check_update("position", cloud.position)
    state.iteration += 1
    return cloud, deformation_params, state


def baseline_step(cloud, grads, deformation_params, deformation_grads, state: TrainState):
    """The plain optimizer without any noise; the reference trajectory for TACO."""
    optimizer_step(cloud, grads, deformation_params, deformation_grads, state)
    state.iteration += 1
    return cloud, deformation_params, state


def prune(cloud: GaussianCloud, opacity_threshold: float = 0.005):
    """Remove Gaussians whose activated opacity is below the threshold.

    Returns the compacted cloud and the boolean keep mask.
    """
    if not 0 < opacity_threshold < 1:
        raise ValueError("opacity threshold must lie in (0, 1)")
    keep = sigmoid(cloud.raw_opacity.astype(np.float64)) >= opacity_threshold
    return cloud.subset(keep), keep
