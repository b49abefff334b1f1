"""Noisy gradient oracles with a scale parameter, plus the SVAG wrapper.

An oracle is the tuple (landscape, noise model, sigma).  Querying it at x
returns

    g = grad L(x) + sigma * v,      v ~ N(0, Sigma(x)),

where the covariance Sigma(x) comes from the noise model and is independent
of sigma.  All draws are addressed by counter-based keys (see ``rng``), so a
sample is a deterministic function of (seed, trajectory, step, draw): two
optimizers stepped with the same keys see the same noise, which is what makes
exact coupling and common-random-number comparisons possible.

SVAG amplifies the noise of a base oracle by a factor ell >= 1: it draws two
independent samples g1, g2 at the same point and returns

    ghat = r1 g1 + r2 g2,   r1 + r2 = 1,   r1^2 + r2^2 = ell,

so the mean is preserved while the covariance becomes ell sigma^2 Sigma(x).
The second draw g2 reuses the base oracle's draw index, so SVAG with ell = 1
(where r1 = 0) is bit-identical to the base oracle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from . import rng
from .landscape import LossLandscape
from .rng import RngKey

__all__ = [
    "IsotropicGaussian",
    "FixedCovGaussian",
    "StateScaledGaussian",
    "NoiseModel",
    "OracleConfig",
    "GradientSample",
    "sample",
    "sample_block",
    "svag_coefficients",
    "svag_sample",
]

# Radius at which the state-scaled covariance stops growing, keeping the
# noise model inside the bounded-covariance class the analysis assumes.
STATE_SCALE_TRUNCATION = 1e3


@dataclass(frozen=True)
class IsotropicGaussian:
    """v ~ N(0, I): the identity scale matrix, any dimension."""

    kind: str = field(default="isotropic", init=False)

    def covariance(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return np.eye(x.shape[-1])

    def apply_half(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return z


@dataclass(frozen=True)
class FixedCovGaussian:
    """v = S z with a fixed matrix S, so Sigma = S S' everywhere."""

    sigma_half: np.ndarray
    kind: str = field(default="fixed_cov", init=False)

    def __post_init__(self):
        s = np.asarray(self.sigma_half, dtype=np.float64)
        if s.ndim != 2 or s.shape[0] != s.shape[1]:
            raise ValueError("sigma_half must be a square matrix")
        object.__setattr__(self, "sigma_half", s)

    def covariance(self, x: np.ndarray) -> np.ndarray:
        return self.sigma_half @ self.sigma_half.T

    def apply_half(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return z @ self.sigma_half.T


@dataclass(frozen=True)
class StateScaledGaussian:
    """Sigma(x) = base * (1 + radial_gain * min(|x|, 10^3)^2).

    The truncation keeps Sigma^(1/2) bounded, so the oracle stays in the
    well-behaved class; below the truncation radius the covariance grows
    quadratically with distance from the origin.
    """

    base: np.ndarray
    radial_gain: float
    kind: str = field(default="state_scaled", init=False)

    def __post_init__(self):
        base = np.asarray(self.base, dtype=np.float64)
        if base.ndim != 2 or base.shape[0] != base.shape[1]:
            raise ValueError("base must be a square matrix")
        if not np.allclose(base, base.T, atol=1e-12):
            raise ValueError("base covariance must be symmetric")
        if self.radial_gain < 0:
            raise ValueError("radial_gain must be nonnegative")
        # symmetric square root via eigendecomposition, computed once
        w, v = np.linalg.eigh(base)
        if w.min() < -1e-12:
            raise ValueError("base covariance must be PSD")
        half = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "_base_half", half)

    def _gain(self, x: np.ndarray) -> np.ndarray:
        r = np.minimum(np.linalg.norm(x, axis=-1), STATE_SCALE_TRUNCATION)
        return 1.0 + self.radial_gain * r * r

    def covariance(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        return self.base * self._gain(x)

    def apply_half(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        g = np.sqrt(self._gain(x))
        v = z @ self._base_half.T
        return v * g[..., None] if v.ndim > 1 else v * g


NoiseModel = Union[IsotropicGaussian, FixedCovGaussian, StateScaledGaussian]


@dataclass(frozen=True)
class OracleConfig:
    """A noisy gradient oracle: landscape + noise law + scale, optional SVAG."""

    landscape: LossLandscape
    noise: NoiseModel = IsotropicGaussian()
    sigma: float = 0.0
    svag_ell: Optional[float] = None

    def __post_init__(self):
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.svag_ell is not None and self.svag_ell < 1.0:
            raise ValueError("svag_ell must be >= 1")

    @property
    def dim(self) -> int:
        return self.landscape.dim


@dataclass(frozen=True)
class GradientSample:
    """A stochastic gradient and the key record that reproduces it."""

    g: np.ndarray
    raw_noise_seed: tuple[int, int, int]  # (seed, step, draw index)


def svag_coefficients(ell: float) -> tuple[float, float]:
    """Mixing weights (r1, r2) with r1 + r2 = 1 and r1^2 + r2^2 = ell.

    r2 is rounded first and r1 computed as 1 - r2 (exact for r2 in [1, 2)),
    so the sum identity holds exactly in floating point.
    """
    if ell < 1.0:
        raise ValueError("ell must be >= 1")
    r2 = 0.5 * (1.0 + math.sqrt(2.0 * ell - 1.0))
    r1 = 1.0 - r2
    return r1, r2


def _noise_term(oracle: OracleConfig, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    return oracle.sigma * oracle.noise.apply_half(x, z)


def sample(oracle: OracleConfig, x: np.ndarray, key: RngKey) -> GradientSample:
    """One stochastic gradient at x.  Dispatches to SVAG when configured."""
    if oracle.svag_ell is not None and oracle.svag_ell > 1.0:
        return svag_sample(oracle, x, key)
    x = np.asarray(x, dtype=np.float64)
    grad = oracle.landscape.gradient(x)
    if oracle.sigma == 0.0:
        return GradientSample(grad, (key.seed, key.step, 0))
    key128 = rng.philox_key(key.seed)
    z = rng.normal_single(key128, key, oracle.dim, draw=0)
    return GradientSample(grad + _noise_term(oracle, x, z), (key.seed, key.step, 0))


def svag_sample(oracle: OracleConfig, x: np.ndarray, key: RngKey) -> GradientSample:
    """ghat = r1 g1 + r2 g2 from two independent draws at the same point.

    g2 uses draw index 0 (the base oracle's index) and g1 uses index 1, so
    ell = 1 reduces bit-identically to the base sample.
    """
    ell = oracle.svag_ell if oracle.svag_ell is not None else 1.0
    if ell == 1.0:
        base = OracleConfig(oracle.landscape, oracle.noise, oracle.sigma)
        return sample(base, x, key)
    r1, r2 = svag_coefficients(ell)
    x = np.asarray(x, dtype=np.float64)
    grad = oracle.landscape.gradient(x)
    if oracle.sigma == 0.0:
        # g1 = g2 = grad deterministically, and r1 + r2 = 1.
        return GradientSample(grad, (key.seed, key.step, 0))
    key128 = rng.philox_key(key.seed)
    z2 = rng.normal_single(key128, key, oracle.dim, draw=0)
    z1 = rng.normal_single(key128, key, oracle.dim, draw=1)
    mixed = r1 * _noise_term(oracle, x, z1) + r2 * _noise_term(oracle, x, z2)
    return GradientSample(grad + mixed, (key.seed, key.step, 0))


def sample_block(
    oracle: OracleConfig,
    x: np.ndarray,
    key128: np.ndarray,
    step: int,
    traj0: int = 0,
) -> np.ndarray:
    """Vectorized gradients for a block of trajectories at points x (n, d).

    Row i is bit-identical to ``sample`` with trajectory index traj0 + i.
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    grad = oracle.landscape.gradient(x)
    if oracle.sigma == 0.0:
        return grad
    d = oracle.dim
    z2 = rng.normal_block(key128, step, d, traj0=traj0, n_traj=n, draw=0)
    if oracle.svag_ell is None or oracle.svag_ell == 1.0:
        return grad + _noise_term(oracle, x, z2)
    r1, r2 = svag_coefficients(oracle.svag_ell)
    z1 = rng.normal_block(key128, step, d, traj0=traj0, n_traj=n, draw=1)
    mixed = r1 * _noise_term(oracle, x, z1) + r2 * _noise_term(oracle, x, z2)
    return grad + mixed
