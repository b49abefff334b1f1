"""Analytic loss functions with exact gradients and Hessian-vector products.

Three families cover the needs of the simulation experiments:

* ``Quadratic``          L(x) = 1/2 x'Ax - b'x          (A symmetric PSD)
* ``ConstantGradient``   L(x) = c'x                      (gradient c everywhere)
* ``SphereQuartic``      L(x) = 1/4 (|x|^2 - r^2)^2      (minimized on |x| = r)

The sphere quartic's minimizers form a smooth manifold (the radius-r sphere),
which makes it the toy problem for gradient-projection and slow-diffusion
experiments: its gradient (|x|^2 - r^2) x is purely radial, so the gradient
flow from any point other than the origin converges to r x / |x|.

All evaluation functions accept a single point of shape (d,) or a batch of
points of shape (n, d) and are pure, so they are safe to call concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

__all__ = [
    "Quadratic",
    "ConstantGradient",
    "SphereQuartic",
    "LossLandscape",
    "ManifoldSpec",
    "eval_landscape",
    "unit_sphere_manifold",
]

# Radius around the origin excluded from the sphere quartic's attraction
# region: the gradient projection is undefined exactly at 0.
ORIGIN_EXCLUSION = 1e-6


def _check_point(x: np.ndarray, dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != dim:
        raise ValueError(f"point has dimension {x.shape[-1]}, landscape expects {dim}")
    return x


@dataclass(frozen=True)
class Quadratic:
    """L(x) = 1/2 x'Ax - b'x with exact gradient Ax - b and Hessian A."""

    a: np.ndarray
    b: np.ndarray
    kind: str = field(default="quadratic", init=False)

    def __post_init__(self):
        a = np.asarray(self.a, dtype=np.float64)
        b = np.asarray(self.b, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise ValueError("A must be a square matrix")
        if not np.allclose(a, a.T, atol=1e-12):
            raise ValueError("A must be symmetric")
        if b.shape != (a.shape[0],):
            raise ValueError("b must be a vector matching A")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    def value(self, x: np.ndarray):
        x = _check_point(x, self.dim)
        ax = x @ self.a.T
        return 0.5 * np.sum(x * ax, axis=-1) - x @ self.b

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = _check_point(x, self.dim)
        return x @ self.a.T - self.b

    def hessian_vector(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        v = _check_point(v, self.dim)
        return v @ self.a.T

    def hessian(self, x: np.ndarray) -> np.ndarray:
        return self.a


@dataclass(frozen=True)
class ConstantGradient:
    """L(x) = c'x; the gradient is c at every point, the Hessian vanishes."""

    c: np.ndarray
    kind: str = field(default="constant_gradient", init=False)

    def __post_init__(self):
        c = np.asarray(self.c, dtype=np.float64)
        if c.ndim != 1:
            raise ValueError("c must be a vector")
        object.__setattr__(self, "c", c)

    @property
    def dim(self) -> int:
        return self.c.shape[0]

    def value(self, x: np.ndarray):
        x = _check_point(x, self.dim)
        return x @ self.c

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = _check_point(x, self.dim)
        return np.broadcast_to(self.c, x.shape).copy()

    def hessian_vector(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        v = _check_point(v, self.dim)
        return np.zeros_like(v)

    def hessian(self, x: np.ndarray) -> np.ndarray:
        return np.zeros((self.dim, self.dim))


@dataclass(frozen=True)
class SphereQuartic:
    """L(x) = 1/4 (|x|^2 - r^2)^2, minimized exactly on the sphere |x| = r.

    The 1/4 normalization makes the gradient (|x|^2 - r^2) x with no stray
    factor, so the gradient flow is purely radial.
    """

    dim_: int
    target_radius: float = 1.0
    kind: str = field(default="sphere_quartic", init=False)

    def __post_init__(self):
        if self.dim_ < 1:
            raise ValueError("dimension must be positive")
        if self.target_radius <= 0:
            raise ValueError("target radius must be positive")

    @property
    def dim(self) -> int:
        return self.dim_

    def value(self, x: np.ndarray):
        x = _check_point(x, self.dim)
        s = np.sum(x * x, axis=-1) - self.target_radius**2
        return 0.25 * s * s

    def gradient(self, x: np.ndarray) -> np.ndarray:
        x = _check_point(x, self.dim)
        s = np.sum(x * x, axis=-1) - self.target_radius**2
        return s[..., None] * x if x.ndim > 1 else s * x

    def hessian_vector(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        # Hessian is 2 x x' + (|x|^2 - r^2) I.
        x = _check_point(x, self.dim)
        v = _check_point(v, self.dim)
        s = np.sum(x * x, axis=-1) - self.target_radius**2
        xv = np.sum(x * v, axis=-1)
        if x.ndim > 1:
            return 2.0 * xv[..., None] * x + s[..., None] * v
        return 2.0 * xv * x + s * v

    def hessian(self, x: np.ndarray) -> np.ndarray:
        x = _check_point(x, self.dim)
        s = float(np.sum(x * x) - self.target_radius**2)
        return 2.0 * np.outer(x, x) + s * np.eye(self.dim)


LossLandscape = Union[Quadratic, ConstantGradient, SphereQuartic]


def eval_landscape(landscape: LossLandscape, x: np.ndarray):
    """Return (value, gradient) at x; raises ValueError on dimension mismatch."""
    return landscape.value(x), landscape.gradient(x)


@dataclass(frozen=True)
class ManifoldSpec:
    """A landscape whose minimizers form a manifold, with its projection map.

    ``phi_analytic`` maps a point in the attraction region to the limit of
    the gradient flow started there.  For the sphere quartic that limit is
    r x / |x|, defined everywhere except a small ball around the origin.
    """

    landscape: SphereQuartic
    epsilon_origin: float = ORIGIN_EXCLUSION

    def __post_init__(self):
        if not isinstance(self.landscape, SphereQuartic):
            raise ValueError("only SphereQuartic manifolds are supported")

    @property
    def dim(self) -> int:
        return self.landscape.dim

    @property
    def radius(self) -> float:
        return self.landscape.target_radius

    def in_attraction_region(self, x: np.ndarray) -> bool:
        return float(np.linalg.norm(np.asarray(x, dtype=np.float64))) > self.epsilon_origin

    def phi_analytic(self, x: np.ndarray) -> np.ndarray:
        """r x / |x|, vectorized over a leading batch axis."""
        x = _check_point(x, self.dim)
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        return self.radius * x / n

    def on_manifold(self, x: np.ndarray, tol: float = 1e-8) -> bool:
        return abs(float(np.linalg.norm(x)) - self.radius) <= tol

    # Exact derivatives of phi_analytic, used on the fast integrator path.
    # With n = |x| and xh = x/n:  dPhi = (r/n)(I - xh xh'), and the
    # contraction of the second derivative with a matrix S is
    #   r [ -2 S x / n^3 - x tr(S)/n^3 + 3 x (x'Sx) / n^5 ].
    def dphi(self, x: np.ndarray) -> np.ndarray:
        x = _check_point(x, self.dim)
        n = float(np.linalg.norm(x))
        xh = x / n
        return (self.radius / n) * (np.eye(self.dim) - np.outer(xh, xh))

    def dphi_apply(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """dPhi(x) v, vectorized over a leading batch axis."""
        x = _check_point(x, self.dim)
        v = _check_point(v, self.dim)
        n = np.linalg.norm(x, axis=-1, keepdims=True)
        xh = x / n
        return (self.radius / n) * (v - xh * np.sum(xh * v, axis=-1, keepdims=True))

    def d2phi_contract(self, x: np.ndarray, s: np.ndarray) -> np.ndarray:
        x = _check_point(x, self.dim)
        s = np.asarray(s, dtype=np.float64)
        n2 = np.sum(x * x, axis=-1)
        n3 = n2 ** 1.5
        n5 = n2 ** 2.5
        sx = x @ s.T
        xsx = np.sum(x * sx, axis=-1)
        tr = np.trace(s)
        if x.ndim > 1:
            return self.radius * (
                -2.0 * sx / n3[..., None]
                - tr * x / n3[..., None]
                + 3.0 * xsx[..., None] * x / n5[..., None]
            )
        return self.radius * (-2.0 * sx / n3 - tr * x / n3 + 3.0 * xsx * x / n5)


def unit_sphere_manifold(dim: int, radius: float = 1.0) -> ManifoldSpec:
    return ManifoldSpec(SphereQuartic(dim, radius))
