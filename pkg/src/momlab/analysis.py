"""Test functions, closed-form oracles, and ensemble statistics.

Distribution comparisons between trajectories are made through a finite
witness set of smooth test functions h with polynomially growing
derivatives: per-step ensemble means E h(x_k) with bootstrap confidence
intervals, and the distance

    D = max over steps k and functions h of | Ehat h(x_k) - Ehat h(z_k) |

estimated with common random numbers and a paired bootstrap (the same
resampled seed indices applied to both methods), which shrinks the CI of
the difference substantially when the trajectories are coupled.

Also here: the constant-gradient warm-up oracle whose Gaussian iterate law
is known in closed form, the exact expected one-step loss change on
quadratics, and the log-log slope fit used to estimate weak-approximation
order from measured distances D(eta).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from . import rng
from .landscape import Quadratic

__all__ = [
    "Coordinate",
    "SquaredNorm",
    "SmoothBump",
    "Polynomial",
    "TestFunction",
    "default_test_functions",
    "WarmupOracle",
    "WarmupMoments",
    "warmup_moments",
    "DescentDecomposition",
    "descent_decomposition",
    "descent_monte_carlo",
    "WeakDistance",
    "paired_weak_distance",
    "unpaired_weak_distance",
    "fit_scaling_exponent",
    "bootstrap_weights",
    "final_h_stats",
]


# ---------------------------------------------------------------------------
# Test functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Coordinate:
    """h(x) = x_i."""

    i: int

    @property
    def name(self) -> str:
        return f"x{self.i}"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.i]


@dataclass(frozen=True)
class SquaredNorm:
    """h(x) = |x|^2."""

    name: str = field(default="sqnorm", init=False)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        return np.sum(x * x, axis=-1)


@dataclass(frozen=True)
class SmoothBump:
    """h(x) = exp(-|x - center|^2 / (2 width^2)): bounded, all derivatives bounded."""

    center: np.ndarray
    width: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        if self.width <= 0:
            raise ValueError("width must be positive")

    @property
    def name(self) -> str:
        return "bump"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        d = np.asarray(x) - self.center
        return np.exp(-0.5 * np.sum(d * d, axis=-1) / (self.width * self.width))


@dataclass(frozen=True)
class Polynomial:
    """h(x) = sum_j coeffs[j] * x_coord^j, degree at most 4."""

    coeffs: tuple
    coord: int = 0

    def __post_init__(self):
        c = tuple(float(v) for v in self.coeffs)
        if len(c) > 5:
            raise ValueError("polynomial degree must be at most 4")
        object.__setattr__(self, "coeffs", c)

    @property
    def name(self) -> str:
        return f"poly{len(self.coeffs) - 1}_x{self.coord}"

    def __call__(self, x: np.ndarray) -> np.ndarray:
        t = np.asarray(x)[..., self.coord]
        out = np.zeros_like(t)
        for c in reversed(self.coeffs):
            out = out * t + c
        return out


TestFunction = Union[Coordinate, SquaredNorm, SmoothBump, Polynomial]


def default_test_functions(dim: int, bump_width: float = 2.0) -> list[TestFunction]:
    """Each coordinate, the squared norm, and one bump centered at the origin."""
    fns: list[TestFunction] = [Coordinate(i) for i in range(dim)]
    fns.append(SquaredNorm())
    fns.append(SmoothBump(np.zeros(dim), bump_width))
    return fns


# ---------------------------------------------------------------------------
# Warm-up oracle: constant gradient field with i.i.d. Gaussian noise
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WarmupOracle:
    """Constant schedule (eta, beta), gradients g_k ~ N(c, sigma^2 I).

    With z_0 = x_0 and m_0 ~ N(c, (1-beta)/(1+beta) sigma^2 I), both methods
    have Gaussian iterates with identical means, and every moment below is
    exact for every k.
    """

    c: np.ndarray
    eta: float
    beta: float
    sigma: float
    z0: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "c", np.asarray(self.c, dtype=np.float64))
        object.__setattr__(self, "z0", np.asarray(self.z0, dtype=np.float64))
        if not 0.0 < self.beta < 1.0:
            raise ValueError("beta must lie in (0, 1)")

    @property
    def momentum_init_std(self) -> float:
        return float(np.sqrt((1.0 - self.beta) / (1.0 + self.beta)) * self.sigma)


@dataclass(frozen=True)
class WarmupMoments:
    mean: np.ndarray  # of both z_k and x_k
    var_z: float  # per coordinate
    var_x: float
    step_var_sgd: float
    step_var_sgdm: float


def warmup_moments(oracle: WarmupOracle, k: int) -> WarmupMoments:
    """Exact per-coordinate iterate and update moments after k steps.

    z_k ~ N(z0 - k eta c, k eta^2 sigma^2 I); x_k has the same mean with
    variance reduced by 2 beta eta^2 sigma^2 (1-beta^k)/(1-beta^2), and the
    per-step update variance of the momentum method is (1-beta)/(1+beta)
    times the plain-SGD value eta^2 sigma^2.
    """
    eta, beta, s2 = oracle.eta, oracle.beta, oracle.sigma**2
    mean = oracle.z0 - k * eta * oracle.c
    var_z = k * eta**2 * s2
    var_x = var_z - 2.0 * beta * eta**2 * s2 * (1.0 - beta**k) / (1.0 - beta**2)
    step_var_sgd = eta**2 * s2
    step_var_sgdm = (1.0 - beta) / (1.0 + beta) * eta**2 * s2
    return WarmupMoments(mean, var_z, var_x, step_var_sgd, step_var_sgdm)


# ---------------------------------------------------------------------------
# Descent decomposition on quadratics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DescentDecomposition:
    descent_force: float
    noise_induced: float
    curvature_induced: float
    total: float


def descent_decomposition(
    landscape: Quadratic, x: np.ndarray, eta: float, sigma: float, cov: np.ndarray
) -> DescentDecomposition:
    """Exact E[L(z') - L(z) | z] for one SGD step on a quadratic.

    The three contributions are -eta |grad|^2 (descent force),
    (1/2)(sigma eta)^2 tr(A Sigma) (noise-induced), and
    (1/2) eta^2 grad' A grad (curvature-induced); on a quadratic the
    third-order remainder vanishes identically, so their sum is exact.
    """
    if not isinstance(landscape, Quadratic):
        raise ValueError("the exact decomposition is only available on quadratics")
    x = np.asarray(x, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    a = landscape.a
    grad = landscape.gradient(x)
    descent = -eta * float(grad @ grad)
    noise = 0.5 * (sigma * eta) ** 2 * float(np.trace(a @ cov))
    curvature = 0.5 * eta**2 * float(grad @ a @ grad)
    return DescentDecomposition(descent, noise, curvature, descent + noise + curvature)


def descent_monte_carlo(
    landscape: Quadratic,
    x: np.ndarray,
    eta: float,
    sigma: float,
    noise_model,
    n_samples: int,
    seed: int,
) -> tuple[float, float]:
    """Monte-Carlo estimate of E[L(z') - L(z)] with its standard error."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[0]
    key128 = rng.philox_key(seed)
    z = rng.normal_block(key128, step=0, dim=d, traj0=0, n_traj=n_samples)
    g = landscape.gradient(x) + sigma * noise_model.apply_half(x, z)
    deltas = landscape.value(x - eta * g) - landscape.value(x)
    mean = float(np.mean(deltas))
    se = float(np.std(deltas, ddof=1) / np.sqrt(n_samples))
    return mean, se


# ---------------------------------------------------------------------------
# Weak-approximation distance
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WeakDistance:
    """max_{k,h} |mean difference| with a paired-bootstrap percentile CI."""

    d: float
    ci_lo: float
    ci_hi: float
    argmax_step: int
    argmax_h: str


def bootstrap_weights(n: int, n_boot: int, seed: int) -> np.ndarray:
    """Multinomial resampling counts, shape (n_boot, n), from a fixed seed."""
    gen = np.random.Generator(np.random.Philox(key=rng.philox_key(seed, salt=7)))
    counts = gen.multinomial(n, np.full(n, 1.0 / n), size=n_boot)
    return counts.astype(np.float64)


def _percentile_ci(samples: np.ndarray, level: float = 95.0) -> tuple[float, float]:
    lo, hi = np.percentile(samples, [(100 - level) / 2, 100 - (100 - level) / 2])
    return float(lo), float(hi)


def paired_weak_distance(
    h_a: np.ndarray,
    h_b: np.ndarray,
    h_names: Sequence[str],
    n_boot: int = 1000,
    boot_seed: int = 12345,
) -> WeakDistance:
    """Distance between two ensembles from per-seed test-function values.

    h_a, h_b have shape (n_seeds, n_steps, n_h) on matching step grids, with
    seed i of one ensemble paired with seed i of the other.  The bootstrap
    resamples seed indices once and applies them to both (paired).
    """
    h_a = np.asarray(h_a, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    if h_a.shape != h_b.shape:
        raise ValueError("ensembles must share the step grid and test-function set")
    n = h_a.shape[0]
    diff = h_a - h_b
    mean_diff = diff.mean(axis=0)  # (K, H)
    flat = np.abs(mean_diff)
    k_star, h_star = np.unravel_index(np.argmax(flat), flat.shape)
    w = bootstrap_weights(n, n_boot, boot_seed)
    boot_means = (w @ diff.reshape(n, -1)) / n  # (R, K*H)
    d_stars = np.max(np.abs(boot_means), axis=1)
    lo, hi = _percentile_ci(d_stars)
    return WeakDistance(float(flat[k_star, h_star]), lo, hi, int(k_star), h_names[h_star])


def unpaired_weak_distance(
    h_a: np.ndarray,
    h_b: np.ndarray,
    h_names: Sequence[str],
    n_boot: int = 1000,
    boot_seed: int = 12345,
) -> WeakDistance:
    """Same statistic, but the two ensembles are resampled independently."""
    h_a = np.asarray(h_a, dtype=np.float64)
    h_b = np.asarray(h_b, dtype=np.float64)
    if h_a.shape != h_b.shape:
        raise ValueError("ensembles must share the step grid and test-function set")
    n = h_a.shape[0]
    mean_diff = h_a.mean(axis=0) - h_b.mean(axis=0)
    flat = np.abs(mean_diff)
    k_star, h_star = np.unravel_index(np.argmax(flat), flat.shape)
    w_a = bootstrap_weights(n, n_boot, boot_seed)
    w_b = bootstrap_weights(n, n_boot, boot_seed + 1)
    boot = (w_a @ h_a.reshape(n, -1) - w_b @ h_b.reshape(n, -1)) / n
    d_stars = np.max(np.abs(boot), axis=1)
    lo, hi = _percentile_ci(d_stars)
    return WeakDistance(float(flat[k_star, h_star]), lo, hi, int(k_star), h_names[h_star])


def final_h_stats(
    states: np.ndarray,
    h_funcs: Sequence[TestFunction],
    n_boot: int = 1000,
    boot_seed: int = 12345,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean and bootstrap CI of each h over one snapshot of states (n, d)."""
    states = np.asarray(states, dtype=np.float64)
    n = states.shape[0]
    h = np.stack([f(states) for f in h_funcs], axis=1)  # (n, H)
    means = h.mean(axis=0)
    w = bootstrap_weights(n, n_boot, boot_seed)
    boot = (w @ h) / n
    lo, hi = np.percentile(boot, [2.5, 97.5], axis=0)
    return means, lo, hi


# ---------------------------------------------------------------------------
# Scaling-exponent fit
# ---------------------------------------------------------------------------


def fit_scaling_exponent(pairs: Iterable[tuple[float, float]]) -> tuple[float, float]:
    """Least-squares slope of log D against log eta, with its standard error.

    Pairs with nonpositive distances are excluded with a warning; at least
    three positive pairs are required.
    """
    pairs = list(pairs)
    kept = [(e, d) for e, d in pairs if d > 0.0]
    if len(kept) < len(pairs):
        warnings.warn(f"excluded {len(pairs) - len(kept)} nonpositive distances from the fit")
    if len(kept) < 3:
        raise ValueError("need at least three positive (eta, D) pairs to fit a slope")
    x = np.log(np.array([e for e, _ in kept]))
    y = np.log(np.array([d for _, d in kept]))
    n = x.shape[0]
    xbar, ybar = x.mean(), y.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - ybar)) / sxx)
    intercept = ybar - slope * xbar
    resid = y - (intercept + slope * x)
    stderr = float(np.sqrt(np.sum(resid**2) / (n - 2) / sxx)) if n > 2 else 0.0
    return slope, stderr
