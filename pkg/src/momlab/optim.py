"""Discrete optimizers and hyperparameter schedules.

Two equivalent momentum parameterizations appear throughout:

* the convex-combination form used by all the analysis here,

      m_{k+1} = beta_k m_k + (1 - beta_k) g_k,    x_{k+1} = x_k - eta_k m_{k+1};

* the standard framework form (e.g. what deep-learning libraries implement),

      mbar_{k+1} = mu_k mbar_k + (1 - tau_k) gbar_k,
      xbar_{k+1} = xbar_k - gamma_k mbar_{k+1}.

``convert_standard_to_paper`` maps the second onto the first through the
rescaling sequence alpha_k (alpha_0 = 1, alpha_{k+1} = alpha_k / (alpha_k
(1 - tau_k) + mu_k)): with beta_k = (alpha_{k+1}/alpha_k) mu_k and eta_k =
gamma_k / alpha_{k+1}, the iterates coincide exactly under shared noise and
the momenta satisfy m_k = alpha_k mbar_k.

Schedules are stored as explicit per-step arrays and extend past their
horizon by copying the last entry, which is the convention the forward
averaged learning rate relies on.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import rng
from .ngos import OracleConfig, sample
from .rng import RngKey

__all__ = [
    "ScheduleScaling",
    "Schedule",
    "StandardSchedule",
    "TrajectoryState",
    "TrajectoryLog",
    "sgd_step",
    "sgdm_step",
    "sgdm_standard_step",
    "convert_standard_to_paper",
    "intro_form_conversion",
    "constant_schedule",
    "scaled_schedule",
    "two_phase_schedule",
    "unrolled_momentum",
    "run_trajectory",
    "GUARD_RADIUS",
]

# Trajectories wandering past this radius are flagged diverged and frozen;
# they are excluded from ensemble statistics and counted in reports.
GUARD_RADIUS = 1e6


@dataclass(frozen=True)
class ScheduleScaling:
    """Scaling metadata: eta_k = O(eta), 1 - beta_k = Theta(eta^alpha)."""

    eta: float
    alpha: float
    eta_max: float
    lambda_min: float
    lambda_max: float


@dataclass(frozen=True)
class Schedule:
    """Per-step (eta_k, beta_k) arrays with last-value extension."""

    etas: np.ndarray
    betas: np.ndarray
    scaling: Optional[ScheduleScaling] = None

    def __post_init__(self):
        etas = np.atleast_1d(np.asarray(self.etas, dtype=np.float64))
        betas = np.atleast_1d(np.asarray(self.betas, dtype=np.float64))
        if etas.shape != betas.shape or etas.ndim != 1 or etas.size == 0:
            raise ValueError("etas and betas must be equal-length nonempty vectors")
        if np.any(etas < 0):
            raise ValueError("learning rates must be nonnegative")
        if np.any((betas < 0) | (betas >= 1)):
            raise ValueError("momentum decay must lie in [0, 1)")
        object.__setattr__(self, "etas", etas)
        object.__setattr__(self, "betas", betas)
        if self.scaling is not None:
            self._validate_scaling()

    @property
    def horizon(self) -> int:
        return self.etas.shape[0]

    def eta_of(self, k: int) -> float:
        return float(self.etas[min(k, self.horizon - 1)])

    def beta_of(self, k: int) -> float:
        return float(self.betas[min(k, self.horizon - 1)])

    def _validate_scaling(self) -> None:
        s = self.scaling
        ratios = self.etas / s.eta
        if np.any(ratios >= s.eta_max) or np.any(ratios < 0):
            raise ValueError("schedule violates 0 <= eta_k/eta < eta_max")
        lam = (1.0 - self.betas) / s.eta**s.alpha
        if np.any(lam < s.lambda_min - 1e-12) or np.any(lam > s.lambda_max + 1e-12):
            raise ValueError("schedule violates lambda_min <= (1-beta_k)/eta^alpha <= lambda_max")
        if s.lambda_max >= 1.0:
            warnings.warn("schedule scaling has lambda_max >= 1; recorded but not enforced")


@dataclass(frozen=True)
class StandardSchedule:
    """(gamma_k, mu_k, tau_k) arrays for the standard momentum form."""

    gammas: np.ndarray
    mus: np.ndarray
    taus: np.ndarray

    def __post_init__(self):
        g = np.atleast_1d(np.asarray(self.gammas, dtype=np.float64))
        m = np.atleast_1d(np.asarray(self.mus, dtype=np.float64))
        t = np.atleast_1d(np.asarray(self.taus, dtype=np.float64))
        if not (g.shape == m.shape == t.shape) or g.ndim != 1 or g.size == 0:
            raise ValueError("gammas, mus, taus must be equal-length nonempty vectors")
        if np.any((t < 0) | (t >= 1)):
            raise ValueError("tau_k must lie in [0, 1)")
        object.__setattr__(self, "gammas", g)
        object.__setattr__(self, "mus", m)
        object.__setattr__(self, "taus", t)

    @property
    def horizon(self) -> int:
        return self.gammas.shape[0]

    def gamma_of(self, k: int) -> float:
        return float(self.gammas[min(k, self.horizon - 1)])

    def mu_of(self, k: int) -> float:
        return float(self.mus[min(k, self.horizon - 1)])

    def tau_of(self, k: int) -> float:
        return float(self.taus[min(k, self.horizon - 1)])


def constant_schedule(eta: float, beta: float, horizon: int = 1, alpha: float = 0.0) -> Schedule:
    lam = (1.0 - beta) / eta**alpha
    scaling = ScheduleScaling(eta=eta, alpha=alpha, eta_max=2.0, lambda_min=lam, lambda_max=lam)
    with warnings.catch_warnings():
        # constant schedules with small beta legitimately have lambda >= 1
        warnings.simplefilter("ignore")
        return Schedule(np.full(horizon, eta), np.full(horizon, beta), scaling)


def scaled_schedule(eta: float, alpha: float, lam: float = 0.5, horizon: int = 1) -> Schedule:
    """eta_k = eta, beta_k = 1 - lam eta^alpha: a schedule scaled with index alpha."""
    beta = 1.0 - lam * eta**alpha
    if not 0.0 <= beta < 1.0:
        raise ValueError("lam eta^alpha must lie in (0, 1]")
    scaling = ScheduleScaling(eta=eta, alpha=alpha, eta_max=2.0, lambda_min=lam, lambda_max=lam)
    return Schedule(np.full(horizon, eta), np.full(horizon, beta), scaling)


def two_phase_schedule(
    eta_first: float, eta_second: float, switch_step: int, beta: float, horizon: int
) -> Schedule:
    if not 0 < switch_step < horizon:
        raise ValueError("switch_step must lie strictly inside the horizon")
    etas = np.full(horizon, eta_second)
    etas[:switch_step] = eta_first
    return Schedule(etas, np.full(horizon, beta))


@dataclass
class TrajectoryState:
    """Optimizer state: position, momentum (empty for plain SGD), step count."""

    x: np.ndarray
    m: np.ndarray
    k: int = 0
    diverged: bool = False

    @staticmethod
    def initial(x0: np.ndarray, m0: Optional[np.ndarray] = None) -> "TrajectoryState":
        x0 = np.asarray(x0, dtype=np.float64)
        m = np.zeros(0) if m0 is None else np.asarray(m0, dtype=np.float64)
        return TrajectoryState(x=x0.copy(), m=m.copy(), k=0)


def _guard(x: np.ndarray) -> bool:
    return bool(np.linalg.norm(x) > GUARD_RADIUS) or not np.all(np.isfinite(x))


def sgd_step(
    state: TrajectoryState,
    schedule: Schedule,
    oracle: OracleConfig,
    key: RngKey,
    g: Optional[np.ndarray] = None,
) -> TrajectoryState:
    """x' = x - eta_k g.  Diverged states are frozen, not errors."""
    if state.diverged:
        return state
    if g is None:
        g = sample(oracle, state.x, key).g
    x = state.x - schedule.eta_of(state.k) * g
    return TrajectoryState(x=x, m=state.m, k=state.k + 1, diverged=_guard(x))


def sgdm_step(
    state: TrajectoryState,
    schedule: Schedule,
    oracle: OracleConfig,
    key: RngKey,
    g: Optional[np.ndarray] = None,
) -> TrajectoryState:
    """m' = beta_k m + (1 - beta_k) g;  x' = x - eta_k m'."""
    if state.diverged:
        return state
    if g is None:
        g = sample(oracle, state.x, key).g
    beta = schedule.beta_of(state.k)
    m = beta * state.m + (1.0 - beta) * g
    x = state.x - schedule.eta_of(state.k) * m
    return TrajectoryState(x=x, m=m, k=state.k + 1, diverged=_guard(x))


def sgdm_standard_step(
    state: TrajectoryState,
    schedule: StandardSchedule,
    oracle: OracleConfig,
    key: RngKey,
    g: Optional[np.ndarray] = None,
) -> TrajectoryState:
    """m' = mu_k m + (1 - tau_k) g;  x' = x - gamma_k m'."""
    if state.diverged:
        return state
    if g is None:
        g = sample(oracle, state.x, key).g
    m = schedule.mu_of(state.k) * state.m + (1.0 - schedule.tau_of(state.k)) * g
    x = state.x - schedule.gamma_of(state.k) * m
    return TrajectoryState(x=x, m=m, k=state.k + 1, diverged=_guard(x))


def convert_standard_to_paper(
    std: StandardSchedule, horizon: int
) -> tuple[Schedule, np.ndarray]:
    """Map a standard-form schedule onto the convex-combination form.

    Returns the converted schedule over `horizon` steps and the momentum
    rescaling sequence alpha_0..alpha_horizon (m_k = alpha_k mbar_k).
    """
    alphas = np.empty(horizon + 1)
    etas = np.empty(horizon)
    betas = np.empty(horizon)
    alphas[0] = 1.0
    for k in range(horizon):
        tau, mu, gamma = std.tau_of(k), std.mu_of(k), std.gamma_of(k)
        denom = alphas[k] * (1.0 - tau) + mu
        assert denom > 0.0, "alpha recursion denominator must stay positive"
        alphas[k + 1] = alphas[k] / denom
        assert 0.0 < alphas[k + 1] <= 1.0 / (1.0 - tau) + 1e-12
        betas[k] = (alphas[k + 1] / alphas[k]) * mu
        etas[k] = gamma / alphas[k + 1]
    return Schedule(etas, betas), alphas


def intro_form_conversion(gamma: float, beta: float, horizon: int = 1) -> Schedule:
    """Constant schedule eta = gamma / (1 - beta), beta_k = beta.

    This is the conversion between the classical heavy-ball writing
    (m' = beta m + g, x' = x - gamma m') and the convex-combination form.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError("beta must lie in (0, 1)")
    return constant_schedule(gamma / (1.0 - beta), beta, horizon=horizon)


def unrolled_momentum(
    schedule: Schedule, m0: np.ndarray, gradients: np.ndarray, k: int
) -> np.ndarray:
    """Closed-form momentum  beta_{0:k-1} m0 + sum_s beta_{s+1:k-1}(1-beta_s) g_s.

    Evaluated directly from logged gradients (independently of the step
    recursion) for verification purposes.
    """
    m0 = np.asarray(m0, dtype=np.float64)
    gradients = np.asarray(gradients, dtype=np.float64)
    acc = np.zeros_like(m0)
    coef = 1.0  # beta_{s+1:k-1}, built backwards from s = k-1
    for s in range(k - 1, -1, -1):
        beta_s = schedule.beta_of(s)
        acc = acc + coef * (1.0 - beta_s) * gradients[s]
        coef *= beta_s
    return coef * m0 + acc


@dataclass
class TrajectoryLog:
    """Full record of one run: iterates, momenta, and sampled gradients.

    `schedule` is whatever the run used (paper or standard form); coupling
    computations require the paper form.
    """

    xs: np.ndarray  # (K+1, d)
    ms: np.ndarray  # (K+1, d)
    gs: np.ndarray  # (K, d)
    schedule: object
    seed: int
    traj: int = 0
    diverged_at: Optional[int] = None


def run_trajectory(
    method: str,
    oracle: OracleConfig,
    schedule,
    x0: np.ndarray,
    n_steps: int,
    seed: int,
    m0: Optional[np.ndarray] = None,
    traj: int = 0,
) -> TrajectoryLog:
    """Run one seeded trajectory, logging iterates and gradients.

    `method` is one of "sgd", "sgdm", "sgdm_standard"; the noise at step k
    is addressed by (seed, traj, k), so different methods run with the same
    seed see identical gradients at identical points.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[0]
    if m0 is None:
        m0 = np.zeros(d)
    state = TrajectoryState.initial(x0, m0)
    xs = np.empty((n_steps + 1, d))
    ms = np.empty((n_steps + 1, d))
    gs = np.empty((n_steps, d))
    xs[0], ms[0] = state.x, state.m
    diverged_at = None
    steppers = {"sgd": sgd_step, "sgdm": sgdm_step, "sgdm_standard": sgdm_standard_step}
    if method not in steppers:
        raise ValueError(f"unknown method {method!r}")
    step_fn = steppers[method]
    for k in range(n_steps):
        key = RngKey(seed=seed, step=k, traj=traj)
        g = sample(oracle, state.x, key).g
        gs[k] = g
        state = step_fn(state, schedule, oracle, key, g=g)
        xs[k + 1], ms[k + 1] = state.x, state.m
        if state.diverged and diverged_at is None:
            diverged_at = k + 1
    return TrajectoryLog(xs, ms, gs, schedule, seed, traj, diverged_at)
