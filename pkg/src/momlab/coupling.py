"""The forward-averaged learning rate and the coupled trajectory.

Unrolling the momentum recursion shows that the iterate x_k is (up to an
exponentially small edge effect) an SGD trajectory driven by the *averaged*
learning rates

    eta_bar_k = (1 - beta_k) * sum_{s >= k} eta_s * prod_{r=k+1}^{s} beta_r,

i.e. each gradient's total eventual contribution to the trajectory.  For a
constant schedule (eta, beta) the geometric series collapses to eta_bar_k =
eta exactly.

The bridge between the two methods is the coupled point

    y_k = x_k - (eta_bar_k beta_k / (1 - beta_k)) m_k,

the endpoint the momentum iterate would drift to if all gradients were cut
off after step k.  It satisfies the exact SGD-like recursion

    y_k = y_{k-1} - eta_bar_{k-1} g_{k-1}

with gradients sampled along the momentum trajectory, which is an algebraic
identity of the update rules (checkable to roundoff on any logged run).

All series here use the schedule's last-value extension past its horizon,
which turns the infinite tail into a closed-form geometric sum.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .optim import Schedule, TrajectoryLog, TrajectoryState

__all__ = [
    "AveragedSchedule",
    "averaged_lr",
    "averaged_lr_array",
    "brute_force_averaged_lr",
    "coupled_point",
    "coupled_recursion_residual",
    "telescoped_coupled_residual",
]


def _forward_sums(schedule: Schedule, upto: int) -> np.ndarray:
    """S_k = sum_{s >= k} eta_s prod_{r=k+1}^{s} beta_r for k = 0..upto.

    Backward recursion S_k = eta_k + beta_{k+1} S_{k+1}; for k at or past the
    horizon the fixed point of the constant extension gives S = eta/(1-beta).
    """
    h = schedule.horizon
    eta_last, beta_last = schedule.eta_of(h - 1), schedule.beta_of(h - 1)
    tail = eta_last / (1.0 - beta_last)
    s = np.empty(upto + 1)
    if upto >= h - 1:
        s[h - 1 :] = tail
    carry = tail  # S_k, carried downward from k = h-1
    for k in range(h - 2, -1, -1):
        carry = schedule.eta_of(k) + schedule.beta_of(k + 1) * carry
        if k <= upto:
            s[k] = carry
    return s


def averaged_lr_array(schedule: Schedule, upto: int) -> np.ndarray:
    """eta_bar_k for k = 0..upto (inclusive), exact geometric tail."""
    s = _forward_sums(schedule, upto)
    betas = np.array([schedule.beta_of(k) for k in range(upto + 1)])
    return (1.0 - betas) * s


def averaged_lr(schedule: Schedule, k: int) -> float:
    return float(averaged_lr_array(schedule, k)[k])


def brute_force_averaged_lr(schedule: Schedule, k: int, n_terms: int = 200) -> float:
    """Direct partial sum of the series, for cross-checking the recursion."""
    total = 0.0
    prod = 1.0  # prod_{r=k+1}^{s} beta_r
    for s in range(k, k + n_terms):
        if s > k:
            prod *= schedule.beta_of(s)
        total += schedule.eta_of(s) * prod
    return (1.0 - schedule.beta_of(k)) * total


@dataclass(frozen=True)
class AveragedSchedule:
    """Precomputed eta_bar over [0, horizon], constant past the horizon."""

    eta_bar: np.ndarray
    source: Schedule

    @staticmethod
    def from_schedule(schedule: Schedule, upto: int | None = None) -> "AveragedSchedule":
        upto = schedule.horizon if upto is None else upto
        return AveragedSchedule(averaged_lr_array(schedule, upto), schedule)

    def eta_bar_of(self, k: int) -> float:
        return float(self.eta_bar[min(k, self.eta_bar.shape[0] - 1)])

    def check_scaling_bound(self) -> None:
        """eta_bar_k <= (lambda_max eta_max / lambda_min) eta when scaled."""
        s = self.source.scaling
        if s is None:
            return
        bound = s.lambda_max * s.eta_max / s.lambda_min * s.eta
        if np.any(self.eta_bar > bound + 1e-12):
            raise AssertionError("averaged learning rate exceeds its scaling bound")


def _coupling_coefficient(schedule: Schedule, k: int, eta_bar_k: float) -> float:
    beta = schedule.beta_of(k)
    return eta_bar_k * beta / (1.0 - beta)


def coupled_point(state: TrajectoryState, schedule: Schedule) -> np.ndarray:
    """y = x - (eta_bar_k beta_k / (1 - beta_k)) m at the state's step."""
    if state.m.size != state.x.size:
        return state.x.copy()  # plain SGD carries no momentum: y = x
    c = _coupling_coefficient(schedule, state.k, averaged_lr(schedule, state.k))
    return state.x - c * state.m


def _require_paper_schedule(log: TrajectoryLog) -> Schedule:
    if not isinstance(log.schedule, Schedule):
        raise ValueError("coupling requires a log from a paper-form (eta, beta) run")
    return log.schedule


def coupled_points_from_log(log: TrajectoryLog) -> np.ndarray:
    """y_k for every step of a logged momentum run."""
    schedule = _require_paper_schedule(log)
    n_steps = log.gs.shape[0]
    eta_bar = averaged_lr_array(schedule, n_steps)
    betas = np.array([schedule.beta_of(k) for k in range(n_steps + 1)])
    coef = eta_bar * betas / (1.0 - betas)
    return log.xs - coef[:, None] * log.ms


def coupled_recursion_residual(log: TrajectoryLog) -> float:
    """max_k |y_k - (y_{k-1} - eta_bar_{k-1} g_{k-1})|, relative.

    The identity is exact, so the return value is pure floating-point noise;
    the contract is <= 1e-9 * (1 + max_k |y_k|), and the result is reported
    already divided by that scale.
    """
    if log.gs.shape[0] == 0:
        raise ValueError("log holds no gradients")
    schedule = _require_paper_schedule(log)
    ys = coupled_points_from_log(log)
    eta_bar = averaged_lr_array(schedule, log.gs.shape[0])
    predicted = ys[:-1] - eta_bar[:-1, None] * log.gs
    resid = float(np.max(np.linalg.norm(ys[1:] - predicted, axis=1)))
    scale = 1.0 + float(np.max(np.linalg.norm(ys, axis=1)))
    return resid / scale


def telescoped_coupled_residual(log: TrajectoryLog) -> float:
    """Check y_k = x_0 - (beta_0 eta_bar_0/(1-beta_0)) m_0 - sum_{s<k} eta_bar_s g_s.

    Returns the maximum relative deviation over all steps.
    """
    schedule = _require_paper_schedule(log)
    n_steps = log.gs.shape[0]
    ys = coupled_points_from_log(log)
    eta_bar = averaged_lr_array(schedule, n_steps)
    c0 = _coupling_coefficient(schedule, 0, eta_bar[0])
    base = log.xs[0] - c0 * log.ms[0]
    partial = np.concatenate(
        [np.zeros((1, log.gs.shape[1])), np.cumsum(eta_bar[:n_steps, None] * log.gs, axis=0)]
    )
    predicted = base - partial
    scale = 1.0 + float(np.max(np.linalg.norm(ys, axis=1)))
    return float(np.max(np.linalg.norm(ys - predicted, axis=1))) / scale
