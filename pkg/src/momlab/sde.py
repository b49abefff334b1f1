"""Continuous-time limits: gradient flow, first-order SDE, underdamped pair,
and the slow diffusion on a manifold of minimizers.

All integrators are Euler-Maruyama with Brownian increments drawn from the
same counter-based streams as the discrete optimizers, keyed by (seed, path,
step), so repeated runs and runs split across workers are bit-identical.

The four dynamics:

* gradient flow        dX = -lam_t grad L(X) dt
* first-order SDE      dX = -lam_t grad L(X) dt + lam_t S(X) dW
* underdamped pair     dX = (lam_t/gam_t) dM - lam_t grad L(X) dt + lam_t S(X) dW
                       dM = -gam_t M dt + gam_t grad L(X) dt - gam_t S(X) dW
* slow SDE on Gamma    dX = lam_t dPhi(X) S(X) dW + (lam_t^2/2) d2Phi(X)[Sigma(X)] dt

with S = Sigma^(1/2).  The slow SDE's exact solution stays on the manifold;
the Euler-Maruyama iterate drifts off by O(dt) per step, so each step is
re-projected through Phi and the largest pre-projection distance is logged.

Phi itself is the gradient projection map: the limit of the gradient flow.
Its numeric mode integrates the flow with an adaptive step until the
gradient norm falls below 1e-10; its Jacobian and the second-derivative
contraction are central finite differences on Phi (with an optional
Richardson-extrapolated variant as an independent check, and closed forms
for the sphere).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from . import rng
from .landscape import LossLandscape, ManifoldSpec
from .ngos import NoiseModel, StateScaledGaussian
from .optim import GUARD_RADIUS, Schedule

__all__ = [
    "SdeSpec",
    "SdePath",
    "SdeBatch",
    "integrate",
    "integrate_paths",
    "integrate_slow_sde",
    "phi",
    "phi_jacobian",
    "phi_second",
    "lambda_from_schedule",
    "gamma_from_schedule",
]

PHI_GRAD_TOL = 1e-10
FD_STEP_JACOBIAN = 1e-5
FD_STEP_SECOND = 1e-4

TimeFn = Callable[[float], float]


def _as_time_fn(v: Union[float, TimeFn, None], default: float = 1.0) -> TimeFn:
    if v is None:
        return lambda t: default
    if callable(v):
        return v
    c = float(v)
    return lambda t: c


def lambda_from_schedule(schedule: Schedule, eta: float, time_scale: str = "eta") -> TimeFn:
    """Piecewise-constant lam_t = eta_{floor(t / eta^p)} / eta, p = 1 or 2."""
    p = {"eta": 1, "eta_squared": 2}[time_scale]
    step_len = eta**p
    return lambda t: schedule.eta_of(int(t / step_len)) / eta


def gamma_from_schedule(schedule: Schedule, eta: float) -> TimeFn:
    """Piecewise-constant gam_t = (1 - beta_{floor(t/eta)}) / eta."""
    return lambda t: (1.0 - schedule.beta_of(int(t / eta))) / eta


@dataclass(frozen=True)
class SdeSpec:
    """Which dynamics to integrate, over what horizon, with what coefficients."""

    kind: str  # gradient_flow | first_order | underdamped | slow
    dt: float
    horizon: float
    landscape: Optional[LossLandscape] = None
    noise: Optional[NoiseModel] = None
    manifold: Optional[ManifoldSpec] = None
    lam: Union[float, TimeFn, None] = None
    gamma: Union[float, TimeFn, None] = None

    def __post_init__(self):
        if self.dt <= 0 or self.horizon <= 0 or self.dt > self.horizon:
            raise ValueError("need 0 < dt <= horizon")
        if self.kind in ("gradient_flow", "first_order", "underdamped"):
            if self.landscape is None:
                raise ValueError(f"{self.kind} requires a landscape")
        elif self.kind == "slow":
            if self.manifold is None or self.noise is None:
                raise ValueError("slow SDE requires a manifold and a noise model")
        else:
            raise ValueError(f"unknown SDE kind {self.kind!r}")
        if self.kind in ("first_order", "underdamped") and self.noise is None:
            raise ValueError(f"{self.kind} requires a noise model (possibly zero)")
        if self.kind == "underdamped" and self.gamma is None:
            raise ValueError("underdamped dynamics require a friction schedule")

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.dt))


@dataclass
class SdePath:
    """One realized path on the recorded time grid."""

    times: np.ndarray  # (n_rec,)
    states: np.ndarray  # (n_rec, d)
    seed: int
    traj: int = 0
    momenta: Optional[np.ndarray] = None  # underdamped companion process
    max_projection_dist: float = 0.0  # slow SDE: worst per-step drift off Gamma


@dataclass
class SdeBatch:
    """A batch of paths: states indexed (time, path, coordinate)."""

    times: np.ndarray
    states: np.ndarray  # (n_rec, n_paths, d)
    seed: int
    traj0: int = 0
    momenta: Optional[np.ndarray] = None
    max_projection_dist: float = 0.0


def integrate(spec: SdeSpec, x0: np.ndarray, seed: int, traj: int = 0) -> SdePath:
    """Integrate one path; see ``integrate_paths`` for the vectorized form."""
    batch = integrate_paths(spec, x0, seed, n_paths=1, traj0=traj)
    return SdePath(
        times=batch.times,
        states=batch.states[:, 0, :],
        seed=seed,
        traj=traj,
        momenta=None if batch.momenta is None else batch.momenta[:, 0, :],
        max_projection_dist=batch.max_projection_dist,
    )


def integrate_paths(
    spec: SdeSpec,
    x0: np.ndarray,
    seed: int,
    n_paths: int,
    traj0: int = 0,
    record_every: int = 1,
    m0: Optional[np.ndarray] = None,
) -> SdeBatch:
    """Euler-Maruyama over n_paths independent Brownian motions.

    Path i uses the noise stream of trajectory traj0 + i, making batches
    bit-identical to the corresponding single-path runs.  States blowing up
    past the divergence guard are frozen in place.
    """
    if spec.kind == "slow":
        return _integrate_slow(spec, x0, seed, n_paths, traj0, record_every)
    x0 = np.asarray(x0, dtype=np.float64)
    d = x0.shape[0]
    landscape = spec.landscape
    lam = _as_time_fn(spec.lam)
    gam = _as_time_fn(spec.gamma)
    key128 = rng.philox_key(seed)
    n_steps = spec.n_steps
    dt = spec.dt
    sqrt_dt = np.sqrt(dt)
    underdamped = spec.kind == "underdamped"
    with_noise = spec.kind in ("first_order", "underdamped") and spec.noise is not None

    x = np.tile(x0, (n_paths, 1))
    m = None
    if underdamped:
        m = np.tile(np.zeros(d) if m0 is None else np.asarray(m0, dtype=np.float64), (n_paths, 1))

    rec_idx = list(range(0, n_steps + 1, record_every))
    if rec_idx[-1] != n_steps:
        rec_idx.append(n_steps)
    times = np.array([i * dt for i in rec_idx])
    states = np.empty((len(rec_idx), n_paths, d))
    momenta = np.empty_like(states) if underdamped else None
    rec_pos = 0
    if rec_idx[0] == 0:
        states[0] = x
        if underdamped:
            momenta[0] = m
        rec_pos = 1

    alive = np.ones(n_paths, dtype=bool)
    for k in range(n_steps):
        t = k * dt
        lam_t = lam(t)
        grad = landscape.gradient(x)
        drift = -lam_t * dt * grad
        if underdamped:
            gam_t = gam(t)
            dm = gam_t * dt * (grad - m)
            if with_noise:
                z = rng.normal_block(key128, k, d, traj0=traj0, n_traj=n_paths,
                                     stream=rng.STREAM_BROWNIAN)
                dw = spec.noise.apply_half(x, z) * sqrt_dt
                dm = dm - gam_t * dw
                dx = (lam_t / gam_t) * dm + drift + lam_t * dw
            else:
                dx = (lam_t / gam_t) * dm + drift
            m = np.where(alive[:, None], m + dm, m)
            x = np.where(alive[:, None], x + dx, x)
        else:
            step = drift
            if with_noise:
                z = rng.normal_block(key128, k, d, traj0=traj0, n_traj=n_paths,
                                     stream=rng.STREAM_BROWNIAN)
                step = drift + lam_t * sqrt_dt * spec.noise.apply_half(x, z)
            x = np.where(alive[:, None], x + step, x)
        bad = ~np.isfinite(x).all(axis=1) | (np.linalg.norm(x, axis=1) > GUARD_RADIUS)
        alive &= ~bad
        if rec_pos < len(rec_idx) and k + 1 == rec_idx[rec_pos]:
            states[rec_pos] = x
            if underdamped:
                momenta[rec_pos] = m
            rec_pos += 1
    return SdeBatch(times=times, states=states, seed=seed, traj0=traj0, momenta=momenta)


# ---------------------------------------------------------------------------
# Gradient projection map and its derivatives
# ---------------------------------------------------------------------------


def _require_attraction(manifold: ManifoldSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if not manifold.in_attraction_region(x):
        raise ValueError("point lies outside the attraction region of the manifold")
    return x


def phi(manifold: ManifoldSpec, x: np.ndarray, mode: str = "analytic") -> np.ndarray:
    """Project x onto the manifold along the gradient flow.

    Analytic mode uses the manifold's closed form.  Numeric mode integrates
    dx/dt = -grad L(x) with an adaptive explicit Euler scheme (step halved
    whenever the loss fails to decrease strictly, displacement capped at a
    fraction of |x| so the iterate cannot jump across the manifold) until
    the gradient norm falls below 1e-10.
    """
    x = _require_attraction(manifold, x)
    if mode == "analytic":
        return manifold.phi_analytic(x)
    if mode != "numeric":
        raise ValueError(f"unknown phi mode {mode!r}")
    landscape = manifold.landscape
    cur = x.copy()
    val = float(landscape.value(cur))
    g = landscape.gradient(cur)
    gnorm = float(np.linalg.norm(g))
    h = 0.05
    for _ in range(200_000):
        if gnorm < PHI_GRAD_TOL:
            return cur
        # cap the displacement so a large step cannot flip through the origin
        h_eff = min(h, 0.1 * float(np.linalg.norm(cur)) / gnorm)
        trial = cur - h_eff * g
        tval = float(landscape.value(trial))
        if tval < val or tval == 0.0:
            cur, val = trial, tval
            g = landscape.gradient(cur)
            gnorm = float(np.linalg.norm(g))
            h = min(h * 1.3, 0.5)
        else:
            h *= 0.5
    raise RuntimeError("gradient flow failed to reach the manifold")


def _phi_eval(manifold: ManifoldSpec) -> Callable[[np.ndarray], np.ndarray]:
    # Finite differences sample Phi at perturbed points; the analytic map is
    # exact and cheap, so prefer it as the function being differentiated.
    return manifold.phi_analytic


def phi_jacobian(manifold: ManifoldSpec, x: np.ndarray, mode: str = "numeric") -> np.ndarray:
    """dPhi(x): central differences on Phi, or the closed form for the sphere.

    On the manifold the Jacobian is the orthogonal projector onto the
    tangent space (symmetric, idempotent), and dPhi(x) grad L(x) = 0 holds
    throughout the attraction region.
    """
    x = _require_attraction(manifold, x)
    if mode == "analytic":
        return manifold.dphi(x)
    if mode != "numeric":
        raise ValueError(f"unknown jacobian mode {mode!r}")
    f = _phi_eval(manifold)
    d = x.shape[0]
    h = FD_STEP_JACOBIAN
    jac = np.empty((d, d))
    for j in range(d):
        e = np.zeros(d)
        e[j] = h
        jac[:, j] = (f(x + e) - f(x - e)) / (2.0 * h)
    return jac


def _second_diff(f, x: np.ndarray, s: np.ndarray, h: float) -> np.ndarray:
    """sum_ij S_ij d2Phi/dx_i dx_j by second-order central differences."""
    d = x.shape[0]
    fx = f(x)
    out = np.zeros_like(fx)
    for i in range(d):
        ei = np.zeros(d)
        ei[i] = h
        out = out + s[i, i] * (f(x + ei) - 2.0 * fx + f(x - ei)) / (h * h)
        for j in range(i + 1, d):
            ej = np.zeros(d)
            ej[j] = h
            cross = (f(x + ei + ej) - f(x + ei - ej) - f(x - ei + ej) + f(x - ei - ej)) / (
                4.0 * h * h
            )
            out = out + 2.0 * s[i, j] * cross
    return out


def phi_second(
    manifold: ManifoldSpec, x: np.ndarray, s: np.ndarray, mode: str = "numeric"
) -> np.ndarray:
    """The contraction d2Phi(x)[S] = sum_ij S_ij d2Phi/dx_i dx_j.

    Modes: "numeric" (central differences, step 1e-4), "richardson"
    (extrapolation of steps h and h/2, an independent scheme for
    cross-checks), "analytic" (closed form for the sphere).
    """
    x = _require_attraction(manifold, x)
    s = np.asarray(s, dtype=np.float64)
    if mode == "analytic":
        return manifold.d2phi_contract(x, s)
    f = _phi_eval(manifold)
    if mode == "numeric":
        return _second_diff(f, x, s, FD_STEP_SECOND)
    if mode == "richardson":
        h = 2.0 * FD_STEP_SECOND
        coarse = _second_diff(f, x, s, h)
        fine = _second_diff(f, x, s, h / 2.0)
        return (4.0 * fine - coarse) / 3.0
    raise ValueError(f"unknown phi_second mode {mode!r}")


# ---------------------------------------------------------------------------
# Slow SDE on the manifold
# ---------------------------------------------------------------------------


def _slow_drift(manifold: ManifoldSpec, noise: NoiseModel, x: np.ndarray) -> np.ndarray:
    """(1/2) d2Phi(x)[Sigma(x)] vectorized over paths.

    The contraction is linear in Sigma, so a state-scaled covariance
    base * gain(x) reduces to scaling the base contraction per path.
    """
    if isinstance(noise, StateScaledGaussian):
        r = np.minimum(np.linalg.norm(x, axis=-1), 1e3)
        gain = 1.0 + noise.radial_gain * r * r
        contr = manifold.d2phi_contract(x, noise.base)
        return 0.5 * contr * gain[..., None]
    sigma = noise.covariance(x[0] if x.ndim > 1 else x)
    return 0.5 * manifold.d2phi_contract(x, sigma)


def _integrate_slow(
    spec: SdeSpec, x0: np.ndarray, seed: int, n_paths: int, traj0: int, record_every: int
) -> SdeBatch:
    manifold = spec.manifold
    noise = spec.noise
    x0 = _require_attraction(manifold, x0)
    lam = _as_time_fn(spec.lam)
    key128 = rng.philox_key(seed)
    d = manifold.dim
    n_steps = spec.n_steps
    dt = spec.dt
    sqrt_dt = np.sqrt(dt)

    x = np.tile(manifold.phi_analytic(x0), (n_paths, 1))
    rec_idx = list(range(0, n_steps + 1, record_every))
    if rec_idx[-1] != n_steps:
        rec_idx.append(n_steps)
    times = np.array([i * dt for i in rec_idx])
    states = np.empty((len(rec_idx), n_paths, d))
    rec_pos = 0
    if rec_idx[0] == 0:
        states[0] = x
        rec_pos = 1

    max_proj = 0.0
    for k in range(n_steps):
        lam_t = lam(k * dt)
        z = rng.normal_block(key128, k, d, traj0=traj0, n_traj=n_paths,
                             stream=rng.STREAM_BROWNIAN)
        dw = noise.apply_half(x, z) * sqrt_dt
        x = x + lam_t * manifold.dphi_apply(x, dw) + (lam_t * lam_t * dt) * _slow_drift(
            manifold, noise, x
        )
        projected = manifold.phi_analytic(x)
        max_proj = max(max_proj, float(np.max(np.linalg.norm(x - projected, axis=1))))
        x = projected
        if rec_pos < len(rec_idx) and k + 1 == rec_idx[rec_pos]:
            states[rec_pos] = x
            rec_pos += 1
    return SdeBatch(
        times=times, states=states, seed=seed, traj0=traj0, max_projection_dist=max_proj
    )


def integrate_slow_sde(
    manifold: ManifoldSpec,
    lam: Union[float, TimeFn],
    x0: np.ndarray,
    seed: int,
    horizon: float,
    dt: float,
    noise: NoiseModel,
    n_paths: int = 1,
    traj0: int = 0,
    record_every: int = 1,
) -> SdeBatch:
    """Convenience wrapper building the slow-SDE spec and integrating it."""
    spec = SdeSpec(
        kind="slow", dt=dt, horizon=horizon, manifold=manifold, noise=noise, lam=lam
    )
    return integrate_paths(spec, x0, seed, n_paths=n_paths, traj0=traj0,
                           record_every=record_every)
