"""Seed-ensemble execution engine.

Runs one or several optimizers over a common ensemble of seeds, in lockstep
with shared per-(trajectory, step) noise keys (common random numbers), and
streams per-step test-function statistics.

Determinism contract: seeds are partitioned into fixed-size blocks, each
block's trajectories are a pure function of (root seed, block), and all
reductions fold blocks in index order in the coordinating thread.  The
worker pool size therefore cannot change any reported number, only the wall
time.  Divergent trajectories (norm beyond the guard radius) are frozen,
excluded from every statistic from the step they diverge, and counted.

Bootstrap confidence intervals use one fixed multinomial weight matrix per
run, shared across methods, steps, and the paired method-difference
statistic, so all CIs and distances are reproducible and properly paired.
"""

from __future__ import annotations

import concurrent.futures
import os
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from . import rng
from .analysis import TestFunction, WeakDistance, bootstrap_weights, _percentile_ci
from .ngos import OracleConfig, sample_block
from .optim import GUARD_RADIUS, Schedule, StandardSchedule

__all__ = [
    "MethodSpec",
    "MomentumInit",
    "EnsembleConfig",
    "MethodStats",
    "EnsembleResult",
    "AllSeedsDivergedError",
    "run_ensemble",
    "resolve_threads",
]

BLOCK_SIZE = 1024


class AllSeedsDivergedError(RuntimeError):
    """Raised when no trajectory of some method survives to the horizon."""


@dataclass(frozen=True)
class MethodSpec:
    """One optimizer to run: kind is sgd | sgdm | sgdm_standard."""

    name: str
    kind: str
    schedule: Union[Schedule, StandardSchedule]

    def __post_init__(self):
        if self.kind not in ("sgd", "sgdm", "sgdm_standard"):
            raise ValueError(f"unknown method kind {self.kind!r}")
        need_standard = self.kind == "sgdm_standard"
        if need_standard != isinstance(self.schedule, StandardSchedule):
            raise ValueError("schedule type does not match the method kind")


@dataclass(frozen=True)
class MomentumInit:
    """m_0 law: zero by default, or N(mean, std^2 I) drawn per seed."""

    mode: str = "zero"  # zero | gaussian
    mean: Optional[np.ndarray] = None
    std: float = 0.0

    def __post_init__(self):
        if self.mode not in ("zero", "gaussian"):
            raise ValueError(f"unknown momentum init {self.mode!r}")
        if self.mode == "gaussian" and self.mean is None:
            raise ValueError("gaussian momentum init requires a mean")
        if self.mean is not None:
            object.__setattr__(self, "mean", np.asarray(self.mean, dtype=np.float64))


@dataclass(frozen=True)
class EnsembleConfig:
    oracle: OracleConfig
    methods: tuple[MethodSpec, ...]
    x0: np.ndarray
    n_steps: int
    n_seeds: int
    seed: int
    test_functions: tuple[TestFunction, ...]
    m_init: MomentumInit = MomentumInit()
    distance_pairs: tuple[tuple[str, str], ...] = ()
    n_boot: int = 1000
    boot_seed: int = 12345
    threads: Optional[int] = None
    track_update_moments: bool = False
    compute_step_cis: bool = True
    retain_final_h: bool = False

    def __post_init__(self):
        if self.n_seeds < 2:
            raise ValueError("an ensemble needs at least two seeds")
        if self.n_steps < 1:
            raise ValueError("n_steps must be positive")
        names = [m.name for m in self.methods]
        if len(set(names)) != len(names):
            raise ValueError("method names must be unique")
        for a, b in self.distance_pairs:
            if a not in names or b not in names:
                raise ValueError(f"distance pair ({a}, {b}) references unknown methods")
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=np.float64))
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "test_functions", tuple(self.test_functions))
        object.__setattr__(self, "distance_pairs", tuple(self.distance_pairs))


@dataclass
class MethodStats:
    """Per-step ensemble statistics for one method."""

    name: str
    steps: np.ndarray  # (K+1,)
    h_names: list[str]
    means: np.ndarray  # (K+1, H); NaN where no survivor
    ci_lo: Optional[np.ndarray]
    ci_hi: Optional[np.ndarray]
    alive: np.ndarray  # (K+1,) survivors per step
    n_diverged: int
    update_mean: Optional[np.ndarray] = None  # (K, d)
    update_var: Optional[np.ndarray] = None  # (K, d)


@dataclass
class EnsembleResult:
    methods: dict[str, MethodStats]
    distances: dict[tuple[str, str], WeakDistance]
    n_seeds: int
    seed: int
    # per-seed h values at the final step (zeroed where diverged), when retained
    final_h: Optional[dict[str, np.ndarray]] = None
    final_alive: Optional[dict[str, np.ndarray]] = None


def resolve_threads(requested: Optional[int] = None) -> int:
    """--threads flag, MOMLAB_THREADS env var, then available parallelism."""
    if requested is not None and requested > 0:
        return requested
    env = os.environ.get("MOMLAB_THREADS")
    if env:
        try:
            v = int(env)
            if v > 0:
                return v
        except ValueError:
            pass
    return os.cpu_count() or 1


def _step_method(kind, x, m, g, schedule, k):
    if kind == "sgd":
        return x - schedule.eta_of(k) * g, m
    if kind == "sgdm":
        beta = schedule.beta_of(k)
        m = beta * m + (1.0 - beta) * g
        return x - schedule.eta_of(k) * m, m
    m = schedule.mu_of(k) * m + (1.0 - schedule.tau_of(k)) * g
    return x - schedule.gamma_of(k) * m, m


def _run_block(config: EnsembleConfig, traj0: int, n_b: int):
    """Integrate one block of seeds for every method; returns per-seed stats.

    h values are zeroed from the step a trajectory diverges (its row of the
    alive mask goes to 0), so downstream sums and bootstrap contractions can
    treat the arrays as plain dense data.
    """
    oracle = config.oracle
    d = oracle.dim
    key128 = rng.philox_key(config.seed)
    n_methods = len(config.methods)
    h_funcs = config.test_functions
    n_h = len(h_funcs)
    k_steps = config.n_steps

    xs = [np.tile(config.x0, (n_b, 1)) for _ in range(n_methods)]
    if config.m_init.mode == "gaussian":
        z0 = rng.normal_block(key128, 0, d, traj0=traj0, n_traj=n_b,
                              stream=rng.STREAM_INIT)
        m_init = config.m_init.mean + config.m_init.std * z0
    else:
        m_init = np.zeros((n_b, d))
    ms = [m_init.copy() for _ in range(n_methods)]
    alive = [np.ones(n_b, dtype=bool) for _ in range(n_methods)]

    h_out = [np.zeros((n_b, k_steps + 1, n_h)) for _ in range(n_methods)]
    alive_out = [np.zeros((n_b, k_steps + 1)) for _ in range(n_methods)]
    track = config.track_update_moments
    usum = [np.zeros((k_steps, d)) for _ in range(n_methods)] if track else None
    usqsum = [np.zeros((k_steps, d)) for _ in range(n_methods)] if track else None

    def record(step: int) -> None:
        for i in range(n_methods):
            hv = np.stack([f(xs[i]) for f in h_funcs], axis=1)
            h_out[i][:, step, :] = np.where(alive[i][:, None], hv, 0.0)
            alive_out[i][:, step] = alive[i]

    with np.errstate(over="ignore", invalid="ignore"):
        record(0)
        for k in range(k_steps):
            for i, meth in enumerate(config.methods):
                g = sample_block(oracle, xs[i], key128, k, traj0=traj0)
                x_new, m_new = _step_method(meth.kind, xs[i], ms[i], g, meth.schedule, k)
                ok = np.isfinite(x_new).all(axis=1) & (
                    np.linalg.norm(np.where(np.isfinite(x_new), x_new, 0.0), axis=1)
                    <= GUARD_RADIUS
                )
                if track:
                    delta = np.where((alive[i] & ok)[:, None], x_new - xs[i], 0.0)
                    usum[i][k] = delta.sum(axis=0)
                    usqsum[i][k] = (delta * delta).sum(axis=0)
                xs[i] = np.where(alive[i][:, None], x_new, xs[i])
                ms[i] = np.where(alive[i][:, None], m_new, ms[i])
                alive[i] = alive[i] & ok
            record(k + 1)
    return h_out, alive_out, usum, usqsum


def run_ensemble(config: EnsembleConfig) -> EnsembleResult:
    """Run the ensemble and reduce statistics deterministically.

    The reported numbers depend only on (config, seed, n_seeds): blocks have
    a fixed size and are folded in order, whatever the worker count.
    """
    n = config.n_seeds
    k_steps = config.n_steps
    h_funcs = config.test_functions
    n_h = len(h_funcs)
    names = [m.name for m in config.methods]
    n_methods = len(names)
    blocks = [(b, min(BLOCK_SIZE, n - b)) for b in range(0, n, BLOCK_SIZE)]

    w = bootstrap_weights(n, config.n_boot, config.boot_seed) if (
        config.compute_step_cis or config.distance_pairs
    ) else None

    sums = [np.zeros((k_steps + 1, n_h)) for _ in range(n_methods)]
    alive_sums = [np.zeros(k_steps + 1) for _ in range(n_methods)]
    g_h = [np.zeros((config.n_boot, (k_steps + 1) * n_h)) for _ in range(n_methods)] \
        if config.compute_step_cis else None
    g_alive = [np.zeros((config.n_boot, k_steps + 1)) for _ in range(n_methods)] \
        if config.compute_step_cis else None
    pair_idx = [(names.index(a), names.index(b)) for a, b in config.distance_pairs]
    diff_sums = [np.zeros((k_steps + 1, n_h)) for _ in pair_idx]
    pair_alive_sums = [np.zeros(k_steps + 1) for _ in pair_idx]
    g_diff = [np.zeros((config.n_boot, (k_steps + 1) * n_h)) for _ in pair_idx]
    g_pair_alive = [np.zeros((config.n_boot, k_steps + 1)) for _ in pair_idx]
    usum_tot = [np.zeros((k_steps, config.oracle.dim)) for _ in range(n_methods)]
    usq_tot = [np.zeros((k_steps, config.oracle.dim)) for _ in range(n_methods)]
    fin_h = [np.zeros((n, n_h)) for _ in range(n_methods)] if config.retain_final_h else None
    fin_alive = [np.zeros(n) for _ in range(n_methods)] if config.retain_final_h else None

    def fold(traj0: int, n_b: int, payload) -> None:
        h_out, alive_out, usum, usqsum = payload
        wb = w[:, traj0 : traj0 + n_b] if w is not None else None
        for i in range(n_methods):
            sums[i] += h_out[i].sum(axis=0)
            alive_sums[i] += alive_out[i].sum(axis=0)
            if config.compute_step_cis:
                g_h[i] += wb @ h_out[i].reshape(n_b, -1)
                g_alive[i] += wb @ alive_out[i]
            if usum is not None:
                usum_tot[i] += usum[i]
                usq_tot[i] += usqsum[i]
            if config.retain_final_h:
                fin_h[i][traj0 : traj0 + n_b] = h_out[i][:, -1, :]
                fin_alive[i][traj0 : traj0 + n_b] = alive_out[i][:, -1]
        for p, (ia, ib) in enumerate(pair_idx):
            both = alive_out[ia] * alive_out[ib]  # (n_b, K+1)
            diff = h_out[ia] * alive_out[ib][:, :, None] - h_out[ib] * alive_out[ia][:, :, None]
            diff_sums[p] += diff.sum(axis=0)
            pair_alive_sums[p] += both.sum(axis=0)
            g_diff[p] += wb @ diff.reshape(n_b, -1)
            g_pair_alive[p] += wb @ both

    n_workers = resolve_threads(config.threads)
    if n_workers <= 1 or len(blocks) == 1:
        for traj0, n_b in blocks:
            fold(traj0, n_b, _run_block(config, traj0, n_b))
    else:
        with concurrent.futures.ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = [pool.submit(_run_block, config, traj0, n_b) for traj0, n_b in blocks]
            for (traj0, n_b), fut in zip(blocks, futures):
                fold(traj0, n_b, fut.result())

    # assemble per-method stats
    steps = np.arange(k_steps + 1)
    h_names = [f.name for f in h_funcs]
    methods_out: dict[str, MethodStats] = {}
    for i, name in enumerate(names):
        alive_i = alive_sums[i]
        if alive_i[-1] == 0:
            raise AllSeedsDivergedError(
                f"all {n} trajectories of method {name!r} diverged before step {k_steps}"
            )
        with np.errstate(invalid="ignore", divide="ignore"):
            means = sums[i] / alive_i[:, None]
        ci_lo = ci_hi = None
        if config.compute_step_cis:
            with np.errstate(invalid="ignore", divide="ignore"):
                boot = g_h[i].reshape(config.n_boot, k_steps + 1, n_h) / g_alive[i][:, :, None]
            lo, hi = np.percentile(boot, [2.5, 97.5], axis=0)
            ci_lo, ci_hi = lo, hi
        upd_mean = upd_var = None
        if config.track_update_moments:
            counts = alive_i[1:, None]
            upd_mean = usum_tot[i] / counts
            upd_var = usq_tot[i] / counts - upd_mean**2
        methods_out[name] = MethodStats(
            name=name,
            steps=steps,
            h_names=h_names,
            means=means,
            ci_lo=ci_lo,
            ci_hi=ci_hi,
            alive=alive_i.astype(np.int64),
            n_diverged=int(n - alive_i[-1]),
            update_mean=upd_mean,
            update_var=upd_var,
        )

    distances: dict[tuple[str, str], WeakDistance] = {}
    for p, (a, b) in enumerate(config.distance_pairs):
        with np.errstate(invalid="ignore", divide="ignore"):
            mean_diff = diff_sums[p] / pair_alive_sums[p][:, None]
        valid = pair_alive_sums[p] > 0
        abs_diff = np.where(valid[:, None], np.abs(mean_diff), -np.inf)
        k_star, h_star = np.unravel_index(np.argmax(abs_diff), abs_diff.shape)
        with np.errstate(invalid="ignore", divide="ignore"):
            boot = g_diff[p].reshape(config.n_boot, k_steps + 1, n_h) / g_pair_alive[p][
                :, :, None
            ]
        boot = np.where(valid[None, :, None], np.abs(boot), -np.inf)
        d_stars = np.max(boot.reshape(config.n_boot, -1), axis=1)
        lo, hi = _percentile_ci(d_stars)
        distances[(a, b)] = WeakDistance(
            float(abs_diff[k_star, h_star]), lo, hi, int(k_star), h_names[h_star]
        )

    return EnsembleResult(methods=methods_out, distances=distances, n_seeds=n, seed=config.seed)
