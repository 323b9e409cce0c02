"""Trajectory generation and moment estimation.

Euler-Maruyama integration of the plant SDE (scalar Brownian motion),
classical fourth-order integration for deterministic systems, seeded
probing signals, streamed trajectory ensembles with persistence, exact
moment propagation (the oracle the data pipeline is tested against),
and Monte Carlo average-cost estimation.

Ensemble reductions are centered on path 0 and run in a fixed order so
that repeated runs with the same configuration are bit-identical, and
so that a zero-diffusion ensemble reduces exactly to its single path.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .errors import Blowup, ConfigError
from .model import ParameterizedSystem, ReferenceGenerator, StochasticSystem, is_stabilizing
from .symquad import unvech, vech_indices

__all__ = [
    "SimConfig", "PathRecord", "ProbingSignal", "EnsembleDataset",
    "MomentTrajectory", "TrackingRun", "probing_signal", "discounted_input",
    "simulate_sde_path",
    "simulate_ode", "run_ensemble", "propagate_moments_exact",
    "reference_trajectory", "estimate_average_cost", "CostEstimate",
    "simulate_tracking", "save_dataset", "load_dataset", "export_dataset_csv",
]

_BLOWUP_NORM = 1e8
_CHUNK_STEPS = 2048
_MAGIC = b"SLQT"
_DATASET_SCHEMA = "slqt-dataset/1"


def _is_multiple(x: float, h: float) -> bool:
    k = round(x / h)
    return abs(k * h - x) <= 1e-9 * max(1.0, abs(x))


@dataclass(frozen=True)
class SimConfig:
    """Grid and sampling layout shared by simulation and learning.

    h is the integration step, sample_period the spacing T_s between the
    l sample instants t_i = t1 + i*T_s, and window the length T of the
    moment integrals taken from each t_i. Simulation always starts at
    t=0 and must extend to the last window end t_l + T.
    """

    h: float = 1e-4
    sample_period: float = 1e-3
    window: float = 0.1
    t1: float = 0.0
    l: int = 5001
    n_paths: int = 2000
    base_seed: int = 0

    def __post_init__(self):
        if self.h <= 0.0:
            raise ConfigError("h must be positive")
        if self.sample_period < self.h:
            raise ConfigError("sample_period must be at least h")
        for name, x in (("sample_period", self.sample_period),
                        ("window", self.window), ("t1", self.t1)):
            if x < 0.0 or not _is_multiple(x, self.h):
                raise ConfigError(f"{name}={x} must be a nonnegative multiple of h={self.h}")
        if self.window <= 0.0:
            raise ConfigError("window must be positive")
        if self.l < 1:
            raise ConfigError("l must be at least 1")
        if self.n_paths < 1:
            raise ConfigError("n_paths must be at least 1")

    @property
    def duration(self) -> float:
        return self.t1 + (self.l - 1) * self.sample_period + self.window

    @property
    def n_steps(self) -> int:
        return round(self.duration / self.h)

    def grid(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.h

    def sample_times(self) -> np.ndarray:
        return self.t1 + np.arange(self.l) * self.sample_period

    def to_dict(self) -> dict:
        return {"h": self.h, "sample_period": self.sample_period,
                "window": self.window, "t1": self.t1, "l": self.l,
                "n_paths": self.n_paths, "base_seed": self.base_seed}

    @staticmethod
    def from_dict(d: dict) -> "SimConfig":
        return SimConfig(**{k: d[k] for k in ("h", "sample_period", "window",
                                              "t1", "l", "n_paths", "base_seed")})


@dataclass(frozen=True)
class PathRecord:
    """One simulated trajectory on a uniform grid."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    y: np.ndarray | None
    seed: int | None

    def __post_init__(self):
        if not np.isfinite(self.x).all():
            raise Blowup("trajectory contains non-finite values")


@dataclass(frozen=True)
class ProbingSignal:
    """u(t) = a * sum_j sin(omega_j t) with frequencies drawn once.

    Evaluation is a pure function of t; the same seed always reproduces
    the same frequencies and therefore the same signal.
    """

    amplitude: float
    count: int
    freq_range: tuple[float, float]
    seed: int
    omegas: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count must be at least 1")
        lo, hi = self.freq_range
        if hi < lo:
            raise ConfigError("frequency range must be ordered")
        rng = np.random.Generator(np.random.Philox(self.seed))
        object.__setattr__(self, "omegas", rng.uniform(lo, hi, self.count))

    @property
    def bound(self) -> float:
        return abs(self.amplitude) * self.count

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        vals = self.amplitude * np.sin(t[..., None] * self.omegas).sum(axis=-1)
        return float(vals) if vals.ndim == 0 else vals


def probing_signal(amplitude: float, count: int, freq_range, seed: int) -> ProbingSignal:
    return ProbingSignal(amplitude, count, (float(freq_range[0]), float(freq_range[1])), seed)


def discounted_input(fn, rate: float):
    """Compose a time-function with the exponential weight exp(-rate*t)."""
    if fn is None:
        return None

    def weighted(t):
        t_arr = np.asarray(t, dtype=float)
        v = np.asarray(fn(t), dtype=float)
        w = np.exp(-rate * t_arr)
        return v * w[..., None] if v.ndim == w.ndim + 1 else v * w

    return weighted


def _coerce_system(sys) -> StochasticSystem:
    if isinstance(sys, ParameterizedSystem):
        return sys.as_system()
    return sys


def _sample_input(fn, t: np.ndarray, m: int) -> np.ndarray:
    """Evaluate a time-function on the grid as an (N, m) array."""
    if fn is None:
        return np.zeros((t.size, m))
    try:
        v = np.asarray(fn(t), dtype=float)
    except Exception:
        v = None
    if v is not None and v.shape == t.shape and m == 1:
        return v[:, None]
    if v is not None and v.shape == (t.size, m):
        return v
    rows = np.empty((t.size, m))
    for k, tk in enumerate(t):
        rows[k] = np.atleast_1d(np.asarray(fn(tk), dtype=float))
    return rows


def _em_chunk(X, u, dW, k0, mats, sqrt_h, h, out=None):
    """Advance all paths through one chunk of Euler-Maruyama steps.

    X is (p, n) and is updated in place step by step; ``out`` receives
    the post-step states when the caller wants the full trajectory.
    """
    At, Bt, Ct, Dt = mats
    L = dW.shape[1]
    for j in range(L):
        uk = u[k0 + j]
        drift = X @ At + uk @ Bt
        diff = X @ Ct + uk @ Dt
        X += h * drift + (sqrt_h * dW[:, j])[:, None] * diff
        if out is not None:
            out[k0 + j + 1] = X[0]
    return X


def _check_finite(X, k, sys_name="state"):
    norms = np.linalg.norm(X, axis=1)
    bad = ~np.isfinite(norms) | (norms > _BLOWUP_NORM)
    if bad.any():
        p = int(np.argmax(bad))
        raise Blowup(f"{sys_name} norm exceeded {_BLOWUP_NORM:.0e}",
                     path_index=p, time=k)


def simulate_sde_path(sys, input, x0, config: SimConfig, seed: int) -> PathRecord:
    """One Euler-Maruyama path of dx = (Ax+Bu)dt + (Cx+Du)dw.

    Bit-identical to path ``seed - base_seed`` of a run_ensemble call
    with the same configuration and input.
    """
    sys = _coerce_system(sys)
    t = config.grid()
    u = _sample_input(input, t, sys.m)
    x0 = np.asarray(x0, dtype=float).ravel()
    N = config.n_steps
    xs = np.empty((N + 1, sys.n))
    xs[0] = x0
    X = x0[None, :].copy()
    rng = np.random.Generator(np.random.Philox(seed))
    mats = (sys.A.T.copy(), sys.B.T.copy(), sys.C.T.copy(), sys.D.T.copy())
    sqrt_h = np.sqrt(config.h)
    k = 0
    while k < N:
        L = min(_CHUNK_STEPS, N - k)
        dW = rng.standard_normal((1, L))
        X = _em_chunk(X, u, dW, k, mats, sqrt_h, config.h, out=xs)
        k += L
        _check_finite(X, k)
    y = xs @ sys.H.T
    return PathRecord(t, xs, u, y, seed)


def simulate_ode(A_sys, input, x0, config: SimConfig) -> PathRecord:
    """Classical fourth-order integration of x' = A x + g(t)."""
    A = np.asarray(A_sys, dtype=float)
    n = A.shape[0]
    N = config.n_steps
    h = config.h
    t_half = np.arange(2 * N + 1) * (h / 2.0)
    g = _sample_input(input, t_half, n)
    x0 = np.asarray(x0, dtype=float).ravel()
    xs = np.empty((N + 1, n))
    xs[0] = x0
    x = x0.copy()
    for k in range(N):
        g0, gm, g1 = g[2 * k], g[2 * k + 1], g[2 * k + 2]
        k1 = A @ x + g0
        k2 = A @ (x + 0.5 * h * k1) + gm
        k3 = A @ (x + 0.5 * h * k2) + gm
        k4 = A @ (x + h * k3) + g1
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        xs[k + 1] = x
        if k % 4096 == 0 and (not np.isfinite(x).all() or np.linalg.norm(x) > _BLOWUP_NORM):
            raise Blowup("deterministic state exceeded bound", time=(k + 1) * h)
    if not np.isfinite(xs).all():
        raise Blowup("deterministic state exceeded bound")
    return PathRecord(np.arange(N + 1) * h, xs, g[::2], None, None)


def reference_trajectory(reference: ReferenceGenerator, t: np.ndarray):
    """Exact (x_d, y_d) on the grid via the eigendecomposition of A_d.

    Valid because reference generators are semisimple with imaginary
    spectrum; accuracy is checked against the fourth-order integrator
    in the test suite.
    """
    lam, V = np.linalg.eig(reference.A_d)
    c = np.linalg.solve(V, reference.x_d0.astype(complex))
    E = np.exp(np.outer(t, lam))
    x_d = np.real(E * c[None, :] @ V.T)
    return x_d, x_d @ reference.H_d.T


@dataclass(frozen=True)
class EnsembleDataset:
    """Streamed ensemble reductions on the simulation grid.

    mean_x / mean_xx / u are the sufficient statistics the learning
    pipeline needs (mean_xx holds the upper triangle of E[x x'] row by
    row); se_xx carries per-entry standard errors for diagnostics. When
    ``discount`` is set the stored trajectories are the transformed
    ones: x and u scaled by exp(-discount * t) and second moments by
    the square of that factor.
    """

    config: SimConfig
    plant_digest: str
    mean_x: np.ndarray
    mean_xx: np.ndarray
    u: np.ndarray
    se_xx: np.ndarray | None = None
    x_d: np.ndarray | None = None
    y_d: np.ndarray | None = None
    discount: float | None = None
    created: str = ""

    @property
    def t(self) -> np.ndarray:
        return self.config.grid()

    @property
    def n(self) -> int:
        return self.mean_x.shape[1]


def run_ensemble(plant, input, x0, config: SimConfig, discount: float | None = None,
                 reference: ReferenceGenerator | None = None,
                 with_se: bool = True) -> EnsembleDataset:
    """Simulate config.n_paths Euler-Maruyama paths and stream reductions.

    Path p uses seed base_seed + p with an independent counter-based
    generator; all paths share the same deterministic input. Reductions
    are centered on path 0 in fixed path order, so a diffusion-free
    plant reproduces its single path bit-exactly.
    """
    sys = _coerce_system(plant)
    n, m = sys.n, sys.m
    t = config.grid()
    N = config.n_steps
    u = _sample_input(input, t, m)
    x0 = np.asarray(x0, dtype=float).ravel()
    p = config.n_paths
    X = np.tile(x0, (p, 1))
    gens = [np.random.Generator(np.random.Philox(config.base_seed + i)) for i in range(p)]
    r_idx, c_idx = vech_indices(n)
    nn2 = r_idx.size
    mean_x = np.empty((N + 1, n))
    mean_xx = np.empty((N + 1, nn2))
    se_xx = np.empty((N + 1, nn2)) if with_se and p > 1 else None

    def record(k, X):
        x_ref = X[0]
        mean_x[k] = x_ref + (X - x_ref).mean(axis=0)
        Pr = X[:, r_idx] * X[:, c_idx]
        p_ref = Pr[0]
        dP = Pr - p_ref
        dmean = dP.mean(axis=0)
        mean_xx[k] = p_ref + dmean
        if se_xx is not None:
            var = np.maximum((dP * dP).mean(axis=0) - dmean * dmean, 0.0)
            se_xx[k] = np.sqrt(var / p)

    record(0, X)
    mats = (sys.A.T.copy(), sys.B.T.copy(), sys.C.T.copy(), sys.D.T.copy())
    sqrt_h = np.sqrt(config.h)
    At, Bt, Ct, Dt = mats
    k = 0
    while k < N:
        L = min(_CHUNK_STEPS, N - k)
        dW = np.empty((p, L))
        for i, g in enumerate(gens):
            dW[i] = g.standard_normal(L)
        for j in range(L):
            uk = u[k + j]
            drift = X @ At + uk @ Bt
            diff = X @ Ct + uk @ Dt
            X += config.h * drift + (sqrt_h * dW[:, j])[:, None] * diff
            record(k + j + 1, X)
        k += L
        _check_finite(X, k)

    x_d = y_d = None
    if reference is not None:
        x_d, y_d = reference_trajectory(reference, t)
    if discount is not None:
        scale = np.exp(-discount * t)
        mean_x = mean_x * scale[:, None]
        u = u * scale[:, None]
        mean_xx = mean_xx * (scale * scale)[:, None]
        if se_xx is not None:
            se_xx = se_xx * (scale * scale)[:, None]
    return EnsembleDataset(config=config, plant_digest=sys.digest(),
                           mean_x=mean_x, mean_xx=mean_xx, u=u, se_xx=se_xx,
                           x_d=x_d, y_d=y_d, discount=discount,
                           created=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()))


@dataclass(frozen=True)
class MomentTrajectory:
    """Exact mean and second-moment trajectories on a uniform grid.

    Shape-compatible with EnsembleDataset where the learning pipeline
    is concerned (t, mean_x, mean_xx, u, x_d, y_d); mean_xx rows hold
    the upper triangle of E[x x'].
    """

    t: np.ndarray
    mean_x: np.ndarray
    mean_xx: np.ndarray
    u: np.ndarray
    x_d: np.ndarray | None = None
    y_d: np.ndarray | None = None
    discount: float | None = None

    @property
    def n(self) -> int:
        return self.mean_x.shape[1]

    def second_moment(self, k: int) -> np.ndarray:
        return unvech(self.mean_xx[k], self.n)


def _moment_rhs(sys: StochasticSystem, mvec, G, uk):
    A, B, C, D = sys.A, sys.B, sys.C, sys.D
    Bu = B @ uk
    Du = D @ uk
    dm = A @ mvec + Bu
    AG = A @ G
    outer_bm = np.outer(Bu, mvec)
    CmD = C @ np.outer(mvec, Du)
    dG = (AG + AG.T + outer_bm + outer_bm.T + C @ G @ C.T
          + CmD + CmD.T + np.outer(Du, Du))
    return dm, dG


def propagate_moments_exact(plant, input, x0, config: SimConfig,
                            method: str = "rk4", refine: int = 1,
                            reference: ReferenceGenerator | None = None,
                            rtol: float = 1e-12, atol: float = 1e-14) -> MomentTrajectory:
    """Integrate the closed mean/second-moment ODEs of the plant SDE.

    m' = A m + B u and
    G' = A G + G A' + B u m' + m u' B' + C G C' + C m u' D' + D u m' C' + D u u' D'
    with G = E[x x']. This is the oracle the sampled-data pipeline is
    validated against. method='rk4' steps on the config grid at O(h^4);
    method='adaptive' integrates with a high-order adaptive scheme and
    evaluates the dense solution on the config grid refined by
    ``refine`` (step h/refine), which is what tight quadrature
    tolerances downstream need.
    """
    sys = _coerce_system(plant)
    n, m = sys.n, sys.m
    x0 = np.asarray(x0, dtype=float).ravel()
    r_idx, c_idx = vech_indices(n)
    if method == "rk4":
        if refine != 1:
            raise ConfigError("refine applies to the adaptive method only")
        N = config.n_steps
        h = config.h
        t = config.grid()
        t_half = np.arange(2 * N + 1) * (h / 2.0)
        u_half = _sample_input(input, t_half, m)
        mean_x = np.empty((N + 1, n))
        mean_xx = np.empty((N + 1, r_idx.size))
        mv = x0.copy()
        G = np.outer(x0, x0)
        mean_x[0] = mv
        mean_xx[0] = G[r_idx, c_idx]
        for k in range(N):
            u0, um, u1 = u_half[2 * k], u_half[2 * k + 1], u_half[2 * k + 2]
            dm1, dG1 = _moment_rhs(sys, mv, G, u0)
            dm2, dG2 = _moment_rhs(sys, mv + 0.5 * h * dm1, G + 0.5 * h * dG1, um)
            dm3, dG3 = _moment_rhs(sys, mv + 0.5 * h * dm2, G + 0.5 * h * dG2, um)
            dm4, dG4 = _moment_rhs(sys, mv + h * dm3, G + h * dG3, u1)
            mv = mv + (h / 6.0) * (dm1 + 2 * dm2 + 2 * dm3 + dm4)
            G = G + (h / 6.0) * (dG1 + 2 * dG2 + 2 * dG3 + dG4)
            mean_x[k + 1] = mv
            mean_xx[k + 1] = G[r_idx, c_idx]
            if not np.isfinite(mv).all():
                raise Blowup("moment propagation diverged", time=(k + 1) * h)
        u = u_half[::2]
    elif method == "adaptive":
        if refine < 1:
            raise ConfigError("refine must be at least 1")
        nn2 = r_idx.size

        def pack(mv, G):
            return np.concatenate([mv, G[r_idx, c_idx]])

        def rhs(tt, z):
            mv = z[:n]
            G = unvech(z[n:], n)
            uk = np.atleast_1d(np.asarray(input(tt), dtype=float)) if input is not None \
                else np.zeros(m)
            dm, dG = _moment_rhs(sys, mv, G, uk)
            return np.concatenate([dm, dG[r_idx, c_idx]])

        z0 = pack(x0, np.outer(x0, x0))
        sol = solve_ivp(rhs, (0.0, config.duration), z0, method="DOP853",
                        rtol=rtol, atol=atol, dense_output=True)
        if not sol.success:
            raise Blowup(f"adaptive moment propagation failed: {sol.message}")
        h_f = config.h / refine
        N_f = config.n_steps * refine
        t = np.arange(N_f + 1) * h_f
        mean_x = np.empty((N_f + 1, n))
        mean_xx = np.empty((N_f + 1, nn2))
        chunk = 200_000
        for a in range(0, N_f + 1, chunk):
            b = min(a + chunk, N_f + 1)
            Z = sol.sol(t[a:b])
            mean_x[a:b] = Z[:n].T
            mean_xx[a:b] = Z[n:].T
        u = _sample_input(input, t, m)
    else:
        raise ConfigError(f"unknown method {method!r}")
    x_d = y_d = None
    if reference is not None:
        x_d, y_d = reference_trajectory(reference, t)
    return MomentTrajectory(t=t, mean_x=mean_x, mean_xx=mean_xx, u=u,
                            x_d=x_d, y_d=y_d)


@dataclass(frozen=True)
class CostEstimate:
    """Monte Carlo estimate of the long-run average tracking cost."""

    mean: float
    se: float
    n_paths: int
    horizon: float

    def __float__(self) -> float:
        return self.mean


def estimate_average_cost(plant, reference: ReferenceGenerator, gains, cost,
                          horizon: float, n_paths: int, seed: int,
                          h: float = 1e-3, x0=None,
                          check_stability: bool = True) -> CostEstimate:
    """Average of (1/T)*integral(|y - y_d|_Q^2 + |u|_R^2) over an ensemble.

    gains is the pair (K, F) of the control law u = -K x - F x_d. The
    closed loop is simulated jointly with the reference by
    Euler-Maruyama; per-path cost integrals use trapezoidal quadrature.
    """
    sys = _coerce_system(plant)
    K = np.asarray(gains[0], dtype=float).reshape(sys.m, sys.n)
    F = np.asarray(gains[1], dtype=float).reshape(sys.m, reference.n_d)
    if check_stability and not is_stabilizing(sys, K):
        raise Blowup("feedback gain is not mean-square stabilizing; "
                     "pass check_stability=False to override")
    n, n_d, m = sys.n, reference.n_d, sys.m
    nz = n + n_d
    A_aug = np.zeros((nz, nz))
    A_aug[:n, :n] = sys.A - sys.B @ K
    A_aug[:n, n:] = -sys.B @ F
    A_aug[n:, n:] = reference.A_d
    C_aug = np.zeros((nz, nz))
    C_aug[:n, :n] = sys.C - sys.D @ K
    C_aug[:n, n:] = -sys.D @ F
    H_err = np.zeros((sys.q, nz))
    H_err[:, :n] = sys.H
    H_err[:, n:] = -reference.H_d
    K_aug = np.hstack([K, F])
    # cost rate z' M z with M = H_err' Q H_err + K_aug' R K_aug
    M = H_err.T @ cost.Q @ H_err + K_aug.T @ cost.R @ K_aug
    N = round(horizon / h)
    if abs(N * h - horizon) > 1e-9 * max(1.0, horizon):
        raise ConfigError("horizon must be a multiple of h")
    z0 = np.zeros(nz)
    if x0 is not None:
        z0[:n] = np.asarray(x0, dtype=float).ravel()
    z0[n:] = reference.x_d0
    Z = np.tile(z0, (n_paths, 1))
    gens = [np.random.Generator(np.random.Philox(seed + i)) for i in range(n_paths)]
    At, Ct, Mt = A_aug.T.copy(), C_aug.T.copy(), M
    sqrt_h = np.sqrt(h)
    acc = np.zeros(n_paths)
    rate = np.einsum("pi,ij,pj->p", Z, Mt, Z)
    k = 0
    while k < N:
        L = min(_CHUNK_STEPS, N - k)
        dW = np.empty((n_paths, L))
        for i, g in enumerate(gens):
            dW[i] = g.standard_normal(L)
        for j in range(L):
            Z += h * (Z @ At) + (sqrt_h * dW[:, j])[:, None] * (Z @ Ct)
            rate_next = np.einsum("pi,ij,pj->p", Z, Mt, Z)
            acc += 0.5 * h * (rate + rate_next)
            rate = rate_next
        k += L
        _check_finite(Z, k, "closed-loop state")
    per_path = acc / horizon
    ref0 = per_path[0]
    d = per_path - ref0
    mean = float(ref0 + d.mean())
    if n_paths > 1:
        var = max(float((d * d).mean() - d.mean() ** 2), 0.0)
        se = float(np.sqrt(var / (n_paths - 1)))
    else:
        se = float("nan")
    return CostEstimate(mean, se, n_paths, horizon)


@dataclass(frozen=True)
class TrackingRun:
    """Ensemble-mean closed-loop tracking trajectories."""

    t: np.ndarray
    y_mean: np.ndarray
    y_d: np.ndarray
    u_mean: np.ndarray
    x_mean: np.ndarray
    x_d: np.ndarray
    switch_times: tuple


def simulate_tracking(plant, A_d, x_d0, schedule, K, x0, h: float,
                      n_paths: int, base_seed: int) -> TrackingRun:
    """Closed-loop tracking with piecewise reference output maps.

    schedule is a list of (H_d, F, duration) segments; the reference
    state x_d evolves continuously under the shared A_d while the
    output map and the feedforward gain switch at segment boundaries.
    """
    sys = _coerce_system(plant)
    A_d = np.asarray(A_d, dtype=float)
    n, m, n_d = sys.n, sys.m, A_d.shape[0]
    K = np.asarray(K, dtype=float).reshape(m, n)
    durations = [seg[2] for seg in schedule]
    steps = [round(d / h) for d in durations]
    N = sum(steps)
    t = np.arange(N + 1) * h
    # reference state, shared across paths, continuous at switches
    lam, V = np.linalg.eig(A_d)
    c = np.linalg.solve(V, np.asarray(x_d0, dtype=complex).ravel())
    x_d = np.real(np.exp(np.outer(t, lam)) * c[None, :] @ V.T)
    y_d = np.empty((N + 1, np.asarray(schedule[0][0]).reshape(-1, n_d).shape[0]))
    u_ff = np.empty((N + 1, m))
    k0 = 0
    bounds = []
    for (H_seg, F_seg, _dur), ns in zip(schedule, steps):
        H_seg = np.asarray(H_seg, dtype=float).reshape(-1, n_d)
        F_seg = np.asarray(F_seg, dtype=float).reshape(m, n_d)
        sl = slice(k0, k0 + ns + 1)
        y_d[sl] = x_d[sl] @ H_seg.T
        u_ff[sl] = -x_d[sl] @ F_seg.T
        bounds.append(k0 * h)
        k0 += ns
    X = np.tile(np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).ravel(),
                (n_paths, 1))
    gens = [np.random.Generator(np.random.Philox(base_seed + i)) for i in range(n_paths)]
    x_mean = np.empty((N + 1, n))
    x_mean[0] = X[0] + (X - X[0]).mean(axis=0)
    Acl_t = (sys.A - sys.B @ K).T.copy()
    Ccl_t = (sys.C - sys.D @ K).T.copy()
    Bt, Dt = sys.B.T.copy(), sys.D.T.copy()
    sqrt_h = np.sqrt(h)
    k = 0
    while k < N:
        L = min(_CHUNK_STEPS, N - k)
        dW = np.empty((n_paths, L))
        for i, g in enumerate(gens):
            dW[i] = g.standard_normal(L)
        for j in range(L):
            uf = u_ff[k + j]
            drift = X @ Acl_t + uf @ Bt
            diff = X @ Ccl_t + uf @ Dt
            X += h * drift + (sqrt_h * dW[:, j])[:, None] * diff
            x_mean[k + j + 1] = X[0] + (X - X[0]).mean(axis=0)
        k += L
        _check_finite(X, k, "tracking state")
    u_mean = u_ff - x_mean @ K.T
    y_mean = x_mean @ sys.H.T
    return TrackingRun(t, y_mean, y_d, u_mean, x_mean, x_d, tuple(bounds[1:]))


# ---------------------------------------------------------------------------
# Dataset persistence: meta.json plus one binary file per array. Binary
# layout: 16-byte header (magic, uint32 rows, uint32 cols, 4 zero bytes)
# followed by column-major little-endian float64 data.

def _write_array(path: str, M: np.ndarray):
    M = np.asarray(M, dtype="<f8")
    if M.ndim == 1:
        M = M[:, None]
    rows, cols = M.shape
    header = _MAGIC + np.array([rows, cols], dtype="<u4").tobytes() + b"\x00" * 4
    body = np.asfortranarray(M).tobytes(order="F")
    with open(path, "wb") as f:
        f.write(header)
        f.write(body)
    return hashlib.sha256(header + body).hexdigest(), rows, cols


def _read_array(path: str, expect_sha: str) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    if hashlib.sha256(raw).hexdigest() != expect_sha:
        raise ConfigError(f"checksum mismatch for {os.path.basename(path)}")
    if raw[:4] != _MAGIC:
        raise ConfigError(f"bad magic in {os.path.basename(path)}")
    rows, cols = np.frombuffer(raw[4:12], dtype="<u4")
    data = np.frombuffer(raw[16:], dtype="<f8")
    if data.size != rows * cols:
        raise ConfigError(f"truncated array file {os.path.basename(path)}")
    return data.reshape((rows, cols), order="F").copy()


_DATASET_ARRAYS = ("mean_x", "mean_xx", "u", "se_xx", "x_d", "y_d")


def save_dataset(ds: EnsembleDataset, dirpath: str) -> None:
    os.makedirs(dirpath, exist_ok=True)
    arrays = {}
    for name in _DATASET_ARRAYS:
        M = getattr(ds, name)
        if M is None:
            continue
        sha, rows, cols = _write_array(os.path.join(dirpath, name + ".bin"), M)
        arrays[name] = {"rows": rows, "cols": cols, "sha256": sha}
    meta = {
        "schema": _DATASET_SCHEMA,
        "created": ds.created,
        "plant_digest": ds.plant_digest,
        "discount": ds.discount,
        "config": ds.config.to_dict(),
        "arrays": arrays,
    }
    with open(os.path.join(dirpath, "meta.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(dirpath: str) -> EnsembleDataset:
    with open(os.path.join(dirpath, "meta.json"), "r", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("schema") != _DATASET_SCHEMA:
        raise ConfigError(f"unsupported dataset schema {meta.get('schema')!r}")
    loaded = {}
    for name, info in meta["arrays"].items():
        loaded[name] = _read_array(os.path.join(dirpath, name + ".bin"), info["sha256"])
    return EnsembleDataset(config=SimConfig.from_dict(meta["config"]),
                           plant_digest=meta["plant_digest"],
                           mean_x=loaded["mean_x"], mean_xx=loaded["mean_xx"],
                           u=loaded["u"], se_xx=loaded.get("se_xx"),
                           x_d=loaded.get("x_d"), y_d=loaded.get("y_d"),
                           discount=meta["discount"], created=meta["created"])


def export_dataset_csv(ds: EnsembleDataset, path: str) -> None:
    """Human-inspectable CSV of the stored grid arrays (17 significant digits)."""
    cols = [("t", ds.t[:, None])]
    for name in _DATASET_ARRAYS:
        M = getattr(ds, name)
        if M is None:
            continue
        cols.append((name, M))
    header = []
    for name, M in cols:
        w = M.shape[1] if M.ndim > 1 else 1
        header.extend([name] if w == 1 else [f"{name}_{j}" for j in range(w)])
    body = np.hstack([np.atleast_2d(M.T).T for _, M in cols])
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(header) + "\n")
        for row in body:
            f.write(",".join(format(v, ".17g") for v in row) + "\n")
