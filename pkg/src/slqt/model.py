"""Plant, reference, cost and hyperparameter types, plus the generalized
Lyapunov operator whose spectral abscissa is the mean-square stability
certificate used everywhere.

The plant is the Ito SDE

    dx = (A x + B u) dt + (C x + D u) dw,    y = H x,

with scalar Brownian motion w. The alpha-parameterized family shifts the
drift to A(alpha) = A - (gamma - alpha)/2 * I; at alpha = gamma it is the
original plant.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .symquad import duplication, vech_indices

__all__ = [
    "StochasticSystem", "ReferenceGenerator", "CostWeights", "BpiHyperParams",
    "ParameterizedSystem", "TrackingProblem", "StabilityCertificate",
    "lyap_matrix", "spectral_abscissa", "is_stabilizing", "zero_gain_threshold",
]


def _as_matrix(x, name: str) -> np.ndarray:
    M = np.asarray(x, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    elif M.ndim == 1:
        M = M.reshape(1, -1)
    if M.ndim != 2:
        raise ConfigError(f"{name} must be a matrix, got ndim={M.ndim}")
    if not np.isfinite(M).all():
        raise ConfigError(f"{name} contains non-finite entries")
    return M


def _check_pd(M: np.ndarray, name: str) -> None:
    if np.abs(M - M.T).max(initial=0.0) > 1e-10 * max(1.0, np.abs(M).max()):
        raise ConfigError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(M).min() <= 0.0:
        raise ConfigError(f"{name} must be positive definite")


@dataclass(frozen=True)
class StochasticSystem:
    """Plant matrices (A, B, C, D, H) with dimensions (n, m, q)."""

    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    H: np.ndarray

    def __post_init__(self):
        A = _as_matrix(self.A, "A")
        n = A.shape[0]
        if A.shape != (n, n):
            raise ConfigError(f"A must be square, got {A.shape}")
        B = _as_matrix(self.B, "B")
        if B.ndim == 2 and B.shape[0] != n and B.shape == (1, n):
            B = B.T
        if B.shape[0] != n:
            raise ConfigError(f"B must have {n} rows, got {B.shape}")
        C = _as_matrix(self.C, "C")
        if C.shape != (n, n):
            raise ConfigError(f"C must be {n}x{n}, got {C.shape}")
        D = _as_matrix(self.D, "D")
        if D.shape != B.shape:
            raise ConfigError(f"D must match B's shape {B.shape}, got {D.shape}")
        H = _as_matrix(self.H, "H")
        if H.shape[1] != n:
            raise ConfigError(f"H must have {n} columns, got {H.shape}")
        for name, M in (("A", A), ("B", B), ("C", C), ("D", D), ("H", H)):
            object.__setattr__(self, name, M)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @property
    def q(self) -> int:
        return self.H.shape[0]

    def closed_loop(self, K: np.ndarray, shift: float = 0.0):
        """(A - shift*I - B K, C - D K) for a given drift shift."""
        K = np.asarray(K, dtype=float).reshape(self.m, self.n)
        A_cl = self.A - shift * np.eye(self.n) - self.B @ K
        C_cl = self.C - self.D @ K
        return A_cl, C_cl

    def digest(self) -> str:
        """Stable hash of the plant matrices (dataset metadata)."""
        h = hashlib.sha256()
        for M in (self.A, self.B, self.C, self.D, self.H):
            h.update(np.ascontiguousarray(M, dtype="<f8").tobytes())
        return h.hexdigest()


@dataclass(frozen=True)
class ReferenceGenerator:
    """Autonomous reference x_d' = A_d x_d, y_d = H_d x_d.

    A_d eigenvalues must sit on the imaginary axis (marginally stable
    oscillator bank), which keeps the reference bounded without decay.
    """

    A_d: np.ndarray
    H_d: np.ndarray
    x_d0: np.ndarray
    tol: float = 1e-8

    def __post_init__(self):
        A_d = _as_matrix(self.A_d, "A_d")
        n_d = A_d.shape[0]
        if A_d.shape != (n_d, n_d):
            raise ConfigError(f"A_d must be square, got {A_d.shape}")
        H_d = _as_matrix(self.H_d, "H_d")
        if H_d.shape[1] != n_d:
            raise ConfigError(f"H_d must have {n_d} columns, got {H_d.shape}")
        x_d0 = np.asarray(self.x_d0, dtype=float).ravel()
        if x_d0.size != n_d:
            raise ConfigError(f"x_d0 must have length {n_d}, got {x_d0.size}")
        w, V = np.linalg.eig(A_d)
        re = np.abs(w.real)
        if re.max(initial=0.0) > self.tol:
            raise ConfigError(
                f"A_d eigenvalue real parts must be within {self.tol} of zero, "
                f"worst is {re.max():.3e}")
        if n_d and np.linalg.matrix_rank(V) < n_d:
            raise ConfigError(
                "A_d must be diagonalizable; a defective eigenvalue makes "
                "the reference grow polynomially")
        object.__setattr__(self, "A_d", A_d)
        object.__setattr__(self, "H_d", H_d)
        object.__setattr__(self, "x_d0", x_d0)

    @property
    def n_d(self) -> int:
        return self.A_d.shape[0]

    @property
    def q(self) -> int:
        return self.H_d.shape[0]

    def with_output_map(self, H_d) -> "ReferenceGenerator":
        """Same generator, different output row(s); used by the gain tables."""
        return ReferenceGenerator(self.A_d, H_d, self.x_d0, self.tol)


@dataclass(frozen=True)
class CostWeights:
    """Tracking-error weight Q (q x q) and input weight R (m x m), both PD."""

    Q: np.ndarray
    R: np.ndarray

    def __post_init__(self):
        Q = _as_matrix(self.Q, "Q")
        R = _as_matrix(self.R, "R")
        _check_pd(Q, "Q")
        _check_pd(R, "R")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)


@dataclass(frozen=True)
class BpiHyperParams:
    """Bootstrap policy-iteration hyperparameters.

    theta=None resolves to 10 * I_n once the plant dimension is known.
    stop_rule 'gain' stops phase II on ||K_i - K_{i-1}||_2 <= epsilon,
    'value' on ||P_i - P_{i-1}||_F <= epsilon; the data-driven learner
    defaults to 'value'.
    """

    gamma: float = 1.0
    alpha0: float = 0.1
    eta: float = 0.95
    theta: np.ndarray | None = None
    epsilon: float = 1e-5
    max_iter: int = 200
    stop_rule: str = "gain"

    def __post_init__(self):
        if not (0.0 < self.alpha0 < self.gamma):
            raise ConfigError(
                f"need 0 < alpha0 < gamma, got alpha0={self.alpha0}, gamma={self.gamma}")
        if not (0.0 < self.eta < 1.0):
            raise ConfigError(f"need 0 < eta < 1, got {self.eta}")
        if self.epsilon <= 0.0:
            raise ConfigError("epsilon must be positive")
        if self.max_iter < 1:
            raise ConfigError("max_iter must be at least 1")
        if self.stop_rule not in ("gain", "value"):
            raise ConfigError(f"unknown stop_rule {self.stop_rule!r}")
        if self.theta is not None:
            th = _as_matrix(self.theta, "theta")
            _check_pd(th, "theta")
            object.__setattr__(self, "theta", th)

    def theta_for(self, n: int) -> np.ndarray:
        if self.theta is None:
            return 10.0 * np.eye(n)
        if self.theta.shape != (n, n):
            raise ConfigError(f"theta must be {n}x{n}, got {self.theta.shape}")
        return self.theta

    @property
    def alpha_tilde(self) -> float:
        """Discount rate of the transform chi = exp(-alpha_tilde t) x."""
        return 0.5 * (self.gamma - self.alpha0)


@dataclass(frozen=True)
class ParameterizedSystem:
    """Plant with drift A(alpha) = A - (gamma - alpha)/2 * I."""

    base: StochasticSystem
    gamma: float
    alpha: float

    def __post_init__(self):
        if self.gamma <= 0.0:
            raise ConfigError("gamma must be positive")

    @property
    def shift(self) -> float:
        return 0.5 * (self.gamma - self.alpha)

    def as_system(self) -> StochasticSystem:
        b = self.base
        return StochasticSystem(b.A - self.shift * np.eye(b.n), b.B, b.C, b.D, b.H)


@dataclass(frozen=True)
class TrackingProblem:
    """Plant + reference + cost + hyperparameters: one solvable instance."""

    system: StochasticSystem
    reference: ReferenceGenerator
    cost: CostWeights
    hyper: BpiHyperParams = field(default_factory=BpiHyperParams)

    def __post_init__(self):
        sys, ref, cost = self.system, self.reference, self.cost
        if ref.q != sys.q:
            raise ConfigError(
                f"H and H_d disagree on output dimension: {sys.q} vs {ref.q}")
        if cost.Q.shape != (sys.q, sys.q):
            raise ConfigError(f"Q must be {sys.q}x{sys.q}, got {cost.Q.shape}")
        if cost.R.shape != (sys.m, sys.m):
            raise ConfigError(f"R must be {sys.m}x{sys.m}, got {cost.R.shape}")
        self.hyper.theta_for(sys.n)

    @property
    def theta(self) -> np.ndarray:
        return self.hyper.theta_for(self.system.n)


@dataclass(frozen=True)
class StabilityCertificate:
    """Result of a mean-square stability test; truthy iff stabilizing."""

    stabilizing: bool
    abscissa: float
    alpha: float | None
    margin: float

    def __bool__(self) -> bool:
        return self.stabilizing


def _vech_pinv(n: int) -> np.ndarray:
    # (D'D)^{-1} D' with D'D diagonal (1 on diagonal entries, 2 off).
    D = duplication(n)
    r, c = vech_indices(n)
    w = np.where(r == c, 1.0, 0.5)
    return w[:, None] * D.T


def lyap_matrix(sys: StochasticSystem, K, alpha: float | None = None,
                gamma: float = 1.0) -> np.ndarray:
    """Matrix of X -> A_cl' X + X A_cl + C_cl' X C_cl on vech coordinates.

    A_cl = A(alpha) - B K and C_cl = C - D K. alpha=None means the
    unshifted plant (equivalently alpha = gamma).
    """
    shift = 0.0 if alpha is None else 0.5 * (gamma - alpha)
    A_cl, C_cl = sys.closed_loop(K, shift)
    n = sys.n
    eye = np.eye(n)
    big = (np.kron(eye, A_cl.T) + np.kron(A_cl.T, eye)
           + np.kron(C_cl.T, C_cl.T))
    return _vech_pinv(n) @ big @ duplication(n)


def spectral_abscissa(sys: StochasticSystem, K, alpha: float | None = None,
                      gamma: float = 1.0) -> float:
    """Maximum real part over the generalized Lyapunov operator's spectrum."""
    L = lyap_matrix(sys, K, alpha, gamma)
    return float(np.linalg.eigvals(L).real.max())


def is_stabilizing(sys: StochasticSystem, K, alpha: float | None = None,
                   margin: float = 0.0, gamma: float = 1.0,
                   guard: float = 1e-9) -> StabilityCertificate:
    """Certificate that K is mean-square stabilizing for S(alpha).

    True iff the abscissa is below -(margin + guard); the guard band
    absorbs eigenvalue-solver noise around zero.
    """
    if margin < 0.0:
        raise ConfigError("margin must be nonnegative")
    a = spectral_abscissa(sys, K, alpha, gamma)
    return StabilityCertificate(a < -(margin + guard), a, alpha, margin)


def zero_gain_threshold(sys: StochasticSystem) -> float:
    """Abscissa of the open-loop (K=0) operator on the unshifted plant.

    Any gamma above this value plus alpha0 makes K=0 admissible at
    S(alpha0), which is what phase I of the bootstrap needs to start.
    """
    return spectral_abscissa(sys, np.zeros((sys.m, sys.n)))
