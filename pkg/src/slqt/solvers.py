"""Model-based building blocks: the generalized Lyapunov solve, the gain
and alpha updates of the bootstrap iteration, the Riccati residual, and
the Sylvester equation behind the feedforward gain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonInvertible, NonPositiveP, NotStabilizing, ResonantSpectra, SingularOperator
from .model import CostWeights, StabilityCertificate, StochasticSystem, is_stabilizing, lyap_matrix
from .symquad import unvech, vech

__all__ = [
    "LyapunovSolution", "TrackingSolution", "solve_gen_lyap", "gain_update",
    "alpha_update", "sare_residual", "solve_sylvester", "ff_from_pi",
]

_COND_LIMIT = 1e12


@dataclass(frozen=True)
class LyapunovSolution:
    """Solution of L_[K; S(alpha)](P) + forcing = 0."""

    P: np.ndarray
    residual_norm: float
    certificate: StabilityCertificate


@dataclass(frozen=True)
class TrackingSolution:
    """Optimal tracking controller u = -K x - F x_d with its value data."""

    P: np.ndarray
    K: np.ndarray
    Pi: np.ndarray
    F: np.ndarray
    Lambda: np.ndarray
    history: dict = field(default_factory=dict)


def solve_gen_lyap(sys: StochasticSystem, K, Qmat, alpha: float | None = None,
                   gamma: float = 1.0) -> LyapunovSolution:
    """Solve A_cl' P + P A_cl + C_cl' P C_cl + Qmat = 0 on S(alpha).

    Refuses to solve when K is not mean-square stabilizing there, since
    the solution would not be the value matrix of any admissible policy.
    """
    cert = is_stabilizing(sys, K, alpha, gamma=gamma)
    if not cert:
        raise NotStabilizing(
            f"gain is not mean-square stabilizing (abscissa {cert.abscissa:.6g})",
            abscissa=cert.abscissa)
    Qmat = np.asarray(Qmat, dtype=float)
    L = lyap_matrix(sys, K, alpha, gamma)
    q = vech(Qmat)
    cond = np.linalg.cond(L)
    if not np.isfinite(cond) or cond > _COND_LIMIT:
        raise SingularOperator(f"Lyapunov operator condition number {cond:.3e}")
    p = np.linalg.solve(L, -q)
    residual = float(np.linalg.norm(L @ p + q))
    scale = 1.0 + float(np.linalg.norm(q)) + float(np.linalg.norm(L, "fro"))
    if residual > 1e-10 * scale:
        raise SingularOperator(
            f"Lyapunov residual {residual:.3e} exceeds tolerance at scale {scale:.3e}")
    P = unvech(p, sys.n)
    P = 0.5 * (P + P.T)
    if np.linalg.eigvalsh(Qmat).min() > 0.0 and np.linalg.eigvalsh(P).min() < -1e-10:
        raise NotStabilizing(
            "positive definite forcing produced an indefinite value matrix",
            abscissa=cert.abscissa)
    return LyapunovSolution(P, residual, cert)


def gain_update(sys: StochasticSystem, P, R) -> np.ndarray:
    """K(P) = (R + D'PD)^{-1} (B'P + D'PC)."""
    P = np.asarray(P, dtype=float)
    R = np.asarray(R, dtype=float)
    G = R + sys.D.T @ P @ sys.D
    rhs = sys.B.T @ P + sys.D.T @ P @ sys.C
    try:
        return np.linalg.solve(G, rhs)
    except np.linalg.LinAlgError as exc:
        raise NonInvertible(f"R + D'PD is singular: {exc}") from exc


def alpha_update(alpha: float, P, K, eta: float, Q_hat, R) -> float:
    """alpha + eta * lambda_min(K'RK + Q_hat) / lambda_max(P).

    Q_hat is the forcing the Lyapunov equation used alongside K'RK
    (theta during phase I, H'QH at the boundary).
    """
    P = np.asarray(P, dtype=float)
    lam_max = float(np.linalg.eigvalsh(0.5 * (P + P.T)).max())
    if lam_max <= 0.0:
        raise NonPositiveP(f"value matrix has lambda_max = {lam_max:.6g}")
    K = np.asarray(K, dtype=float)
    W = K.T @ np.asarray(R, dtype=float) @ K + np.asarray(Q_hat, dtype=float)
    lam_min = float(np.linalg.eigvalsh(0.5 * (W + W.T)).min())
    return alpha + eta * lam_min / lam_max


def sare_residual(sys: StochasticSystem, cost: CostWeights, P,
                  as_printed: bool = False) -> float:
    """Frobenius norm of the stochastic algebraic Riccati equation at P.

    The default form carries + C'PC; as_printed=True flips that term's
    sign (a variant that circulates in some write-ups) for comparison.
    """
    P = np.asarray(P, dtype=float)
    A, B, C, D, H = sys.A, sys.B, sys.C, sys.D, sys.H
    G = cost.R + D.T @ P @ D
    S = P @ B + C.T @ P @ D
    core = A.T @ P + P @ A + H.T @ cost.Q @ H
    quad = S @ np.linalg.solve(G, S.T)
    sign = -1.0 if as_printed else 1.0
    res = core + sign * (C.T @ P @ C) - quad
    return float(np.linalg.norm(res, "fro"))


def solve_sylvester(A_c, A_d, RHS) -> np.ndarray:
    """Solve Pi A_d + A_c' Pi = RHS by Kronecker vectorization.

    Solvable iff no eigenvalue of -A_c' coincides with one of A_d; a
    near-coincidence below 1e-10 is reported as resonance instead of
    returning a garbage solution.
    """
    A_c = np.asarray(A_c, dtype=float)
    A_d = np.asarray(A_d, dtype=float)
    RHS = np.asarray(RHS, dtype=float)
    n, n_d = A_c.shape[0], A_d.shape[0]
    if RHS.shape != (n, n_d):
        raise ValueError(f"RHS must be {n}x{n_d}, got {RHS.shape}")
    ev_c = np.linalg.eigvals(A_c)
    ev_d = np.linalg.eigvals(A_d)
    gap = np.abs(ev_c[:, None] + ev_d[None, :]).min()
    if gap < 1e-10:
        raise ResonantSpectra(
            f"spectra of A_c' and -A_d nearly intersect (gap {gap:.3e})")
    M = np.kron(A_d.T, np.eye(n)) + np.kron(np.eye(n_d), A_c.T)
    vec_pi = np.linalg.solve(M, RHS.ravel(order="F"))
    Pi = vec_pi.reshape((n, n_d), order="F")
    residual = float(np.linalg.norm(Pi @ A_d + A_c.T @ Pi - RHS, "fro"))
    if residual > 1e-10 * (1.0 + float(np.linalg.norm(RHS, "fro"))):
        raise SingularOperator(f"Sylvester residual {residual:.3e} too large")
    return Pi


def ff_from_pi(sys: StochasticSystem, P_star, Pi, R) -> np.ndarray:
    """F* = (R + D'P*D)^{-1} B' Pi."""
    P_star = np.asarray(P_star, dtype=float)
    G = np.asarray(R, dtype=float) + sys.D.T @ P_star @ sys.D
    try:
        return np.linalg.solve(G, sys.B.T @ np.asarray(Pi, dtype=float))
    except np.linalg.LinAlgError as exc:
        raise NonInvertible(f"R + D'P*D is singular: {exc}") from exc
