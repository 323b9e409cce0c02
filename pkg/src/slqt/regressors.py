"""From trajectories to linear equations.

Takes grid-level ensemble means (or exact moments) and produces, per
sample time t_i, the windowed raw moments over [t_i, t_i + T], then
assembles them into the regressor rows whose least-squares solutions
recover the value matrix, the gain, and the feedforward pair.

Conventions: vech rows pair with h_form rows through
<vech(P), h_form(M)> = trace(P M); column-major vec pairs through
a' M b = (b kron a)' vec(M).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import ConfigError, WindowOutOfRange
from .model import BpiHyperParams
from .symquad import h_form_rows, vech, vech_indices

__all__ = [
    "MomentTable", "RegressorBundle", "RankReport", "accumulate_raw_moments",
    "assemble_psi", "assemble_phi", "assemble_xi", "psi_rhs", "phi_rhs",
    "rank_report", "feedback_required_rank", "feedforward_required_rank",
    "save_regressor_bundle",
]


@dataclass(frozen=True)
class MomentTable:
    """Windowed raw moments per sample time.

    G0/GT are the endpoint second moments E[chi chi'] at t_i and
    t_i + T; S, W, V, Z the windowed integrals of chi chi', chi u',
    u u', zeta zeta'. The d_/I_ blocks are the deterministic
    reference-by-mean moments used by the feedforward solve, stored as
    flattened Kronecker columns. t_global locates each sample on the
    experiment-wide clock (segments of a multi-run dataset differ in
    offset), which is what shadow augmentation aligns on.
    """

    t: np.ndarray
    t_global: np.ndarray
    window: float
    h: float
    G0: np.ndarray
    GT: np.ndarray
    S: np.ndarray
    W: np.ndarray
    V: np.ndarray
    Z: np.ndarray | None = None
    d_xdchi: np.ndarray | None = None
    I_xdchi: np.ndarray | None = None
    I_xdu: np.ndarray | None = None
    I_ydzeta: np.ndarray | None = None
    alpha0: float | None = None
    H: np.ndarray | None = None
    n_d: int | None = None

    def __len__(self) -> int:
        return self.t.size

    @property
    def n(self) -> int:
        return self.S.shape[1]

    @property
    def m(self) -> int:
        return self.V.shape[1]

    @staticmethod
    def concat(tables) -> "MomentTable":
        """Stack the rows of several tables (multi-segment datasets)."""
        first = tables[0]
        for tb in tables[1:]:
            if tb.window != first.window or tb.n != first.n or tb.m != first.m:
                raise ConfigError("tables disagree on window or dimensions")

        def cat(name):
            parts = [getattr(tb, name) for tb in tables]
            if any(p is None for p in parts):
                return None
            return np.concatenate(parts, axis=0)

        return MomentTable(
            t=cat("t"), t_global=cat("t_global"), window=first.window,
            h=first.h, G0=cat("G0"), GT=cat("GT"), S=cat("S"), W=cat("W"),
            V=cat("V"), Z=cat("Z"), d_xdchi=cat("d_xdchi"),
            I_xdchi=cat("I_xdchi"), I_xdu=cat("I_xdu"),
            I_ydzeta=cat("I_ydzeta"), alpha0=first.alpha0, H=first.H,
            n_d=first.n_d)


@dataclass(frozen=True)
class RankReport:
    """Numerical rank of a regressor matrix, SVD based."""

    rank: int
    required_rank: int
    singular_values: np.ndarray
    margin: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.rank >= self.required_rank

    def __bool__(self) -> bool:
        return self.passed


@dataclass(frozen=True)
class RegressorBundle:
    """Assembled data matrices and right-hand sides for one iteration."""

    Psi: np.ndarray
    Phi: np.ndarray | None
    Xi: np.ndarray | None
    psi_rhs: np.ndarray | None
    phi_rhs: np.ndarray | None
    xi_rhs: np.ndarray | None
    rank: RankReport | None


def feedback_required_rank(n: int, m: int, with_lambda: bool = True) -> int:
    base = n * (n + 1) // 2 + n * m
    return base + m * (m + 1) // 2 if with_lambda else base


def feedforward_required_rank(n: int, m: int, n_d: int) -> int:
    return (n + m) * n_d


def _windowed_integrals(series: np.ndarray, idx: np.ndarray, w: int,
                        h: float) -> np.ndarray:
    cum = cumulative_trapezoid(series, dx=h, axis=0, initial=0.0)
    return cum[idx + w] - cum[idx]


def _check_psd(name: str, rows_of_mats: np.ndarray) -> None:
    evals = np.linalg.eigvalsh(0.5 * (rows_of_mats + np.swapaxes(rows_of_mats, 1, 2)))
    scale = np.abs(rows_of_mats).max(initial=0.0)
    if evals.min(initial=0.0) < -1e-10 * max(1.0, scale):
        raise ConfigError(f"{name} moments are not positive semidefinite "
                          f"(min eigenvalue {evals.min():.3e})")


def accumulate_raw_moments(source, hyper: BpiHyperParams | None = None,
                           config=None, output_map=None,
                           t_offset: float = 0.0) -> MomentTable:
    """Windowed trapezoidal moments of a dataset or exact-moment trajectory.

    ``source`` needs grid arrays t, mean_x, mean_xx, u (and optionally
    x_d, y_d); both EnsembleDataset and MomentTrajectory qualify. The
    sampling layout (t1, sample_period, l, window) comes from ``config``
    or, for datasets, from the stored one. ``output_map`` supplies H so
    the output moments Z and the feedforward right-hand sides can be
    formed. t_offset shifts the stored global clock.
    """
    if config is None:
        config = getattr(source, "config", None)
        if config is None:
            raise ConfigError("config is required for sources that do not carry one")
    discount = getattr(source, "discount", None)
    if hyper is not None and discount is not None:
        if abs(discount - hyper.alpha_tilde) > 1e-12:
            raise ConfigError(
                f"dataset discount {discount} does not match (gamma-alpha0)/2 "
                f"= {hyper.alpha_tilde}")
    t = source.t
    h = float(t[1] - t[0])
    N = t.size - 1
    w = round(config.window / h)
    if abs(w * h - config.window) > 1e-9:
        raise ConfigError("window must be a multiple of the source grid step")
    sample_t = config.sample_times()
    idx = np.round(sample_t / h).astype(int)
    if np.abs(idx * h - sample_t).max() > 1e-9:
        raise ConfigError("sample times must lie on the source grid")
    if idx.min() < 0 or idx.max() + w > N:
        raise WindowOutOfRange(
            f"samples span [{sample_t[0]}, {sample_t[-1]} + {config.window}] "
            f"but the source grid ends at {t[-1]}")

    mx, mxx, u = source.mean_x, source.mean_xx, source.u
    n, m = mx.shape[1], u.shape[1]
    r_idx, c_idx = vech_indices(n)
    l = idx.size

    def unvech_rows(V2):
        out = np.empty((V2.shape[0], n, n))
        out[:, r_idx, c_idx] = V2
        out[:, c_idx, r_idx] = V2
        return out

    G0 = unvech_rows(mxx[idx])
    GT = unvech_rows(mxx[idx + w])
    S = unvech_rows(_windowed_integrals(mxx, idx, w, h))
    xu = (mx[:, :, None] * u[:, None, :]).reshape(t.size, n * m)
    W = _windowed_integrals(xu, idx, w, h).reshape(l, n, m)
    riu, ciu = np.triu_indices(m)
    uu = u[:, riu] * u[:, ciu]
    Vw = _windowed_integrals(uu, idx, w, h)
    V = np.empty((l, m, m))
    V[:, riu, ciu] = Vw
    V[:, ciu, riu] = Vw
    _check_psd("S", S)
    _check_psd("V", V)

    Z = None
    H = None
    if output_map is not None:
        H = np.asarray(output_map, dtype=float).reshape(-1, n)
        Z = np.einsum("qi,lij,pj->lqp", H, S, H)

    d_xdchi = I_xdchi = I_xdu = I_ydzeta = None
    n_d = None
    x_d = getattr(source, "x_d", None)
    if x_d is not None:
        n_d = x_d.shape[1]
        xdchi = np.einsum("td,tn->tdn", x_d, mx).reshape(t.size, n_d * n)
        d_xdchi = xdchi[idx + w] - xdchi[idx]
        I_xdchi = _windowed_integrals(xdchi, idx, w, h)
        xdu = np.einsum("td,tm->tdm", x_d, u).reshape(t.size, n_d * m)
        I_xdu = _windowed_integrals(xdu, idx, w, h)
        y_d = getattr(source, "y_d", None)
        if y_d is not None and H is not None:
            q = H.shape[0]
            zeta = mx @ H.T
            ydzeta = np.einsum("td,tq->tdq", y_d, zeta).reshape(t.size, y_d.shape[1] * q)
            I_ydzeta = _windowed_integrals(ydzeta, idx, w, h)

    return MomentTable(t=sample_t, t_global=sample_t + t_offset,
                       window=config.window, h=h, G0=G0, GT=GT, S=S, W=W,
                       V=V, Z=Z, d_xdchi=d_xdchi, I_xdchi=I_xdchi,
                       I_xdu=I_xdu, I_ydzeta=I_ydzeta,
                       alpha0=None if hyper is None else hyper.alpha0,
                       H=H, n_d=n_d)


def assemble_psi(moments: MomentTable, alpha_prev: float, K_prev) -> np.ndarray:
    """Regressor rows pairing with theta = [vech(P); vec(M); vech(Lambda)].

    Row t_i = [ dbar_chi + (alpha - alpha0) h(S);
                -2 (vec(K_prev S) + vec(W'));
                -h(V) + h(K_prev S K_prev') ].
    """
    if moments.alpha0 is None:
        raise ConfigError("moment table carries no alpha0; pass hyper when accumulating")
    n, m = moments.n, moments.m
    K_prev = np.asarray(K_prev, dtype=float).reshape(m, n)
    l = len(moments)
    hS = h_form_rows(moments.S)
    blk_P = (h_form_rows(moments.GT) - h_form_rows(moments.G0)
             + (alpha_prev - moments.alpha0) * hS)
    KS = np.einsum("ak,lkn->lan", K_prev, moments.S)
    vec_KS = np.transpose(KS, (0, 2, 1)).reshape(l, m * n)
    vec_Wt = moments.W.reshape(l, n * m)
    blk_M = -2.0 * (vec_KS + vec_Wt)
    KSK = np.einsum("lan,bn->lab", KS, K_prev)
    blk_L = -h_form_rows(moments.V) + h_form_rows(KSK)
    return np.hstack([blk_P, blk_M, blk_L])


def assemble_phi(moments: MomentTable, gamma: float, K_prev) -> np.ndarray:
    """Boundary-stage rows: identical structure with alpha = gamma."""
    return assemble_psi(moments, gamma, K_prev)


def psi_rhs(moments: MomentTable, forcing) -> np.ndarray:
    """-trace(forcing * S_i) per row; forcing is K'RK + theta."""
    return -h_form_rows(moments.S) @ vech(np.asarray(forcing, dtype=float))


def phi_rhs(moments: MomentTable, K_prev, cost) -> np.ndarray:
    """-trace(K'RK * S_i) - trace(Q * Z_i) per row."""
    if moments.Z is None:
        raise ConfigError("moment table has no output moments; pass output_map")
    K_prev = np.asarray(K_prev, dtype=float)
    KRK = K_prev.T @ cost.R @ K_prev
    return (-h_form_rows(moments.S) @ vech(KRK)
            - h_form_rows(moments.Z) @ vech(np.asarray(cost.Q, dtype=float)))


def assemble_xi(moments: MomentTable, K_star, Lambda_star, cost,
                gamma: float, alpha0: float):
    """Feedforward rows pairing with [vec(Pi); vec(F)], and the rhs.

    Row t_i = [ d_xdchi + (gamma - alpha0)/2 * I_xdchi ;
                -I_xdchi' (I kron (R+Lambda)K) - I_xdu' (I kron (R+Lambda)) ],
    rhs t_i = I_ydzeta' vec(Q).
    """
    if moments.I_xdchi is None:
        raise ConfigError("moment table has no reference moments")
    n, m, n_d = moments.n, moments.m, moments.n_d
    K_star = np.asarray(K_star, dtype=float).reshape(m, n)
    RL = cost.R + np.asarray(Lambda_star, dtype=float).reshape(m, m)
    blk_Pi = moments.d_xdchi + 0.5 * (gamma - alpha0) * moments.I_xdchi
    eye_d = np.eye(n_d)
    blk_F = (-moments.I_xdchi @ np.kron(eye_d, RL @ K_star).T
             - moments.I_xdu @ np.kron(eye_d, RL).T)
    Xi = np.hstack([blk_Pi, blk_F])
    if moments.I_ydzeta is None:
        raise ConfigError("moment table has no output reference moments")
    rhs = moments.I_ydzeta @ vec_q(cost.Q)
    return Xi, rhs


def vec_q(Q) -> np.ndarray:
    return np.asarray(Q, dtype=float).ravel(order="F")


def xi_rhs_for_output_map(moments: MomentTable, H_d_case, cost) -> np.ndarray:
    """Feedforward rhs for an alternative reference output map.

    Uses I_{y_d zeta} = (H_d kron H) I_{x_d chi}, so a whole family of
    output maps shares one assembled Xi.
    """
    if moments.H is None or moments.I_xdchi is None:
        raise ConfigError("moment table lacks H or reference moments")
    H_d_case = np.asarray(H_d_case, dtype=float).reshape(-1, moments.n_d)
    lift = np.kron(H_d_case, moments.H)
    return (moments.I_xdchi @ lift.T) @ vec_q(cost.Q)


def rank_report(matrix, required_rank: int, tol: float = 1e-8) -> RankReport:
    """SVD numerical rank: count of singular values above tol * largest."""
    sv = np.linalg.svd(np.asarray(matrix, dtype=float), compute_uv=False)
    smax = sv[0] if sv.size else 0.0
    if smax == 0.0:
        rank = 0
        margin = -tol
    else:
        rank = int(np.count_nonzero(sv > tol * smax))
        margin = (sv[required_rank - 1] / smax - tol) if required_rank <= sv.size else -tol
    return RankReport(rank=rank, required_rank=required_rank,
                      singular_values=sv, margin=float(margin), tol=tol)


def save_regressor_bundle(bundle: RegressorBundle, dirpath: str) -> None:
    """Persist assembled matrices next to a dataset (same binary format)."""
    import json
    import os

    from .sim import _write_array

    os.makedirs(dirpath, exist_ok=True)
    arrays = {}
    for name in ("Psi", "Phi", "Xi", "psi_rhs", "phi_rhs", "xi_rhs"):
        M = getattr(bundle, name)
        if M is None:
            continue
        sha, rows, cols = _write_array(os.path.join(dirpath, name + ".bin"), M)
        arrays[name] = {"rows": rows, "cols": cols, "sha256": sha}
    meta = {"schema": "slqt-bundle/1", "arrays": arrays}
    if bundle.rank is not None:
        meta["rank"] = {"rank": bundle.rank.rank,
                        "required_rank": bundle.rank.required_rank,
                        "margin": bundle.rank.margin, "tol": bundle.rank.tol}
    with open(os.path.join(dirpath, "bundle.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")
