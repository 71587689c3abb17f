"""Equilibria of the mean-field ODE and their structure.

Covers the damped fixed-point solver for equilibria, the tracking test
``y = (V kron I_q)^T theta``, finite-difference stability spectra, the
null-space dimension of the reward-coupling matrix, single-user fixed points
of ``y = W softmax(a W^T y)`` with the consensus threshold ``2 / |W|_2^2``,
and the hyperplane embedding of user attributes.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag
from scipy.spatial import ConvexHull, QhullError

from .errors import InvalidArgumentError, NonConvergenceError, RankError
from .model import ModelConfig, numerical_rank, softmax, solve_spd, tracking_residual
from .ode import rhs_flat

log = logging.getLogger(__name__)


@dataclass
class EquilibriumReport:
    b_bar: np.ndarray
    s_bar: np.ndarray
    theta_bar: np.ndarray
    y_bar: np.ndarray
    p_bar: np.ndarray
    residual: float
    tracking: bool
    consensus: bool
    nullspace_dim: int
    spectrum: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=complex))
    iterations: int = 0

    def to_dict(self, cfg: ModelConfig) -> dict:
        return {
            "theta_bar": self.theta_bar.tolist(),
            "y_bar": self.y_bar.reshape(cfg.N, cfg.q).tolist(),
            "p_bar": self.p_bar.reshape(cfg.N, cfg.K).tolist(),
            "residual": float(self.residual),
            "tracking": bool(self.tracking),
            "consensus": bool(self.consensus),
            "nullspace_dim": int(self.nullspace_dim),
            "spectrum": [[float(z.real), float(z.imag)] for z in self.spectrum],
        }

    def to_json(self, cfg: ModelConfig, **kw) -> str:
        return json.dumps(self.to_dict(cfg), **kw)


def equilibrium_parts(theta, cfg: ModelConfig):
    """``(p, y, b, s)`` obtained from ``theta`` by the equilibrium relations.

    ``p`` is ``N x K``; ``y`` is the stacked ``W p_n``; ``b`` and ``s`` are the
    reward and design moments under ``p`` and ``y``.
    """
    P = softmax(cfg.a * (cfg.contexts @ np.asarray(theta, dtype=float)))
    W, V, lam = cfg.W, cfg.V, cfg.lam
    Yb = P @ W.T                                   # N x q
    R = Yb @ W                                     # r_nk = w_k . y_n
    Z = (P * R) @ W.T                              # N x q
    b = ((V * lam) @ Z).ravel()
    Mn = np.einsum("jk,nk,lk->njl", W, P, W)
    s = np.einsum("n,in,kn,njl->ijkl", lam, V, V, Mn).reshape(cfg.pq, cfg.pq)
    return P, Yb.ravel(), b, 0.5 * (s + s.T)


def max_pairwise_distance(y, N: int, q: int) -> float:
    Y = np.asarray(y).reshape(N, q)
    if N < 2:
        return 0.0
    diff = Y[:, None, :] - Y[None, :, :]
    return float(np.sqrt(np.max(np.sum(diff * diff, axis=-1))))


def find_equilibrium(cfg: ModelConfig, theta_init=None, damping: float = 0.5, tol: float = 1e-12,
                     max_iter: int = 20000, consensus_tol: float = 1e-6, tracking_tol: float = 1e-8,
                     compute_spectrum: bool = True, fd_eps: float = 1e-6) -> EquilibriumReport:
    """Damped fixed-point iteration ``theta <- (1-g) theta + g s(theta)^{-1} b(theta)``."""
    if not 0 < damping <= 1:
        raise InvalidArgumentError("damping must lie in (0, 1]")
    theta = np.zeros(cfg.pq) if theta_init is None else np.array(theta_init, dtype=float)
    if theta.shape != (cfg.pq,) or not np.all(np.isfinite(theta)):
        raise InvalidArgumentError(f"theta_init must be a finite vector of length {cfg.pq}")
    step = np.inf
    for it in range(1, max_iter + 1):
        _, _, b, s = equilibrium_parts(theta, cfg)
        theta_new = solve_spd(s, b)
        step = float(np.linalg.norm(theta_new - theta))
        converged = step <= tol * (1.0 + np.linalg.norm(theta))
        theta = (1.0 - damping) * theta + damping * theta_new
        if converged:
            break
    else:
        raise NonConvergenceError(f"no equilibrium after {max_iter} iterations (last step {step:.3e})", residual=step)

    P, y, b, s = equilibrium_parts(theta, cfg)
    theta_bar = solve_spd(s, b)
    x = np.concatenate([b, s.ravel(), y])
    residual = float(np.linalg.norm(rhs_flat(x, cfg)))
    report = EquilibriumReport(
        b_bar=b, s_bar=s, theta_bar=theta_bar, y_bar=y, p_bar=P.ravel(), residual=residual,
        tracking=False, consensus=max_pairwise_distance(y, cfg.N, cfg.q) < consensus_tol,
        nullspace_dim=nullspace_dimension(cfg, P.ravel()), iterations=it,
    )
    report.tracking = check_tracking_condition(report, cfg, tracking_tol)
    if compute_spectrum:
        report.spectrum = stability_spectrum(report, cfg, fd_eps)
    return report


def check_tracking_condition(report: EquilibriumReport, cfg: ModelConfig, tol: float = 1e-8) -> bool:
    """True when ``|y - (V kron I_q)^T theta| <= tol (1 + |y|)``."""
    gap = np.linalg.norm(tracking_residual(report.theta_bar, report.y_bar, cfg))
    return bool(gap <= tol * (1.0 + np.linalg.norm(report.y_bar)))


# --- stability ---------------------------------------------------------------


def _vech_index(n: int):
    return np.triu_indices(n)


def _pack(x, cfg: ModelConfig, iu):
    pq = cfg.pq
    s = x[pq:pq + pq * pq].reshape(pq, pq)
    return np.concatenate([x[:pq], s[iu], x[pq + pq * pq:]])


def _unpack(z, cfg: ModelConfig, iu):
    pq = cfg.pq
    m = len(iu[0])
    s = np.zeros((pq, pq))
    s[iu] = z[pq:pq + m]
    s = s + np.triu(s, 1).T
    return np.concatenate([z[:pq], s.ravel(), z[pq + m:]])


def stability_spectrum(report: EquilibriumReport, cfg: ModelConfig, fd_eps: float = 1e-6) -> np.ndarray:
    """Eigenvalues of the central-difference Jacobian, sorted by descending real part.

    The Jacobian is taken in the coordinates ``(b, upper triangle of s, y)``,
    i.e. on the space of symmetric ``s`` the flow preserves.
    """
    iu = _vech_index(cfg.pq)
    x0 = np.concatenate([report.b_bar, report.s_bar.ravel(), report.y_bar])
    z0 = _pack(x0, cfg, iu)
    h = fd_eps * (1.0 + np.max(np.abs(z0)))
    n = z0.size
    J = np.empty((n, n))
    for j in range(n):
        zp = z0.copy()
        zm = z0.copy()
        zp[j] += h
        zm[j] -= h
        fp = _pack(rhs_flat(_unpack(zp, cfg, iu), cfg), cfg, iu)
        fm = _pack(rhs_flat(_unpack(zm, cfg, iu), cfg), cfg, iu)
        J[:, j] = (fp - fm) / (2.0 * h)
    ev = np.linalg.eigvals(J)
    return ev[np.argsort(-ev.real, kind="stable")]


# --- null space --------------------------------------------------------------


def coupling_matrix(cfg: ModelConfig, p_bar) -> np.ndarray:
    """``(V kron W) Lambda_K diag(p) (I_N kron W)^T`` built block by block (``pq x Nq``)."""
    P = np.asarray(p_bar, dtype=float).reshape(cfg.N, cfg.K)
    Mn = np.einsum("jk,nk,lk->njl", cfg.W, P, cfg.W)
    M4 = np.einsum("n,in,njl->ijnl", cfg.lam, cfg.V, Mn)
    return M4.reshape(cfg.pq, cfg.N * cfg.q)


def _null_dim(mat: np.ndarray, tol: float) -> int:
    return mat.shape[1] - numerical_rank(mat, tol)


def nullspace_dimension(cfg: ModelConfig, p_bar, tol: float = 1e-9) -> int:
    """Dimension of the null space of the coupling matrix (``Nq - rank``)."""
    return _null_dim(coupling_matrix(cfg, p_bar), tol)


def nullspace_dimension_factored(cfg: ModelConfig, p_bar, tol: float = 1e-9) -> int:
    """Same quantity through the factorization ``(V kron I_q) W~`` with ``W~`` block diagonal."""
    P = np.asarray(p_bar, dtype=float).reshape(cfg.N, cfg.K)
    blocks = [cfg.lam[n] * (cfg.W * P[n]) @ cfg.W.T for n in range(cfg.N)]
    Wt = block_diag(*blocks)
    return _null_dim(np.kron(cfg.V, np.eye(cfg.q)) @ Wt, tol)


def null_projection_residual(report: EquilibriumReport, cfg: ModelConfig, tol: float = 1e-9) -> float:
    """Distance from ``y - (V kron I_q)^T theta`` to the coupling matrix's numerical null space."""
    y_perp = tracking_residual(report.theta_bar, report.y_bar, cfg)
    M = coupling_matrix(cfg, report.p_bar)
    _, sv, Vt = np.linalg.svd(M, full_matrices=True)
    rank = int(np.sum(sv > tol * sv[0])) if sv.size and sv[0] > 0 else 0
    null_basis = Vt[rank:].T
    return float(np.linalg.norm(y_perp - null_basis @ (null_basis.T @ y_perp)))


# --- single-user fixed points ------------------------------------------------


def _smooth_argmax(W, a, y):
    return W @ softmax(a * (W.T @ y))


def _fp_jacobian(W, a, y):
    g = softmax(a * (W.T @ y))
    return a * W @ (np.diag(g) - np.outer(g, g)) @ W.T


def fixed_point_is_stable(W, a: float, y, margin: float = 1e-9) -> bool:
    """Linear stability of ``y`` under ``dy/dtau = W softmax(a W^T y) - y``."""
    ev = np.linalg.eigvalsh(_fp_jacobian(np.asarray(W, float), a, np.asarray(y, float)))
    return bool(np.max(ev) < 1.0 - margin)


def _starts(W, n_starts, rng):
    q, K = W.shape
    pts = [W[:, k].copy() for k in range(K)] + [W.mean(axis=1)]
    while len(pts) < n_starts:
        pts.append(W @ rng.dirichlet(np.ones(K)))
    return pts[:n_starts]


def single_user_fixed_points(W, a: float, n_starts: int = 20, tol: float = 1e-9, damping: float = 0.5,
                             max_iter: int = 100000, seed: int = 0) -> list[np.ndarray]:
    """Distinct solutions of ``y = W softmax(a W^T y)`` reached from ``n_starts`` starts.

    Starts are the product attributes, their centroid and random points of
    their convex hull.  Each start runs the damped iteration until the
    residual is below ``tol``, then takes Newton steps to polish.  Points
    within ``10 * tol`` are merged.  Starts that fail are logged and skipped.
    """
    if n_starts < 1:
        raise InvalidArgumentError("n_starts must be >= 1")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    rng = np.random.default_rng(seed)
    found: list[np.ndarray] = []
    for y in _starts(W, n_starts, rng):
        for _ in range(max_iter):
            fy = _smooth_argmax(W, a, y)
            if np.linalg.norm(y - fy) <= tol:
                break
            y = (1.0 - damping) * y + damping * fy
        else:
            log.debug("fixed-point iteration did not converge from a start (a=%g)", a)
            continue
        y = _newton_polish(W, a, y)
        if np.linalg.norm(y - _smooth_argmax(W, a, y)) > tol:
            continue
        if not any(np.linalg.norm(y - c) <= 10 * tol for c in found):
            found.append(y)
    return found


def _newton_polish(W, a, y, steps: int = 3):
    best = y
    best_r = np.linalg.norm(y - _smooth_argmax(W, a, y))
    for _ in range(steps):
        F = y - _smooth_argmax(W, a, y)
        Jf = np.eye(len(y)) - _fp_jacobian(W, a, y)
        try:
            y = y - np.linalg.solve(Jf, F)
        except np.linalg.LinAlgError:
            break
        r = np.linalg.norm(y - _smooth_argmax(W, a, y))
        if not np.isfinite(r):
            break
        if r < best_r:
            best, best_r = y, r
    return best


def consensus_threshold(W) -> float:
    """``2 / sigma_max(W)^2``; below it the single-user fixed point is unique."""
    W = np.atleast_2d(np.asarray(W, dtype=float))
    smax = np.linalg.norm(W, 2)
    if smax == 0:
        raise InvalidArgumentError("W must be nonzero")
    return 2.0 / smax**2


def boundary_products(W, tol: float = 1e-9) -> np.ndarray:
    """Indices of product attributes on the boundary of their convex hull.

    If the attributes do not affinely span ``R^q`` the hull has empty
    interior and every attribute is a boundary point.
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    q, K = W.shape
    pts = W.T
    if K <= q or numerical_rank(pts[1:] - pts[0]) < q:
        return np.arange(K)
    try:
        hull = ConvexHull(pts)
    except QhullError:
        return np.arange(K)
    scale = max(1.0, float(np.max(np.abs(pts))))
    offsets = pts @ hull.equations[:, :-1].T + hull.equations[:, -1]
    return np.flatnonzero(np.max(offsets, axis=1) >= -tol * scale)


@dataclass
class SweepRow:
    a: float
    points: list
    stable: list
    distances: list

    @property
    def max_stable_distance(self) -> float:
        d = [dist for dist, st in zip(self.distances, self.stable) if st]
        return max(d) if d else float("nan")

    @property
    def max_distance(self) -> float:
        return max(self.distances) if self.distances else float("nan")

    def to_dict(self) -> dict:
        return {
            "a": self.a,
            "points": [np.asarray(p).tolist() for p in self.points],
            "stable": [bool(s) for s in self.stable],
            "distances": [float(d) for d in self.distances],
            "max_stable_distance": self.max_stable_distance,
            "max_distance": self.max_distance,
        }


def polarization_sweep(W, a_list, tol: float = 1e-9, n_starts: int = 20, seed: int = 0) -> list[SweepRow]:
    """Distance from each fixed point to the nearest boundary product, per ``a``.

    Every fixed point is tagged with its linear stability;
    ``max_stable_distance`` ignores unstable ones (for example the exact
    tie point midway between two products, a fixed point for every ``a``).
    """
    a_list = [float(a) for a in a_list]
    if any(a <= 0 for a in a_list) or any(b <= a for a, b in zip(a_list, a_list[1:])):
        raise InvalidArgumentError("a_list must be positive and increasing")
    W = np.atleast_2d(np.asarray(W, dtype=float))
    edge = W[:, boundary_products(W)]
    rows = []
    for a in a_list:
        pts = single_user_fixed_points(W, a, n_starts=n_starts, tol=tol, seed=seed)
        dists = [float(np.min(np.linalg.norm(edge - y[:, None], axis=0))) for y in pts]
        stable = [fixed_point_is_stable(W, a, y) for y in pts]
        rows.append(SweepRow(a, pts, stable, dists))
    return rows


# --- hyperplane construction -------------------------------------------------


def hyperplane_embed(V, n_checks: int = 10, seed: int = 0) -> np.ndarray:
    """Overwrite the last row of ``V`` with ones, putting every column on one affine hyperplane.

    Checks the result: any column is an affine combination (coefficients
    summing to one) of ``p`` other linearly independent columns.
    """
    V = np.array(V, dtype=float)
    if V.ndim != 2:
        raise InvalidArgumentError("V must be p x N")
    p, N = V.shape
    V[-1, :] = 1.0
    if numerical_rank(V) < p:
        raise RankError(f"embedded user attributes have rank < {p}")
    rng = np.random.default_rng(seed)
    if N > p:
        for _ in range(n_checks):
            order = rng.permutation(N)
            basis = V[:, order[:p]]
            if numerical_rank(basis) < p:
                continue
            coef = np.linalg.solve(basis, V[:, order[p:]])
            if np.max(np.abs(coef.sum(axis=0) - 1.0)) > 1e-9:
                raise RankError("affine hyperplane condition failed")
    return V


def affine_coefficients(V, subset, target) -> np.ndarray:
    """Coefficients expressing column ``target`` through the columns in ``subset``."""
    V = np.asarray(V, dtype=float)
    return np.linalg.solve(V[:, list(subset)], V[:, target])

