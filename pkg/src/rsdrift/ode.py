"""Mean-field ODE of the recommender/population system.

With ``theta = s^{-1} b`` and ``p_n = softmax(a * W^T Theta^T v_n)`` the
right-hand side is, user block by user block,

    db = sum_n lam_n  v_n kron (W diag(p_n) r_n)                 - b
    ds = sum_n lam_n (v_n v_n^T) kron (W diag(p_n) W^T)          - s
    dy_n = lam_n (W p_n - y_n)

where ``r_n = W^T y_n``.  This is the Kronecker-form drift with the
``NK x NK`` diagonal never materialized.  The kernel is compiled with numba;
state is carried as one flat vector ``[b, vec(s), y]``.
"""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass

import numba
import numpy as np

from .errors import IntegrationError, InvalidArgumentError, RangeError, SingularMatrixError
from .generic_sa import harmonic_time
from .model import ModelConfig


@dataclass(frozen=True)
class OdeState:
    b: np.ndarray
    s: np.ndarray
    y: np.ndarray
    tau: float = 0.0

    @classmethod
    def initial(cls, cfg: ModelConfig, y0, tau: float = 0.0) -> "OdeState":
        return cls(np.zeros(cfg.pq), cfg.zeta * np.eye(cfg.pq), np.asarray(y0, dtype=float).ravel().copy(), tau)

    def flat(self) -> np.ndarray:
        return np.concatenate([np.ravel(self.b), np.ravel(self.s), np.ravel(self.y)])

    @classmethod
    def from_flat(cls, x: np.ndarray, cfg: ModelConfig, tau: float = 0.0) -> "OdeState":
        pq = cfg.pq
        return cls(x[:pq].copy(), x[pq:pq + pq * pq].reshape(pq, pq).copy(), x[pq + pq * pq:].copy(), tau)


# ---------------------------------------------------------------------------
# compiled kernel


@numba.njit(cache=True)
def _cholesky_solve(s, b, L, out):
    """Solve ``s x = b`` (lower triangle of ``s`` used); False if not PD."""
    n = s.shape[0]
    for j in range(n):
        d = s[j, j]
        for k in range(j):
            d -= L[j, k] * L[j, k]
        if not d > 0.0:
            return False
        L[j, j] = math.sqrt(d)
        for i in range(j + 1, n):
            acc = s[i, j]
            for k in range(j):
                acc -= L[i, k] * L[j, k]
            L[i, j] = acc / L[j, j]
    for i in range(n):
        acc = b[i]
        for k in range(i):
            acc -= L[i, k] * out[k]
        out[i] = acc / L[i, i]
    for i in range(n - 1, -1, -1):
        acc = out[i]
        for k in range(i + 1, n):
            acc -= L[k, i] * out[k]
        out[i] = acc / L[i, i]
    return True


@numba.njit(cache=True)
def _rhs(x, V, W, lam, a, out, P):
    """Write the drift at ``x`` into ``out`` and the softmax blocks into ``P``."""
    p, N = V.shape
    q, K = W.shape
    pq = p * q
    b = x[:pq]
    s = x[pq:pq + pq * pq].reshape(pq, pq)
    y = x[pq + pq * pq:]
    L = np.zeros((pq, pq))
    theta = np.empty(pq)
    if not _cholesky_solve(s, b, L, theta):
        return False

    db = out[:pq]
    ds = out[pq:pq + pq * pq].reshape(pq, pq)
    dy = out[pq + pq * pq:]
    for i in range(pq):
        db[i] = -b[i]
        for j in range(pq):
            ds[i, j] = -s[i, j]

    u = np.empty(q)
    z = np.empty(q)
    Mn = np.empty((q, q))
    for n in range(N):
        for j in range(q):
            acc = 0.0
            for i in range(p):
                acc += V[i, n] * theta[i * q + j]
            u[j] = acc
        mx = -np.inf
        for k in range(K):
            acc = 0.0
            for j in range(q):
                acc += W[j, k] * u[j]
            P[n, k] = a * acc
            if P[n, k] > mx:
                mx = P[n, k]
        tot = 0.0
        for k in range(K):
            P[n, k] = math.exp(P[n, k] - mx)
            tot += P[n, k]
        for k in range(K):
            P[n, k] /= tot

        ln = lam[n]
        yn = y[n * q:(n + 1) * q]
        for j in range(q):
            z[j] = 0.0
            acc = 0.0
            for k in range(K):
                acc += W[j, k] * P[n, k]
            dy[n * q + j] = ln * (acc - yn[j])
        for k in range(K):
            r = 0.0
            for j in range(q):
                r += W[j, k] * yn[j]
            wgt = P[n, k] * r
            for j in range(q):
                z[j] += W[j, k] * wgt
        for j in range(q):
            for l in range(q):
                acc = 0.0
                for k in range(K):
                    acc += W[j, k] * P[n, k] * W[l, k]
                Mn[j, l] = acc
        for i in range(p):
            cvi = ln * V[i, n]
            for j in range(q):
                db[i * q + j] += cvi * z[j]
            for k2 in range(p):
                c = cvi * V[k2, n]
                for j in range(q):
                    for l in range(q):
                        ds[i * q + j, k2 * q + l] += c * Mn[j, l]
    return True


@numba.njit(cache=True)
def _symmetrize(x, pq):
    s = x[pq:pq + pq * pq].reshape(pq, pq)
    for i in range(pq):
        for j in range(i + 1, pq):
            m = 0.5 * (s[i, j] + s[j, i])
            s[i, j] = m
            s[j, i] = m


@numba.njit(cache=True)
def _integrate(x0, V, W, lam, a, hs, record, rk4):
    """Integrate with step sizes ``hs``; returns (records, record_steps, fail_step).

    The state after step ``i`` is recorded when ``record[i]`` is set.
    """
    pq = V.shape[0] * W.shape[0]
    N = V.shape[1]
    K = W.shape[1]
    dim = x0.size
    n_total = hs.size
    n_rec = 1
    for i in range(n_total):
        if record[i]:
            n_rec += 1
    recs = np.empty((n_rec, dim))
    rec_steps = np.empty(n_rec, dtype=np.int64)
    P = np.empty((N, K))
    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    tmp = np.empty(dim)
    x = x0.copy()
    recs[0] = x
    rec_steps[0] = 0
    r = 1
    for step in range(n_total):
        hh = hs[step]
        if not _rhs(x, V, W, lam, a, k1, P):
            return recs[:r], rec_steps[:r], step
        if rk4:
            for i in range(dim):
                tmp[i] = x[i] + 0.5 * hh * k1[i]
            if not _rhs(tmp, V, W, lam, a, k2, P):
                return recs[:r], rec_steps[:r], step
            for i in range(dim):
                tmp[i] = x[i] + 0.5 * hh * k2[i]
            if not _rhs(tmp, V, W, lam, a, k3, P):
                return recs[:r], rec_steps[:r], step
            for i in range(dim):
                tmp[i] = x[i] + hh * k3[i]
            if not _rhs(tmp, V, W, lam, a, k4, P):
                return recs[:r], rec_steps[:r], step
            for i in range(dim):
                x[i] += hh / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        else:
            for i in range(dim):
                x[i] += hh * k1[i]
        _symmetrize(x, pq)
        if record[step]:
            recs[r] = x
            rec_steps[r] = step + 1
            r += 1
    return recs[:r], rec_steps[:r], -1


def _kernel_args(cfg: ModelConfig):
    return (np.ascontiguousarray(cfg.V), np.ascontiguousarray(cfg.W), np.ascontiguousarray(cfg.lam), float(cfg.a))


# ---------------------------------------------------------------------------
# public API


def rhs_flat(x: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Drift of the flat state ``[b, vec(s), y]``."""
    x = np.ascontiguousarray(x, dtype=float)
    out = np.empty_like(x)
    P = np.empty((cfg.N, cfg.K))
    if not _rhs(x, *_kernel_args(cfg), out, P):
        raise SingularMatrixError("s is not positive definite")
    return out


def ode_rhs(state: OdeState, cfg: ModelConfig):
    """Return ``(db, ds, dy)`` at ``state``."""
    pq = cfg.pq
    s = np.asarray(state.s, dtype=float)
    if s.shape != (pq, pq) or np.shape(state.b) != (pq,) or np.shape(state.y) != (cfg.N * cfg.q,):
        raise InvalidArgumentError("state dimensions do not match the configuration")
    out = rhs_flat(state.flat(), cfg)
    return out[:pq], out[pq:pq + pq * pq].reshape(pq, pq), out[pq + pq * pq:]


class OdeTrajectory(Sequence):
    """Recorded ODE states; indexing yields :class:`OdeState`."""

    def __init__(self, cfg: ModelConfig, taus: np.ndarray, X: np.ndarray):
        self.cfg = cfg
        self.taus = np.asarray(taus, dtype=float)
        self.X = np.asarray(X, dtype=float)

    def __len__(self):
        return len(self.taus)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return OdeTrajectory(self.cfg, self.taus[i], self.X[i])
        return OdeState.from_flat(self.X[i], self.cfg, float(self.taus[i]))

    @property
    def Y(self) -> np.ndarray:
        pq = self.cfg.pq
        return self.X[:, pq + pq * pq:]

    @property
    def b(self) -> np.ndarray:
        return self.X[:, :self.cfg.pq]

    def theta(self) -> np.ndarray:
        pq = self.cfg.pq
        return np.array([np.linalg.solve(x[pq:pq + pq * pq].reshape(pq, pq), x[:pq]) for x in self.X])

    def y_at(self, tau) -> np.ndarray:
        """Linear interpolation of ``y`` at ODE time(s) ``tau``."""
        tau = np.atleast_1d(np.asarray(tau, dtype=float))
        lo, hi = self.taus[0], self.taus[-1]
        span = max(abs(hi), 1.0) * 1e-12
        if np.any(tau < lo - span) or np.any(tau > hi + span):
            raise RangeError(f"tau outside integrated range [{lo}, {hi}]")
        Y = self.Y
        return np.column_stack([np.interp(tau, self.taus, Y[:, j]) for j in range(Y.shape[1])])

    def to_csv(self, path) -> None:
        """Same columns as the stochastic trajectory CSV; ``t`` is left empty."""
        cfg = self.cfg
        header = ["t", "tau", "loss"] + [f"theta_{i}" for i in range(cfg.pq)]
        header += [f"y_{n}_{j}" for n in range(cfg.N) for j in range(cfg.q)]
        thetas = self.theta()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for tau, th, y in zip(self.taus, thetas, self.Y):
                w.writerow(["", _fmt(tau), ""] + [_fmt(v) for v in th] + [_fmt(v) for v in y])


def _fmt(x) -> str:
    return format(float(x), ".17g")


GRADE_RATIO = 1.05
GRADE_FRACTION = 0.01


def step_schedule(h: float, tau_max: float, s_min: float | None = None):
    """Step sizes covering ``[0, tau_max]``, the time reached after each step
    and the number of graded steps.

    With ``s_min`` (smallest eigenvalue of the initial ``s``) the first steps
    grow geometrically from ``GRADE_FRACTION * s_min`` to ``h``.  While ``s``
    is still close to its initial value, ``theta = s^{-1} b`` moves on a time
    scale of order ``s_min``; the graded start resolves that layer.  The
    graded steps are rescaled to end on a multiple of ``h`` so that the
    remaining fixed steps sit on the grid ``k * h``.
    """
    graded = np.empty(0)
    if s_min is not None:
        h0 = min(h, max(GRADE_FRACTION * s_min, 1e-8 * h))
        if h0 < h:
            n = int(math.ceil(math.log(h / h0) / math.log(GRADE_RATIO)))
            graded = h0 * GRADE_RATIO ** np.arange(n)
            if graded.sum() >= tau_max:
                # horizon ends inside the graded layer
                ends = np.cumsum(graded)
                keep = int(np.searchsorted(ends, tau_max * (1 - 1e-12)))
                hs = np.append(graded[:keep], tau_max - (ends[keep - 1] if keep else 0.0))
                taus = np.append(ends[:keep], tau_max)
                return hs, taus, hs.size
            m = int(math.ceil(graded.sum() / h))
            graded *= m * h / graded.sum()
    m = int(round(graded.sum() / h)) if graded.size else 0
    if m * h >= tau_max - 1e-9 * h:
        # the rescaled layer would overshoot; compress it onto the horizon
        graded *= tau_max / graded.sum()
        taus = np.cumsum(graded)
        taus[-1] = tau_max
        return graded, taus, graded.size
    n_fixed = int(math.floor((tau_max - m * h) / h + 1e-9))
    h_last = tau_max - (m + n_fixed) * h
    if h_last <= 1e-9 * h:
        h_last = 0.0
    hs = np.concatenate([graded, np.full(n_fixed, h), [h_last] if h_last > 0 else []])
    taus = np.concatenate([np.cumsum(graded), (m + np.arange(1, n_fixed + 1)) * h,
                           [tau_max] if h_last > 0 else []])
    if graded.size:
        taus[graded.size - 1] = m * h
    return hs, np.minimum(taus, tau_max), graded.size


def integrate(state0: OdeState, cfg: ModelConfig, tau_max: float, h: float = 0.01, method: str = "rk4",
              record_dtau: float = 0.5, graded_start: bool = True) -> OdeTrajectory:
    """Integration from ``state0`` over ``[tau0, tau0 + tau_max]`` with step ``h``.

    States are recorded every ``record_dtau`` (rounded to a whole number of
    steps) and at the end.  ``s`` is re-symmetrized after every step.  With
    ``graded_start`` the first steps are refined (see :func:`step_schedule`);
    pass ``False`` for strictly uniform steps.
    """
    if method not in ("rk4", "euler"):
        raise InvalidArgumentError(f"method must be 'rk4' or 'euler', got {method!r}")
    if not h > 0:
        raise InvalidArgumentError("h must be > 0")
    if tau_max < 0:
        raise InvalidArgumentError("tau_max must be >= 0")
    if not record_dtau > 0:
        raise InvalidArgumentError("record_dtau must be > 0")
    x0 = np.ascontiguousarray(state0.flat(), dtype=float)
    if x0.size != cfg.pq + cfg.pq ** 2 + cfg.N * cfg.q:
        raise InvalidArgumentError("state dimensions do not match the configuration")
    tau0 = float(state0.tau)
    if tau_max == 0:
        return OdeTrajectory(cfg, [tau0], x0[None, :])
    s_min = None
    if graded_start:
        s0 = np.asarray(state0.s, dtype=float)
        s_min = float(np.linalg.eigvalsh(0.5 * (s0 + s0.T))[0])
        if not s_min > 0:
            raise IntegrationError(f"s is not positive definite at tau = {tau0:.6g}", tau=tau0)
    hs, taus, n_graded = step_schedule(float(h), float(tau_max), s_min)
    stride = max(1, int(round(record_dtau / h)))
    # graded steps are not recorded, except the one that lands on the grid
    record = np.rint(taus / h).astype(np.int64) % stride == 0
    record[:max(n_graded - 1, 0)] = False
    record[-1] = True
    recs, steps, fail = _integrate(x0, *_kernel_args(cfg), hs, record, method == "rk4")
    if fail >= 0:
        tau_fail = tau0 + (taus[fail - 1] if fail > 0 else 0.0)
        raise IntegrationError(f"s lost positive definiteness at tau = {tau_fail:.6g}", tau=tau_fail)
    rec_taus = tau0 + np.concatenate([[0.0], taus[steps[1:] - 1]])
    return OdeTrajectory(cfg, rec_taus, recs)


def overlay_error_at(taus, ys, ode: OdeTrajectory) -> np.ndarray:
    """``max_j |ys[i, j] - y_j(taus[i])|`` for each sample ``i``."""
    ys = np.atleast_2d(np.asarray(ys, dtype=float))
    if ys.shape[1] != ode.Y.shape[1]:
        raise InvalidArgumentError(f"population dimension {ys.shape[1]} != ODE dimension {ode.Y.shape[1]}")
    return np.max(np.abs(ys - ode.y_at(taus)), axis=1)


def overlay_error(stoch, ode: OdeTrajectory) -> np.ndarray:
    """Sup-norm gap between stochastic records and the ODE at matching ODE times.

    Record ``t`` is compared with ``y(tau)`` where ``tau`` is the ODE time
    accumulated by the step sizes since the first record.
    """
    if len(stoch.times) == 0 or len(ode) == 0:
        raise InvalidArgumentError("both trajectories must be non-empty")
    taus = harmonic_time(np.asarray(stoch.times)) - harmonic_time(int(stoch.times[0])) + ode.taus[0]
    return overlay_error_at(taus, stoch.Y, ode)
