"""Generic coupled learner/environment stochastic-approximation loop.

A :class:`CoupledSystem` bundles the signal, action, reward and update
functions of a learner with state ``phi`` interacting with an environment
with state ``psi``.  Both are advanced by

    phi' = phi + alpha_t * Phi(U, A, R, phi)
    psi' = psi + beta_t  * Psi(U, A, R, psi)

Plugins receive a :class:`~rsdrift.rng.StepDraws` for their randomness.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Any, Callable, NamedTuple, Optional

import numpy as np
from scipy.special import digamma

from .errors import InvalidArgumentError, NumericError
from .rng import DRAWS_PER_STEP, BlockStream, StepDraws


def harmonic_step(t: int) -> float:
    """Default step size ``1 / (t + 1)``."""
    return 1.0 / (t + 1)


def zero_step(t: int) -> float:
    return 0.0


def harmonic_time(t):
    """ODE time reached after ``t`` steps of size ``1/(s+1)``: the harmonic number ``H_t``."""
    t_arr = np.asarray(t)
    if np.any(t_arr < 0):
        raise InvalidArgumentError("harmonic_time needs t >= 0")
    out = np.where(t_arr == 0, 0.0, digamma(t_arr + 1.0) + np.euler_gamma)
    return float(out) if out.ndim == 0 else out


@dataclass
class CoupledSystem:
    """Pluggable description of a learner/environment pair.

    ``batch_sampler(phi, psi, uniforms)`` is optional; when given it must
    return ``(Phi, Psi)`` arrays of shape ``(M, learner_dim)`` and
    ``(M, env_dim)`` for an ``(M, 4)`` array of uniforms and is used by
    :func:`estimate_mean_drift` in place of the per-sample loop.
    """

    learner_dim: int
    env_dim: int
    signal_sampler: Callable[[np.ndarray, StepDraws], Any]
    action_kernel: Callable[[Any, np.ndarray, StepDraws], Any]
    reward_fn: Callable[[Any, Any, np.ndarray], float]
    phi_update: Callable[[Any, Any, float, np.ndarray], np.ndarray]
    psi_update: Callable[[Any, Any, float, np.ndarray], np.ndarray]
    noise_sampler: Callable[[StepDraws], float] = lambda draws: 0.0
    alpha: Callable[[int], float] = harmonic_step
    beta: Callable[[int], float] = harmonic_step
    batch_sampler: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], tuple]] = None


class StepRecord(NamedTuple):
    U: Any
    A: Any
    R: float


@dataclass
class SaTrajectory:
    times: list = field(default_factory=list)
    phi: list = field(default_factory=list)
    psi: list = field(default_factory=list)
    rewards: list = field(default_factory=list)

    def to_csv(self, path, t0: Optional[int] = None) -> None:
        """Columns ``t, tau, phi_0.., psi_0.., reward``; tau counts ODE time from the first record."""
        t0 = self.times[0] if t0 is None else t0
        base = harmonic_time(t0)
        n_phi = len(self.phi[0])
        n_psi = len(self.psi[0])
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "tau"] + [f"phi_{i}" for i in range(n_phi)] + [f"psi_{i}" for i in range(n_psi)] + ["reward"])
            for t, ph, ps, r in zip(self.times, self.phi, self.psi, self.rewards):
                row = [str(t), _fmt(harmonic_time(t) - base)]
                row += [_fmt(x) for x in ph] + [_fmt(x) for x in ps] + [_fmt(r)]
                w.writerow(row)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _finite_or_raise(arr, name):
    arr = np.asarray(arr, dtype=float)
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{name} produced non-finite values")
    return arr


def sa_step(sys: CoupledSystem, phi, psi, t: int, draws: StepDraws):
    """One interaction: sample ``(U, A, R)`` and advance both states."""
    if t < 0:
        raise InvalidArgumentError("t must be >= 0")
    U = sys.signal_sampler(psi, draws)
    A = sys.action_kernel(U, phi, draws)
    R = sys.reward_fn(U, A, psi) + sys.noise_sampler(draws)
    if not math.isfinite(R):
        raise NumericError("reward_fn produced a non-finite reward")
    d_phi = _finite_or_raise(sys.phi_update(U, A, R, phi), "phi_update")
    d_psi = _finite_or_raise(sys.psi_update(U, A, R, psi), "psi_update")
    phi_new = phi + sys.alpha(t) * d_phi
    psi_new = psi + sys.beta(t) * d_psi
    return phi_new, psi_new, StepRecord(U, A, R)


def run_sa(sys: CoupledSystem, phi0, psi0, T: int, record_every: int = 1000, seed: int = 0, t0: int = 0) -> SaTrajectory:
    """Run ``T`` steps starting at time index ``t0``.

    Records the initial state, every ``record_every``-th state and the final
    state, giving ``ceil(T / record_every) + 1`` records.
    """
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    if record_every < 1:
        raise InvalidArgumentError("record_every must be >= 1")
    phi = np.array(phi0, dtype=float)
    psi = np.array(psi0, dtype=float)
    traj = SaTrajectory([t0], [phi.copy()], [psi.copy()], [float("nan")])
    stream = BlockStream(seed, t0)
    for k in range(1, T + 1):
        t = t0 + k - 1
        phi, psi, rec = sa_step(sys, phi, psi, t, stream.next())
        if k % record_every == 0 or k == T:
            traj.times.append(t + 1)
            traj.phi.append(phi.copy())
            traj.psi.append(psi.copy())
            traj.rewards.append(float(rec.R))
    return traj


class DriftEstimate(NamedTuple):
    phi_drift: np.ndarray
    psi_drift: np.ndarray
    std_err: np.ndarray  # phi coordinates first, then psi


def estimate_mean_drift(sys: CoupledSystem, phi, psi, M: int, rng: np.random.Generator, chunk: int = 100_000) -> DriftEstimate:
    """Monte-Carlo mean of ``Phi`` and ``Psi`` at a frozen state ``(phi, psi)``."""
    if M < 1:
        raise InvalidArgumentError("M must be >= 1")
    phi = np.asarray(phi, dtype=float)
    psi = np.asarray(psi, dtype=float)
    dim = sys.learner_dim + sys.env_dim
    s1 = np.zeros(dim)
    s2 = np.zeros(dim)
    done = 0
    while done < M:
        m = min(chunk, M - done)
        u = rng.random((m, DRAWS_PER_STEP))
        if sys.batch_sampler is not None:
            d_phi, d_psi = sys.batch_sampler(phi, psi, u)
            x = np.hstack([d_phi, d_psi])
        else:
            x = np.empty((m, dim))
            for i in range(m):
                draws = StepDraws(u[i])
                U = sys.signal_sampler(psi, draws)
                A = sys.action_kernel(U, phi, draws)
                R = sys.reward_fn(U, A, psi) + sys.noise_sampler(draws)
                x[i, :sys.learner_dim] = sys.phi_update(U, A, R, phi)
                x[i, sys.learner_dim:] = sys.psi_update(U, A, R, psi)
        # shifted sums keep the variance accurate when the mean is large
        if done == 0:
            shift = x[0].copy()
        x = x - shift
        s1 += x.sum(axis=0)
        s2 += np.einsum("ij,ij->j", x, x)
        done += m
    mean_shifted = s1 / M
    mean = mean_shifted + shift
    if M > 1:
        var = np.maximum(s2 / M - mean_shifted**2, 0.0) * M / (M - 1)
        se = np.sqrt(var / M)
    else:
        se = np.zeros(dim)
    return DriftEstimate(mean[:sys.learner_dim], mean[sys.learner_dim:], se)
