"""Stochastic simulation of the recommender and its drifting user population.

Time starts at ``t = 1`` with ``B_1 = 0`` and ``S_1 = zeta I`` so that the
first update uses step ``1/2`` and every ``S_t`` stays positive definite:

    S_t = (zeta I + sum_{s<t} C_s C_s^T) / t,   B_t = (sum_{s<t} C_s R_s) / t,

and ``theta_t = S_t^{-1} B_t`` minimizes the regularized loss over the first
``t - 1`` observations.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Optional

import numpy as np
from scipy.special import ndtri

from .errors import InvalidArgumentError
from .generic_sa import CoupledSystem, harmonic_step, harmonic_time
from .model import LearnerState, ModelConfig, PopulationState, full_prob_vector, recommendation_probs, solve_spd
from .rng import BlockStream, StepDraws, categorical


class Event(NamedTuple):
    U: int
    A: int
    R: float


def _sample_event(cfg: ModelConfig, theta, Y, draws: StepDraws, forced_user=None, forced_action=None):
    q = cfg.q
    n = categorical(draws.slot(0), cfg.arrival_cdf) if forced_user is None else int(forced_user)
    if forced_action is None:
        k = categorical(draws.slot(1), np.cumsum(recommendation_probs(theta, n, cfg)))
    else:
        k = int(forced_action)
    R = float(cfg.W[:, k] @ Y[n * q:(n + 1) * q])
    scale = cfg.noise.scale
    if scale > 0.0:
        R += scale * draws.normal(2)
    return n, k, R


def _advance(cfg: ModelConfig, B, S, Y, t, draws, beta=harmonic_step, forced_user=None, forced_action=None):
    theta = solve_spd(S, B)
    n, k, R = _sample_event(cfg, theta, Y, draws, forced_user, forced_action)
    c = cfg.contexts[n, k]
    alpha = harmonic_step(t)
    B_new = B + alpha * (c * R - B)
    S_new = S + alpha * (np.outer(c, c) - S)
    Y_new = Y.copy()
    q = cfg.q
    sl = slice(n * q, (n + 1) * q)
    Y_new[sl] = Y[sl] + beta(t) * (cfg.W[:, k] - Y[sl])
    return B_new, S_new, Y_new, Event(n, k, R)


def simulate_step(cfg: ModelConfig, learner: LearnerState, pop: PopulationState, draws: StepDraws,
                  forced_user: Optional[int] = None, forced_action: Optional[int] = None,
                  beta: Callable[[int], float] = harmonic_step):
    """Advance learner and population by one interaction at time ``t``.

    ``forced_user`` / ``forced_action`` override the sampled arrival and
    recommendation (used to probe the recursions directly).
    """
    if learner.t != pop.t:
        raise InvalidArgumentError(f"learner at t={learner.t} but population at t={pop.t}")
    t = learner.t
    if t < 1:
        raise InvalidArgumentError("time index starts at t = 1")
    B, S, Y, ev = _advance(cfg, np.asarray(learner.B, float), np.asarray(learner.S, float),
                           np.asarray(pop.Y, float), t, draws, beta, forced_user, forced_action)
    return LearnerState(B, S, t + 1), PopulationState(Y, t + 1), ev


@dataclass
class BanditTrajectory:
    """Recorded states of a stochastic run (one row per record)."""

    cfg: ModelConfig
    times: np.ndarray
    B: np.ndarray
    S: np.ndarray
    Y: np.ndarray
    theta: np.ndarray
    loss: np.ndarray
    events: Optional[list] = field(default=None)

    @property
    def learner(self) -> list[LearnerState]:
        return [LearnerState(b, s, int(t)) for b, s, t in zip(self.B, self.S, self.times)]

    @property
    def population(self) -> list[PopulationState]:
        return [PopulationState(y, int(t)) for y, t in zip(self.Y, self.times)]

    @property
    def taus(self) -> np.ndarray:
        """ODE time elapsed since the first record."""
        return harmonic_time(self.times) - harmonic_time(int(self.times[0]))

    def to_csv(self, path) -> None:
        N, q = self.cfg.N, self.cfg.q
        header = ["t", "tau", "loss"] + [f"theta_{i}" for i in range(self.cfg.pq)]
        header += [f"y_{n}_{j}" for n in range(N) for j in range(q)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for t, tau, loss, th, y in zip(self.times, self.taus, self.loss, self.theta, self.Y):
                w.writerow([str(int(t)), _fmt(tau), _fmt(loss)] + [_fmt(x) for x in th] + [_fmt(x) for x in y])

    def summary(self) -> dict:
        N, q = self.cfg.N, self.cfg.q
        return {
            "final_t": int(self.times[-1]),
            "final_theta": self.theta[-1].tolist(),
            "final_B": self.B[-1].tolist(),
            "final_S": self.S[-1].tolist(),
            "final_y": self.Y[-1].reshape(N, q).tolist(),
            "tracking_gap": {"t": self.times.tolist(), "gap": tracking_gap(self).tolist()},
        }

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2)


def _fmt(x) -> str:
    return format(float(x), ".17g")


def run_simulation(cfg: ModelConfig, pop0: PopulationState, T: int, record_every: int = 1000,
                   seed: Optional[int] = None, keep_events: bool = False,
                   beta: Callable[[int], float] = harmonic_step,
                   record_times: Optional[Iterable[int]] = None) -> BanditTrajectory:
    """Simulate ``T`` interactions from ``pop0`` with the learner at ``B=0, S=zeta I``.

    ``seed`` defaults to ``cfg.seed``.  Records the initial state, every
    ``record_every``-th state and the final state.  If ``record_times`` is
    given it replaces ``record_every``: states are recorded at exactly those
    time indices (plus the initial and final state).
    """
    if T < 1:
        raise InvalidArgumentError("T must be >= 1")
    if record_every < 1:
        raise InvalidArgumentError("record_every must be >= 1")
    wanted = None if record_times is None else {int(x) for x in record_times}
    Y = np.array(pop0.Y, dtype=float)
    if Y.shape != (cfg.N * cfg.q,):
        raise InvalidArgumentError(f"population vector must have length {cfg.N * cfg.q}")
    if not np.all(np.isfinite(Y)):
        raise InvalidArgumentError("initial population contains non-finite values")
    seed = cfg.seed if seed is None else seed
    t = int(pop0.t)
    if t < 1:
        raise InvalidArgumentError("time index starts at t = 1")
    learner = LearnerState.initial(cfg, t)
    B, S = learner.B, learner.S
    sum_r2 = 0.0

    times, Bs, Ss, Ys, thetas, losses = [], [], [], [], [], []
    events = [] if keep_events else None

    def record(t, B, S, Y):
        theta = solve_spd(S, B)
        # loss over the t-1 observations so far, from sufficient statistics
        # (t*B = sum C R, t*S = zeta I + sum C C^T)
        loss = sum_r2 - 2.0 * t * float(theta @ B) + t * float(theta @ S @ theta)
        times.append(t)
        Bs.append(B.copy())
        Ss.append(S.copy())
        Ys.append(Y.copy())
        thetas.append(theta)
        losses.append(max(loss, 0.0))

    record(t, B, S, Y)
    stream = BlockStream(seed, t)
    for k in range(1, T + 1):
        B, S, Y, ev = _advance(cfg, B, S, Y, t, stream.next(), beta)
        sum_r2 += ev.R * ev.R
        t += 1
        if keep_events:
            events.append(ev)
        hit = (k % record_every == 0) if wanted is None else (t in wanted)
        if hit or k == T:
            record(t, B, S, Y)
    return BanditTrajectory(cfg, np.array(times), np.array(Bs), np.array(Ss), np.array(Ys),
                            np.array(thetas), np.array(losses), events)


def tracking_gap(traj: BanditTrajectory) -> np.ndarray:
    """Per-step average loss ``L(theta_t) / t`` at every record."""
    return np.asarray(traj.loss) / np.asarray(traj.times, dtype=float)


def bandit_system(cfg: ModelConfig, beta: Callable[[int], float] = harmonic_step) -> CoupledSystem:
    """The recommender/population pair as a :class:`CoupledSystem`.

    ``phi = [B, vec(S)]`` and ``psi = Y``.  Arithmetic mirrors
    :func:`simulate_step` operation for operation, so runs agree bit for bit.
    """
    pq, q, W = cfg.pq, cfg.q, cfg.W
    scale = cfg.noise.scale
    G = cfg.contexts

    def signal(psi, draws):
        return categorical(draws.slot(0), cfg.arrival_cdf)

    def action(n, phi, draws):
        theta = solve_spd(phi[pq:].reshape(pq, pq), phi[:pq])
        return categorical(draws.slot(1), np.cumsum(recommendation_probs(theta, n, cfg)))

    def mean_reward(n, k, psi):
        return float(W[:, k] @ psi[n * q:(n + 1) * q])

    def noise(draws):
        return scale * draws.normal(2) if scale > 0.0 else 0.0

    def phi_update(n, k, R, phi):
        c = G[n, k]
        return np.concatenate([c * R - phi[:pq], (np.outer(c, c) - phi[pq:].reshape(pq, pq)).ravel()])

    def psi_update(n, k, R, psi):
        out = np.zeros_like(psi)
        sl = slice(n * q, (n + 1) * q)
        out[sl] = W[:, k] - psi[sl]
        return out

    def batch(phi, psi, u):
        theta = solve_spd(phi[pq:].reshape(pq, pq), phi[:pq])
        P = np.cumsum(recommendation_probs_all(theta, cfg), axis=1)
        M = len(u)
        users = np.minimum(np.searchsorted(cfg.arrival_cdf, u[:, 0] * cfg.arrival_cdf[-1], side="right"), cfg.N - 1)
        cdf = P[users]
        acts = np.minimum(np.sum(cdf <= (u[:, 1] * cdf[:, -1])[:, None], axis=1), cfg.K - 1)
        Yb = psi.reshape(cfg.N, q)
        R = np.einsum("jm,mj->m", W[:, acts], Yb[users])
        if scale > 0.0:
            R = R + scale * ndtri(u[:, 2])
        C = G[users, acts]
        d_phi = np.empty((M, pq + pq * pq))
        d_phi[:, :pq] = C * R[:, None] - phi[:pq]
        d_phi[:, pq:] = (C[:, :, None] * C[:, None, :]).reshape(M, pq * pq) - phi[pq:]
        d_psi = np.zeros((M, cfg.N, q))
        d_psi[np.arange(M), users] = W[:, acts].T - Yb[users]
        return d_phi, d_psi.reshape(M, cfg.N * q)

    return CoupledSystem(
        learner_dim=pq + pq * pq,
        env_dim=cfg.N * q,
        signal_sampler=signal,
        action_kernel=action,
        reward_fn=mean_reward,
        noise_sampler=noise,
        phi_update=phi_update,
        psi_update=psi_update,
        alpha=harmonic_step,
        beta=beta,
        batch_sampler=batch,
    )


def recommendation_probs_all(theta, cfg: ModelConfig) -> np.ndarray:
    """``(N, K)`` matrix of every user's recommendation distribution."""
    return full_prob_vector(theta, cfg).reshape(cfg.N, cfg.K)


def learner_phi(learner: LearnerState) -> np.ndarray:
    return np.concatenate([learner.B, np.asarray(learner.S).ravel()])
