"""Model configuration and the pure kernel of the bandit recommender.

Conventions used throughout the package:

* users and products are indexed from 0;
* the population vector ``Y`` stacks user blocks ``Y_n`` (length ``q``) in
  ascending user order;
* contexts follow ``(v kron w)[i*q + j] = v[i] * w[j]``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg.lapack import dposv

from .errors import ConfigError, InvalidArgumentError, NumericError, SingularMatrixError

RANK_RTOL = 1e-9
LAMBDA_ATOL = 1e-12

CONFIG_KEYS = (
    "n_users",
    "n_products",
    "p",
    "q",
    "user_attrs",
    "product_attrs",
    "arrival_probs",
    "a",
    "zeta",
    "noise",
    "seed",
)


def _frozen(x) -> np.ndarray:
    arr = np.array(x, dtype=float)
    arr.setflags(write=False)
    return arr


def numerical_rank(mat: np.ndarray, rtol: float = RANK_RTOL) -> int:
    """Number of singular values above ``rtol * sigma_max``."""
    sv = np.linalg.svd(np.atleast_2d(mat), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > rtol * sv[0]))


@dataclass(frozen=True)
class NoiseSpec:
    """Reward noise: ``"none"`` or zero-mean ``"gaussian"`` with std ``sigma``."""

    type: str = "none"
    sigma: float = 0.0

    def __post_init__(self):
        if self.type not in ("none", "gaussian"):
            raise ConfigError(f"noise.type must be 'none' or 'gaussian', got {self.type!r}", key="noise.type")
        if not np.isfinite(self.sigma) or self.sigma < 0:
            raise ConfigError("noise.sigma must be finite and >= 0", key="noise.sigma")

    @property
    def scale(self) -> float:
        return 0.0 if self.type == "none" else float(self.sigma)

    def to_dict(self) -> dict:
        return {"type": self.type, "sigma": float(self.sigma)}


@dataclass(frozen=True)
class ModelConfig:
    """All fixed parameters of one recommender/population instance.

    ``V`` is ``p x N`` (column ``n`` is the attribute of user ``n``) and ``W``
    is ``q x K``.  Arrays are stored read-only.
    """

    V: np.ndarray
    W: np.ndarray
    lam: np.ndarray
    a: float
    zeta: float
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "V", _frozen(np.atleast_2d(self.V)))
        object.__setattr__(self, "W", _frozen(np.atleast_2d(self.W)))
        object.__setattr__(self, "lam", _frozen(np.ravel(self.lam)))
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "zeta", float(self.zeta))
        object.__setattr__(self, "seed", int(self.seed))
        if isinstance(self.noise, dict):
            object.__setattr__(self, "noise", NoiseSpec(**self.noise))
        problems = self.invariant_violations()
        if problems:
            key, msg = problems[0]
            raise ConfigError("; ".join(f"{k}: {m}" for k, m in problems), key=key, problems=problems)

    # dimensions ---------------------------------------------------------
    @property
    def N(self) -> int:
        return self.V.shape[1]

    @property
    def K(self) -> int:
        return self.W.shape[1]

    @property
    def p(self) -> int:
        return self.V.shape[0]

    @property
    def q(self) -> int:
        return self.W.shape[0]

    @property
    def pq(self) -> int:
        return self.p * self.q

    def invariant_violations(self) -> list[tuple[str, str]]:
        """List of ``(key, message)`` for every violated structural invariant."""
        out = []
        lam = self.lam
        if lam.shape != (self.N,):
            out.append(("arrival_probs", f"expected {self.N} entries, got {lam.size}"))
        elif not np.all(np.isfinite(lam)) or np.any(lam < 0):
            out.append(("arrival_probs", "entries must be finite and >= 0"))
        elif abs(lam.sum() - 1.0) > LAMBDA_ATOL:
            out.append(("arrival_probs", f"must sum to 1 (sum = {lam.sum():.17g})"))
        if not (np.all(np.isfinite(self.V)) and np.all(np.isfinite(self.W))):
            out.append(("user_attrs" if not np.all(np.isfinite(self.V)) else "product_attrs", "non-finite entries"))
        else:
            if self.N < self.p or numerical_rank(self.V) < self.p:
                out.append(("user_attrs", f"user attributes must span R^{self.p} (need N >= p and rank p)"))
            if self.K < self.q or numerical_rank(self.W) < self.q:
                out.append(("product_attrs", f"product attributes must span R^{self.q} (need K >= q and rank q)"))
        if not np.isfinite(self.a) or self.a < 0:
            out.append(("a", "must be finite and >= 0"))
        if not np.isfinite(self.zeta) or self.zeta <= 0:
            out.append(("zeta", "must be > 0"))
        if self.seed < 0:
            out.append(("seed", "must be an unsigned integer"))
        return out

    # cached derived quantities -----------------------------------------
    @cached_property
    def contexts(self) -> np.ndarray:
        """Array ``(N, K, p*q)`` with ``contexts[n, k] = v_n kron w_k``."""
        G = np.einsum("in,jk->nkij", self.V, self.W).reshape(self.N, self.K, self.pq)
        G.setflags(write=False)
        return G

    @cached_property
    def arrival_cdf(self) -> np.ndarray:
        return np.cumsum(self.lam)

    def replace(self, **changes) -> "ModelConfig":
        kw = dict(V=self.V, W=self.W, lam=self.lam, a=self.a, zeta=self.zeta, noise=self.noise, seed=self.seed)
        kw.update(changes)
        return ModelConfig(**kw)

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "n_users": self.N,
            "n_products": self.K,
            "p": self.p,
            "q": self.q,
            "user_attrs": self.V.T.tolist(),
            "product_attrs": self.W.T.tolist(),
            "arrival_probs": self.lam.tolist(),
            "a": self.a,
            "zeta": self.zeta,
            "noise": self.noise.to_dict(),
            "seed": self.seed,
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        missing = [k for k in CONFIG_KEYS if k not in doc]
        if missing:
            raise ConfigError(f"missing config key(s): {', '.join(missing)}", key=missing[0])
        try:
            V = np.array(doc["user_attrs"], dtype=float).T
            W = np.array(doc["product_attrs"], dtype=float).T
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"attribute arrays are ragged or non-numeric: {exc}", key="user_attrs") from exc
        if V.ndim != 2 or V.shape != (doc["p"], doc["n_users"]):
            raise ConfigError(
                f"user_attrs must be {doc['n_users']} arrays of length {doc['p']}", key="user_attrs"
            )
        if W.ndim != 2 or W.shape != (doc["q"], doc["n_products"]):
            raise ConfigError(
                f"product_attrs must be {doc['n_products']} arrays of length {doc['q']}", key="product_attrs"
            )
        noise = doc["noise"]
        if not isinstance(noise, dict) or "type" not in noise:
            raise ConfigError("noise must be an object with a 'type' key", key="noise")
        return cls(
            V=V,
            W=W,
            lam=doc["arrival_probs"],
            a=doc["a"],
            zeta=doc["zeta"],
            noise=NoiseSpec(type=noise["type"], sigma=float(noise.get("sigma", 0.0))),
            seed=doc["seed"],
        )

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class LearnerState:
    """Recommender belief ``(B, S)`` at discrete time ``t``."""

    B: np.ndarray
    S: np.ndarray
    t: int

    @classmethod
    def initial(cls, cfg: ModelConfig, t: int = 1) -> "LearnerState":
        return cls(B=np.zeros(cfg.pq), S=cfg.zeta * np.eye(cfg.pq), t=t)


@dataclass(frozen=True)
class PopulationState:
    """Stacked user states ``Y`` (length ``N*q``) at discrete time ``t``."""

    Y: np.ndarray
    t: int

    @classmethod
    def from_users(cls, users: Sequence[Sequence[float]], t: int = 1) -> "PopulationState":
        return cls(Y=np.asarray(users, dtype=float).ravel().copy(), t=t)

    def user(self, n: int, q: int) -> np.ndarray:
        return self.Y[n * q:(n + 1) * q]


@dataclass(frozen=True)
class MismatchReport:
    stationary: bool
    learnable: bool
    mismatch: bool

    def to_dict(self) -> dict:
        return {"stationary": self.stationary, "learnable": self.learnable, "mismatch": self.mismatch}


def build_context(v, w, cfg: ModelConfig | None = None) -> np.ndarray:
    """Context vector ``v kron w``."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    if v.ndim != 1 or w.ndim != 1:
        raise InvalidArgumentError("v and w must be 1-D")
    if cfg is not None and (v.size != cfg.p or w.size != cfg.q):
        raise InvalidArgumentError(f"expected v in R^{cfg.p} and w in R^{cfg.q}, got {v.size} and {w.size}")
    return np.outer(v, w).ravel()


def softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax along the last axis with max-subtraction."""
    z = logits - np.max(logits, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def _check_theta(theta, cfg: ModelConfig) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (cfg.pq,):
        raise InvalidArgumentError(f"theta must have length {cfg.pq}, got shape {theta.shape}")
    if not np.all(np.isfinite(theta)):
        raise NumericError("theta contains non-finite values")
    return theta


def recommendation_probs(theta, n: int, cfg: ModelConfig) -> np.ndarray:
    """Softmax recommendation distribution over the ``K`` products for user ``n``."""
    theta = _check_theta(theta, cfg)
    if not 0 <= n < cfg.N:
        raise InvalidArgumentError(f"user index {n} outside [0, {cfg.N})")
    return softmax(cfg.a * (cfg.contexts[n] @ theta))


def full_prob_vector(theta, cfg: ModelConfig) -> np.ndarray:
    """All users' recommendation distributions stacked into a length ``N*K`` vector."""
    theta = _check_theta(theta, cfg)
    return softmax(cfg.a * (cfg.contexts @ theta)).ravel()


def solve_spd(S: np.ndarray, B: np.ndarray) -> np.ndarray:
    """Solve ``S x = B`` through a Cholesky factorization of the SPD matrix ``S``."""
    _, x, info = dposv(S, B, lower=0)
    if info > 0:
        raise SingularMatrixError(f"matrix is not positive definite (leading minor {info})")
    if info < 0:
        raise InvalidArgumentError(f"illegal value in argument {-info} of dposv")
    return x


def theta_from(state: LearnerState) -> np.ndarray:
    """Least-squares estimate ``S^{-1} B`` of a learner state."""
    return solve_spd(np.asarray(state.S, dtype=float), np.asarray(state.B, dtype=float))


def reward(w_k, y_n, eta: float = 0.0) -> float:
    w_k = np.asarray(w_k, dtype=float)
    y_n = np.asarray(y_n, dtype=float)
    if w_k.shape != y_n.shape or w_k.ndim != 1:
        raise InvalidArgumentError(f"w and y must be 1-D of equal length, got {w_k.shape} and {y_n.shape}")
    return float(w_k @ y_n) + eta


def empirical_loss(theta, history: Iterable[tuple[np.ndarray, float]], zeta: float) -> float:
    """Regularized least-squares loss ``zeta |theta|^2 + sum (R - C.theta)^2``."""
    theta = np.asarray(theta, dtype=float)
    total = zeta * float(theta @ theta)
    for c, r in history:
        resid = r - float(np.asarray(c) @ theta)
        total += resid * resid
    return total


def mismatch_report(cfg: ModelConfig, beta_all_zero: bool) -> MismatchReport:
    """Stationarity/learnability classification of the environment.

    A surjection from ``R^{pq}`` onto ``R^{Nq}`` exists exactly when ``p >= N``.
    """
    stationary = bool(beta_all_zero)
    learnable = cfg.p >= cfg.N
    return MismatchReport(stationary, learnable, not (stationary and learnable))


def tracking_residual(theta, y, cfg: ModelConfig) -> np.ndarray:
    """``y - (V kron I_q)^T theta``, i.e. each ``y_n`` minus ``Theta v_n``."""
    Theta = np.asarray(theta).reshape(cfg.p, cfg.q)
    pred = (cfg.V.T @ Theta).ravel()
    return np.asarray(y) - pred


def user_preferences(y_n, W: np.ndarray, a: float) -> np.ndarray:
    """Preference simplex ``softmax(a W^T y)`` induced by a user state."""
    return softmax(a * (np.asarray(W).T @ np.asarray(y_n)))
