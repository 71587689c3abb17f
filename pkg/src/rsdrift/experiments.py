"""Named experiment specifications, figure metrics and artifact writers.

Figure-class experiments run the ODE engine by default.  ``fig2`` runs both
engines on a small two-user instance and overlays them.

Product labels in metrics (``dominant_product``, frequency columns) are
1-based, matching how products are numbered on the plots; array indices
elsewhere in the package are 0-based.
"""

from __future__ import annotations

import copy
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .bandit import BanditTrajectory, run_simulation
from .errors import ConfigError, InvalidArgumentError
from .equilibrium import hyperplane_embed
from .generic_sa import harmonic_time
from .model import ModelConfig, PopulationState, full_prob_vector
from .ode import OdeState, OdeTrajectory, integrate, overlay_error

CORNERS = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, math.sqrt(3.0) / 2.0]])
CONSENSUS_TOL = 1e-3
FIGURES = ("fig2", "fig3a", "fig3b", "fig3c", "fig4a", "fig4b")


@dataclass(frozen=True)
class ExperimentSpec:
    """A fully specified run: configuration, initial population and horizons.

    ``T`` is the number of stochastic steps (used by the stochastic engine)
    and ``tau_max`` the ODE horizon.  ``overrides`` records the dotted-key
    deltas from the base configuration.
    """

    name: str
    cfg: ModelConfig
    pop0: PopulationState
    tau_max: float = 1000.0
    T: int = 100_000
    overrides: dict = field(default_factory=dict)
    engine: str = "ode"
    record_dtau: float = 0.5

    def y0(self) -> np.ndarray:
        return np.asarray(self.pop0.Y, dtype=float).reshape(self.cfg.N, self.cfg.q)


def apply_overrides(doc: dict, overrides: dict) -> dict:
    """Return a copy of a config document with dotted-key overrides applied.

    ``{"a": 4.0, "user_attrs.2.2": 1.1, "noise.sigma": 0.1}``; list
    positions are 0-based.  Unknown keys and bad positions raise
    :class:`ConfigError`.
    """
    out = copy.deepcopy(doc)
    for key, value in overrides.items():
        parts = str(key).split(".")
        node = out
        for depth, part in enumerate(parts):
            last = depth == len(parts) - 1
            if isinstance(node, list):
                try:
                    idx = int(part)
                    node[idx]
                except (ValueError, IndexError):
                    raise ConfigError(f"bad list position {part!r} in override {key!r}", key=key) from None
                if last:
                    node[idx] = value
                else:
                    node = node[idx]
            elif isinstance(node, dict):
                if part not in node:
                    raise ConfigError(f"unknown config key {key!r}", key=key)
                if last:
                    node[part] = value
                else:
                    node = node[part]
            else:
                raise ConfigError(f"override {key!r} descends into a scalar", key=key)
    return out


def _derive(spec: ExperimentSpec, name: str, overrides: dict) -> ExperimentSpec:
    doc = apply_overrides(spec.cfg.to_dict(), overrides)
    merged = {**spec.overrides, **overrides}
    return ExperimentSpec(name, ModelConfig.from_dict(doc), spec.pop0, spec.tau_max, spec.T, merged,
                          spec.engine, spec.record_dtau)


def _angle_products(degrees) -> np.ndarray:
    d = np.deg2rad(np.asarray(degrees, dtype=float))
    return np.vstack([np.cos(d), np.sin(d)])


def baseline_spec() -> ExperimentSpec:
    """Three users, three products on the unit circle, ``a = 8``."""
    V = np.array([[1.0, 2.0, 3.0], [2.0, 3.0, 1.0], [3.0, 1.0, 2.0]]).T
    W = _angle_products([1.0, 45.0, 89.0])
    cfg = ModelConfig(V=V, W=W, lam=np.full(3, 1.0 / 3.0), a=8.0, zeta=0.001)
    pop0 = PopulationState.from_users([[2.0, 0.0], [0.0, 2.0], [2.0, 2.0]])
    return ExperimentSpec("fig3a", cfg, pop0, tau_max=1000.0)


def fig3b_spec() -> ExperimentSpec:
    return _derive(baseline_spec(), "fig3b", {"a": 4.0})


def fig3c_spec() -> ExperimentSpec:
    return _derive(baseline_spec(), "fig3c", {"user_attrs.2": [2.0, 3.0, 1.1]})


def fig2_spec() -> ExperimentSpec:
    """Two users with ``N = p = 2``; ``a`` sits below the consensus threshold."""
    V = np.array([[1.0, 2.0], [2.0, 1.0]]).T
    W = _angle_products([1.0, 45.0, 89.0])
    cfg = ModelConfig(V=V, W=W, lam=np.full(2, 0.5), a=0.5, zeta=0.001)
    pop0 = PopulationState.from_users([[2.0, 0.0], [0.0, 2.0]])
    T = 10**6 - 1  # final record at t = 10^6
    tau = harmonic_time(T + 1) - harmonic_time(1)
    return ExperimentSpec("fig2", cfg, pop0, tau_max=float(tau), T=T, engine="both", record_dtau=0.01)


def large_n_spec(hyperplane: bool, seed: int = 2024) -> ExperimentSpec:
    """``N = 100`` users, ``K = 10`` unit-norm products, ``p = q = 5``.

    User attributes, product attributes and initial user states are drawn
    uniformly from the unit cube with ``seed``.  With ``hyperplane`` the
    user attributes are moved onto a common affine hyperplane.
    """
    N, K, p, q = 100, 10, 5, 5
    rng = np.random.default_rng(seed)
    V = rng.uniform(0.0, 1.0, (p, N))
    W = rng.uniform(0.0, 1.0, (q, K))
    W /= np.linalg.norm(W, axis=0)
    y0 = rng.uniform(0.0, 1.0, (N, q))
    if hyperplane:
        V = hyperplane_embed(V)
    cfg = ModelConfig(V=V, W=W, lam=np.full(N, 1.0 / N), a=8.0, zeta=0.001, seed=seed)
    name = "fig4b" if hyperplane else "fig4a"
    return ExperimentSpec(name, cfg, PopulationState.from_users(y0), tau_max=1000.0, record_dtau=1.0)


def get_spec(figure_id: str) -> ExperimentSpec:
    builders = {
        "fig2": fig2_spec,
        "fig3a": baseline_spec,
        "fig3b": fig3b_spec,
        "fig3c": fig3c_spec,
        "fig4a": lambda: large_n_spec(False),
        "fig4b": lambda: large_n_spec(True),
    }
    if figure_id not in builders:
        raise ConfigError(f"unknown figure id {figure_id!r}; expected one of {', '.join(FIGURES)}", key="figure")
    return builders[figure_id]()


# ---------------------------------------------------------------- metrics

def _check_simplex(prob, tol: float = 1e-9) -> np.ndarray:
    prob = np.asarray(prob, dtype=float)
    if prob.ndim != 1 or not np.all(np.isfinite(prob)) or np.any(prob < -tol) or abs(prob.sum() - 1.0) > tol:
        raise InvalidArgumentError("not a probability vector")
    return prob


def simplex_coordinates(prob3) -> np.ndarray:
    """Barycentric 2-D embedding of a 3-product preference vector."""
    prob3 = _check_simplex(prob3)
    if prob3.shape != (3,):
        raise InvalidArgumentError("simplex plot needs exactly 3 products")
    return prob3 @ CORNERS


def dominant_product(prob) -> int:
    """1-based label of the most preferred product; ties go to the lowest label."""
    return int(np.argmax(_check_simplex(prob))) + 1


def user_preference_matrix(y, cfg: ModelConfig) -> np.ndarray:
    """``(N, K)`` rows ``softmax(a W^T y_n)``."""
    Y = np.asarray(y, dtype=float).reshape(cfg.N, cfg.q)
    return _row_softmax(cfg.a * (Y @ cfg.W))


def _row_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def _dominant_rows(P: np.ndarray) -> np.ndarray:
    return np.argmax(P, axis=1) + 1


def _records_Y(traj) -> np.ndarray:
    Y = np.asarray(traj.Y if hasattr(traj, "Y") else traj, dtype=float)
    if Y.ndim == 1:
        Y = Y[None, :]
    if len(Y) == 0:
        raise InvalidArgumentError("trajectory is empty")
    return Y


def preference_frequency(traj, cfg: ModelConfig) -> np.ndarray:
    """Per record, how many users have each product (column ``k-1``) as dominant."""
    out = []
    for y in _records_Y(traj):
        dom = _dominant_rows(user_preference_matrix(y, cfg))
        out.append(np.bincount(dom - 1, minlength=cfg.K))
    return np.array(out, dtype=int)


def _records_theta(traj) -> np.ndarray:
    th = traj.theta() if callable(getattr(traj, "theta", None)) else traj.theta
    return np.asarray(th, dtype=float)


def policy_frequency(traj, cfg: ModelConfig) -> np.ndarray:
    """Like :func:`preference_frequency` but from the recommender's policy ``p(theta)``."""
    out = []
    for th in _records_theta(traj):
        P = full_prob_vector(th, cfg).reshape(cfg.N, cfg.K)
        out.append(np.bincount(_dominant_rows(P) - 1, minlength=cfg.K))
    return np.array(out, dtype=int)


def pairwise_distances(y, N: int, q: int) -> np.ndarray:
    """``(N, N)`` Euclidean distances between user states."""
    Y = np.asarray(y, dtype=float).reshape(N, q)
    diff = Y[:, None, :] - Y[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def preference_spread(y, cfg: ModelConfig) -> float:
    """Sum over user pairs of the distance between their preference vectors."""
    P = user_preference_matrix(y, cfg)
    iu = np.triu_indices(cfg.N, 1)
    return float(np.linalg.norm(P[iu[0]] - P[iu[1]], axis=1).sum())


@dataclass
class MetricsBundle:
    """Figure metrics at every recorded time.

    ``simplex_points`` is ``None`` unless ``K == 3``.  ``frequency_policy``
    counts dominant products under the recommender's policy instead of the
    users' own preferences.
    """

    taus: np.ndarray
    times: Optional[np.ndarray]
    dominant: np.ndarray
    frequency: np.ndarray
    frequency_policy: np.ndarray
    pairwise: np.ndarray
    spread: np.ndarray
    simplex_points: Optional[np.ndarray] = None
    product_points: Optional[np.ndarray] = None

    @property
    def dominant_constant(self) -> list[bool]:
        return [bool(np.all(col == col[0])) for col in self.dominant.T]

    def to_csv(self, path) -> None:
        n_rec, N = self.dominant.shape
        K = self.frequency.shape[1]
        header = ["t", "tau", "max_pairwise", "pref_spread"]
        header += [f"dominant_{n}" for n in range(N)]
        header += [f"freq_{k + 1}" for k in range(K)] + [f"freq_policy_{k + 1}" for k in range(K)]
        if self.simplex_points is not None:
            header += [f"simplex_{n}_{c}" for n in range(N) for c in "xy"]
        lines = [",".join(header)]
        for i in range(n_rec):
            row = ["" if self.times is None else str(int(self.times[i])), _fmt(self.taus[i]),
                   _fmt(self.pairwise[i]), _fmt(self.spread[i])]
            row += [str(int(d)) for d in self.dominant[i]]
            row += [str(int(c)) for c in self.frequency[i]] + [str(int(c)) for c in self.frequency_policy[i]]
            if self.simplex_points is not None:
                row += [_fmt(v) for v in self.simplex_points[i].ravel()]
            lines.append(",".join(row))
        Path(path).write_text("\n".join(lines) + "\n")


def _fmt(x) -> str:
    return format(float(x), ".17g")


def compute_metrics(traj, cfg: ModelConfig, taus, times=None) -> MetricsBundle:
    Ys = _records_Y(traj)
    Y3 = Ys.reshape(len(Ys), cfg.N, cfg.q)
    prefs = _row_softmax(cfg.a * (Y3 @ cfg.W))
    dominant = np.argmax(prefs, axis=2) + 1
    frequency = np.array([np.bincount(d - 1, minlength=cfg.K) for d in dominant], dtype=int)
    pairwise = np.array([pairwise_distances(y, cfg.N, cfg.q).max() for y in Ys])
    iu = np.triu_indices(cfg.N, 1)
    spread = np.array([np.linalg.norm(P[iu[0]] - P[iu[1]], axis=1).sum() for P in prefs])
    simplex = products = None
    if cfg.K == 3:
        simplex = prefs @ CORNERS
        products = user_preferences_of_products(cfg) @ CORNERS
    return MetricsBundle(np.asarray(taus, dtype=float), None if times is None else np.asarray(times),
                         dominant, frequency, policy_frequency(traj, cfg), pairwise, spread, simplex, products)


def user_preferences_of_products(cfg: ModelConfig) -> np.ndarray:
    """``(K, K)`` rows ``softmax(a W^T w_k)``: where each product sits on the simplex plot."""
    return _row_softmax(cfg.a * (cfg.W.T @ cfg.W))


# ---------------------------------------------------------------- running

@dataclass
class ExperimentResult:
    spec: ExperimentSpec
    engine: str
    seed: Optional[int]
    metrics: MetricsBundle
    trajectory: object
    ode: Optional[OdeTrajectory] = None
    overlay: Optional[dict] = None
    runtime: float = 0.0

    def summary(self) -> dict:
        m = self.metrics
        cfg = self.spec.cfg
        y_final = _records_Y(self.trajectory)[-1].reshape(cfg.N, cfg.q)
        out = {
            "name": self.spec.name,
            "engine": self.engine,
            "seed": self.seed,
            "overrides": self.spec.overrides,
            "tau_final": float(m.taus[-1]),
            "final_y": y_final.tolist(),
            "final_dominant": m.dominant[-1].tolist(),
            "dominant_constant": m.dominant_constant,
            "final_frequency": m.frequency[-1].tolist(),
            "final_frequency_policy": m.frequency_policy[-1].tolist(),
            "max_pairwise_initial": float(m.pairwise[0]),
            "max_pairwise_final": float(m.pairwise[-1]),
            "pref_spread_initial": float(m.spread[0]),
            "pref_spread_final": float(m.spread[-1]),
            "consensus": bool(m.pairwise[-1] < CONSENSUS_TOL and len(set(m.dominant[-1].tolist())) == 1),
            "single_product": bool(np.count_nonzero(m.frequency[-1]) == 1),
            "runtime_s": self.runtime,
        }
        if m.times is not None:
            out["t_final"] = int(m.times[-1])
        if self.overlay is not None:
            out["overlay"] = self.overlay
        return out


def _run_ode(spec: ExperimentSpec, h: float, record_dtau: Optional[float]) -> OdeTrajectory:
    state0 = OdeState.initial(spec.cfg, spec.y0())
    return integrate(state0, spec.cfg, spec.tau_max, h=h, record_dtau=record_dtau or spec.record_dtau)


def _log_record_times(T: int, per_decade: int = 20) -> np.ndarray:
    t_end = T + 1
    n = int(math.ceil(math.log10(t_end) * per_decade)) + 1
    grid = np.round(np.logspace(0, math.log10(t_end), n)).astype(int)
    return np.unique(np.concatenate([grid, 10 ** np.arange(int(math.log10(t_end)) + 1)]))


def _run_stochastic(spec: ExperimentSpec, seed: int) -> BanditTrajectory:
    return run_simulation(spec.cfg, spec.pop0, spec.T, seed=seed, record_times=_log_record_times(spec.T))


def run_experiment(spec: ExperimentSpec, engine: Optional[str] = None, seed: Optional[int] = None,
                   h: float = 0.01, record_dtau: Optional[float] = None) -> ExperimentResult:
    """Run ``spec`` on ``engine`` (``ode``, ``stochastic`` or ``both``) and compute its metrics.

    With ``both`` the metrics describe the stochastic run and ``overlay``
    holds its sup-norm gap to the ODE at every stochastic record.
    """
    engine = engine or spec.engine
    if engine not in ("ode", "stochastic", "both"):
        raise InvalidArgumentError(f"unknown engine {engine!r}")
    seed = spec.cfg.seed if seed is None else int(seed)
    start = time.perf_counter()
    if engine == "ode":
        ode = _run_ode(spec, h, record_dtau)
        metrics = compute_metrics(ode, spec.cfg, ode.taus)
        result = ExperimentResult(spec, engine, None, metrics, ode, ode)
    else:
        traj = _run_stochastic(spec, seed)
        metrics = compute_metrics(traj, spec.cfg, traj.taus, traj.times)
        result = ExperimentResult(spec, engine, seed, metrics, traj)
        if engine == "both":
            ode = _run_ode(spec, h, record_dtau)
            err = overlay_error(traj, ode)
            result.ode = ode
            result.overlay = {"t": traj.times.tolist(), "error": err.tolist(),
                              "initial": float(err[0]), "final": float(err[-1])}
            for t_mark in (10**3, 10**6):
                hit = np.nonzero(traj.times == t_mark)[0]
                if hit.size:
                    result.overlay[f"error_t{t_mark}"] = float(err[hit[0]])
    result.runtime = time.perf_counter() - start
    return result


# ---------------------------------------------------------------- artifacts

def write_artifacts(result: ExperimentResult, out_dir, force: bool = False) -> list[Path]:
    """Write ``metrics.csv``, ``summary.json``, the trajectory CSV(s) and SVG plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    targets = {
        "metrics": out / "metrics.csv",
        "summary": out / "summary.json",
        "trajectory": out / "trajectory.csv",
        "plot": out / f"{result.spec.name}.svg",
    }
    if result.engine == "both":
        targets["ode"] = out / "ode_trajectory.csv"
    existing = [p for p in targets.values() if p.exists()]
    if existing and not force:
        raise FileExistsError(f"{existing[0]} exists; pass force=True to overwrite")
    result.metrics.to_csv(targets["metrics"])
    targets["summary"].write_text(json.dumps(result.summary(), indent=2) + "\n")
    result.trajectory.to_csv(targets["trajectory"])
    if "ode" in targets:
        result.ode.to_csv(targets["ode"])
    plot_result(result, targets["plot"])
    return list(targets.values())


def plot_result(result: ExperimentResult, path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.fonttype"] = "path"
    if result.engine == "both":
        fig = _plot_overlay(result, plt)
    elif result.metrics.simplex_points is not None:
        fig = _plot_simplex(result, plt)
    else:
        fig = _plot_frequency(result, plt)
    fig.savefig(path, format="svg")
    plt.close(fig)


def _plot_simplex(result: ExperimentResult, plt):
    m = result.metrics
    fig, ax = plt.subplots(figsize=(5.5, 5))
    tri = np.vstack([CORNERS, CORNERS[:1]])
    ax.plot(tri[:, 0], tri[:, 1], color="0.3", lw=1)
    centroid = CORNERS.mean(axis=0)
    for i, j in ((0, 1), (1, 2), (0, 2)):
        mid = 0.5 * (CORNERS[i] + CORNERS[j])
        ax.plot([centroid[0], mid[0]], [centroid[1], mid[1]], ls="--", color="0.5", lw=0.8)
    ax.scatter(m.product_points[:, 0], m.product_points[:, 1], color="k", s=20, zorder=3)
    for k, (x, y) in enumerate(m.product_points):
        ax.annotate(f"w{k + 1}", (x, y), textcoords="offset points", xytext=(4, 4), fontsize=8)
    for n in range(m.simplex_points.shape[1]):
        path = m.simplex_points[:, n]
        line, = ax.plot(path[:, 0], path[:, 1], lw=1, label=f"user {n + 1}")
        ax.scatter(*path[0], marker="o", facecolor="none", edgecolor=line.get_color(), zorder=4)
        ax.scatter(*path[-1], marker="x", color=line.get_color(), zorder=4)
    ax.set_aspect("equal")
    ax.set_axis_off()
    ax.legend(loc="upper right", fontsize=8)
    ax.set_title(f"{result.spec.name}: tau = 0 .. {m.taus[-1]:g}")
    fig.tight_layout()
    return fig


def _plot_frequency(result: ExperimentResult, plt):
    m = result.metrics
    fig, ax = plt.subplots(figsize=(7, 4))
    for k in range(m.frequency.shape[1]):
        ax.plot(m.taus, m.frequency[:, k], lw=1, label=f"product {k + 1}")
    ax.set_xlabel("tau")
    ax.set_ylabel("users preferring product")
    ax.legend(fontsize=7, ncol=2)
    ax.set_title(result.spec.name)
    fig.tight_layout()
    return fig


def _plot_overlay(result: ExperimentResult, plt):
    cfg = result.spec.cfg
    traj, ode = result.trajectory, result.ode
    fig, axes = plt.subplots(cfg.N, 1, figsize=(7, 2.6 * cfg.N), sharex=True, squeeze=False)
    for n in range(cfg.N):
        ax = axes[n, 0]
        for j in range(cfg.q):
            col = n * cfg.q + j
            line, = ax.plot(ode.taus, ode.Y[:, col], lw=1, label=f"y_{n + 1},{j + 1} (ODE)")
            ax.plot(traj.taus, traj.Y[:, col], ls="none", marker=".", ms=3, color=line.get_color(),
                    label=f"Y_{n + 1},{j + 1} (stochastic)")
        ax.set_ylabel(f"user {n + 1}")
        ax.legend(fontsize=7, ncol=2)
    axes[-1, 0].set_xlabel("tau")
    fig.tight_layout()
    return fig
