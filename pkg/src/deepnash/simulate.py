"""Monte Carlo simulation of the n-player system.

Every random draw of a player comes from its own counter-based stream keyed
by ``(seed, player key, stage, kind)``; each stream yields one uniform per
replication. Relabeling players therefore reproduces a run exactly.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from .dss import STATIONARY, EquilibriumStrategy, SolverOptions, solve_finite
from .dynamics import CountLattice, OthersDeepState, joint_next_deep_pmf, multinomial_dense
from .meanfield import NSStrategy, belief_shock, solve_smfe_finite
from .model import GameSpec, ModelError

KIND_INIT, KIND_ACTION, KIND_MOVE = 0, 1, 2


def stream_uniforms(seed: int, key: int, stage: int, kind: int, size: int) -> np.ndarray:
    """Uniforms from the Philox stream of one (player, stage, draw kind)."""
    ss = np.random.SeedSequence([int(seed), int(key), int(stage) + 1, int(kind)])
    return np.random.Generator(np.random.Philox(ss)).random(size)


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Categorical draws; ``probs`` has shape (R, K) and ``u`` shape (R,)."""
    cdf = np.cumsum(probs, axis=-1)
    cdf[..., -1] = 1.0
    return (u[:, None] >= cdf).sum(axis=-1)


def _kahan_mean(values: np.ndarray) -> float:
    return math.fsum(np.ravel(values).tolist()) / max(values.size, 1)


# ---------------------------------------------------------------------------
# strategies seen by the simulator
# ---------------------------------------------------------------------------


class _DSSPolicy:
    def __init__(self, strategy: EquilibriumStrategy, n_states: int):
        self.s = strategy
        lat = strategy.lattice
        self.dense = np.full(lat.dense_shape if n_states > 1 else (), -1, dtype=np.int64)
        if n_states > 1:
            self.dense[tuple(lat.points[:, :-1].T)] = np.arange(len(lat))
        else:
            self.dense[()] = 0

    def laws(self, t: int, counts: np.ndarray) -> np.ndarray:
        if self.s.mode != STATIONARY and t >= self.s.n_stages:
            raise ModelError(f"strategy has no law for stage {t}")
        j = self.dense[tuple(counts[:, :-1].T)] if counts.shape[1] > 1 else np.zeros(len(counts), dtype=int)
        laws = self.s.law_by_index(t, j)
        bad = np.isnan(laws).any(axis=(1, 2))
        if bad.any():
            r = int(np.flatnonzero(bad)[0])
            raise ModelError(f"strategy has no law at stage {t}, deep state {tuple(int(c) for c in counts[r])}")
        return laws


class _NSPolicy:
    def __init__(self, ns: NSStrategy):
        self.ns = ns

    def laws(self, t: int, counts: np.ndarray) -> np.ndarray:
        if t >= self.ns.horizon:
            raise ModelError(f"NS strategy has no law for stage {t}")
        return np.broadcast_to(self.ns.law(t), (len(counts),) + self.ns.law(t).shape)


@dataclass
class IndexDependentStrategy:
    """Wraps a strategy and forces the player at ``position`` to play ``action``.

    Deliberately breaks index invariance; used to check that the permutation
    test detects it.
    """

    base: object
    position: int = 0
    action: int = 0


def _policy(strategy, spec):
    if isinstance(strategy, IndexDependentStrategy):
        inner, forced = _policy(strategy.base, spec)
        return inner, {**forced, strategy.position: strategy.action}
    if isinstance(strategy, EquilibriumStrategy):
        if strategy.n != spec.n:
            raise ModelError(f"strategy solved for n={strategy.n}, spec has n={spec.n}")
        return _DSSPolicy(strategy, spec.n_states), {}
    if isinstance(strategy, NSStrategy):
        return _NSPolicy(strategy), {}
    raise TypeError(f"unsupported strategy type {type(strategy).__name__}")


# ---------------------------------------------------------------------------
# simulation
# ---------------------------------------------------------------------------


@dataclass
class SimulationResult:
    replications: int
    horizon: int
    seed: int
    keys: np.ndarray
    paths: np.ndarray | None
    player_costs: np.ndarray
    beta: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def generic_costs(self) -> np.ndarray:
        """Per-replication cost averaged over players."""
        return self.player_costs.mean(axis=1)

    @property
    def mean_cost(self) -> float:
        return _kahan_mean(self.generic_costs)

    @property
    def standard_error(self) -> float:
        g = self.generic_costs
        if len(g) < 2:
            return 0.0
        return float(np.std(g, ddof=1) / math.sqrt(len(g)))

    def player_mean_costs(self) -> np.ndarray:
        return np.array([_kahan_mean(self.player_costs[:, i]) for i in range(self.player_costs.shape[1])])

    def summary(self) -> dict:
        return {"replications": self.replications, "horizon": self.horizon, "seed": self.seed,
                "mean_cost": self.mean_cost, "standard_error": self.standard_error,
                "beta": self.beta, **self.meta}

    def trajectories_csv(self) -> str:
        if self.paths is None:
            raise ModelError("paths were not recorded")
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        X = self.paths.shape[2]
        w.writerow(["replication", "t"] + [f"count_{x}" for x in range(X)])
        for r in range(self.paths.shape[0]):
            for t in range(self.paths.shape[1]):
                w.writerow([r, t] + [int(c) for c in self.paths[r, t]])
        return buf.getvalue()

    def to_json(self) -> dict:
        out = self.summary()
        out["player_mean_costs"] = self.player_mean_costs().tolist()
        out["keys"] = self.keys.tolist()
        return out


def _initial_states(spec, R, seed, keys, initial_states):
    n = spec.n
    if initial_states is not None:
        init = np.asarray(initial_states, dtype=np.int64)
        if init.ndim == 1:
            init = np.broadcast_to(init, (R, n))
        return np.array(init)
    p = np.broadcast_to(np.asarray(spec.initial_dist, dtype=float), (R, spec.n_states))
    out = np.empty((R, n), dtype=np.int64)
    for pos, key in enumerate(keys):
        out[:, pos] = _inverse_cdf(p, stream_uniforms(seed, key, -1, KIND_INIT, R))
    return out


def simulate(spec: GameSpec, strategy, horizon: int | None = None, replications: int = 1000,
             seed: int = 0, *, beta: float | None = None, keys=None, initial_states=None,
             record_paths: bool = True) -> SimulationResult:
    """Simulate ``replications`` independent runs of the n-player game.

    ``keys[p]`` is the stream key of the player at position ``p`` (identity by
    default). ``initial_states`` fixes the initial per-player states instead of
    drawing them from ``spec.initial_dist``. Costs are discounted by ``beta``
    (default: the spec's discount, if any).
    """
    n, X, U = spec.n, spec.n_states, spec.n_actions
    T = horizon if horizon is not None else spec.horizon
    if T is None:
        raise ModelError("simulation needs a horizon", "horizon")
    b = beta if beta is not None else (spec.beta if spec.beta is not None else 1.0)
    R = int(replications)
    if R < 1:
        raise ModelError("replications must be >= 1")
    keys = np.arange(n) if keys is None else np.asarray(keys, dtype=np.int64)
    policy, forced = _policy(strategy, spec)
    states = _initial_states(spec, R, seed, keys, initial_states)
    rows = np.arange(R)
    costs = np.zeros((R, n))
    paths = np.zeros((R, T + 1, X), dtype=np.int64) if record_paths else None
    for t in range(T):
        counts = np.stack([(states == x).sum(axis=1) for x in range(X)], axis=1)
        if paths is not None:
            paths[:, t] = counts
        laws = policy.laws(t, counts)
        actions = np.empty((R, n), dtype=np.int64)
        for pos, key in enumerate(keys):
            if pos in forced:
                actions[:, pos] = forced[pos]
                continue
            u = stream_uniforms(seed, key, t, KIND_ACTION, R)
            actions[:, pos] = _inverse_cdf(laws[rows, states[:, pos]], u)
        d = counts / n
        if spec.cost.coupling == "d-only":
            table = spec.cost.d_tables(t, d)
        else:
            D = np.zeros((R, X, U))
            np.add.at(D, (np.repeat(rows, n), states.ravel(), actions.ravel()), 1.0 / n)
            table = spec.cost.tables(t, D)
        K = spec.kernel.matrices(t, d)
        weight = b ** t
        nxt = np.empty_like(states)
        for pos, key in enumerate(keys):
            costs[:, pos] += weight * table[rows, states[:, pos], actions[:, pos]]
            u = stream_uniforms(seed, key, t, KIND_MOVE, R)
            nxt[:, pos] = _inverse_cdf(K[rows, states[:, pos], actions[:, pos]], u)
        states = nxt
    if paths is not None:
        paths[:, T] = np.stack([(states == x).sum(axis=1) for x in range(X)], axis=1)
    return SimulationResult(R, T, seed, keys, paths, costs, b)


# ---------------------------------------------------------------------------
# checks and experiments
# ---------------------------------------------------------------------------


@dataclass
class PermutationCheck:
    passed: bool
    sigma: np.ndarray
    paths_equal: bool
    costs_equal: bool

    def __bool__(self):
        return self.passed


def permutation_check(spec: GameSpec, strategy, seed: int = 0, *, horizon: int | None = None,
                      replications: int = 4, sigma=None) -> PermutationCheck:
    """Simulate with identity labels and with labels permuted by a seeded ``sigma``.

    Passes when the deep-state paths agree exactly and the per-player costs
    agree up to ``sigma``. The random ``sigma`` never fixes position 0.
    """
    n = spec.n
    if sigma is None:
        rng = np.random.default_rng([seed, 7919])
        sigma = rng.permutation(n)
        if n > 1 and sigma[0] == 0:
            sigma = np.roll(sigma, 1)
    sigma = np.asarray(sigma, dtype=np.int64)
    T = horizon if horizon is not None else (spec.horizon or 10)
    base = simulate(spec, strategy, T, replications, seed)
    # initial states are drawn from the key's stream, so they travel with the key
    perm = simulate(spec, strategy, T, replications, seed, keys=sigma)
    paths_equal = bool(np.array_equal(base.paths, perm.paths))
    costs_equal = bool(np.array_equal(base.player_costs[:, sigma], perm.player_costs))
    return PermutationCheck(paths_equal and costs_equal, sigma, paths_equal, costs_equal)


def one_step_histogram(spec: GameSpec, t: int, x: int, d_counts, law, samples: int, seed: int) -> dict:
    """Empirical law of the others' next counts from per-player sampling."""
    law = np.asarray(law, dtype=float)
    others = np.array(d_counts, dtype=np.int64)
    others[x] -= 1
    states = np.repeat(np.arange(spec.n_states), others)
    K = spec.kernel.matrix(t, np.asarray(d_counts, dtype=float) / spec.n)
    R = int(samples)
    nxt = np.empty((R, len(states)), dtype=np.int64)
    for i, s in enumerate(states):
        a = _inverse_cdf(np.broadcast_to(law[s], (R, spec.n_actions)), stream_uniforms(seed, i, t, KIND_ACTION, R))
        nxt[:, i] = _inverse_cdf(K[s][a], stream_uniforms(seed, i, t, KIND_MOVE, R))
    counts = np.stack([(nxt == y).sum(axis=1) for y in range(spec.n_states)], axis=1)
    keys, freq = np.unique(counts, axis=0, return_counts=True)
    return {tuple(int(v) for v in k): int(f) for k, f in zip(keys, freq)}


def chi_square_check(spec: GameSpec, t: int, x: int, d_counts, law, samples: int = 20000,
                     seed: int = 0, alpha: float = 1e-3) -> dict:
    """Goodness of fit of the simulated one-step histogram against the exact law.

    Bins with expected count below 5 are pooled into one bin.
    """
    others = list(d_counts)
    others[x] -= 1
    exact = joint_next_deep_pmf(spec, t, x, OthersDeepState(tuple(others)), law)
    hist = one_step_histogram(spec, t, x, d_counts, law, samples, seed)
    expected = exact.probs * samples
    observed = np.array([hist.get(tuple(s), 0) for s in exact.support], dtype=float)
    stray = samples - observed.sum()
    if stray:
        raise AssertionError("simulated counts outside the exact support")
    big = expected >= 5
    f_obs = list(observed[big])
    f_exp = list(expected[big])
    if (~big).any():
        f_obs.append(observed[~big].sum())
        f_exp.append(expected[~big].sum())
    f_obs, f_exp = np.array(f_obs), np.array(f_exp)
    f_exp *= f_obs.sum() / f_exp.sum()
    if len(f_obs) < 2:
        return {"statistic": 0.0, "p_value": 1.0, "bins": 1, "passed": True}
    stat, p = stats.chisquare(f_obs, f_exp)
    return {"statistic": float(stat), "p_value": float(p), "bins": int(len(f_obs)), "passed": bool(p >= alpha)}


def exact_initial_value(spec: GameSpec, values, t: int = 0) -> float:
    """``E[V_t(x, d)]`` with each player's state drawn i.i.d. from the initial law."""
    n, X = spec.n, spec.n_states
    p = np.asarray(spec.initial_dist, dtype=float)
    others = CountLattice(n - 1, X)
    dense = multinomial_dense(n - 1, p)
    total = 0.0
    for x in range(X):
        if p[x] == 0:
            continue
        acc = 0.0
        for o in others.points:
            pr = dense[tuple(o[:-1])] if X > 1 else 1.0
            if pr == 0:
                continue
            full = o.copy()
            full[x] += 1
            acc += pr * values.values[t, x, values.index(full)]
        total += p[x] * acc
    return float(total)


@dataclass
class ConvergenceRow:
    n: int
    exact: float
    simulated: float
    standard_error: float

    @property
    def gap(self) -> float:
        return abs(self.simulated - self.exact)


@dataclass
class ConvergenceResult:
    rows: list
    slope: float
    monotone: bool
    grid_k: int

    def to_json(self) -> dict:
        return {"rows": [{"n": r.n, "exact": r.exact, "simulated": r.simulated,
                          "standard_error": r.standard_error, "gap": r.gap} for r in self.rows],
                "slope": self.slope, "monotone_within_2se": self.monotone, "grid_k": self.grid_k}

    def plot_data(self) -> str:
        return "".join(f"{r.n} {r.gap!r}\n" for r in self.rows)


def convergence_experiment(template, n_list, replications: int = 100_000, seed: int = 0, *,
                           grid_k: int = 200, options: SolverOptions | None = None) -> ConvergenceResult:
    """Gap between the exact deep-state equilibrium value and the simulated NS cost.

    ``template(n)`` returns the finite-horizon game with ``n`` players. The NS
    strategy is solved once on a grid of resolution ``grid_k``.
    """
    opts = options or SolverOptions()
    rows = []
    ns = None
    for i, n in enumerate(n_list):
        spec = template(n)
        _, values, _ = solve_finite(spec, options=opts)
        exact = exact_initial_value(spec, values)
        if ns is None:
            _, ns, _ = solve_smfe_finite(spec, grid_k, options=opts)
        sim = simulate(spec, ns, spec.horizon, replications, seed + i, record_paths=False)
        rows.append(ConvergenceRow(n, exact, sim.mean_cost, sim.standard_error))
    gaps = np.array([r.gap for r in rows])
    monotone = all(
        rows[k + 1].gap <= rows[k].gap + 2 * math.hypot(rows[k].standard_error, rows[k + 1].standard_error)
        for k in range(len(rows) - 1)
    )
    slope = float(np.polyfit(np.log(n_list), np.log(np.maximum(gaps, 1e-300)), 1)[0]) if len(rows) > 1 else float("nan")
    return ConvergenceResult(rows, slope, monotone, grid_k)


@dataclass
class TremblingHandResult:
    baseline: SimulationResult
    shocked: SimulationResult
    shocked_strategy: NSStrategy

    @property
    def delta(self) -> float:
        return self.shocked.mean_cost - self.baseline.mean_cost

    @property
    def delta_se(self) -> float:
        diff = self.shocked.generic_costs - self.baseline.generic_costs
        return float(np.std(diff, ddof=1) / math.sqrt(len(diff))) if len(diff) > 1 else 0.0

    def to_json(self) -> dict:
        return {"baseline": self.baseline.summary(), "shocked": self.shocked.summary(),
                "delta": self.delta, "delta_se": self.delta_se}


def trembling_hand_experiment(spec: GameSpec, ns: NSStrategy, t_shock: int, shock, *,
                              replications: int = 1000, seed: int = 0) -> TremblingHandResult:
    """Paired runs: the unshocked NS strategy and the one whose belief jumps to ``shock`` at ``t_shock``."""
    shocked = belief_shock(ns, spec, t_shock, shock)
    T = ns.horizon
    base = simulate(spec, ns, T, replications, seed)
    alt = simulate(spec, shocked, T, replications, seed)
    return TremblingHandResult(base, alt, shocked)


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)
