"""Deep Nash equilibria under deep-state sharing.

Strategies are kept in Markov form: one local law per (stage, deep state),
shared by every player. Deep states are indexed by their position in the
lexicographic enumeration of count vectors (see :class:`CountLattice`).

Values of a finite game with discount ``beta`` are reported on the absolute
scale, ``V_t = beta**t * U_t`` where ``U_t`` is the cost-to-go discounted from
stage ``t`` itself. Exploitability gaps are reported on the ``U`` scale.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .dynamics import (
    DEFAULT_SUPPORT_CAP,
    CountLattice,
    DeepState,
    next_counts_dense,
    stage_cost_rows,
)
from .fixedpoint import StageResult, solve_stage
from .model import GameSpec, ModelError

STATIONARY = "stationary-discounted"
FINITE = "finite"


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------


class _Indexed:
    lattice: CountLattice

    def index(self, d) -> int:
        counts = d.counts if isinstance(d, DeepState) else d
        try:
            return self._lookup[tuple(int(c) for c in counts)]
        except KeyError:
            raise KeyError(f"deep state {tuple(counts)} is not in the lattice") from None

    def _build_lookup(self):
        self._lookup = {tuple(int(c) for c in p): j for j, p in enumerate(self.lattice.points)}


@dataclass
class ValueTable(_Indexed):
    """``values[t, x, j]``; NaN where deep state ``j`` has no player at ``x``."""

    mode: str
    n: int
    lattice: CountLattice
    values: np.ndarray

    def __post_init__(self):
        self._build_lookup()

    @property
    def n_stages(self) -> int:
        return self.values.shape[0]

    def value(self, t: int, x: int, d) -> float:
        j = self.index(d)
        t = 0 if self.mode == STATIONARY else t
        if t == self.n_stages and self.mode == FINITE:
            return 0.0
        return float(self.values[t, x, j])

    def to_json(self) -> dict:
        entries = []
        for t in range(self.n_stages):
            for j, p in enumerate(self.lattice.points):
                entries.append({"t": t, "d_counts": [int(c) for c in p],
                                "value_by_state": [None if math.isnan(v) else float(v)
                                                   for v in self.values[t, :, j]]})
        return {"mode": self.mode, "n": self.n, "stages": self.n_stages, "entries": entries}


@dataclass
class EquilibriumStrategy(_Indexed):
    """Local law per (stage, deep state): ``laws[t, j]`` has shape ``(X, U)``."""

    mode: str
    n: int
    lattice: CountLattice
    laws: np.ndarray

    def __post_init__(self):
        self._build_lookup()

    @property
    def n_stages(self) -> int:
        return self.laws.shape[0]

    def law(self, t: int, d) -> np.ndarray:
        t = 0 if self.mode == STATIONARY else t
        if t >= self.n_stages:
            raise KeyError(f"strategy has no stage {t}")
        return self.laws[t, self.index(d)]

    def law_by_index(self, t: int, j: np.ndarray) -> np.ndarray:
        t = 0 if self.mode == STATIONARY else t
        return self.laws[t, j]

    def to_json(self, values: ValueTable | None = None) -> dict:
        entries = []
        for t in range(self.n_stages):
            for j, p in enumerate(self.lattice.points):
                e = {"t": t, "d_counts": [int(c) for c in p], "law": self.laws[t, j].tolist()}
                if values is not None:
                    e["value_by_state"] = [None if math.isnan(v) else float(v) for v in values.values[t, :, j]]
                entries.append(e)
        return {"mode": self.mode, "n": self.n, "stages": self.n_stages, "entries": entries}

    @classmethod
    def from_json(cls, obj: dict, n_states: int) -> "EquilibriumStrategy":
        n, stages = int(obj["n"]), int(obj["stages"])
        lattice = CountLattice(n, n_states)
        lookup = {tuple(int(c) for c in p): j for j, p in enumerate(lattice.points)}
        first = np.asarray(obj["entries"][0]["law"])
        laws = np.full((stages, len(lattice)) + first.shape, np.nan)
        for e in obj["entries"]:
            laws[e["t"], lookup[tuple(e["d_counts"])]] = e["law"]
        if np.isnan(laws).any():
            raise ModelError("strategy JSON does not cover every (t, d)")
        return cls(obj["mode"], n, lattice, laws)


@dataclass
class FixedPointReport:
    """Per-(t, d) fixed-point diagnostics plus value-iteration history when discounted."""

    iterations: np.ndarray
    residual: np.ndarray
    converged: np.ndarray
    multiple: np.ndarray
    lattice: CountLattice
    tolerance: float
    sweeps: int = 0
    sweep_diffs: list = field(default_factory=list)
    vi_converged: bool = True
    bellman_residual: float = 0.0
    history: list | None = None

    @property
    def all_converged(self) -> bool:
        return bool(self.converged.all()) and self.vi_converged

    @property
    def max_residual(self) -> float:
        return float(self.residual.max()) if self.residual.size else 0.0

    @property
    def contraction_factors(self) -> list:
        diffs = self.sweep_diffs
        return [diffs[k + 1] / diffs[k] if diffs[k] > 0 else 0.0 for k in range(len(diffs) - 1)]

    def contraction_violation(self, beta: float) -> float:
        """Largest ``diff[k+1] - beta * diff[k]`` over consecutive sweeps."""
        diffs = self.sweep_diffs
        if len(diffs) < 2:
            return -math.inf
        return max(diffs[k + 1] - beta * diffs[k] for k in range(len(diffs) - 1))

    def summary(self) -> dict:
        return {
            "nodes": int(self.converged.size),
            "converged_nodes": int(self.converged.sum()),
            "max_residual": self.max_residual,
            "max_iterations": int(self.iterations.max()) if self.iterations.size else 0,
            "multiple_equilibria_flagged": int(self.multiple.sum()),
            "tolerance": self.tolerance,
            "sweeps": self.sweeps,
            "vi_converged": self.vi_converged,
            "bellman_residual": self.bellman_residual,
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "d", "iters", "residual", "converged"])
        for t in range(self.iterations.shape[0]):
            for j, p in enumerate(self.lattice.points):
                w.writerow([t, " ".join(str(int(c)) for c in p), int(self.iterations[t, j]),
                            repr(float(self.residual[t, j])), int(bool(self.converged[t, j]))])
        return buf.getvalue()


# ---------------------------------------------------------------------------
# stage problem
# ---------------------------------------------------------------------------


def _dense_values(spec: GameSpec, lattice: CountLattice, values: np.ndarray) -> np.ndarray:
    """Scatter ``values[x, j]`` into ``dense[x][first X-1 counts]`` with zeros elsewhere."""
    X = spec.n_states
    dense = np.zeros((X,) + lattice.dense_shape)
    clean = np.nan_to_num(values, nan=0.0)
    if X == 1:
        dense[0] = clean[0, 0]
        return dense
    idx = tuple(lattice.points[:, :-1].T)
    for x in range(X):
        dense[x][idx] = clean[x]
    return dense


def _continuation_slices(X: int, n: int) -> list:
    """Views taking others' next counts ``o'`` to full counts ``o' + e_{x'}``."""
    out = []
    for y in range(X):
        out.append(tuple(slice(1, n + 1) if k == y else slice(0, n) for k in range(X - 1)))
    return out


class StageProblem:
    """Objective ``Q[x, u]`` at a fixed (t, d) as a function of the population law."""

    def __init__(self, spec: GameSpec, t: int, counts, next_dense: np.ndarray | None,
                 weight: float = 1.0, cap: int = DEFAULT_SUPPORT_CAP):
        self.spec, self.t = spec, t
        self.counts = np.asarray(counts, dtype=np.int64)
        self.n = spec.n
        self.X, self.U = spec.n_states, spec.n_actions
        self.K = spec.kernel.matrix(t, self.counts / self.n)
        self.active = np.flatnonzero(self.counts)
        self.next_dense = next_dense
        self.weight = weight
        self.cap = cap
        self._slices = _continuation_slices(self.X, self.n)
        self._fixed_cost = None
        if spec.cost.coupling == "d-only":
            self._fixed_cost = spec.cost.d_table(t, self.counts / self.n)

    def cost_rows(self, law: np.ndarray) -> np.ndarray:
        if self._fixed_cost is not None:
            return self._fixed_cost
        out = np.zeros((self.X, self.U))
        for x in self.active:
            out[x] = stage_cost_rows(self.spec, self.t, int(x), self.counts, law, cap=self.cap)
        return out

    def continuation(self, law: np.ndarray, dense: np.ndarray | None = None) -> np.ndarray:
        """``C[x, x']``: expected next value at own next state ``x'`` for a player now at ``x``."""
        dense = self.next_dense if dense is None else dense
        C = np.zeros((self.X, self.X))
        if dense is None:
            return C
        trans = np.einsum("xu,xuy->xy", law, self.K)
        for x in self.active:
            others = self.counts.copy()
            others[x] -= 1
            P = next_counts_dense(others, trans)
            for y in range(self.X):
                C[x, y] = np.sum(P * dense[y][self._slices[y]])
        return C

    def q(self, law: np.ndarray) -> np.ndarray:
        law = np.asarray(law, dtype=float)
        Q = self.cost_rows(law).copy()
        if self.next_dense is not None:
            C = self.continuation(law)
            Q += self.weight * np.einsum("xuy,xy->xu", self.K, C)
        Q[np.setdiff1d(np.arange(self.X), self.active)] = 0.0
        return Q


def best_response_rows(spec: GameSpec, t: int, d, others_law, next_values=None, *,
                       weight: float = 1.0, atol: float = 1e-12):
    """Minimizing pure actions and minimal value per active state.

    ``next_values`` is ``values[x, j]`` over the lattice of ``n`` players (or
    None for a terminal stage). Returns ``(argmin_sets, min_values, Q)``.
    """
    counts = d.counts if isinstance(d, DeepState) else tuple(d)
    lattice = CountLattice(spec.n, spec.n_states)
    dense = None if next_values is None else _dense_values(spec, lattice, np.asarray(next_values))
    prob = StageProblem(spec, t, counts, dense, weight)
    Q = prob.q(np.asarray(others_law, dtype=float))
    sets, mins = {}, np.full(spec.n_states, np.nan)
    for x in prob.active:
        mins[x] = Q[x].min()
        sets[int(x)] = [int(u) for u in np.flatnonzero(Q[x] - mins[x] <= atol * max(1.0, abs(mins[x])))]
    return sets, mins, Q


def fixed_point_stage(spec: GameSpec, t: int, d, next_values=None, *, weight: float = 1.0,
                      fp_tol: float = 1e-8, max_iters: int = 10_000, warm=None,
                      probe: bool = False) -> StageResult:
    """Symmetric fixed point of the stage best-response map at (t, d)."""
    counts = d.counts if isinstance(d, DeepState) else tuple(d)
    lattice = CountLattice(spec.n, spec.n_states)
    dense = None if next_values is None else _dense_values(spec, lattice, np.asarray(next_values))
    prob = StageProblem(spec, t, counts, dense, weight)
    return solve_stage(prob.q, spec.n_states, spec.n_actions, prob.active, fp_tol, max_iters,
                       warm=warm, probe=probe)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SolverOptions:
    fp_tol: float = 1e-8
    vi_tol: float = 1e-8
    max_iters: int = 10_000
    max_sweeps: int = 5_000
    threads: int = 1
    probe: bool = False
    cap: int = DEFAULT_SUPPORT_CAP
    record_history: bool = False


def _sweep(spec, t, lattice, next_vals, weight, opts, warm_laws):
    """Solve every deep state of one stage. Returns (laws, values, results)."""
    X, U = spec.n_states, spec.n_actions
    dense = None if next_vals is None else _dense_values(spec, lattice, next_vals)

    def solve(j):
        prob = StageProblem(spec, t, lattice.points[j], dense, weight, opts.cap)
        warm = None if warm_laws is None else warm_laws[j]
        return solve_stage(prob.q, X, U, prob.active, opts.fp_tol, opts.max_iters,
                           warm=warm, probe=opts.probe)

    if opts.threads > 1:
        with ThreadPoolExecutor(max_workers=opts.threads) as pool:
            results = list(pool.map(solve, range(len(lattice))))
    else:
        results = [solve(j) for j in range(len(lattice))]
    laws = np.empty((len(lattice), X, U))
    values = np.full((X, len(lattice)), np.nan)
    for j, res in enumerate(results):
        active = np.flatnonzero(lattice.points[j])
        law = res.law.copy()
        inactive = np.setdiff1d(np.arange(X), active)
        law[inactive] = 1.0 / U
        laws[j] = law
        values[active, j] = res.q[active].min(axis=1)
    return laws, values, results


def _empty_report(stages, lattice, tol):
    shape = (stages, len(lattice))
    return FixedPointReport(np.zeros(shape, dtype=np.int64), np.zeros(shape), np.zeros(shape, dtype=bool),
                            np.zeros(shape, dtype=bool), lattice, tol)


def _record(report, t, results):
    for j, r in enumerate(results):
        report.iterations[t, j] = r.iterations
        report.residual[t, j] = r.residual
        report.converged[t, j] = r.converged
        report.multiple[t, j] = r.multiple


def solve_finite(spec: GameSpec, *, horizon: int | None = None, beta: float | None = None,
                 options: SolverOptions | None = None, **kw):
    """Backward induction with a fixed point at every (t, d).

    Returns ``(EquilibriumStrategy, ValueTable, FixedPointReport)``. ``horizon``
    and ``beta`` override the spec (a discounted spec needs ``horizon``).
    """
    opts = options or SolverOptions(**kw)
    T = horizon if horizon is not None else spec.horizon
    if T is None or T < 1:
        raise ModelError("finite solve needs a horizon >= 1", "horizon")
    b = beta if beta is not None else (spec.beta if spec.beta is not None else 1.0)
    lattice = CountLattice(spec.n, spec.n_states, opts.cap)
    X, U = spec.n_states, spec.n_actions
    laws = np.empty((T, len(lattice), X, U))
    scaled = np.full((T, X, len(lattice)), np.nan)
    report = _empty_report(T, lattice, opts.fp_tol)
    next_vals, warm = None, None
    for t in reversed(range(T)):
        laws[t], vals, results = _sweep(spec, t, lattice, next_vals, b, opts, warm)
        _record(report, t, results)
        scaled[t] = vals
        next_vals, warm = vals, laws[t]
    weights = b ** np.arange(T)
    values = scaled * weights[:, None, None]
    strat = EquilibriumStrategy(FINITE, spec.n, lattice, laws)
    return strat, ValueTable(FINITE, spec.n, lattice, values), report


def rescaled_values(values: ValueTable, beta: float) -> np.ndarray:
    """``W_t = beta**(-T+t-1) V_{T-t+2}`` (1-based), returned as ``W[k]`` for ``k = 0..T``.

    ``W[k]`` is the value after ``k`` value-iteration sweeps from zero.
    """
    T = values.n_stages
    V = np.concatenate([values.values, np.zeros((1,) + values.values.shape[1:])])
    W = np.empty_like(V)
    for k in range(T + 1):
        s = T - k  # 0-based stage carrying k stages to go
        W[k] = V[s] * beta ** (-s)
    return W


def solve_discounted(spec: GameSpec, *, options: SolverOptions | None = None, **kw):
    """Value iteration with a fixed point at every deep state per sweep.

    Stops when the sup-norm difference of successive sweeps is at most
    ``vi_tol * (1 - beta) / (2 * beta)``; one further sweep gives the
    stationary law and the reported Bellman residual of the returned values.
    """
    opts = options or SolverOptions(**kw)
    beta = spec.beta
    if beta is None:
        raise ModelError("discounted solve needs beta", "beta")
    lattice = CountLattice(spec.n, spec.n_states, opts.cap)
    X = spec.n_states
    stop = opts.vi_tol * (1.0 - beta) / (2.0 * beta)
    report = _empty_report(1, lattice, opts.fp_tol)
    V = np.where(lattice.points.T > 0, 0.0, np.nan)
    warm, laws = None, None
    history = [V.copy()] if opts.record_history else None
    converged = False
    last = None
    for sweep in range(1, opts.max_sweeps + 1):
        laws, V_new, results = _sweep(spec, 0, lattice, V, beta, opts, warm)
        diff = float(np.nanmax(np.abs(V_new - V)))
        report.sweep_diffs.append(diff)
        if history is not None:
            history.append(V_new.copy())
        report.sweeps = sweep
        last = results
        if diff <= stop and sweep > 1:
            converged = True
            break
        V, warm = V_new, laws
    if converged:
        # one check sweep against the returned values
        V = V_new
        laws, V_check, results = _sweep(spec, 0, lattice, V, beta, opts, laws)
        last = results
        report.bellman_residual = float(np.nanmax(np.abs(V_check - V)))
    else:
        V = V_new
        report.bellman_residual = report.sweep_diffs[-1]
    _record(report, 0, last)
    report.vi_converged = converged and report.bellman_residual <= opts.vi_tol
    report.history = history
    strat = EquilibriumStrategy(STATIONARY, spec.n, lattice, laws[None])
    return strat, ValueTable(STATIONARY, spec.n, lattice, V[None]), report


# ---------------------------------------------------------------------------
# audit
# ---------------------------------------------------------------------------


@dataclass
class AuditResult:
    gap: float
    on_path: np.ndarray
    best_response: np.ndarray
    argmax: tuple

    def to_json(self) -> dict:
        t, x, d = self.argmax
        return {"gap": self.gap, "argmax": {"t": t, "x": x, "d_counts": list(d)}}


def _audit_stage(spec, t, lattice, law_t, W_next, U_next, weight, cap):
    X = spec.n_states
    dW = None if W_next is None else _dense_values(spec, lattice, W_next)
    dU = None if U_next is None else _dense_values(spec, lattice, U_next)
    W = np.full((X, len(lattice)), np.nan)
    Ub = np.full((X, len(lattice)), np.nan)
    for j, p in enumerate(lattice.points):
        prob = StageProblem(spec, t, p, None, weight, cap)
        law = law_t[j]
        cost = prob.cost_rows(law)
        qW, qU = cost.copy(), cost.copy()
        if dW is not None:
            qW += weight * np.einsum("xuy,xy->xu", prob.K, prob.continuation(law, dW))
            qU += weight * np.einsum("xuy,xy->xu", prob.K, prob.continuation(law, dU))
        for x in prob.active:
            W[x, j] = law[x] @ qW[x]
            Ub[x, j] = qU[x].min()
    return W, Ub


def exploitability_audit(spec: GameSpec, strategy: EquilibriumStrategy, *, beta: float | None = None,
                         cap: int = DEFAULT_SUPPORT_CAP) -> AuditResult:
    """Largest gain of a single deviator best-responding to the frozen population.

    For every starting stage, state and deep state, compares the on-path value
    with the deviator's best-response value (both as costs-to-go discounted
    from the starting stage) and returns the largest on-path minus best-response
    difference, which is nonnegative up to rounding.
    """
    lattice = strategy.lattice
    if strategy.mode == STATIONARY:
        return _audit_stationary(spec, strategy, beta if beta is not None else spec.beta, cap)
    b = beta if beta is not None else (spec.beta if spec.beta is not None else 1.0)
    T = strategy.n_stages
    W_all = np.full((T, spec.n_states, len(lattice)), np.nan)
    U_all = np.full_like(W_all, np.nan)
    W_next = U_next = None
    for t in reversed(range(T)):
        W_next, U_next = _audit_stage(spec, t, lattice, strategy.laws[t], W_next, U_next, b, cap)
        W_all[t], U_all[t] = W_next, U_next
    return _finish_audit(W_all, U_all, lattice)


def _finish_audit(W_all, U_all, lattice):
    gaps = W_all - U_all
    flat = np.nanargmax(gaps)
    t, x, j = np.unravel_index(flat, gaps.shape)
    d = tuple(int(c) for c in lattice.points[j])
    return AuditResult(float(gaps[t, x, j]), W_all, U_all, (int(t), int(x), d))


def _stationary_matrices(spec, strategy, beta, cap):
    """Per-action cost vectors and transition matrices over nodes ``(x, j)``."""
    lattice = strategy.lattice
    X, U = spec.n_states, spec.n_actions
    N = len(lattice)
    node = lambda x, j: x * N + j  # noqa: E731
    lookup = strategy._lookup
    cost = np.zeros((U, X * N))
    rows = [[] for _ in range(U)]
    cols = [[] for _ in range(U)]
    vals = [[] for _ in range(U)]
    valid = np.zeros(X * N, dtype=bool)
    for j, p in enumerate(lattice.points):
        prob = StageProblem(spec, 0, p, None, beta, cap)
        law = strategy.laws[0, j]
        c = prob.cost_rows(law)
        trans = np.einsum("xu,xuy->xy", law, prob.K)
        for x in prob.active:
            i = node(x, j)
            valid[i] = True
            others = p.copy()
            others[x] -= 1
            P = next_counts_dense(others, trans)
            support = np.argwhere(P > 0) if P.ndim else np.zeros((1, 0), dtype=int)
            pv = P[tuple(support.T)] if P.ndim else np.array([float(P)])
            for u in range(U):
                cost[u, i] = c[x, u]
                for y in range(X):
                    ky = prob.K[x, u, y]
                    if ky == 0:
                        continue
                    for s, pr in zip(support, pv):
                        full = list(s) + [spec.n - 1 - int(np.sum(s))]
                        full[y] += 1
                        rows[u].append(i)
                        cols[u].append(node(y, lookup[tuple(full)]))
                        vals[u].append(ky * pr)
    mats = [sparse.csr_matrix((vals[u], (rows[u], cols[u])), shape=(X * N, X * N)) for u in range(U)]
    return cost, mats, valid


def _audit_stationary(spec, strategy, beta, cap):
    lattice = strategy.lattice
    X, U = spec.n_states, spec.n_actions
    N = len(lattice)
    cost, mats, valid = _stationary_matrices(spec, strategy, beta, cap)
    law_nodes = np.zeros((X * N, U))
    for x in range(X):
        law_nodes[x * N:(x + 1) * N] = strategy.laws[0, :, x, :]
    eye = sparse.identity(X * N, format="csr")

    def evaluate(rowlaw):
        r = np.einsum("iu,ui->i", rowlaw, cost)
        M = sum(sparse.diags(rowlaw[:, u]) @ mats[u] for u in range(U))
        return spsolve((eye - beta * M).tocsc(), r)

    W = evaluate(law_nodes)
    # policy iteration for the deviator, started from the on-path greedy action
    V = W
    policy = None
    for _ in range(1000):
        Q = np.stack([cost[u] + beta * (mats[u] @ V) for u in range(U)], axis=1)
        new = np.argmin(Q, axis=1)
        if policy is not None:
            # keep the current action unless strictly improved
            keep = Q[np.arange(X * N), policy] <= Q[np.arange(X * N), new] + 1e-13
            new = np.where(keep, policy, new)
            if np.array_equal(new, policy):
                break
        policy = new
        V = evaluate(np.eye(U)[policy])
    to_grid = lambda v: np.where(valid, v, np.nan).reshape(X, N)[None]  # noqa: E731
    return _finish_audit(to_grid(W), to_grid(V), lattice)


def perturb(strategy: EquilibriumStrategy, t: int, d, x: int, u: int) -> EquilibriumStrategy:
    """Copy of ``strategy`` with the row of state ``x`` at (t, d) replaced by action ``u``."""
    laws = strategy.laws.copy()
    j = strategy.index(d)
    tt = 0 if strategy.mode == STATIONARY else t
    laws[tt, j, x] = 0.0
    laws[tt, j, x, u] = 1.0
    return EquilibriumStrategy(strategy.mode, strategy.n, strategy.lattice, laws)


def save_strategy(strategy: EquilibriumStrategy, values: ValueTable | None, path) -> None:
    with open(path, "w") as fh:
        json.dump(strategy.to_json(values), fh, indent=1, sort_keys=True)
