"""Sequential mean-field equilibrium on a quantized simplex.

The infinite-population value ``Vhat_t(x, m)`` is computed on grid nodes; the
continuation of a node is read at the projection of the exact next mean field.
The NS strategy is the trajectory obtained by propagating the exact mean field
forward and reading laws at projected nodes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dss import FixedPointReport, SolverOptions
from .dynamics import compositions, mean_field_step
from .fixedpoint import pure_best_response, solve_stage
from .model import GameSpec, ModelError, composition_count

DEFAULT_GRID_CAP = 2_000_000


class GridCapError(ModelError):
    pass


class SimplexGrid:
    """All probability vectors with entries in ``{0, 1/k, ..., 1}``, lexicographic order."""

    def __init__(self, n_states: int, k: int, cap: int = DEFAULT_GRID_CAP):
        if k < 1:
            raise ModelError("grid resolution must be >= 1", "grid.k")
        size = composition_count(k, n_states)
        if size > cap:
            raise GridCapError(f"grid has {size} nodes, cap is {cap}", "grid.k")
        self.k, self.n_states = k, n_states
        self.points = compositions(k, n_states)
        self.nodes = self.points / k
        self._lookup = {tuple(int(c) for c in p): j for j, p in enumerate(self.points)}

    def __len__(self):
        return len(self.points)

    def index_of_counts(self, counts) -> int:
        return self._lookup[tuple(int(c) for c in counts)]

    def project_index(self, m) -> int:
        return self._lookup[tuple(_round_counts(np.asarray(m, dtype=float), self.k))]

    def project(self, m) -> np.ndarray:
        return self.nodes[self.project_index(m)]

    def to_csv(self) -> str:
        lines = ["node," + ",".join(f"m{x}" for x in range(self.n_states))]
        for j, node in enumerate(self.nodes):
            lines.append(f"{j}," + ",".join(repr(float(v)) for v in node))
        return "\n".join(lines) + "\n"


def build_grid(n_states: int, k: int, cap: int = DEFAULT_GRID_CAP) -> SimplexGrid:
    return SimplexGrid(n_states, k, cap)


def _round_counts(m: np.ndarray, k: int) -> list:
    """Largest-remainder rounding of ``k * m`` to integers summing to ``k``.

    This minimizes the L1 distance; among equal remainders the extra units go
    to later coordinates, which selects the earliest node in canonical order.
    """
    m = np.clip(m, 0.0, None)
    m = m / m.sum()
    scaled = m * k
    base = np.floor(scaled + 1e-9)
    frac = np.round(scaled - base, 12)
    short = int(k - base.sum())
    idx = np.arange(len(m))
    if short > 0:
        # largest remainder first; on ties the later index first
        order = np.lexsort((-idx, -frac))
        base[order[:short]] += 1
    elif short < 0:
        order = np.lexsort((idx, frac))
        for i in order:
            if short == 0:
                break
            if base[i] > 0:
                base[i] -= 1
                short += 1
    return [int(v) for v in base]


def project(m, grid: SimplexGrid) -> np.ndarray:
    """Nearest grid node in L1 distance."""
    return grid.project(m)


# ---------------------------------------------------------------------------
# value and strategy containers
# ---------------------------------------------------------------------------


@dataclass
class MeanFieldValue:
    """``values[t, x, node]`` and ``laws[t, node]``; stationary mode has one stage."""

    mode: str
    grid: SimplexGrid
    values: np.ndarray
    laws: np.ndarray

    @property
    def n_stages(self) -> int:
        return self.values.shape[0]

    def law_at(self, t: int, m) -> np.ndarray:
        t = 0 if self.mode == "stationary-discounted" else t
        return self.laws[t, self.grid.project_index(m)]

    def value_at(self, t: int, x: int, m) -> float:
        t = 0 if self.mode == "stationary-discounted" else t
        if t >= self.n_stages:
            return 0.0
        return float(self.values[t, x, self.grid.project_index(m)])


@dataclass
class NSStrategy:
    """No-sharing strategy: a law per stage along a deterministic mean-field flow.

    ``m_trajectory`` has one more entry than ``laws``: the last entry is the
    mean field after the final stage.
    """

    m_trajectory: np.ndarray
    laws: np.ndarray
    grid_resolution: int
    residuals: np.ndarray
    value: MeanFieldValue | None = field(default=None, repr=False)
    report: FixedPointReport | None = field(default=None, repr=False)

    @property
    def horizon(self) -> int:
        return len(self.laws)

    def law(self, t: int) -> np.ndarray:
        if not 0 <= t < len(self.laws):
            raise KeyError(f"NS strategy has no stage {t}")
        return self.laws[t]

    def to_json(self) -> dict:
        return {
            "m_trajectory": self.m_trajectory.tolist(),
            "laws": self.laws.tolist(),
            "grid_resolution": self.grid_resolution,
            "residuals": self.residuals.tolist(),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "NSStrategy":
        return cls(np.asarray(obj["m_trajectory"], dtype=float), np.asarray(obj["laws"], dtype=float),
                   int(obj["grid_resolution"]), np.asarray(obj["residuals"], dtype=float))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# stage problem
# ---------------------------------------------------------------------------


class MeanFieldStage:
    """Objective ``Qhat[x, u]`` at grid node ``m`` as a function of the population law."""

    def __init__(self, spec: GameSpec, t: int, m: np.ndarray, grid: SimplexGrid,
                 next_values: np.ndarray | None, weight: float = 1.0):
        self.spec, self.t, self.m, self.grid = spec, t, m, grid
        self.K = spec.kernel.matrix(t, m)
        self.next_values = next_values
        self.weight = weight
        self.active = np.flatnonzero(m > 0)
        self._fixed_cost = None
        if spec.cost.coupling == "d-only":
            self._fixed_cost = np.asarray(spec.cost.d_table(t, m), dtype=float)

    def q(self, law: np.ndarray) -> np.ndarray:
        if self._fixed_cost is not None:
            Q = self._fixed_cost
        else:
            Q = np.array(self.spec.cost.table(self.t, self.m[:, None] * law), dtype=float)
        if self.next_values is not None:
            m_next = self.m @ np.einsum("xu,xuy->xy", law, self.K)
            cont = self.next_values[:, self.grid.project_index(m_next)]
            Q = Q + self.weight * (self.K @ cont)
        return Q


def _sweep(spec, t, grid, next_values, weight, opts, warm_laws):
    X, U = spec.n_states, spec.n_actions
    N = len(grid)
    laws = np.empty((N, X, U))
    values = np.empty((X, N))
    results = []
    for j, m in enumerate(grid.nodes):
        prob = MeanFieldStage(spec, t, m, grid, next_values, weight)
        warm = None if warm_laws is None else warm_laws[j]
        res = solve_stage(prob.q, X, U, prob.active, opts.fp_tol, opts.max_iters, warm=warm, probe=opts.probe)
        law = res.law.copy()
        inactive = np.setdiff1d(np.arange(X), prob.active)
        if inactive.size:
            # players cannot be here in the limit; give them their best response
            law[inactive] = pure_best_response(res.q, inactive, U, law)[inactive]
        laws[j] = law
        values[:, j] = res.q.min(axis=1)
        results.append(res)
    return laws, values, results


def _report(stages, grid, tol):
    shape = (stages, len(grid))
    return FixedPointReport(np.zeros(shape, dtype=np.int64), np.zeros(shape), np.zeros(shape, dtype=bool),
                            np.zeros(shape, dtype=bool), grid, tol)


def _record(report, t, results):
    for j, r in enumerate(results):
        report.iterations[t, j] = r.iterations
        report.residual[t, j] = r.residual
        report.converged[t, j] = r.converged
        report.multiple[t, j] = r.multiple


def forward_pass(spec: GameSpec, value: MeanFieldValue, report: FixedPointReport, horizon: int,
                 m0=None, t0: int = 0) -> NSStrategy:
    """Exact mean-field flow from ``m0`` at stage ``t0`` with laws read at projected nodes."""
    m = np.asarray(spec.initial_dist if m0 is None else m0, dtype=float)
    traj, laws, res = [m], [], []
    stationary = value.mode == "stationary-discounted"
    for t in range(t0, horizon):
        j = value.grid.project_index(m)
        tt = 0 if stationary else t
        law = value.laws[tt, j]
        laws.append(law)
        res.append(report.residual[tt, j])
        m = mean_field_step(spec, 0 if stationary else t, m, law)
        traj.append(m)
    return NSStrategy(np.array(traj), np.array(laws).reshape(-1, spec.n_states, spec.n_actions),
                      value.grid.k, np.array(res), value, report)


def default_resolution(n_target: int) -> int:
    """Grid resolution ``ceil(sqrt(n)) * 10`` for an ``n``-player deployment."""
    return int(math.ceil(math.sqrt(n_target))) * 10


def _grid_arg(spec, grid):
    if isinstance(grid, SimplexGrid):
        return grid
    return build_grid(spec.n_states, int(grid))


def solve_smfe_finite(spec: GameSpec, grid, *, horizon: int | None = None, beta: float | None = None,
                      options: SolverOptions | None = None, **kw):
    """Backward DP over grid nodes, then the forward pass from the initial law.

    Returns ``(MeanFieldValue, NSStrategy, FixedPointReport)``.
    """
    opts = options or SolverOptions(**kw)
    grid = _grid_arg(spec, grid)
    T = horizon if horizon is not None else spec.horizon
    if T is None or T < 1:
        raise ModelError("finite solve needs a horizon >= 1", "horizon")
    b = beta if beta is not None else (spec.beta if spec.beta is not None else 1.0)
    X, U = spec.n_states, spec.n_actions
    laws = np.empty((T, len(grid), X, U))
    values = np.empty((T, X, len(grid)))
    report = _report(T, grid, opts.fp_tol)
    nxt, warm = None, None
    for t in reversed(range(T)):
        laws[t], values[t], results = _sweep(spec, t, grid, nxt, b, opts, warm)
        _record(report, t, results)
        nxt, warm = values[t], laws[t]
    # absolute scale as for the deep-state solver
    values = values * (b ** np.arange(T))[:, None, None]
    value = MeanFieldValue("finite", grid, values, laws)
    return value, forward_pass(spec, value, report, T), report


def truncation_horizon(beta: float, max_cost: float, tol: float) -> int:
    """Smallest ``T`` with ``beta**T * max_cost / (1 - beta) <= tol``."""
    if max_cost <= 0:
        return 1
    return max(1, int(math.ceil(math.log(tol * (1 - beta) / max_cost) / math.log(beta))))


def solve_smfe_discounted(spec: GameSpec, grid, trunc_T: int | None = None, *,
                          trunc_tol: float = 1e-6, options: SolverOptions | None = None, **kw):
    """Value iteration on ``Vhat(x, m)`` over grid nodes; forward pass for ``trunc_T`` stages.

    ``trunc_T`` defaults to the geometric tail bound with the largest stage cost
    seen on the grid under the computed laws.
    """
    opts = options or SolverOptions(**kw)
    grid = _grid_arg(spec, grid)
    beta = spec.beta
    if beta is None:
        raise ModelError("discounted solve needs beta", "beta")
    X = spec.n_states
    stop = opts.vi_tol * (1.0 - beta) / (2.0 * beta)
    report = _report(1, grid, opts.fp_tol)
    V = np.zeros((X, len(grid)))
    warm, laws, results = None, None, None
    history = [V.copy()] if opts.record_history else None
    converged = False
    for sweep in range(1, opts.max_sweeps + 1):
        laws, V_new, results = _sweep(spec, 0, grid, V, beta, opts, warm)
        diff = float(np.max(np.abs(V_new - V)))
        report.sweep_diffs.append(diff)
        report.sweeps = sweep
        if history is not None:
            history.append(V_new.copy())
        if diff <= stop and sweep > 1:
            converged = True
            V = V_new
            break
        V, warm = V_new, laws
    else:
        V = V_new
    if converged:
        laws, V_check, results = _sweep(spec, 0, grid, V, beta, opts, laws)
        report.bellman_residual = float(np.max(np.abs(V_check - V)))
    else:
        report.bellman_residual = report.sweep_diffs[-1]
    _record(report, 0, results)
    report.vi_converged = converged and report.bellman_residual <= opts.vi_tol
    report.history = history
    value = MeanFieldValue("stationary-discounted", grid, V[None], laws[None])
    if trunc_T is None:
        cmax = max(float(np.max(spec.cost.table(0, m[:, None] * laws[j]))) for j, m in enumerate(grid.nodes))
        trunc_T = truncation_horizon(beta, cmax, trunc_tol)
    ns = forward_pass(spec, value, report, trunc_T)
    return value, ns, report


def belief_shock(ns: NSStrategy, spec: GameSpec, t_shock: int, m_shock) -> NSStrategy:
    """Replace the mean field at ``t_shock`` and recompute the tail from the stored law maps.

    The returned strategy covers the whole horizon: stages before ``t_shock``
    are kept, later laws are read along the shocked flow.
    """
    if ns.value is None or ns.report is None:
        raise ModelError("belief_shock needs the strategy's law maps")
    T = ns.horizon
    if not 0 <= t_shock < T:
        raise ModelError(f"shock stage {t_shock} outside horizon {T}")
    value, report = ns.value, ns.report
    stationary = value.mode == "stationary-discounted"
    m = np.asarray(m_shock, dtype=float)
    traj = list(ns.m_trajectory[:t_shock]) + [m]
    laws = list(ns.laws[:t_shock])
    res = list(ns.residuals[:t_shock])
    for t in range(t_shock, T):
        tt = 0 if stationary else t
        j = value.grid.project_index(m)
        laws.append(value.laws[tt, j])
        res.append(report.residual[tt, j])
        m = mean_field_step(spec, tt, m, laws[-1])
        traj.append(m)
    return NSStrategy(np.array(traj), np.array(laws), ns.grid_resolution, np.array(res), value, report)
