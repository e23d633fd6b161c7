"""Symmetric stage fixed point ``law in argmin Q(. ; law)``.

Given ``q_fn(law) -> Q`` where ``Q[x, u]`` is the objective of a single player
in state ``x`` taking pure action ``u`` while everyone else uses ``law``, find a
law that is a best response to itself on the active states.

The objective is linear in the player's own mixed row, so the residual of a law
is ``max_x (law[x] @ Q[x] - min_u Q[x, u])`` over active states.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import least_squares


@dataclass
class StageResult:
    law: np.ndarray
    q: np.ndarray
    residual: float
    iterations: int
    converged: bool
    multiple: bool = False

    def values(self, active) -> np.ndarray:
        """Best-response value per state (NaN on inactive states)."""
        out = np.full(self.q.shape[0], np.nan)
        out[active] = self.q[active].min(axis=1)
        return out


def residual(law: np.ndarray, q: np.ndarray, active) -> float:
    if len(active) == 0:
        return 0.0
    qa = q[active]
    gap = np.einsum("xu,xu->x", law[active], qa) - qa.min(axis=1)
    return float(max(gap.max(), 0.0))


def pure_best_response(q: np.ndarray, active, n_actions: int, fill: np.ndarray) -> np.ndarray:
    br = fill.copy()
    # argmin returns the lowest index among ties
    choice = np.argmin(q[active], axis=1)
    br[active] = 0.0
    br[active, choice] = 1.0
    return br


class _Tracker:
    def __init__(self, q_fn, active):
        self.q_fn, self.active = q_fn, active
        self.best: StageResult | None = None
        self.evals = 0

    def consider(self, law):
        q = self.q_fn(law)
        self.evals += 1
        r = residual(law, q, self.active)
        if self.best is None or r < self.best.residual:
            self.best = StageResult(law.copy(), q, r, 0, False)
        return q, r


MASS_CUTS = (0.05, 1e-3, 1e-6)


def _polish_all(tracker: _Tracker, law: np.ndarray, q: np.ndarray, tol: float) -> None:
    """Polish on supports guessed from decreasing mass cutoffs, then from near-minimal actions."""
    for cut in MASS_CUTS:
        _polish(tracker, law, q, cut)
        if tracker.best.residual <= tol:
            return
    _polish(tracker, law, q, None)


def _polish(tracker: _Tracker, law: np.ndarray, q: np.ndarray, mass_cut: float | None,
            max_nfev: int = 60) -> None:
    """Solve the indifference conditions on a guessed support by least squares.

    The support of a row is the actions with mass at least ``mass_cut``, or,
    when ``mass_cut`` is None, the actions whose objective is within the
    current residual of the minimum.
    """
    active = tracker.active
    supports = {}
    for x in active:
        if mass_cut is not None:
            s = np.flatnonzero(law[x] >= mass_cut)
        else:
            r = residual(law, q, active)
            s = np.flatnonzero(q[x] - q[x].min() <= max(r, 1e-12))
        if s.size == 0:
            s = np.array([int(np.argmin(q[x]))])
        supports[x] = s
    free = [(x, s) for x, s in supports.items() if s.size >= 2]

    def build(theta):
        out = law.copy()
        pos = 0
        for x, s in supports.items():
            out[x] = 0.0
            if s.size == 1:
                out[x, s[0]] = 1.0
                continue
            head = np.clip(theta[pos:pos + s.size - 1], 0.0, 1.0)
            pos += s.size - 1
            row = np.append(head, max(0.0, 1.0 - head.sum()))
            out[x, s] = row / row.sum()
        return out

    if not free:
        tracker.consider(build(np.zeros(0)))
        return

    def equations(theta):
        cand = build(theta)
        qq = tracker.q_fn(cand)
        tracker.evals += 1
        return np.concatenate([qq[x, s[:-1]] - qq[x, s[-1]] for x, s in free])

    theta0 = []
    for x, s in free:
        row = law[x, s] / law[x, s].sum() if law[x, s].sum() > 0 else np.full(s.size, 1.0 / s.size)
        theta0.extend(row[:-1])
    theta0 = np.clip(np.array(theta0), 0.0, 1.0)
    try:
        sol = least_squares(equations, theta0, bounds=(0.0, 1.0), xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=max_nfev, method="trf")
        theta = sol.x
    except (ValueError, np.linalg.LinAlgError):
        return
    tracker.consider(build(theta))


def solve_stage(
    q_fn: Callable[[np.ndarray], np.ndarray],
    n_states: int,
    n_actions: int,
    active,
    tol: float = 1e-8,
    max_iters: int = 10_000,
    warm: np.ndarray | None = None,
    polish: bool = True,
    probe: bool = False,
    stall: int = 300,
) -> StageResult:
    """Averaged best-response iteration with polishing.

    Candidates examined, in order: the warm start (and a polish of it), then
    fictitious play from the uniform law with weight ``1/(k+1)``; a repeated
    pure best response is tested as its own candidate, and the running average
    is polished on a schedule. Returns the first candidate within ``tol``,
    otherwise the lowest-residual one with ``converged=False``.

    After 1000 iterations the loop also stops once the best residual has not
    improved by 1% over ``stall`` iterations; this happens when the objective jumps in the
    law and no exact fixed point exists.
    """
    active = np.asarray(active, dtype=int)
    uniform = np.full((n_states, n_actions), 1.0 / n_actions)
    tracker = _Tracker(q_fn, active)

    def done(k):
        best = tracker.best
        best.iterations = k
        best.converged = best.residual <= tol
        return best

    if len(active) == 0:
        tracker.consider(uniform)
        return done(0)

    if warm is not None:
        warm = np.array(warm, dtype=float)
        q, r = tracker.consider(warm)
        if r <= tol:
            return _maybe_probe(done(0), q_fn, n_states, n_actions, active, tol, max_iters, probe)
        if polish:
            _polish_all(tracker, warm, q, tol)
            if tracker.best.residual <= tol:
                return _maybe_probe(done(0), q_fn, n_states, n_actions, active, tol, max_iters, probe)

    schedule = {5, 30, 200, 1000, 5000}
    min_stall_k = 1000
    avg = uniform.copy()
    prev_br = None
    k = 0
    mark, mark_k = math.inf, 0
    for k in range(1, max_iters + 1):
        q, r = tracker.consider(avg)
        if r <= tol:
            break
        if tracker.best.residual < 0.99 * mark:
            mark, mark_k = tracker.best.residual, k
        elif stall and k > min_stall_k and k - mark_k >= stall:
            break
        br = pure_best_response(q, active, n_actions, uniform)
        if prev_br is not None and np.array_equal(br, prev_br):
            _, rb = tracker.consider(br)
            if rb <= tol:
                break
        prev_br = br
        if polish and k in schedule:
            _polish_all(tracker, avg, q, tol)
            if tracker.best.residual <= tol:
                break
        avg = avg + (br - avg) / (k + 1)
    res = done(k)
    if not res.converged and polish:
        _polish_all(tracker, res.law, res.q, tol)
        res = done(k)
    return _maybe_probe(res, q_fn, n_states, n_actions, active, tol, max_iters, probe)


def _maybe_probe(res, q_fn, n_states, n_actions, active, tol, max_iters, probe):
    """Rerun from each pure initial law; flag distinct converged laws."""
    if not probe or not res.converged:
        return res
    for u in range(n_actions):
        init = np.zeros((n_states, n_actions))
        init[:, u] = 1.0
        other = solve_stage(q_fn, n_states, n_actions, active, tol, max_iters, warm=init, probe=False)
        if other.converged and np.max(np.abs(other.law[active] - res.law[active])) > 1e-6:
            res.multiple = True
            break
    return res
