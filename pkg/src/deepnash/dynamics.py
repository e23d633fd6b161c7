"""Exact laws of deep-state transitions, action splits and expected stage costs.

Deep states are integer count vectors. Dense distributions over count vectors
with a fixed total are stored as arrays indexed by the counts of the first
``|X| - 1`` states (the last count is implied); entries off the simplex are 0.
"""

from __future__ import annotations

import itertools
import math
import threading
from collections import OrderedDict
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import signal
from scipy.special import gammaln, xlogy

from .model import GameSpec, ModelError, composition_count

DEFAULT_SUPPORT_CAP = 5_000_000


class SupportCapError(RuntimeError):
    def __init__(self, size: int, cap: int):
        self.size, self.cap = size, cap
        super().__init__(f"exact kernel too large; reduce n or |X| (support {size} > cap {cap})")


# ---------------------------------------------------------------------------
# count vectors
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DeepState:
    """Integer counts of players per state; ``d(x) = counts[x] / denom``."""

    counts: tuple

    def __post_init__(self):
        counts = tuple(int(c) for c in self.counts)
        if any(c < 0 for c in counts):
            raise ValueError(f"negative count in {counts}")
        object.__setattr__(self, "counts", counts)

    @property
    def denom(self) -> int:
        return sum(self.counts)

    @property
    def dist(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float) / self.denom

    def __len__(self):
        return len(self.counts)


class OthersDeepState(DeepState):
    """Counts of the ``n - 1`` players other than a designated one."""


@dataclass(frozen=True)
class JointEmpirical:
    """State-action counts ``counts[x][u]``."""

    counts: tuple

    @property
    def denom(self) -> int:
        return sum(map(sum, self.counts))

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=float)

    def state_counts(self) -> tuple:
        return tuple(sum(row) for row in self.counts)


@dataclass
class CountDistribution:
    """Finite distribution over count vectors (or matrices) sharing a total."""

    support: list
    probs: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)

    def as_dict(self) -> dict:
        return {s: float(p) for s, p in zip(self.support, self.probs)}

    def mean(self) -> np.ndarray:
        pts = np.asarray(self.support, dtype=float)
        return np.tensordot(self.probs, pts, axes=1)

    def to_json(self) -> dict:
        return {"support": [list(map(list, s)) if isinstance(s[0], tuple) else list(s) for s in self.support],
                "probs": self.probs.tolist()}


@lru_cache(maxsize=None)
def compositions(total: int, parts: int) -> np.ndarray:
    """All count vectors of length ``parts`` summing to ``total``, lexicographic order."""
    if parts == 1:
        return np.array([[total]], dtype=np.int64)
    rows = []
    for first in range(total + 1):
        rest = compositions(total - first, parts - 1)
        rows.append(np.hstack([np.full((len(rest), 1), first, dtype=np.int64), rest]))
    out = np.vstack(rows)
    out.flags.writeable = False
    return out


class CountLattice:
    """Enumeration and dense indexing of count vectors with a fixed total."""

    def __init__(self, total: int, n_states: int, cap: int = DEFAULT_SUPPORT_CAP):
        size = composition_count(total, n_states)
        if size > cap:
            raise SupportCapError(size, cap)
        self.total, self.n_states = total, n_states
        self.points = compositions(total, n_states)
        self.dense_shape = (total + 1,) * (n_states - 1)
        self.keys = [tuple(p[:-1]) for p in self.points]

    def __len__(self):
        return len(self.points)

    def key(self, counts) -> tuple:
        return tuple(int(c) for c in counts[:-1])


@lru_cache(maxsize=4096)
def _log_factorials(n: int) -> np.ndarray:
    return gammaln(np.arange(n + 1) + 1.0)


@lru_cache(maxsize=1024)
def _grid(trials: int, k: int):
    idx = np.indices((trials + 1,) * k).reshape(k, -1)
    last = trials - idx.sum(axis=0)
    valid = last >= 0
    return idx[:, valid], last[valid], np.flatnonzero(valid)


def _clean_probs(p: np.ndarray) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
    return p / p.sum()


def multinomial_dense(trials: int, probs: np.ndarray) -> np.ndarray:
    """Dense multinomial PMF over the first ``len(probs) - 1`` counts."""
    probs = _clean_probs(probs)
    k = len(probs) - 1
    if k == 0:
        return np.array(1.0)
    lf = _log_factorials(trials)
    if k == 1:
        c = np.arange(trials + 1)
        logp = lf[trials] - lf[c] - lf[trials - c] + xlogy(c, probs[0]) + xlogy(trials - c, probs[1])
        return np.exp(logp)
    idx, last, flat = _grid(trials, k)
    logp = lf[trials] - lf[idx].sum(axis=0) - lf[last] + xlogy(idx, probs[:k, None]).sum(axis=0) + xlogy(last, probs[k])
    out = np.zeros((trials + 1) ** k)
    out[flat] = np.exp(logp)
    return out.reshape((trials + 1,) * k)


def binomial_pmf(trials: int, p: float) -> np.ndarray:
    """PMF of Binomial(trials, p) on ``0..trials``."""
    p = min(max(float(p), 0.0), 1.0)
    return multinomial_dense(trials, np.array([1.0 - p, p]))[::-1].copy()


def _convolve(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim == 0:
        return a * b
    if a.ndim == 1:
        return np.convolve(a, b)
    return signal.convolve(a, b, method="direct")


def _finish(pmf: np.ndarray) -> np.ndarray:
    pmf = np.where(pmf < 0, 0.0, pmf)
    return pmf


def others_transition(spec: GameSpec, t: int, d_counts, law: np.ndarray) -> np.ndarray:
    """Per-state next-state law ``P[x][y]`` of a player using ``law`` in deep state ``d``."""
    K = spec.kernel.matrix(t, np.asarray(d_counts, dtype=float) / spec.n)
    return np.einsum("xu,xuy->xy", law, K)


def next_counts_dense(others_counts, trans: np.ndarray) -> np.ndarray:
    """Joint law of the next count vector of a group, dense over the first ``|X|-1`` counts.

    Each state group moves as an independent multinomial; the joint law is the
    convolution of these multinomials.
    """
    X = trans.shape[0]
    total = int(sum(others_counts))
    out = None
    for x, c in enumerate(others_counts):
        if c == 0:
            continue
        part = multinomial_dense(int(c), trans[x])
        out = part if out is None else _convolve(out, part)
    if out is None:
        out = np.zeros((1,) * (X - 1)) if X > 1 else np.array(1.0)
        if X > 1:
            out[(0,) * (X - 1)] = 1.0
    expected = (total + 1,) * (X - 1)
    if out.shape != expected:
        raise AssertionError(f"dense shape {out.shape} != {expected}")
    return _finish(out)


# ---------------------------------------------------------------------------
# cache
# ---------------------------------------------------------------------------


class PmfCache:
    """Bounded LRU cache of dense next-count PMFs.

    Keys include the law rounded to 1e-12 so that numerically identical laws
    share entries. Reads and insert-if-absent are serialized by a lock.
    """

    def __init__(self, maxsize: int = 20000):
        self.maxsize = maxsize
        self._data: OrderedDict = OrderedDict()
        self._lock = threading.Lock()
        self.hits = self.misses = 0

    @staticmethod
    def key(t, x, counts, law) -> tuple:
        return (t, x, tuple(counts), np.round(law, 12).tobytes())

    def get_or_compute(self, key, fn):
        with self._lock:
            if key in self._data:
                self._data.move_to_end(key)
                self.hits += 1
                return self._data[key]
        value = fn()
        with self._lock:
            self.misses += 1
            value = self._data.setdefault(key, value)
            if len(self._data) > self.maxsize:
                self._data.popitem(last=False)
        return value


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def others_from_full(d: DeepState, x: int) -> OthersDeepState:
    if d.counts[x] < 1:
        raise ValueError("deviator state inconsistent with deep state")
    counts = list(d.counts)
    counts[x] -= 1
    return OthersDeepState(tuple(counts))


def blend(others: OthersDeepState, x: int) -> np.ndarray:
    """``(n-1)/n * d_others + (1/n) * delta(x)``, i.e. the full deep state as a distribution."""
    n = others.denom + 1
    out = np.asarray(others.counts, dtype=float) / n
    out[x] += 1.0 / n
    return out


def _full_counts(others: OthersDeepState, x: int) -> tuple:
    counts = list(others.counts)
    counts[x] += 1
    return tuple(counts)


def _check_law(spec: GameSpec, law) -> np.ndarray:
    law = np.asarray(law, dtype=float)
    if law.shape != (spec.n_states, spec.n_actions):
        raise ModelError(f"local law shape {law.shape} != {(spec.n_states, spec.n_actions)}")
    if np.any(law < -1e-15) or np.any(np.abs(law.sum(axis=1) - 1.0) > 1e-12):
        raise ModelError("invalid local law")
    return law


def marginal_next_count_pmf(spec: GameSpec, t: int, y: int, deviator_x: int,
                            others: OthersDeepState, law) -> np.ndarray:
    """PMF of the number of other players in state ``y`` at the next stage.

    Convolution over source states of Binomial(count, P(y | source)).
    """
    law = _check_law(spec, law)
    trans = others_transition(spec, t, _full_counts(others, deviator_x), law)
    pmf = np.array([1.0])
    for x, c in enumerate(others.counts):
        if c > 0:
            pmf = np.convolve(pmf, binomial_pmf(c, trans[x, y]))
    out = np.zeros(others.denom + 1)
    out[: len(pmf)] = pmf
    return _finish(out)


def joint_next_deep_pmf(spec: GameSpec, t: int, deviator_x: int, others: OthersDeepState, law,
                        cap: int = DEFAULT_SUPPORT_CAP) -> CountDistribution:
    """Exact joint law of the next :class:`OthersDeepState`."""
    law = _check_law(spec, law)
    lattice = CountLattice(others.denom, spec.n_states, cap)
    trans = others_transition(spec, t, _full_counts(others, deviator_x), law)
    dense = next_counts_dense(others.counts, trans)
    probs = np.array([dense[k] for k in lattice.keys]) if spec.n_states > 1 else np.array([1.0])
    return CountDistribution([tuple(map(int, p)) for p in lattice.points], probs)


def action_split(others_counts, law: np.ndarray, cap: int = DEFAULT_SUPPORT_CAP):
    """All state-action count matrices reachable by splitting each state group by ``law``.

    Returns ``(splits, probs)`` with ``splits`` of shape ``(S, X, U)``.
    """
    X, U = law.shape
    size = 1
    for c in others_counts:
        size *= composition_count(int(c), U)
    if size > cap:
        raise SupportCapError(size, cap)
    per_state = []
    for x, c in enumerate(others_counts):
        comps = compositions(int(c), U)
        lf = _log_factorials(int(c))
        row = _clean_probs(law[x])
        logp = lf[int(c)] - lf[comps].sum(axis=1) + xlogy(comps, row[None, :]).sum(axis=1)
        per_state.append((comps, np.exp(logp)))
    idx = np.array(list(itertools.product(*[range(len(c)) for c, _ in per_state])), dtype=np.int64)
    splits = np.stack([per_state[x][0][idx[:, x]] for x in range(X)], axis=1)
    probs = np.prod(np.stack([per_state[x][1][idx[:, x]] for x in range(X)], axis=1), axis=1)
    return splits, probs


def joint_action_pmf(spec: GameSpec, others: OthersDeepState, law,
                     cap: int = DEFAULT_SUPPORT_CAP) -> CountDistribution:
    """Exact law of the others' state-action counts given their state counts and law."""
    law = _check_law(spec, law)
    splits, probs = action_split(others.counts, law, cap)
    support = [tuple(tuple(int(v) for v in row) for row in s) for s in splits]
    return CountDistribution(support, probs)


def stage_cost_rows(spec: GameSpec, t: int, x: int, d_counts, others_law: np.ndarray,
                    weight: float = 1.0, cap: int = DEFAULT_SUPPORT_CAP) -> np.ndarray:
    """Expected stage cost of a player in state ``x`` for each pure own action.

    ``d_counts`` is the full deep state (the player included); the others split
    their actions according to ``others_law``.
    """
    n = spec.n
    d_counts = np.asarray(d_counts)
    cost = spec.cost
    if cost.coupling == "d-only":
        return weight * cost.d_table(t, d_counts / n)[x]
    others = d_counts.copy()
    others[x] -= 1
    if cost.coupling == "separable":
        d = d_counts / n
        mean_others = others[:, None] * others_law / n
        shared = cost.shared.d_table(t, d)
        base = float(np.sum(mean_others * shared))
        return weight * (cost.own.d_table(t, d)[x] + base + shared[x] / n)
    splits, probs = action_split(others, others_law, cap)
    D = splits / n
    rows = np.empty(spec.n_actions)
    for u in range(spec.n_actions):
        Du = D.copy()
        Du[:, x, u] += 1.0 / n
        rows[u] = probs @ cost.tables(t, Du)[:, x, u]
    return weight * rows


def expected_stage_cost(spec: GameSpec, t: int, x: int, d: DeepState, own_row, others_law,
                        cap: int = DEFAULT_SUPPORT_CAP) -> float:
    """Expected stage cost of a player at ``x`` mixing ``own_row`` against ``others_law``."""
    if d.counts[x] < 1:
        raise ValueError("deviator state inconsistent with deep state")
    others_law = _check_law(spec, others_law)
    rows = stage_cost_rows(spec, t, x, d.counts, others_law, cap=cap)
    return float(np.asarray(own_row, dtype=float) @ rows)


def expected_stage_cost_mc(spec: GameSpec, t: int, x: int, d: DeepState, own_row, others_law,
                           samples: int, seed: int) -> tuple[float, float]:
    """Monte Carlo estimate (mean, standard error) for supports above the exact cap."""
    others_law = _check_law(spec, others_law)
    rng = np.random.default_rng(seed)
    n = spec.n
    others = np.array(d.counts)
    others[x] -= 1
    splits = np.stack([rng.multinomial(c, others_law[s], size=samples) for s, c in enumerate(others)], axis=1)
    own = rng.choice(spec.n_actions, size=samples, p=np.asarray(own_row, dtype=float))
    D = splits / n
    D[np.arange(samples), x, own] += 1.0 / n
    vals = spec.cost.tables(t, D)[np.arange(samples), x, own]
    return float(vals.mean()), float(vals.std(ddof=1) / math.sqrt(samples))


def mean_field_step(spec: GameSpec, t: int, m, law) -> np.ndarray:
    """Infinite-population update ``m'(y) = sum_x m(x) T(y | x, law(x), m)``."""
    m = np.asarray(m, dtype=float)
    law = np.asarray(law, dtype=float)
    trans = np.einsum("xu,xuy->xy", law, spec.kernel.matrix(t, m))
    return m @ trans


def mean_field_joint(m, law) -> np.ndarray:
    return np.asarray(m, dtype=float)[:, None] * np.asarray(law, dtype=float)


def infinite_cost_rows(spec: GameSpec, t: int, x: int, m, others_law) -> np.ndarray:
    return spec.cost.table(t, mean_field_joint(m, others_law))[x]


def infinite_stage_cost(spec: GameSpec, t: int, x: int, m, own_row, others_law) -> float:
    """Per-step cost of a player at ``x`` when the population joint law is ``m * others_law``."""
    return float(np.asarray(own_row, dtype=float) @ infinite_cost_rows(spec, t, x, m, others_law))
