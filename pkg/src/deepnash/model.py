"""Game description: state/action spaces, transition kernels, costs, JSON I/O.

A :class:`GameSpec` describes a symmetric game played by ``n`` players whose
dynamics and costs are coupled only through the empirical distribution of
their states (the deep state) or of their state-action pairs.

Stages are 0-based throughout the package: a horizon ``T`` game has stages
``0, ..., T-1``.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

SCHEMA_VERSION = 1
NORM_TOL = 1e-12

COUPLING_CLASSES = ("d-only", "separable", "general")


class ModelError(ValueError):
    """Malformed or inconsistent model description.

    ``path`` locates the offending field (e.g. ``kernel.base[0][1]``).
    """

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


# ---------------------------------------------------------------------------
# spaces and laws
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Space:
    """Ordered finite set of labels; index order is canonical."""

    labels: tuple

    def __post_init__(self):
        labels = tuple(self.labels)
        if not labels:
            raise ModelError("space must be non-empty")
        if len(set(labels)) != len(labels):
            raise ModelError("labels must be unique")
        object.__setattr__(self, "labels", labels)

    @property
    def size(self) -> int:
        return len(self.labels)

    def index(self, label) -> int:
        return self.labels.index(label)

    def __len__(self) -> int:
        return len(self.labels)


StateSpace = Space
ActionSpace = Space


def local_law(rows, n_states: int | None = None, n_actions: int | None = None) -> np.ndarray:
    """Validate a local law (one action distribution per state) and return it as an array."""
    law = np.array(rows, dtype=float)
    if law.ndim != 2:
        raise ModelError("local law must be a 2-d array [state][action]")
    if n_states is not None and law.shape[0] != n_states:
        raise ModelError(f"local law has {law.shape[0]} rows, expected {n_states}")
    if n_actions is not None and law.shape[1] != n_actions:
        raise ModelError(f"local law has {law.shape[1]} columns, expected {n_actions}")
    if np.any(law < 0) or np.any(law > 1):
        raise ModelError("local law entries must lie in [0, 1]")
    sums = law.sum(axis=1)
    bad = np.flatnonzero(np.abs(sums - 1.0) > NORM_TOL)
    if bad.size:
        raise ModelError(f"local law row {bad[0]} sums to {sums[bad[0]]!r}")
    return law


def uniform_law(n_states: int, n_actions: int) -> np.ndarray:
    return np.full((n_states, n_actions), 1.0 / n_actions)


def pure_law(actions: Sequence[int], n_actions: int) -> np.ndarray:
    law = np.zeros((len(actions), n_actions))
    law[np.arange(len(actions)), list(actions)] = 1.0
    return law


def simplex_vertices_and_center(size: int) -> np.ndarray:
    """Deterministic probe points: every vertex of the simplex plus its barycenter."""
    return np.vstack([np.eye(size), np.full((1, size), 1.0 / size)])


# ---------------------------------------------------------------------------
# transition kernels
# ---------------------------------------------------------------------------


class TransitionKernel:
    """Transition probabilities ``T_t(y | x, u, d)``.

    Subclasses implement :meth:`matrix`, returning the full ``[x][u][y]`` array
    at stage ``t`` and state distribution ``d``.
    """

    n_states: int
    n_actions: int
    n_stages: int  # 1 when time homogeneous
    decoupled: bool

    @property
    def time_homogeneous(self) -> bool:
        return self.n_stages == 1

    def matrix(self, t: int, d: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def matrices(self, t: int, ds: np.ndarray) -> np.ndarray:
        """Batch version of :meth:`matrix` over rows of ``ds``; shape ``(B, X, U, Y)``."""
        ds = np.asarray(ds, dtype=float)
        if self.decoupled:
            return np.broadcast_to(self.matrix(t, ds[0]), (len(ds),) + self._shape())
        uniq, inverse = np.unique(ds, axis=0, return_inverse=True)
        mats = np.stack([self.matrix(t, row) for row in uniq])
        return mats[np.ravel(inverse)]

    def eval(self, t: int, y: int, x: int, u: int, d) -> float:
        return float(self.matrix(t, np.asarray(d, dtype=float))[x, u, y])

    def _shape(self):
        return (self.n_states, self.n_actions, self.n_states)

    def _stage(self, t: int) -> int:
        if self.n_stages == 1:
            return 0
        if not 0 <= t < self.n_stages:
            raise ModelError(f"stage {t} outside kernel horizon {self.n_stages}")
        return t

    def to_dict(self) -> dict:
        raise NotImplementedError


class TabularKernel(TransitionKernel):
    """Tabular kernel, optionally affine in ``d``.

    ``T_t(y|x,u,d) = base[t,x,u,y] + sum_z coef[t,x,u,y,z] * d[z]``.
    Without ``coef`` the players' dynamics are decoupled.
    """

    def __init__(self, base, coef=None):
        base = np.array(base, dtype=float)
        if base.ndim == 3:
            base = base[None]
        if base.ndim != 4 or base.shape[1] != base.shape[3]:
            raise ModelError("kernel base must have shape [t][x][u][y] with |x| = |y|", "kernel.base")
        self.base = base
        self.n_stages, self.n_states, self.n_actions, _ = base.shape
        if coef is not None:
            coef = np.array(coef, dtype=float)
            if coef.ndim == 4:
                coef = coef[None]
            if coef.shape != base.shape + (self.n_states,):
                raise ModelError(
                    f"coef shape {coef.shape} does not match base {base.shape} + (|X|,)",
                    "kernel.d_dependence.coef",
                )
            if not np.any(coef):
                coef = None
        self.coef = coef
        self.decoupled = coef is None

    def matrix(self, t, d):
        s = self._stage(t)
        if self.coef is None:
            return self.base[s]
        return self.base[s] + self.coef[s] @ np.asarray(d, dtype=float)

    def matrices(self, t, ds):
        s = self._stage(t)
        ds = np.asarray(ds, dtype=float)
        if self.coef is None:
            return np.broadcast_to(self.base[s], (len(ds),) + self.base.shape[1:])
        return self.base[s][None] + np.einsum("xuyz,bz->bxuy", self.coef[s], ds)

    def to_dict(self):
        dep = None
        if self.coef is not None:
            dep = {"form": "affine", "coef": self.coef.tolist()}
        return {
            "type": "tabular",
            "time_homogeneous": self.time_homogeneous,
            "base": self.base.tolist(),
            "d_dependence": dep,
        }


KERNEL_REGISTRY: dict[str, Callable[..., Callable[[int, np.ndarray], np.ndarray]]] = {}
COST_REGISTRY: dict[str, Callable[..., Callable[[int, np.ndarray], np.ndarray]]] = {}


def register_kernel(name: str):
    """Register a kernel factory ``factory(**params) -> fn(t, d) -> [x][u][y] array``."""

    def wrap(factory):
        KERNEL_REGISTRY[name] = factory
        return factory

    return wrap


def register_cost(name: str):
    """Register a cost factory ``factory(**params) -> fn(t, D) -> [x][u] array``.

    ``D`` is a joint state-action distribution; entry ``[x][u]`` of the result is
    the cost of a player in state ``x`` taking action ``u`` when the population
    joint distribution is ``D``.
    """

    def wrap(factory):
        COST_REGISTRY[name] = factory
        return factory

    return wrap


class RegisteredKernel(TransitionKernel):
    """Kernel backed by a plug-in looked up by name in :data:`KERNEL_REGISTRY`."""

    def __init__(self, name, params, n_states, n_actions, n_stages=1, decoupled=False):
        if name not in KERNEL_REGISTRY:
            raise ModelError(f"unknown registered kernel {name!r}", "kernel.name")
        self.name = name
        self.params = dict(params)
        self.n_states, self.n_actions, self.n_stages = n_states, n_actions, n_stages
        self.decoupled = decoupled
        self._fn = KERNEL_REGISTRY[name](**self.params)

    def matrix(self, t, d):
        return np.asarray(self._fn(self._stage(t), np.asarray(d, dtype=float)), dtype=float)

    def to_dict(self):
        return {
            "type": "registered",
            "name": self.name,
            "params": self.params,
            "n_stages": self.n_stages,
            "decoupled": self.decoupled,
        }


# ---------------------------------------------------------------------------
# costs
# ---------------------------------------------------------------------------


class CostSpec:
    """Per-step cost ``c_t(x, u, D)`` with a declared coupling class.

    ``table(t, D)`` returns the ``[x][u]`` matrix of costs at joint distribution
    ``D`` (shape ``[x][u]``). d-only costs additionally implement
    ``d_table(t, d)`` taking the state marginal directly.
    """

    coupling: str = "general"
    n_states: int
    n_actions: int
    n_stages: int = 1

    @property
    def time_homogeneous(self) -> bool:
        return self.n_stages == 1

    def _stage(self, t):
        if self.n_stages == 1:
            return 0
        if not 0 <= t < self.n_stages:
            raise ModelError(f"stage {t} outside cost horizon {self.n_stages}")
        return t

    def table(self, t: int, D: np.ndarray) -> np.ndarray:
        return self.d_table(t, np.asarray(D).sum(axis=1))

    def d_table(self, t: int, d: np.ndarray) -> np.ndarray:
        raise NotImplementedError(f"{type(self).__name__} is not a d-only cost")

    def tables(self, t: int, Ds: np.ndarray) -> np.ndarray:
        """Batch of :meth:`table` over ``Ds`` of shape ``(B, X, U)``."""
        Ds = np.asarray(Ds, dtype=float)
        if self.coupling == "d-only":
            return self.d_tables(t, Ds.sum(axis=2))
        flat = Ds.reshape(len(Ds), -1)
        uniq, inverse = np.unique(flat, axis=0, return_inverse=True)
        out = np.stack([self.table(t, row.reshape(Ds.shape[1:])) for row in uniq])
        return out[np.ravel(inverse)]

    def d_tables(self, t: int, ds: np.ndarray) -> np.ndarray:
        ds = np.asarray(ds, dtype=float)
        uniq, inverse = np.unique(ds, axis=0, return_inverse=True)
        out = np.stack([self.d_table(t, row) for row in uniq])
        return out[np.ravel(inverse)]

    def eval(self, t: int, x: int, u: int, D) -> float:
        return float(self.table(t, np.asarray(D, dtype=float))[x, u])

    def to_dict(self) -> dict:
        raise NotImplementedError


class ThresholdCost(CostSpec):
    """Load-band cost driven by the number of players in one state.

    With ``k = n * d[state]`` players in ``state`` (the acting player included),
    the cost is ``c_under`` when ``k < alpha``, ``c_over`` when ``k >= gamma``
    and zero otherwise, independent of the player's own state and action.
    """

    coupling = "d-only"

    def __init__(self, n_states, n_actions, n, alpha, gamma, c_under, c_over, state=1):
        if not alpha < gamma:
            raise ModelError("threshold cost needs alpha < gamma", "cost")
        self.n_states, self.n_actions = n_states, n_actions
        self.n, self.alpha, self.gamma = n, alpha, gamma
        self.c_under, self.c_over, self.state = float(c_under), float(c_over), state

    def _level(self, share):
        count = self.n * np.asarray(share, dtype=float)
        # counts arrive as k/n; absorb rounding at the integer thresholds
        return np.where(
            count < self.alpha - 1e-9,
            self.c_under,
            np.where(count >= self.gamma - 1e-9, self.c_over, 0.0),
        )

    def d_table(self, t, d):
        return np.full((self.n_states, self.n_actions), float(self._level(d[self.state])))

    def d_tables(self, t, ds):
        level = self._level(np.asarray(ds)[:, self.state])
        return np.broadcast_to(level[:, None, None], (len(level), self.n_states, self.n_actions)).copy()

    def to_dict(self):
        return {
            "type": "threshold",
            "state": self.state,
            "n": self.n,
            "alpha": self.alpha,
            "gamma": self.gamma,
            "c_under": self.c_under,
            "c_over": self.c_over,
        }


class AffineCost(CostSpec):
    """d-only cost ``base[t,x,u] + sum_z coef[t,x,u,z] * d[z]``."""

    coupling = "d-only"

    def __init__(self, base, coef=None):
        base = np.array(base, dtype=float)
        if base.ndim == 2:
            base = base[None]
        self.base = base
        self.n_stages, self.n_states, self.n_actions = base.shape
        if coef is not None:
            coef = np.array(coef, dtype=float)
            if coef.ndim == 3:
                coef = coef[None]
            if coef.shape != base.shape + (self.n_states,):
                raise ModelError(f"coef shape {coef.shape} does not match base", "cost.coef")
        self.coef = coef

    def d_table(self, t, d):
        s = self._stage(t)
        if self.coef is None:
            return self.base[s]
        return self.base[s] + self.coef[s] @ np.asarray(d, dtype=float)

    def d_tables(self, t, ds):
        s = self._stage(t)
        ds = np.asarray(ds, dtype=float)
        out = np.broadcast_to(self.base[s], (len(ds),) + self.base.shape[1:])
        if self.coef is None:
            return out.copy()
        return out + np.einsum("xuz,bz->bxu", self.coef[s], ds)

    def to_dict(self):
        return {
            "type": "affine",
            "base": self.base.tolist(),
            "coef": None if self.coef is None else self.coef.tolist(),
        }


class SeparableCost(CostSpec):
    """Non-cooperative plus averaged cooperative part.

    ``c(x,u,D) = own(x,u,d) + sum_{x',u'} D(x',u') * shared(x',u',d)`` where
    ``d`` is the state marginal of ``D`` and both parts are d-only costs.
    """

    coupling = "separable"

    def __init__(self, own: CostSpec, shared: CostSpec):
        if own.coupling != "d-only" or shared.coupling != "d-only":
            raise ModelError("separable cost parts must be d-only", "cost")
        if (own.n_states, own.n_actions) != (shared.n_states, shared.n_actions):
            raise ModelError("separable cost parts disagree in shape", "cost")
        self.own, self.shared = own, shared
        self.n_states, self.n_actions = own.n_states, own.n_actions
        self.n_stages = max(own.n_stages, shared.n_stages)

    def table(self, t, D):
        D = np.asarray(D, dtype=float)
        d = D.sum(axis=1)
        return self.own.d_table(t, d) + float(np.sum(D * self.shared.d_table(t, d)))

    def tables(self, t, Ds):
        Ds = np.asarray(Ds, dtype=float)
        ds = Ds.sum(axis=2)
        coop = np.einsum("bxu,bxu->b", Ds, self.shared.d_tables(t, ds))
        return self.own.d_tables(t, ds) + coop[:, None, None]

    def to_dict(self):
        return {"type": "separable", "own": self.own.to_dict(), "shared": self.shared.to_dict()}


class PolynomialCost(CostSpec):
    """General cost, quadratic in the joint distribution.

    ``c(x,u,D) = base[x,u] + sum lin[x,u,x',u'] D(x',u') + sum quad[x,u,x',u'] D(x',u')**2``
    """

    coupling = "general"

    def __init__(self, base, lin=None, quad=None):
        base = np.array(base, dtype=float)
        if base.ndim == 2:
            base = base[None]
        self.base = base
        self.n_stages, self.n_states, self.n_actions = base.shape
        shape = base.shape + base.shape[1:]
        self.lin = self._coef(lin, shape, "cost.lin")
        self.quad = self._coef(quad, shape, "cost.quad")

    @staticmethod
    def _coef(arr, shape, path):
        if arr is None:
            return None
        arr = np.array(arr, dtype=float)
        if arr.ndim == len(shape) - 1:
            arr = arr[None]
        if arr.shape != shape:
            raise ModelError(f"shape {arr.shape} != {shape}", path)
        return arr

    def table(self, t, D):
        s = self._stage(t)
        D = np.asarray(D, dtype=float)
        out = self.base[s].copy()
        if self.lin is not None:
            out += np.einsum("xuyv,yv->xu", self.lin[s], D)
        if self.quad is not None:
            out += np.einsum("xuyv,yv->xu", self.quad[s], D * D)
        return out

    def tables(self, t, Ds):
        s = self._stage(t)
        Ds = np.asarray(Ds, dtype=float)
        out = np.broadcast_to(self.base[s], (len(Ds),) + self.base.shape[1:]).copy()
        if self.lin is not None:
            out += np.einsum("xuyv,byv->bxu", self.lin[s], Ds)
        if self.quad is not None:
            out += np.einsum("xuyv,byv->bxu", self.quad[s], Ds * Ds)
        return out

    def to_dict(self):
        return {
            "type": "polynomial",
            "base": self.base.tolist(),
            "lin": None if self.lin is None else self.lin.tolist(),
            "quad": None if self.quad is None else self.quad.tolist(),
        }


class RegisteredCost(CostSpec):
    def __init__(self, name, params, n_states, n_actions, coupling="general", n_stages=1):
        if name not in COST_REGISTRY:
            raise ModelError(f"unknown registered cost {name!r}", "cost.name")
        if coupling not in COUPLING_CLASSES:
            raise ModelError(f"unknown coupling class {coupling!r}", "cost.coupling")
        self.name, self.params = name, dict(params)
        self.n_states, self.n_actions, self.n_stages = n_states, n_actions, n_stages
        self.coupling = coupling
        self._fn = COST_REGISTRY[name](**self.params)

    def table(self, t, D):
        return np.asarray(self._fn(self._stage(t), np.asarray(D, dtype=float)), dtype=float)

    def d_table(self, t, d):
        # a d-only plug-in sees D with all mass on the first action
        D = np.zeros((self.n_states, self.n_actions))
        D[:, 0] = d
        return self.table(t, D)

    def to_dict(self):
        return {
            "type": "registered",
            "name": self.name,
            "params": self.params,
            "coupling": self.coupling,
            "n_stages": self.n_stages,
        }


# ---------------------------------------------------------------------------
# game spec
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class GameSpec:
    """Complete description of a symmetric n-player game.

    Exactly one of ``horizon`` (finite T) and ``beta`` (discounted) is the
    primary mode; a discounted spec may also carry a horizon used for
    truncated runs.
    """

    states: Space
    actions: Space
    n: int
    kernel: TransitionKernel
    cost: CostSpec
    initial_dist: np.ndarray
    horizon: int | None = None
    beta: float | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not isinstance(self.states, Space):
            self.states = Space(tuple(self.states))
        if not isinstance(self.actions, Space):
            self.actions = Space(tuple(self.actions))
        self.initial_dist = np.asarray(self.initial_dist, dtype=float)
        problems = structural_problems(self)
        if problems:
            path, msg = problems[0]
            raise ModelError(msg, path)

    @property
    def n_states(self) -> int:
        return self.states.size

    @property
    def n_actions(self) -> int:
        return self.actions.size

    @property
    def discounted(self) -> bool:
        return self.beta is not None and self.horizon is None

    @property
    def decoupled(self) -> bool:
        return self.kernel.decoupled

    def to_dict(self) -> dict:
        out: dict[str, Any] = {
            "schema_version": SCHEMA_VERSION,
            "states": list(self.states.labels),
            "actions": list(self.actions.labels),
            "n": self.n,
        }
        if self.horizon is not None:
            out["horizon"] = self.horizon
        if self.beta is not None:
            out["beta"] = self.beta
        out["kernel"] = self.kernel.to_dict()
        out["cost"] = self.cost.to_dict()
        out["initial_dist"] = self.initial_dist.tolist()
        if self.name:
            out["name"] = self.name
        return out

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    def digest(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()

    def __eq__(self, other):
        if not isinstance(other, GameSpec):
            return NotImplemented
        return self.canonical_json() == other.canonical_json()

    def replace(self, **changes) -> "GameSpec":
        fields = dict(
            states=self.states,
            actions=self.actions,
            n=self.n,
            kernel=self.kernel,
            cost=self.cost,
            initial_dist=self.initial_dist,
            horizon=self.horizon,
            beta=self.beta,
            name=self.name,
            meta=dict(self.meta),
        )
        fields.update(changes)
        return GameSpec(**fields)


def structural_problems(spec: GameSpec) -> list[tuple[str, str]]:
    """Shape/range problems that make a spec unusable (raised at construction)."""
    out = []
    X, U = spec.states.size, spec.actions.size
    if not isinstance(spec.n, (int, np.integer)) or spec.n < 2:
        out.append(("n", "population size must be an integer >= 2"))
    if spec.horizon is None and spec.beta is None:
        out.append(("horizon", "either a finite horizon or a discount factor is required"))
    if spec.horizon is not None and (not isinstance(spec.horizon, (int, np.integer)) or spec.horizon < 1):
        out.append(("horizon", "horizon must be >= 1"))
    if spec.beta is not None and not 0.0 < spec.beta < 1.0:
        out.append(("beta", "discount factor must lie in (0, 1)"))
    k = spec.kernel
    if (k.n_states, k.n_actions) != (X, U):
        out.append(("kernel", f"kernel is {k.n_states}x{k.n_actions}, spaces are {X}x{U}"))
    c = spec.cost
    if (c.n_states, c.n_actions) != (X, U):
        out.append(("cost", f"cost is {c.n_states}x{c.n_actions}, spaces are {X}x{U}"))
    if spec.initial_dist.shape != (X,):
        out.append(("initial_dist", f"expected {X} entries"))
    elif np.any(spec.initial_dist < 0) or abs(spec.initial_dist.sum() - 1.0) > NORM_TOL:
        out.append(("initial_dist", f"initial distribution sums to {spec.initial_dist.sum()!r}"))
    if spec.horizon is None and spec.beta is not None:
        if not (k.time_homogeneous and c.time_homogeneous):
            out.append(("beta", "discounted mode requires a time-homogeneous kernel and cost"))
    if spec.horizon is not None:
        for path, obj in (("kernel", k), ("cost", c)):
            if obj.n_stages not in (1, spec.horizon):
                out.append((path, f"{obj.n_stages} stages given for horizon {spec.horizon}"))
    return out


@dataclass
class ValidationReport:
    violations: list[tuple[str, str]]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self):
        return self.ok

    def __str__(self):
        if self.ok:
            return "pass"
        return "\n".join(f"{loc}: {msg}" for loc, msg in self.violations)


def _stages(spec: GameSpec, obj) -> range:
    if obj.n_stages == 1:
        return range(1)
    return range(obj.n_stages)


def validate(spec: GameSpec) -> ValidationReport:
    """Check normalization and sign constraints on a deterministic probe grid.

    Kernel rows are probed at every simplex vertex plus the uniform point; costs
    additionally at the vertices of the state-action simplex.
    """
    violations = list(structural_problems(spec))
    if violations:
        return ValidationReport(violations)
    X, U = spec.n_states, spec.n_actions
    probes = simplex_vertices_and_center(X)
    for t in _stages(spec, spec.kernel):
        for d in probes:
            mat = spec.kernel.matrix(t, d)
            if mat.shape != (X, U, X):
                violations.append((f"kernel[t={t}]", f"matrix shape {mat.shape} != {(X, U, X)}"))
                break
            sums = mat.sum(axis=2)
            for x, u in zip(*np.nonzero(np.abs(sums - 1.0) > NORM_TOL)):
                violations.append(
                    (f"kernel[t={t},x={x},u={u},d={d.tolist()}]", f"row sum {sums[x, u]:.12g} != 1")
                )
            for x, u, y in zip(*np.nonzero(mat < 0)):
                violations.append(
                    (f"kernel[t={t},x={x},u={u},y={y},d={d.tolist()}]", f"negative probability {mat[x, u, y]:.12g}")
                )
    joint_probes = simplex_vertices_and_center(X * U).reshape(-1, X, U)
    for t in _stages(spec, spec.cost):
        tables = spec.cost.tables(t, joint_probes)
        for b, x, u in zip(*np.nonzero(tables < 0)):
            violations.append(
                (f"cost[t={t},x={x},u={u},D={joint_probes[b].ravel().tolist()}]",
                 f"cost must be nonnegative (got {tables[b, x, u]:.12g})")
            )
    return ValidationReport(violations)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ModelError(f"missing field {key!r}", path or "<root>")
    return obj[key]


def kernel_from_dict(obj: dict, n_states: int, n_actions: int) -> TransitionKernel:
    kind = _require(obj, "type", "kernel")
    if kind == "tabular":
        base = np.array(_require(obj, "base", "kernel"), dtype=float)
        if base.ndim != 4:
            raise ModelError("expected nested arrays [t][x][u][y]", "kernel.base")
        if base.shape[1:] != (n_states, n_actions, n_states):
            raise ModelError(
                f"kernel shape {base.shape[1:]} does not match |X|={n_states}, |U|={n_actions}",
                "kernel.base",
            )
        dep = obj.get("d_dependence")
        coef = None
        if dep is not None:
            if dep.get("form") != "affine":
                raise ModelError(f"unsupported d_dependence form {dep.get('form')!r}", "kernel.d_dependence")
            coef = _require(dep, "coef", "kernel.d_dependence")
        return TabularKernel(base, coef)
    if kind == "registered":
        return RegisteredKernel(
            _require(obj, "name", "kernel"),
            obj.get("params", {}),
            n_states,
            n_actions,
            obj.get("n_stages", 1),
            obj.get("decoupled", False),
        )
    raise ModelError(f"unknown kernel type {kind!r}", "kernel.type")


def cost_from_dict(obj: dict, n_states: int, n_actions: int, path="cost") -> CostSpec:
    kind = _require(obj, "type", path)
    if kind == "threshold":
        return ThresholdCost(
            n_states,
            n_actions,
            _require(obj, "n", path),
            _require(obj, "alpha", path),
            _require(obj, "gamma", path),
            _require(obj, "c_under", path),
            _require(obj, "c_over", path),
            obj.get("state", 1),
        )
    if kind == "affine":
        cost = AffineCost(_require(obj, "base", path), obj.get("coef"))
    elif kind == "polynomial":
        cost = PolynomialCost(_require(obj, "base", path), obj.get("lin"), obj.get("quad"))
    elif kind == "separable":
        cost = SeparableCost(
            cost_from_dict(_require(obj, "own", path), n_states, n_actions, path + ".own"),
            cost_from_dict(_require(obj, "shared", path), n_states, n_actions, path + ".shared"),
        )
    elif kind == "registered":
        cost = RegisteredCost(
            _require(obj, "name", path),
            obj.get("params", {}),
            n_states,
            n_actions,
            obj.get("coupling", "general"),
            obj.get("n_stages", 1),
        )
    else:
        raise ModelError(f"unknown cost type {kind!r}", path + ".type")
    if (cost.n_states, cost.n_actions) != (n_states, n_actions):
        raise ModelError(
            f"cost shape {(cost.n_states, cost.n_actions)} does not match spaces {(n_states, n_actions)}", path
        )
    return cost


def spec_from_dict(obj: dict) -> GameSpec:
    version = _require(obj, "schema_version", "")
    if version != SCHEMA_VERSION:
        raise ModelError(f"unknown schema version {version!r}", "schema_version")
    states = _require(obj, "states", "")
    actions = _require(obj, "actions", "")
    X, U = len(states), len(actions)
    if "horizon" not in obj and "beta" not in obj:
        raise ModelError("missing field 'horizon' or 'beta'", "<root>")
    return GameSpec(
        states=Space(tuple(states)),
        actions=Space(tuple(actions)),
        n=_require(obj, "n", ""),
        kernel=kernel_from_dict(_require(obj, "kernel", ""), X, U),
        cost=cost_from_dict(_require(obj, "cost", ""), X, U),
        initial_dist=np.array(_require(obj, "initial_dist", ""), dtype=float),
        horizon=obj.get("horizon"),
        beta=obj.get("beta"),
        name=obj.get("name", ""),
    )


def save(spec: GameSpec, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(spec.to_dict(), indent=1) + "\n")
    return path


def load(path) -> GameSpec:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelError(f"invalid JSON: {exc}", str(path)) from exc
    return spec_from_dict(obj)


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def example1_kernel(p=0.3, q=0.3, p_dec=0.2, q_dec=0.4, p_inc=0.4) -> np.ndarray:
    """Shared-resource request dynamics; returns ``[x][u][y]`` for u = send, decrease, increase."""
    send = [[1 - p, p], [q, 1 - q]]
    decrease = [[1 - p_dec, p_dec], [q_dec, 1 - q_dec]]
    increase = [[1 - p_inc, p_inc], [q, 1 - q]]
    by_action = np.array([send, decrease, increase])  # [u][x][y]
    return by_action.transpose(1, 0, 2)


def build_example1(
    n: int = 100,
    *,
    beta: float | None = 0.9,
    horizon: int | None = None,
    p=0.3,
    q=0.3,
    p_dec=0.2,
    q_dec=0.4,
    p_inc=0.4,
    alpha: int | None = None,
    gamma: int | None = None,
    c_under=5.0,
    c_over=1.0,
    initial_dist=(0.5, 0.5),
) -> GameSpec:
    """Shared-resource request game.

    States: 0 = no pending request, 1 = pending request. Actions: 1 = request
    freely, 2 = commit to fewer requests, 3 = commit to more requests. The
    load band defaults to ``[0.3 n, 0.7 n)``, i.e. ``[30, 70)`` at ``n = 100``.
    """
    if alpha is None:
        alpha = round(0.3 * n)
    if gamma is None:
        gamma = round(0.7 * n)
    return GameSpec(
        states=Space((0, 1)),
        actions=Space((1, 2, 3)),
        n=n,
        kernel=TabularKernel(example1_kernel(p, q, p_dec, q_dec, p_inc)),
        cost=ThresholdCost(2, 3, n, alpha, gamma, c_under, c_over, state=1),
        initial_dist=np.asarray(initial_dist, dtype=float),
        horizon=horizon,
        beta=beta,
        name="example1",
    )


def random_spec(
    seed: int,
    n: int,
    n_states: int = 2,
    n_actions: int = 2,
    *,
    horizon: int | None = 2,
    beta: float | None = None,
    coupling: str = "d-only",
    d_dependent: bool = True,
    time_homogeneous: bool = True,
) -> GameSpec:
    """Seeded random game used by tests and experiments.

    The kernel is a convex mixture of random stochastic matrices weighted by
    ``d``, so it is affine in ``d`` and valid everywhere on the simplex.
    """
    rng = np.random.default_rng(seed)
    X, U = n_states, n_actions
    S = 1 if (time_homogeneous or horizon is None) else horizon
    base = rng.dirichlet(np.ones(X), size=(S, X, U))
    coef = None
    if d_dependent:
        mix = rng.uniform(0.2, 0.8)
        comps = rng.dirichlet(np.ones(X), size=(S, X, U, X))  # [t][x][u][z][y]
        coef = mix * comps.transpose(0, 1, 2, 4, 3)
        base = (1 - mix) * base
    kernel = TabularKernel(base, coef)
    if coupling == "d-only":
        cost = AffineCost(rng.uniform(0, 1, (S, X, U)), rng.uniform(0, 2, (S, X, U, X)))
    elif coupling == "separable":
        cost = SeparableCost(
            AffineCost(rng.uniform(0, 1, (S, X, U)), rng.uniform(0, 2, (S, X, U, X))),
            AffineCost(rng.uniform(0, 1, (S, X, U)), rng.uniform(0, 1, (S, X, U, X))),
        )
    elif coupling == "general":
        cost = PolynomialCost(
            rng.uniform(0, 1, (S, X, U)),
            rng.uniform(0, 2, (S, X, U, X, U)),
            rng.uniform(0, 2, (S, X, U, X, U)),
        )
    else:
        raise ModelError(f"unknown coupling {coupling!r}")
    return GameSpec(
        states=Space(tuple(range(X))),
        actions=Space(tuple(range(U))),
        n=n,
        kernel=kernel,
        cost=cost,
        initial_dist=rng.dirichlet(np.ones(X)),
        horizon=horizon,
        beta=beta,
        name=f"random-{seed}",
    )


def composition_count(total: int, parts: int) -> int:
    """Number of ways to split ``total`` players over ``parts`` states."""
    return math.comb(total + parts - 1, parts - 1)


@register_cost("congestion")
def _congestion_cost(effort=0.5, weight=4.0, power=2.0, state=1, n_actions=2):
    """``effort * u + weight * [x == state] * d(state)**power``; ``d`` is the state marginal."""

    def fn(t, D):
        d = np.asarray(D).sum(axis=1)
        X = D.shape[0]
        out = effort * np.tile(np.arange(n_actions, dtype=float), (X, 1))
        out[state] += weight * d[state] ** power
        return out

    return fn


def build_binary_coupled(n: int, *, horizon: int | None = 4, beta: float | None = None,
                         push=0.35, persist=0.3, herd=0.25, floor=0.4,
                         effort=0.5, weight=4.0, power=2.0, initial_dist=(0.5, 0.5)) -> GameSpec:
    """Two states, two actions; the kernel and the congestion cost both depend on ``d``.

    ``P(1 | x, u, d) = floor + persist * x - push * u + herd * d(1)``: the costly
    action ``u = 1`` steers a player away from the congested state 1.
    """
    base = np.zeros((2, 2, 2))
    coef = np.zeros((2, 2, 2, 2))  # [x][u][y][z]
    for x in range(2):
        for u in range(2):
            p1 = floor + persist * x - push * u
            base[x, u] = (1 - p1, p1)
            coef[x, u, 1, 1] = herd
            coef[x, u, 0, 1] = -herd
    if floor + persist + herd > 1 or floor - push < 0:
        raise ModelError("transition probabilities exceed 1", "kernel")
    kernel = TabularKernel(base, coef)
    cost = RegisteredCost("congestion", {"effort": effort, "weight": weight, "power": power,
                                         "state": 1, "n_actions": 2}, 2, 2, coupling="d-only")
    return GameSpec(
        states=Space((0, 1)),
        actions=Space((0, 1)),
        n=n,
        kernel=kernel,
        cost=cost,
        initial_dist=np.asarray(initial_dist, dtype=float),
        horizon=horizon,
        beta=beta,
        name="binary-coupled",
    )
