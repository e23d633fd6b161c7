"""Model constants and the finite-n approximation guarantees built from them.

All bounds hold up to an unspecified ``O(1/sqrt(n))`` constant, so every result
carries that label and the raw bracket separately.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .model import GameSpec

O_LABEL = "up to the unspecified O-constant"


class AssumptionViolation(ValueError):
    """The discounted guarantee needs ``beta * Km < 1``."""

    def __init__(self, beta_km: float):
        super().__init__(f"beta*Km = {beta_km:.6g} >= 1: the discounted bound does not apply")
        self.beta_km = beta_km

    def to_json(self) -> dict:
        return {"error": "assumption-violation", "beta_km": self.beta_km, "message": str(self)}


@dataclass
class BoundConstants:
    """Per-stage constants; ``Kv``/``Ko`` are filled by :func:`kv_ko`.

    ``cost_bound`` is an absolute bound on stage costs, kept apart from the
    Lipschitz constant ``Kc``. Estimated values are lower bounds on the true
    Lipschitz constants.
    """

    Kp: np.ndarray
    Kc: np.ndarray
    Km: np.ndarray
    beta: float | None = None
    provenance: str = "user-supplied"
    decoupled: bool = False
    cost_bound: float | None = None
    samples: int = 0
    Kv: np.ndarray | None = None
    Ko: np.ndarray | None = None

    def __post_init__(self):
        self.Kp = np.atleast_1d(np.asarray(self.Kp, dtype=float))
        self.Kc = np.atleast_1d(np.asarray(self.Kc, dtype=float))
        self.Km = np.atleast_1d(np.asarray(self.Km, dtype=float))
        for name in ("Kp", "Kc", "Km"):
            if np.any(getattr(self, name) < 0):
                raise ValueError(f"{name} must be nonnegative")

    @property
    def lower_bound(self) -> bool:
        return self.provenance == "grid-estimated"

    def with_recursion(self, horizon: int) -> "BoundConstants":
        self.Kv, self.Ko = kv_ko(self.Kp, self.Kc, self.Km, self.beta, horizon)
        return self

    def to_json(self) -> dict:
        out = {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in asdict(self).items()}
        out["lower_bound"] = self.lower_bound
        return out


# ---------------------------------------------------------------------------
# estimation
# ---------------------------------------------------------------------------


def _sample_pair(rng, size):
    """Either two independent simplex points or a point and a small perturbation of it."""
    a = rng.dirichlet(np.ones(size))
    if rng.random() < 0.5:
        b = rng.dirichlet(np.ones(size))
    else:
        b = np.clip(a + rng.normal(scale=1e-3, size=size), 0.0, None)
        b = b / b.sum()
    return a, b


def _stages(spec: GameSpec) -> int:
    if spec.horizon is not None:
        return spec.horizon
    return 1


def estimate_constants(spec: GameSpec, sample_budget: int = 2000, seed: int = 0) -> BoundConstants:
    """Largest sampled difference quotients in the infinity norm.

    Samples are drawn from one seeded stream in a fixed order, so a larger
    budget extends a smaller one and estimates never decrease with the budget.
    Structurally decoupled models get ``Kp = 0`` and ``Km = 1`` exactly.
    """
    X, U = spec.n_states, spec.n_actions
    T = _stages(spec)
    Kp, Kc, Km = np.zeros(T), np.zeros(T), np.zeros(T)
    cost_bound = 0.0
    decoupled = spec.decoupled
    for t in range(T):
        rng = np.random.default_rng([seed, t])
        for _ in range(sample_budget):
            d, m = _sample_pair(rng, X)
            D, M = _sample_pair(rng, X * U)
            law = rng.dirichlet(np.ones(U), size=X)
            D, M = D.reshape(X, U), M.reshape(X, U)
            dist = np.max(np.abs(d - m))
            if dist > 0 and not decoupled:
                Kd, Km_ = spec.kernel.matrix(t, d), spec.kernel.matrix(t, m)
                Kp[t] = max(Kp[t], np.max(np.abs(Kd - Km_)) / dist)
                fd = d @ np.einsum("xu,xuy->xy", law, Kd)
                fm = m @ np.einsum("xu,xuy->xy", law, Km_)
                Km[t] = max(Km[t], np.max(np.abs(fd - fm)) / dist)
            cD, cM = spec.cost.table(t, D), spec.cost.table(t, M)
            cost_bound = max(cost_bound, float(cD.max()), float(cM.max()))
            gap = np.max(np.abs(D - M))
            if gap > 0:
                Kc[t] = max(Kc[t], np.max(np.abs(cD - cM)) / gap)
    if decoupled:
        Kp[:] = 0.0
        Km[:] = 1.0
    return BoundConstants(Kp, Kc, Km, spec.beta, "grid-estimated", decoupled, cost_bound, sample_budget)


# ---------------------------------------------------------------------------
# recursions and guarantees
# ---------------------------------------------------------------------------


def _per_stage(values, T: int, pad: float | None) -> np.ndarray:
    arr = np.atleast_1d(np.asarray(values, dtype=float))
    if arr.size == 1:
        return np.full(T + 1, float(arr[0]))
    out = np.zeros(T + 1)
    out[: min(arr.size, T + 1)] = arr[: T + 1]
    if pad is not None and arr.size < T + 1:
        out[arr.size:] = pad
    return out


def kv_ko(Kp, Kc, Km, beta: float | None, T: int) -> tuple[np.ndarray, np.ndarray]:
    """Backward recursion for the value and offset constants, stages ``1..T``.

    ``Kv_t = Kc_t + Kv_{t+1} Km_t + Kp_t * sum_{tau=1}^{t+1} beta^(tau-1) Kc_tau`` and
    ``Ko_t = Kv_{t+1} + Ko_{t+1}`` with ``Kv_{T+1} = Ko_{T+1} = 0``. A scalar
    constant applies to every stage, including ``Kc_{T+1}`` in the sum; a
    per-stage array of length ``T`` takes ``Kc_{T+1} = 0``.
    Returned arrays are 0-based: entry ``t-1`` holds stage ``t``.
    """
    b = 1.0 if beta is None else float(beta)
    kp = _per_stage(Kp, T, None)
    kc = _per_stage(Kc, T, 0.0)
    km = _per_stage(Km, T, None)
    Kv = np.zeros(T + 2)
    Ko = np.zeros(T + 2)
    disc = b ** np.arange(T + 1)
    for t in range(T, 0, -1):
        tail = float(np.dot(disc[: t + 1], kc[: t + 1]))
        Kv[t] = kc[t - 1] + Kv[t + 1] * km[t - 1] + kp[t - 1] * tail
        Ko[t] = Kv[t + 1] + Ko[t + 1]
    return Kv[1: T + 1], Ko[1: T + 1]


@dataclass
class BoundReport:
    value: float
    terms: dict = field(default_factory=dict)
    label: str = O_LABEL

    def to_json(self) -> dict:
        return {"value": self.value, "terms": self.terms, "label": self.label}

    def __float__(self):
        return float(self.value)


def finite_bound(constants: BoundConstants, n: int, d_vs_m_gap: float, horizon: int | None = None) -> BoundReport:
    """``Kv_1 * gap + Ko_1 / sqrt(n)``."""
    if constants.Kv is None or horizon is not None:
        T = horizon if horizon is not None else max(len(constants.Kc), 1)
        constants.with_recursion(T)
    kv1, ko1 = float(constants.Kv[0]), float(constants.Ko[0])
    first = kv1 * d_vs_m_gap
    second = ko1 / math.sqrt(n)
    return BoundReport(first + second, {"Kv1": kv1, "Ko1": ko1, "gap_term": first, "sampling_term": second})


def _scalar(arr) -> float:
    return float(np.max(np.atleast_1d(arr)))


def discounted_bound(constants: BoundConstants, n: int) -> BoundReport:
    """``(2-beta)(1-beta+Kp)/(1-beta) * Kc/(1-beta Km) / sqrt(n)``.

    Raises :class:`AssumptionViolation` when ``beta * Km >= 1`` unless the
    model is decoupled, in which case ``Kp = 0`` and ``Km = 1``.
    """
    beta = constants.beta
    if beta is None or not 0 < beta < 1:
        raise ValueError("discounted bound needs beta in (0, 1)")
    Kc = _scalar(constants.Kc)
    if constants.decoupled:
        Kp, Km = 0.0, 1.0
    else:
        Kp, Km = _scalar(constants.Kp), _scalar(constants.Km)
    beta_km = beta * Km
    if beta_km >= 1.0:
        raise AssumptionViolation(beta_km)
    bracket = (2 - beta) * (1 - beta + Kp) / (1 - beta) * Kc / (1 - beta_km)
    return BoundReport(bracket / math.sqrt(n), {"bracket": bracket, "Kp": Kp, "Kc": Kc, "Km": Km,
                                               "beta_Km": beta_km, "decoupled": constants.decoupled})


def guarantee_report(spec: GameSpec, constants: BoundConstants, n: int, gap: float = 0.0) -> dict:
    """Plain JSON summary used by the command line."""
    out = {"constants": constants.to_json(), "n": n, "label": O_LABEL}
    if spec.horizon is not None:
        out["finite"] = finite_bound(constants, n, gap, spec.horizon).to_json()
        out["constants"] = constants.to_json()
    if spec.beta is not None and spec.horizon is None:
        try:
            out["discounted"] = discounted_bound(constants, n).to_json()
        except AssumptionViolation as exc:
            out["discounted"] = exc.to_json()
    return out


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True)
