"""Acceptance suite: one test per criterion, each recording a pass/fail line.

Run ``pytest tests/test_acceptance.py`` and read the "acceptance criteria"
section at the end of the report, or run this file directly.
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE
from deepnash import bounds as bnd
from deepnash import dss
from deepnash import meanfield as mf
from deepnash import simulate as sim
from deepnash.dynamics import OthersDeepState, joint_action_pmf, joint_next_deep_pmf
from deepnash.model import build_binary_coupled, build_example1, random_spec
from oracles import JointGame, enumerate_action_splits, enumerate_next_others, kernel_at


def record(k, ok, detail):
    ACCEPTANCE[k] = (bool(ok), detail)
    print(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


def kernel_instances():
    out = []
    for seed in range(50):
        rng = np.random.default_rng([seed, 1])
        n = int(rng.integers(2, 5))
        X, U = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        spec = random_spec(1000 + seed, n, X, U, horizon=1, coupling=("d-only", "separable", "general")[seed % 3])
        d = rng.multinomial(n, np.ones(X) / X)
        x = int(rng.choice(np.flatnonzero(d)))
        others = d.copy()
        others[x] -= 1
        law = rng.dirichlet(np.ones(U), size=X)
        out.append((spec, d, x, tuple(int(v) for v in others), law))
    return out


@pytest.fixture(scope="module")
def example1():
    spec = build_example1(100, beta=0.9)
    start = time.perf_counter()
    strat, values, report = dss.solve_discounted(spec)
    return spec, strat, values, report, time.perf_counter() - start


def _max_err(a: dict, b: dict) -> float:
    return max(abs(a.get(k, 0.0) - b.get(k, 0.0)) for k in set(a) | set(b))


def test_c01_kernel_exactness():
    start = time.perf_counter()
    worst = 0.0
    for spec, d, x, others, law in kernel_instances():
        nxt = joint_next_deep_pmf(spec, 0, x, OthersDeepState(others), law).as_dict()
        act = joint_action_pmf(spec, OthersDeepState(others), law).as_dict()
        worst = max(worst, _max_err(nxt, enumerate_next_others(spec, 0, x, others, law)),
                    _max_err(act, enumerate_action_splits(others, law)))
    elapsed = time.perf_counter() - start
    record(1, worst < 1e-10 and elapsed < 30, f"50 models, max abs error {worst:.2e}, {elapsed:.1f}s")


def test_c02_expectation_identity():
    worst = 0.0
    for spec, d, x, others, law in kernel_instances():
        pmf = joint_next_deep_pmf(spec, 0, x, OthersDeepState(others), law)
        K = kernel_at(spec, 0, d)
        expected = np.array(others) @ np.einsum("xu,xuy->xy", law, K)
        worst = max(worst, float(np.max(np.abs(pmf.mean() - expected))))
    record(2, worst < 1e-10, f"50 models, max abs error {worst:.2e}")


def test_c03_sequential_rationality():
    gaps, converged, lines = [], 0, []
    for seed in range(20):
        n, T = 2 + seed % 4, 1 + seed % 4
        X, U = 2 + seed % 2, 2 + (seed // 2) % 2
        coupling = ("d-only", "separable", "general")[seed % 3]
        spec = random_spec(100 + seed, n, X, U, horizon=T, coupling=coupling, time_homogeneous=False)
        strat, _, report = dss.solve_finite(spec)
        gaps.append(dss.exploitability_audit(spec, strat).gap)
        converged += report.all_converged
        if not report.all_converged:
            lines.append(f"seed {seed}: {report.summary()}")
    spec = build_example1(10, beta=None, horizon=10)
    strat, _, report = dss.solve_finite(spec)
    gaps.append(dss.exploitability_audit(spec, strat).gap)
    converged += report.all_converged
    frac = converged / 21
    ok = max(gaps) <= 1e-6 and frac >= 0.9
    record(3, ok, f"21 games, max exploitability {max(gaps):.2e}, converged {converged}/21 {lines}")


def test_c04_oracle_equivalence():
    worst_value, worst_dev = 0.0, 0.0
    for seed in range(8):
        for coupling in ("d-only", "separable", "general"):
            spec = random_spec(500 + seed, 2, 2, 2, horizon=2, coupling=coupling, time_homogeneous=False)
            strat, values, _ = dss.solve_finite(spec)
            game = JointGame(spec, 2, lambda t, c: strat.law(t, c))
            on, best = game.on_path(), game.best_pure_deviation()
            for i, joint in enumerate(game.states):
                worst_value = max(worst_value, abs(on[0, i] - values.value(0, joint[0], game.counts(i))))
                worst_dev = max(worst_dev, on[0, i] - best[0, i])
    ok = worst_value < 1e-9 and worst_dev < 1e-9
    record(4, ok, f"24 games, value error {worst_value:.2e}, best pure deviation gain {worst_dev:.2e}")


RATIO_FLOOR = 1e-6


def _contraction(report, beta):
    """Largest sweep ratio where the previous difference is above the rounding floor, and the
    largest additive excess ``diff[k+1] - beta * diff[k]`` over all sweeps."""
    diffs = np.asarray(report.sweep_diffs)
    keep = diffs[:-1] >= RATIO_FLOOR
    ratios = diffs[1:][keep] / diffs[:-1][keep]
    return float(np.max(ratios, initial=0.0)), report.contraction_violation(beta)


def test_c05_discounted_contraction(example1):
    spec, strat, values, report, elapsed = example1
    checks = []
    ratio, add = _contraction(report, spec.beta)
    checks.append(("dss example1", report, ratio, add))
    for name, s, grid in [("mf example1", spec, 100), ("mf random", random_spec(0, 10, 2, 2, horizon=None, beta=0.8), 40)]:
        _, _, rep = mf.solve_smfe_discounted(s, grid, trunc_T=20)
        r, a = _contraction(rep, s.beta)
        checks.append((name, rep, r, a))
    s = random_spec(8, 4, 2, 2, horizon=None, beta=0.7, coupling="separable")
    _, _, rep = dss.solve_discounted(s)
    r, a = _contraction(rep, s.beta)
    checks.append(("dss random", rep, r, a))
    betas = [0.9, 0.9, 0.8, 0.7]
    ok = elapsed < 600 and all(rep.bellman_residual <= 1e-8 and rep.vi_converged and a <= 1e-9
                               and r <= beta + 1e-9 for (_, rep, r, a), beta in zip(checks, betas))
    detail = "; ".join(f"{n}: sweeps {rep.sweeps}, bellman {rep.bellman_residual:.1e}, max ratio above {RATIO_FLOOR:g} {r:.9f}, "
                       f"additive excess {a:.1e}" for n, rep, r, a in checks)
    record(5, ok, f"example1 solve {elapsed:.0f}s; {detail}")


def test_c06_rescaling_identity():
    spec = random_spec(9, 4, 2, 2, horizon=None, beta=0.9, coupling="general")
    T = 6
    _, values, _ = dss.solve_finite(spec, horizon=T)
    _, _, report = dss.solve_discounted(spec, record_history=True)
    W = dss.rescaled_values(values, spec.beta)
    worst = max(float(np.nanmax(np.abs(W[k] - report.history[k]))) for k in range(1, T + 1))
    record(6, worst < 1e-9, f"T={T}, max |W - VI sweep| {worst:.2e}")


@pytest.mark.slow
def test_c07_convergence_rate():
    start = time.perf_counter()
    res = sim.convergence_experiment(lambda n: build_binary_coupled(n, horizon=4), [4, 8, 16, 32, 64],
                                     replications=100_000, seed=0, grid_k=200)
    elapsed = time.perf_counter() - start
    gaps = ", ".join(f"{r.n}:{r.gap:.3f}+-{r.standard_error:.3f}" for r in res.rows)
    ok = res.monotone and res.slope <= -0.35 and elapsed < 1800
    record(7, ok, f"gaps {gaps}, slope {res.slope:.2f}, monotone {res.monotone}, {elapsed:.0f}s")


def test_c08_example1_band(example1):
    spec, strat, _, _, _ = example1
    fractions = []
    for seed in range(20):
        res = sim.simulate(spec, strat, 50, 1, seed)
        counts = res.paths[0, 4:50, 1]
        fractions.append(float(np.mean((counts >= 30) & (counts <= 70))))
    worst = min(fractions)
    record(8, worst >= 0.95, f"20 runs, smallest in-band fraction {worst:.3f}, mean {np.mean(fractions):.3f}")


def test_c09_bound_recursion():
    Kc, Kp, Km, b = 1.0, 0.5, 2.0, 0.9
    Kv, Ko = bnd.kv_ko(Kp, Kc, Km, b, 3)
    kv3 = Kc + Kp * (Kc + b * Kc + b**2 * Kc + b**3 * Kc)
    kv2 = Kc + kv3 * Km + Kp * (Kc + b * Kc + b**2 * Kc)
    kv1 = Kc + kv2 * Km + Kp * (Kc + b * Kc)
    hand_ok = Kv.tolist() == [kv1, kv2, kv3] and Ko.tolist() == [kv2 + kv3, kv3, 0.0]
    refusals = []
    for km in (0.5, 1.0, 1.1, 10 / 9 - 1e-9, 10 / 9, 1.2):
        try:
            bnd.discounted_bound(bnd.BoundConstants(0.1, 1.0, km, beta=0.9), 100)
            refusals.append(False)
        except bnd.AssumptionViolation:
            refusals.append(True)
    expect = [0.9 * km >= 1 for km in (0.5, 1.0, 1.1, 10 / 9 - 1e-9, 10 / 9, 1.2)]
    c = bnd.estimate_constants(build_example1(100), 200)
    rep = bnd.discounted_bound(c, 100)
    decoupled_ok = c.decoupled and rep.terms["Kp"] == 0.0 and rep.terms["Km"] == 1.0
    ok = hand_ok and refusals == expect and decoupled_ok
    record(9, ok, f"hand T=3 match {hand_ok}, refusal pattern {refusals}, decoupled Kp=0 Km=1 {decoupled_ok}")


def test_c10_index_invariance():
    spec = build_binary_coupled(6, horizon=4)
    strat, _, _ = dss.solve_finite(spec)
    passes = [bool(sim.permutation_check(spec, strat, seed)) for seed in range(10)]
    planted = sim.permutation_check(spec, sim.IndexDependentStrategy(strat, 0, 1), 0)
    ok = all(passes) and not planted
    record(10, ok, f"{sum(passes)}/10 seeded runs equal, planted violation detected {not planted.passed}")


def test_c11_chi_square():
    results = []
    for seed in range(10):
        rng = np.random.default_rng([seed, 11])
        n = int(rng.integers(3, 9))
        X, U = int(rng.integers(2, 4)), int(rng.integers(2, 4))
        spec = random_spec(2000 + seed, n, X, U, horizon=1)
        d = rng.multinomial(n, np.ones(X) / X)
        x = int(rng.choice(np.flatnonzero(d)))
        law = rng.dirichlet(np.ones(U), size=X)
        results.append(sim.chi_square_check(spec, 0, x, d, law, samples=20_000, seed=seed))
    ok = all(r["passed"] for r in results)
    pmin = min(r["p_value"] for r in results)
    record(11, ok, f"{sum(r['passed'] for r in results)}/10 configurations pass, smallest p {pmin:.3g}")


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q"]))
