import numpy as np
import pytest

from deepnash import dss
from deepnash.dynamics import DeepState, expected_stage_cost, stage_cost_rows
from deepnash.fixedpoint import residual, solve_stage
from deepnash.model import GameSpec, PolynomialCost, Space, TabularKernel, build_example1, random_spec
from oracles import JointGame


def anti_coordination(n=2, horizon=1):
    """One state; action cost grows with the share of players choosing it."""
    lin = np.zeros((1, 2, 1, 2))
    lin[0, 0, 0, 0] = lin[0, 1, 0, 1] = 2.0
    return GameSpec(Space((0,)), Space((0, 1)), n, TabularKernel(np.ones((1, 2, 1))),
                    PolynomialCost(np.array([[1 / 3, 0.0]]), lin), np.array([1.0]), horizon=horizon)


def test_mixed_equilibrium_is_found():
    strat, values, report = dss.solve_finite(anti_coordination())
    assert report.all_converged
    np.testing.assert_allclose(strat.laws[0, 0, 0], [1 / 3, 2 / 3], atol=1e-10)
    assert abs(values.values[0, 0, 0] - 5 / 3) < 1e-10


def test_solve_stage_on_matching_pennies_rows():
    # Q[0] = [p1, 1 - p1] pushes towards the uniform law
    def q_fn(law):
        return np.array([[law[0, 0], law[0, 1]]])

    res = solve_stage(q_fn, 1, 2, np.array([0]))
    assert res.converged
    np.testing.assert_allclose(res.law[0], [0.5, 0.5], atol=1e-9)
    assert residual(res.law, q_fn(res.law), [0]) <= 1e-8


def test_pure_dominant_action():
    spec = random_spec(4, 3, 2, 2, horizon=1, coupling="d-only", d_dependent=False)
    base = spec.cost.base.copy()
    base[..., 1] += 10.0
    spec = spec.replace(cost=type(spec.cost)(base, spec.cost.coef))
    strat, _, report = dss.solve_finite(spec)
    assert report.all_converged
    active = strat.lattice.points > 0
    assert np.all(strat.laws[:, active, 0] > 1 - 1e-12)


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("coupling", ["d-only", "general"])
def test_matches_joint_oracle(seed, coupling):
    spec = random_spec(200 + seed, 2, 2, 2, horizon=2, coupling=coupling, time_homogeneous=False)
    strat, values, report = dss.solve_finite(spec)
    assert report.all_converged
    game = JointGame(spec, 2, lambda t, c: strat.law(t, c))
    on, best = game.on_path(), game.best_pure_deviation()
    for i, joint in enumerate(game.states):
        c = game.counts(i)
        assert abs(on[0, i] - values.value(0, joint[0], c)) < 1e-9
        assert on[0, i] - best[0, i] < 1e-9


def test_audit_flags_a_deviation():
    spec = random_spec(11, 3, 2, 2, horizon=2)
    strat, _, _ = dss.solve_finite(spec)
    assert dss.exploitability_audit(spec, strat).gap < 1e-8
    Q = dss.best_response_rows(spec, 0, (2, 1), strat.law(0, (2, 1)))[2]
    worst = int(np.argmax(Q[0]))
    bad = dss.perturb(strat, 0, (2, 1), 0, worst)
    res = dss.exploitability_audit(spec, bad)
    assert res.gap > 1e-3
    t, x, d = res.argmax
    assert (t, x, d) == (0, 0, (2, 1))


def test_rescaling_matches_value_iteration():
    spec = random_spec(7, 3, 2, 2, horizon=None, beta=0.8)
    T = 5
    _, values, _ = dss.solve_finite(spec, horizon=T)
    _, _, report = dss.solve_discounted(spec, record_history=True, vi_tol=1e-12)
    W = dss.rescaled_values(values, spec.beta)
    for k in range(1, T + 1):
        diff = np.nanmax(np.abs(W[k] - report.history[k]))
        assert diff < 1e-9


def test_discounted_contracts():
    spec = random_spec(8, 4, 2, 2, horizon=None, beta=0.7, coupling="separable")
    strat, values, report = dss.solve_discounted(spec)
    assert report.vi_converged and report.bellman_residual <= 1e-8
    assert report.contraction_violation(spec.beta) <= 1e-9
    assert dss.exploitability_audit(spec, strat).gap < 1e-7


def test_strategy_json_round_trip():
    spec = build_example1(4, beta=None, horizon=2)
    strat, values, _ = dss.solve_finite(spec)
    back = dss.EquilibriumStrategy.from_json(strat.to_json(values), spec.n_states)
    np.testing.assert_array_equal(back.laws, strat.laws)


def test_report_csv_lists_every_node():
    spec = random_spec(1, 3, 2, 2, horizon=2)
    _, _, report = dss.solve_finite(spec)
    lines = report.to_csv().strip().splitlines()
    assert len(lines) == 1 + 2 * 4


def _constant_cost(spec, c0):
    from deepnash.model import AffineCost
    return spec.replace(cost=AffineCost(np.full((spec.n_states, spec.n_actions), c0)))


def test_constant_cost_finite_and_discounted():
    spec = _constant_cost(random_spec(3, 4, 2, 2, horizon=1), 2.5)
    _, values, _ = dss.solve_finite(spec)
    assert np.nanmax(np.abs(values.values - 2.5)) == 0.0
    disc = _constant_cost(random_spec(3, 4, 2, 2, horizon=None, beta=0.6), 2.5)
    _, values, report = dss.solve_discounted(disc)
    assert np.nanmax(np.abs(values.values - 2.5 / 0.4)) <= 1e-8
    assert report.bellman_residual <= 1e-8


def test_myopic_limit():
    spec = random_spec(6, 3, 2, 2, horizon=None, beta=1e-6)
    _, values, _ = dss.solve_discounted(spec)
    _, one, _ = dss.solve_finite(spec.replace(beta=None, horizon=1))
    assert np.nanmax(np.abs(values.values - one.values)) < 1e-5


def test_pure_action_linearity():
    spec = random_spec(12, 4, 3, 3, horizon=2, coupling="general")
    rng = np.random.default_rng(0)
    law = rng.dirichlet(np.ones(3), size=3)
    d = (1, 2, 1)
    rows = stage_cost_rows(spec, 0, 0, d, law)
    for _ in range(5):
        own = rng.dirichlet(np.ones(3))
        assert abs(expected_stage_cost(spec, 0, 0, DeepState(d), own, law) - own @ rows) < 1e-12


def test_audit_matches_enumerated_deviations_n3():
    spec = random_spec(31, 3, 2, 2, horizon=2, coupling="separable", time_homogeneous=False)
    strat, _, _ = dss.solve_finite(spec, max_iters=3)
    game = JointGame(spec, 2, lambda t, c: strat.law(t, c))
    oracle = float(np.max(game.on_path()[:2] - game.best_pure_deviation()[:2]))
    audit = dss.exploitability_audit(spec, strat).gap
    assert abs(audit - oracle) < 1e-12


def test_values_within_cost_bounds():
    spec = random_spec(13, 4, 2, 2, horizon=3)
    _, values, _ = dss.solve_finite(spec)
    v = values.values[~np.isnan(values.values)]
    cmax = max(float(spec.cost.base.max() + spec.cost.coef.max()), 0.0)
    assert np.all(v >= 0) and np.all(v <= 3 * cmax)


@pytest.mark.slow
def test_example1_finite_horizon_feasible():
    spec = build_example1(100, beta=None, horizon=20)
    _, _, report = dss.solve_finite(spec)
    assert report.residual.shape == (20, 101)
    assert report.max_residual <= 1e-6
