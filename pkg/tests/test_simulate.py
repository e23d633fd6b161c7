import numpy as np
import pytest

from deepnash import dss
from deepnash import meanfield as mf
from deepnash import simulate as sim
from deepnash.model import build_binary_coupled, build_example1, random_spec


@pytest.fixture(scope="module")
def solved():
    spec = random_spec(21, 3, 2, 2, horizon=3, coupling="general")
    strat, values, report = dss.solve_finite(spec)
    assert report.all_converged
    return spec, strat, values


def test_streams_are_keyed():
    a = sim.stream_uniforms(5, 2, 3, sim.KIND_MOVE, 4)
    np.testing.assert_array_equal(a, sim.stream_uniforms(5, 2, 3, sim.KIND_MOVE, 4))
    assert not np.array_equal(a, sim.stream_uniforms(5, 3, 3, sim.KIND_MOVE, 4))
    assert not np.array_equal(a, sim.stream_uniforms(5, 2, 3, sim.KIND_ACTION, 4))
    assert not np.array_equal(a, sim.stream_uniforms(6, 2, 3, sim.KIND_MOVE, 4))
    assert np.all((a >= 0) & (a < 1))


def test_simulation_is_deterministic(solved):
    spec, strat, _ = solved
    r1 = sim.simulate(spec, strat, replications=50, seed=3)
    r2 = sim.simulate(spec, strat, replications=50, seed=3)
    r3 = sim.simulate(spec, strat, replications=50, seed=4)
    np.testing.assert_array_equal(r1.paths, r2.paths)
    np.testing.assert_array_equal(r1.player_costs, r2.player_costs)
    assert r1.trajectories_csv() == r2.trajectories_csv()
    assert not np.array_equal(r1.paths, r3.paths)
    assert np.all(r1.paths.sum(axis=2) == spec.n)


def test_monte_carlo_matches_exact_value(solved):
    spec, strat, values = solved
    exact = sim.exact_initial_value(spec, values)
    res = sim.simulate(spec, strat, replications=40_000, seed=1, record_paths=False)
    assert abs(res.mean_cost - exact) < 4 * res.standard_error


def test_permutation_check(solved):
    spec, strat, _ = solved
    for seed in range(3):
        check = sim.permutation_check(spec, strat, seed)
        assert check and check.sigma[0] != 0
    planted = sim.IndexDependentStrategy(strat, position=0, action=1)
    assert not sim.permutation_check(spec, planted, 0)


def test_chi_square_passes_on_exact_law():
    spec = build_binary_coupled(6)
    out = sim.chi_square_check(spec, 0, 1, (2, 4), np.array([[0.3, 0.7], [0.6, 0.4]]), samples=5000, seed=2)
    assert out["passed"] and out["bins"] >= 2


def test_histogram_detects_wrong_law():
    spec = build_binary_coupled(8)
    law = np.array([[1.0, 0.0], [1.0, 0.0]])
    wrong = np.array([[0.0, 1.0], [0.0, 1.0]])
    from deepnash.dynamics import OthersDeepState, joint_next_deep_pmf
    from scipy import stats
    hist = sim.one_step_histogram(spec, 0, 0, (4, 4), wrong, 5000, 0)
    exact = joint_next_deep_pmf(spec, 0, 0, OthersDeepState((3, 4)), law)
    obs = np.array([hist.get(s, 0) for s in exact.support], dtype=float)
    exp = exact.probs * obs.sum() / exact.probs.sum()
    keep = exp >= 5
    f_obs, f_exp = obs[keep], exp[keep]
    assert stats.chisquare(f_obs, f_exp * f_obs.sum() / f_exp.sum()).pvalue < 1e-3


def test_ns_strategy_simulates():
    spec = build_binary_coupled(8)
    _, ns, _ = mf.solve_smfe_finite(spec, 40)
    res = sim.simulate(spec, ns, replications=200, seed=0)
    assert res.horizon == 4 and res.paths.shape == (200, 5, 2)


def test_stationary_strategy_needs_horizon():
    spec = build_example1(6)
    strat, _, _ = dss.solve_discounted(spec)
    res = sim.simulate(spec, strat, 12, 20, seed=0)
    assert res.paths.shape == (20, 13, 2)
    assert res.beta == 0.9


def test_small_convergence_experiment():
    res = sim.convergence_experiment(lambda n: build_binary_coupled(n), [4, 8], 4000, seed=0, grid_k=40)
    assert [r.n for r in res.rows] == [4, 8]
    assert res.rows[0].gap > res.rows[1].gap
    assert res.to_json()["rows"][0]["gap"] == res.rows[0].gap
    assert len(res.plot_data().splitlines()) == 2


def test_trembling_hand_pairs_runs():
    spec = build_binary_coupled(8)
    _, ns, _ = mf.solve_smfe_finite(spec, 40)
    res = sim.trembling_hand_experiment(spec, ns, 1, [0.1, 0.9], replications=500, seed=0)
    np.testing.assert_array_equal(res.baseline.paths[:, :2], res.shocked.paths[:, :2])
    assert res.delta_se >= 0


def test_permutation_on_example1_small():
    spec = build_example1(10, beta=None, horizon=10)
    strat, _, _ = dss.solve_finite(spec)
    for seed in range(3):
        assert sim.permutation_check(spec, strat, seed, replications=2)
