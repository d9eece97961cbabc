import numpy as np
import pytest

from evaluation.metrics import beyond_d0_profile
from evaluation.oracles import bellman_chain_check, exact_value
from models.dataset import sample_offline_dataset
from models.features import TabularFeatureMap
from models.lspe import LspeResult, evaluate_at, lspe_run, lspe_run_population
from models.regression import weighted_loss
from models.mdp import Policy, StateActionDist
from utils.exceptions import DegenerateCovarianceWarning, InvalidDimensionError


def _one_hot_radius(mdp):
    return np.sqrt(mdp.num_pairs) / (1.0 - mdp.gamma)


@pytest.mark.parametrize("k_iters", [10, 20, 50])
def test_population_lspe_on_one_hot_meets_the_horizon_bound(small_mdp, one_hot, uniform_nu, uniform_policy, k_iters):
    result = lspe_run_population(one_hot, small_mdp, uniform_nu, uniform_policy, k_iters, _one_hot_radius(small_mdp))
    truth = exact_value(small_mdp, uniform_policy).value_at(small_mdp.initial_dist, uniform_policy)
    bound = small_mdp.gamma ** (k_iters / 2) / (1 - small_mdp.gamma)
    assert abs(result.value_at(small_mdp.initial_dist) - truth) <= bound
    assert not any(result.on_boundary)
    assert result.k_iters == k_iters
    assert result.method == "lspe-population"


def test_population_lspe_on_one_hot_is_value_iteration(small_mdp, one_hot, uniform_nu, uniform_policy):
    result = lspe_run_population(one_hot, small_mdp, uniform_nu, uniform_policy, 200, _one_hot_radius(small_mdp))
    np.testing.assert_allclose(result.q_table(), exact_value(small_mdp, uniform_policy).q, atol=1e-8)
    assert len(result.bellman_errors) == 200
    assert result.bellman_errors[-1] <= 1e-8


def test_first_iterate_regresses_the_reward(small_mdp, one_hot, uniform_nu, uniform_policy):
    result = lspe_run_population(one_hot, small_mdp, uniform_nu, uniform_policy, 1, np.inf)
    np.testing.assert_array_equal(result.thetas[0], 0.0)
    np.testing.assert_allclose(result.q_table(1), small_mdp.reward, atol=1e-12)


def test_empirical_lspe_approaches_the_truth(small_mdp, uniform_nu, uniform_policy):
    mdp = small_mdp.with_gamma(0.5)
    phi = TabularFeatureMap.one_hot(mdp.num_states, mdp.num_actions)
    data = sample_offline_dataset(mdp, uniform_nu, 40_000, seed=1)
    result = lspe_run(phi, data, uniform_policy, 40, np.inf)
    truth = exact_value(mdp, uniform_policy).value_at(mdp.initial_dist, uniform_policy)
    assert result.value_at(mdp.initial_dist) == pytest.approx(truth, abs=0.2)
    assert result.method == "lspe"


def test_small_radius_keeps_every_iterate_in_the_ball(small_mdp, small_dataset, one_hot, uniform_policy):
    result = lspe_run(one_hot, small_dataset, uniform_policy, 10, 0.5)
    assert np.all(np.linalg.norm(result.thetas, axis=1) <= 0.5 + 1e-9)
    assert all(result.on_boundary)


def test_chain_check_holds_for_population_iterates(small_mdp, one_hot, uniform_nu, uniform_policy):
    result = lspe_run_population(one_hot, small_mdp, uniform_nu, uniform_policy, 30, _one_hot_radius(small_mdp))
    check = bellman_chain_check(result, small_mdp, uniform_policy, small_mdp.initial_dist)
    assert check.holds
    assert check.eta <= 1e-10


def test_rank_deficient_features_warn(small_mdp, small_dataset, uniform_policy):
    phi = TabularFeatureMap.constant(small_mdp.num_states, small_mdp.num_actions, 3)
    with pytest.warns(DegenerateCovarianceWarning):
        result = lspe_run(phi, small_dataset, uniform_policy, 5, 10.0)
    assert result.rank_deficient
    assert np.all(np.isfinite(result.thetas))
    assert result.diagnostics["min_rank"] == 1
    assert result.diagnostics["dim"] == 3
    assert result.diagnostics["rank_deficient"]
    assert "rank 1 < d=3" in result.diagnostics["warnings"][0]


def test_full_rank_run_has_clean_diagnostics(small_dataset, one_hot, uniform_policy):
    result = lspe_run(one_hot, small_dataset, uniform_policy, 5, 0.5)
    assert result.diagnostics["min_rank"] == one_hot.dim
    assert not result.diagnostics["rank_deficient"]
    assert result.diagnostics["warnings"] == []
    assert result.diagnostics["boundary_iterations"] == 5


@pytest.mark.parametrize("k_iters,radius,error", [(0, 1.0, InvalidDimensionError), (5, 0.0, ValueError)])
def test_argument_errors(small_dataset, one_hot, uniform_policy, k_iters, radius, error):
    with pytest.raises(error):
        lspe_run(one_hot, small_dataset, uniform_policy, k_iters, radius)


def test_evaluate_at_reads_the_final_iterate(small_mdp, small_dataset, one_hot, uniform_policy):
    result = lspe_run(one_hot, small_dataset, uniform_policy, 10, np.inf)
    p0 = np.eye(small_mdp.num_states)[2]
    assert evaluate_at(result, one_hot, uniform_policy, p0) == pytest.approx(result.value_at(p0))
    assert isinstance(result, LspeResult)
    np.testing.assert_allclose(result.values_by_iteration(p0)[-1], result.value_at(p0))


def test_beyond_initial_distribution_errors_stay_under_the_horizon_bound(small_mdp, one_hot, uniform_nu):
    pi = Policy.uniform(small_mdp.num_states, small_mdp.num_actions)
    k_iters = 30
    result = lspe_run_population(one_hot, small_mdp, uniform_nu, pi, k_iters, _one_hot_radius(small_mdp))
    bound = small_mdp.gamma ** k_iters / (1 - small_mdp.gamma)
    profile = beyond_d0_profile(result, small_mdp, pi, [0, 1, 2, 5, 10])
    assert [h for h, _ in profile] == [0, 1, 2, 5, 10]
    assert all(err <= bound + 1e-12 for _, err in profile)


def test_point_mass_nu_still_runs(small_mdp, one_hot, uniform_policy):
    nu = StateActionDist.point_mass(small_mdp.num_states, small_mdp.num_actions, 0, 1)
    data = sample_offline_dataset(small_mdp, nu, 50, seed=0)
    with pytest.warns(DegenerateCovarianceWarning):
        result = lspe_run(one_hot, data, uniform_policy, 3, np.inf)
    assert result.ranks == [1, 1, 1]


@pytest.mark.parametrize("radius", [0.3, 2.0])
def test_every_iterate_beats_random_feasible_weights(small_dataset, uniform_policy, radius):
    phi = TabularFeatureMap.random_fixed(small_dataset.num_states, small_dataset.num_actions, 4, seed=2)
    result = lspe_run(phi, small_dataset, uniform_policy, 8, radius)
    features = phi.batch(small_dataset.states, small_dataset.actions)
    next_features = phi.policy_table(uniform_policy)[small_dataset.next_states]
    rng = np.random.default_rng(0)
    for k in range(1, result.k_iters + 1):
        targets = small_dataset.rewards + small_dataset.gamma * next_features @ result.thetas[k - 1]
        best = weighted_loss(features, targets, result.thetas[k])
        for _ in range(50):
            direction = rng.standard_normal(phi.dim)
            theta = direction / np.linalg.norm(direction) * radius * rng.uniform() ** (1.0 / phi.dim)
            assert best <= weighted_loss(features, targets, theta) + 1e-9


def test_reruns_are_bitwise_identical(small_dataset, uniform_policy):
    phi = TabularFeatureMap.random_fixed(small_dataset.num_states, small_dataset.num_actions, 4, seed=2)
    first = lspe_run(phi, small_dataset, uniform_policy, 12, 0.7)
    second = lspe_run(phi, small_dataset, uniform_policy, 12, 0.7)
    assert first.thetas.tobytes() == second.thetas.tobytes()
    assert first.residuals == second.residuals
