import dataclasses
import math

import numpy as np
import pandas as pd
import pytest

from evaluation.oracles import verify_double_sampling
from models.bcrl import (
    TRACE_COLUMNS,
    GNet,
    TrainConfig,
    Witness,
    bc_loss,
    build_feature_net,
    design_feasibility,
    design_penalty,
    design_penalty_terms,
    double_sampling_corrected_loss,
    expected_corrected_objective,
    fit_witness,
    ideal_objective,
    project_witness,
    train,
)
from models.dataset import sample_offline_dataset
from models.features import NetworkFeatureMap, TabularFeatureMap, expected_next_feature, feature_norm_bound
from models.mdp import Policy, StateActionDist
from utils.exceptions import InvalidDimensionError, NumericAbortError, ShapeMismatchError

EPS = 1e-6


def _numeric_grad(params, value, indices):
    grads = []
    for i in indices:
        original = params[i]
        params[i] = original + EPS
        plus = value()
        params[i] = original - EPS
        minus = value()
        params[i] = original
        grads.append((plus - minus) / (2 * EPS))
    return np.array(grads)


def _assert_grad(params, value, grad, seed=0, count=10):
    indices = np.random.default_rng(seed).choice(params.size, size=min(count, params.size), replace=False)
    np.testing.assert_allclose(grad[indices], _numeric_grad(params, value, indices), rtol=1e-4, atol=1e-8)


@pytest.fixture
def phi():
    return NetworkFeatureMap.build(6, 2, dim=3, width=8, seed=0)


@pytest.fixture
def batch(small_dataset):
    return small_dataset.subset(np.arange(40))


@pytest.fixture
def witness():
    rng = np.random.default_rng(5)
    return Witness(0.5 * rng.standard_normal(3), 0.3 * rng.standard_normal((3, 3)))


class TestLossGradients:
    def test_bc_loss_with_live_next_features(self, phi, witness, batch, uniform_policy):
        terms = bc_loss(phi, witness, batch, uniform_policy)
        assert terms.grad_next is not None
        _assert_grad(phi.net.params, lambda: bc_loss(phi, witness, batch, uniform_policy).value, terms.grad_params)

    def test_bc_loss_with_target_network(self, phi, witness, batch, uniform_policy):
        target = phi.copy()
        target.net.params += 0.05
        terms = bc_loss(phi, witness, batch, uniform_policy, target_phi=target)
        assert terms.grad_next is None
        value = lambda: bc_loss(phi, witness, batch, uniform_policy, target_phi=target).value
        _assert_grad(phi.net.params, value, terms.grad_params, seed=1)

    def test_witness_gradient(self, phi, witness, batch, uniform_policy):
        terms = bc_loss(phi, witness, batch, uniform_policy, with_param_grad=False)
        vector = witness.flat()
        value = lambda: bc_loss(phi, Witness.from_flat(vector, 3), batch, uniform_policy, with_param_grad=False).value
        _assert_grad(vector, value, terms.grad_witness, count=12)

    def test_corrected_loss_gradients(self, phi, witness, batch, uniform_policy):
        g = GNet.build(6, 2, 3, batch.gamma, width=8, seed=2)
        terms = double_sampling_corrected_loss(phi, witness, g, batch, uniform_policy)
        assert terms.value == pytest.approx(terms.bc_value - terms.correction)
        value = lambda: double_sampling_corrected_loss(phi, witness, g, batch, uniform_policy,
                                                       with_param_grad=False).value
        _assert_grad(phi.net.params, value, terms.grad_params)
        correction = lambda: double_sampling_corrected_loss(phi, witness, g, batch, uniform_policy,
                                                            with_param_grad=False).correction
        _assert_grad(g.net.params, correction, terms.grad_g, seed=3)

    @pytest.mark.parametrize("kind", ["logdet", "min-eig"])
    def test_design_penalty_gradient(self, phi, batch, kind):
        terms = design_penalty(phi, batch, kind)
        _assert_grad(phi.net.params, lambda: design_penalty(phi, batch, kind).value, terms.grad_params, seed=4)

    def test_unknown_design_kind(self, phi, batch):
        with pytest.raises(ValueError):
            design_penalty(phi, batch, "trace")

    def test_min_eig_steps_lift_a_rank_one_design(self):
        rng = np.random.default_rng(0)
        features = np.outer(rng.uniform(0.5, 1.0, size=20), [1.0, 0.0]) + 1e-3 * rng.standard_normal((20, 2))
        lambdas = []
        for _ in range(100):
            terms = design_penalty_terms(features, "min-eig")
            lambdas.append(terms.lambda_min)
            features = features - 0.5 * terms.grad_features
        assert np.all(np.diff(lambdas) > 0)
        assert lambdas[-1] > 100 * lambdas[0]


class TestCorrection:
    def test_deterministic_kernel_needs_no_correction(self, deterministic_mdp):
        pi = Policy.uniform(5, 2)
        phi = TabularFeatureMap.random_fixed(5, 2, 3, seed=1)
        g = TabularFeatureMap(expected_next_feature(deterministic_mdp, phi, pi), kind="random-fixed")
        data = sample_offline_dataset(deterministic_mdp, StateActionDist.uniform(5, 2), 300, seed=0)
        witness = Witness(np.ones(3) * 0.2, np.eye(3) * 0.4)
        corrected = double_sampling_corrected_loss(phi, witness, g, data, pi)
        assert corrected.correction == pytest.approx(0.0, abs=1e-24)
        assert corrected.value == pytest.approx(bc_loss(phi, witness, data, pi).value)

    def test_conditional_mean_correction_recovers_the_ideal_objective(self, small_mdp, uniform_nu, uniform_policy):
        phi = TabularFeatureMap.random_fixed(6, 2, 3, seed=2)
        witness = Witness(np.array([0.3, -0.2, 0.1]), 0.5 * np.eye(3))
        g = expected_next_feature(small_mdp, phi, uniform_policy)
        corrected = expected_corrected_objective(phi, witness, small_mdp, uniform_nu, uniform_policy, g)
        assert corrected == pytest.approx(ideal_objective(phi, witness, small_mdp, uniform_nu, uniform_policy), abs=1e-12)
        lhs, rhs = verify_double_sampling(small_mdp, uniform_nu, uniform_policy, phi, witness)
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_gnet_output_is_bounded_by_gamma(self):
        g = GNet.build(6, 2, 3, 0.8, width=8, seed=0)
        g.net.params *= 30.0
        assert feature_norm_bound(g) <= 0.8 + 1e-12


class TestWitness:
    def test_fit_recovers_the_true_reward_weights(self, low_rank):
        mdp, truth = low_rank
        pi = Policy.uniform(mdp.num_states, mdp.num_actions)
        nu = StateActionDist.uniform(mdp.num_states, mdp.num_actions)
        exact = fit_witness(truth, nu, pi, mdp=mdp, constrain=False)
        data = sample_offline_dataset(mdp, nu, 3000, seed=0)
        sampled = fit_witness(truth, data, pi, constrain=False)
        np.testing.assert_allclose(sampled.rho, exact.rho, atol=1e-8)
        assert ideal_objective(truth, exact, mdp, nu, pi) <= 1e-12
        assert ideal_objective(truth, sampled, mdp, nu, pi) <= 0.02

    def test_fit_on_a_distribution_needs_the_mdp(self, one_hot, uniform_nu, uniform_policy):
        with pytest.raises(ValueError, match="MDP"):
            fit_witness(one_hot, uniform_nu, uniform_policy)

    def test_projection_respects_both_bounds(self):
        rng = np.random.default_rng(0)
        projected = project_witness(5.0 * rng.standard_normal(4), 5.0 * rng.standard_normal((4, 4)), 1.0, 0.5)
        assert projected.projected
        assert projected.rho_norm <= 1.0 + 1e-12
        assert projected.m_norm <= 0.5 + 1e-9
        feasible = project_witness(np.full(4, 0.1), 0.1 * np.eye(4), 1.0, 0.5)
        assert not feasible.projected

    def test_witness_validates_shapes_and_bounds(self):
        with pytest.raises(ShapeMismatchError):
            Witness(np.zeros(3), np.zeros((2, 2)))
        with pytest.raises(ValueError):
            Witness(np.ones(3), np.zeros((3, 3)), rho_bound=1.0)

    def test_implied_radius(self):
        witness = Witness(np.array([0.3, 0.4]), 0.5 * np.eye(2))
        assert witness.implied_radius == pytest.approx(1.0)
        assert Witness(np.ones(2), np.eye(2)).implied_radius == math.inf


class TestTraining:
    @pytest.fixture
    def config(self):
        return TrainConfig(steps=20, batch_size=64, feature_dim=3, width=8, refit_every=5, learning_rate=1e-2)

    def test_trace_has_one_row_per_step(self, config, small_dataset, uniform_policy):
        result = train(build_feature_net(config, 6, 2), config, small_dataset, uniform_policy)
        assert list(result.trace.columns) == TRACE_COLUMNS
        assert len(result.trace) == config.steps
        assert result.trace["refit"].sum() == 4
        assert result.g is not None
        assert result.target is not None
        assert np.all(np.isfinite(result.trace["bc_loss"]))
        assert feature_norm_bound(result.phi) <= 1.0 + 1e-12

    def test_training_is_deterministic(self, config, small_dataset, uniform_policy):
        first = train(build_feature_net(config, 6, 2), config, small_dataset, uniform_policy)
        second = train(build_feature_net(config, 6, 2), config, small_dataset, uniform_policy)
        pd.testing.assert_frame_equal(first.trace, second.trace)
        np.testing.assert_array_equal(first.phi.net.params, second.phi.net.params)

    def test_full_ema_step_makes_the_target_the_online_map(self, config, small_dataset, uniform_policy):
        config = config.model_copy(update={"ema_tau": 1.0})
        result = train(build_feature_net(config, 6, 2), config, small_dataset, uniform_policy)
        np.testing.assert_array_equal(result.target.net.params, result.phi.net.params)

    def test_training_leaves_the_initial_map_untouched(self, config, small_dataset, uniform_policy):
        phi = build_feature_net(config, 6, 2)
        before = phi.net.params.copy()
        train(phi, config, small_dataset, uniform_policy)
        np.testing.assert_array_equal(phi.net.params, before)

    @pytest.mark.parametrize("update", [
        {"regime": "deterministic", "use_target": False},
        {"design_kind": "min-eig", "optimizer": "sgd"},
        {"design_kind": "none", "constrain_witness": False, "refit_every": 0},
    ])
    def test_variants_run(self, config, small_dataset, uniform_policy, update):
        config = config.model_copy(update=update)
        result = train(build_feature_net(config, 6, 2), config, small_dataset, uniform_policy)
        assert len(result.trace) == config.steps
        if config.regime == "deterministic":
            assert (result.trace["correction"] == 0.0).all()

    def test_too_little_data(self, config, small_dataset, uniform_policy):
        with pytest.raises(InvalidDimensionError):
            train(build_feature_net(config, 6, 2), config, small_dataset.subset(np.arange(100)), uniform_policy)

    def test_non_finite_rewards_abort_with_a_trace(self, config, small_dataset, uniform_policy):
        broken = dataclasses.replace(small_dataset, rewards=np.full(len(small_dataset), np.nan))
        config = config.model_copy(update={"regime": "deterministic"})
        with pytest.raises(NumericAbortError) as info:
            train(build_feature_net(config, 6, 2), config, broken, uniform_policy)
        assert len(info.value.trace) == 1
        assert info.value.trace[0]["step"] == 0


def test_design_feasibility_on_one_hot(one_hot, small_dataset):
    assert design_feasibility(one_hot, small_dataset, 0.1).feasible
    report = design_feasibility(one_hot, small_dataset, 0.2)
    assert not report.feasible
    assert report.threshold == pytest.approx(0.1)
