import numpy as np
import pytest

from models.regression import ball_constrained_lstsq, pinv_solve, regression_moments, weighted_loss
from utils.exceptions import DegenerateDesignError, ShapeMismatchError


def _problem(seed, dim=4, rows=50):
    rng = np.random.default_rng(seed)
    features = rng.standard_normal((rows, dim))
    targets = features @ rng.standard_normal(dim) + 0.1 * rng.standard_normal(rows)
    return features, targets


def test_interior_solution_is_ordinary_least_squares():
    features, targets = _problem(0)
    gram, moment = regression_moments(features, targets)
    solution = ball_constrained_lstsq(gram, moment, radius=1e6)
    expected, *_ = np.linalg.lstsq(features, targets, rcond=None)
    np.testing.assert_allclose(solution.theta, expected, atol=1e-10)
    assert not solution.on_boundary
    assert solution.multiplier == 0.0
    assert solution.rank == 4


@pytest.mark.parametrize("seed", range(5))
def test_boundary_solution_satisfies_kkt(seed):
    features, targets = _problem(seed)
    gram, moment = regression_moments(features, targets)
    unconstrained = np.linalg.norm(pinv_solve(gram, moment))
    radius = 0.3 * unconstrained
    solution = ball_constrained_lstsq(gram, moment, radius)
    assert solution.on_boundary
    assert solution.multiplier > 0
    assert np.linalg.norm(solution.theta) == pytest.approx(radius, rel=1e-8)
    np.testing.assert_allclose((gram + solution.multiplier * np.eye(4)) @ solution.theta, moment, atol=1e-6)


def test_boundary_solution_beats_other_feasible_points():
    features, targets = _problem(7)
    gram, moment = regression_moments(features, targets)
    radius = 0.5
    best = weighted_loss(features, targets, ball_constrained_lstsq(gram, moment, radius).theta)
    rng = np.random.default_rng(1)
    for _ in range(200):
        candidate = rng.standard_normal(4)
        candidate *= radius * rng.uniform() / np.linalg.norm(candidate)
        assert weighted_loss(features, targets, candidate) >= best - 1e-12


def test_weighted_moments_match_explicit_formula():
    features, targets = _problem(2, rows=6)
    weights = np.arange(1.0, 7.0) / 21.0
    gram, moment = regression_moments(features, targets, weights)
    np.testing.assert_allclose(gram, features.T @ np.diag(weights) @ features)
    np.testing.assert_allclose(moment, features.T @ (weights * targets))


def test_rank_deficient_design_uses_the_minimum_norm_solution():
    gram = np.diag([2.0, 0.0])
    moment = np.array([4.0, 0.0])
    solution = ball_constrained_lstsq(gram, moment, radius=10.0)
    np.testing.assert_allclose(solution.theta, [2.0, 0.0])
    assert solution.rank == 1


def test_zero_gram_is_degenerate():
    with pytest.raises(DegenerateDesignError):
        ball_constrained_lstsq(np.zeros((3, 3)), np.zeros(3), 1.0)


def test_rejects_nonpositive_radius_and_bad_shapes():
    with pytest.raises(ValueError):
        ball_constrained_lstsq(np.eye(2), np.ones(2), 0.0)
    with pytest.raises(ShapeMismatchError):
        ball_constrained_lstsq(np.eye(2), np.ones(3), 1.0)


def test_pinv_solve_handles_several_right_hand_sides():
    gram = np.diag([1.0, 4.0])
    np.testing.assert_allclose(pinv_solve(gram, np.array([[1.0, 2.0], [4.0, 8.0]])), [[1.0, 2.0], [1.0, 2.0]])
