"""Least-squares policy evaluation on a fixed representation.

Starting from theta_0 = 0, every iteration regresses the bootstrapped targets
r + gamma * V_{k-1}(s') on phi(s, a) inside the ball ||theta|| <= W, where
V_{k-1}(s) = sum_a pi_e(a|s) theta_{k-1}^T phi(s, a) is summed exactly over
the finite action set.
"""
import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from evaluation.oracles import bellman_chain_check
from models.dataset import OfflineDataset
from models.features import FeatureMap, check_compatible
from models.mdp import FiniteMdp, Policy, StateActionDist
from models.regression import ball_constrained_lstsq, regression_moments, weighted_loss
from utils.exceptions import DegenerateCovarianceWarning, InvalidDimensionError

logger = logging.getLogger(__name__)


@dataclass
class LspeResult:
    thetas: np.ndarray  # (K + 1, d), thetas[0] = 0
    feature_table: np.ndarray  # (S, A, d)
    policy_features: np.ndarray  # (S, d), phi(s, pi_e)
    gamma: float
    w_radius: float
    residuals: List[float]
    ranks: List[int]
    on_boundary: List[bool]
    bellman_errors: Optional[List[float]] = None
    method: str = "lspe"
    diagnostics: dict = field(default_factory=dict)

    @property
    def k_iters(self) -> int:
        return len(self.thetas) - 1

    @property
    def theta(self) -> np.ndarray:
        return self.thetas[-1]

    @property
    def rank_deficient(self) -> bool:
        return min(self.ranks) < self.thetas.shape[1]

    def q_table(self, iteration: int = -1) -> np.ndarray:
        return self.feature_table @ self.thetas[iteration]

    def q_tables(self) -> np.ndarray:
        return np.einsum("sad,kd->ksa", self.feature_table, self.thetas)

    def value_at(self, p0: np.ndarray, iteration: int = -1) -> float:
        """E_{s ~ p0}[f_k(s, pi_e)]."""
        return float(np.asarray(p0) @ (self.policy_features @ self.thetas[iteration]))

    def values_by_iteration(self, p0: np.ndarray) -> np.ndarray:
        return (self.policy_features @ self.thetas.T).T @ np.asarray(p0)


def _check_arguments(k_iters: int, w_radius: float) -> None:
    if k_iters < 1:
        raise InvalidDimensionError(f"k_iters must be at least 1, got {k_iters}")
    if w_radius <= 0:
        raise ValueError(f"w_radius must be positive, got {w_radius}")


def _iterate(
    features: np.ndarray,
    weights: Optional[np.ndarray],
    rewards: np.ndarray,
    backup: Callable[[np.ndarray], np.ndarray],
    k_iters: int,
    w_radius: float,
):
    dim = features.shape[1]
    gram, _ = regression_moments(features, rewards, weights)
    row_weights = weights if weights is not None else np.full(len(rewards), 1.0 / len(rewards))

    thetas = np.zeros((k_iters + 1, dim))
    residuals, ranks, boundary = [], [], []
    for k in range(1, k_iters + 1):
        targets = rewards + backup(thetas[k - 1])
        solution = ball_constrained_lstsq(gram, (features * row_weights[:, None]).T @ targets, w_radius)
        thetas[k] = solution.theta
        residuals.append(weighted_loss(features, targets, solution.theta, weights))
        ranks.append(solution.rank)
        boundary.append(solution.on_boundary)
        logger.debug("LSPE iteration %d: residual %.3e, |theta| %.3f", k, residuals[-1], np.linalg.norm(solution.theta))

    diagnostics = {
        "dim": dim,
        "min_rank": int(min(ranks)),
        "rank_deficient": min(ranks) < dim,
        "boundary_iterations": int(sum(boundary)),
        "warnings": [],
    }
    if diagnostics["rank_deficient"]:
        message = f"feature covariance has rank {min(ranks)} < d={dim}; using the pseudoinverse"
        logger.warning(message)
        warnings.warn(message, DegenerateCovarianceWarning, stacklevel=3)
        diagnostics["warnings"].append(message)
    return thetas, residuals, ranks, boundary, diagnostics


def lspe_run(phi: FeatureMap, data: OfflineDataset, pi_e: Policy, k_iters: int, w_radius: float) -> LspeResult:
    _check_arguments(k_iters, w_radius)
    if len(data) == 0:
        raise InvalidDimensionError("LSPE needs a nonempty dataset")
    check_compatible(phi, data.num_states, data.num_actions, "dataset")

    table = phi.table()
    policy_features = pi_e.average(table)
    features = phi.batch(data.states, data.actions)
    next_features = policy_features[data.next_states]

    thetas, residuals, ranks, boundary, diagnostics = _iterate(
        features, None, data.rewards, lambda theta: data.gamma * (next_features @ theta), k_iters, w_radius
    )
    logger.info("LSPE finished %d iterations on %d tuples", k_iters, len(data))
    return LspeResult(
        thetas, table, policy_features, data.gamma, w_radius, residuals, ranks, boundary, diagnostics=diagnostics
    )


def lspe_run_population(
    phi: FeatureMap,
    mdp: FiniteMdp,
    nu: StateActionDist,
    pi_e: Policy,
    k_iters: int,
    w_radius: float,
) -> LspeResult:
    """LSPE with exact nu-weighted moments and exact transition expectations."""
    _check_arguments(k_iters, w_radius)
    check_compatible(phi, mdp.num_states, mdp.num_actions, "MDP")

    table = phi.table()
    policy_features = pi_e.average(table)
    features = table.reshape(-1, phi.dim)
    kernel = mdp.transition.reshape(mdp.num_pairs, mdp.num_states)

    thetas, residuals, ranks, boundary, diagnostics = _iterate(
        features,
        nu.flat,
        mdp.reward.reshape(-1),
        lambda theta: mdp.gamma * (kernel @ (policy_features @ theta)),
        k_iters,
        w_radius,
    )
    result = LspeResult(
        thetas, table, policy_features, mdp.gamma, w_radius, residuals, ranks, boundary,
        method="lspe-population", diagnostics=diagnostics,
    )
    result.bellman_errors = list(bellman_chain_check(result, mdp, pi_e, mdp.initial_dist).errors)
    return result


def evaluate_at(result, phi: FeatureMap, pi_e: Policy, p0: np.ndarray) -> float:
    """E_{s ~ p0}[f_K(s, pi_e)] for an LSPE or FQE result."""
    if isinstance(result, LspeResult):
        return float(np.asarray(p0) @ (phi.policy_table(pi_e) @ result.theta))
    return result.value_at(p0)
