"""Synthetic MDP instances: random tabular chains and low-rank MDPs.

A low-rank MDP factors its kernel as P(s'|s, a) = phi(s, a)^T mu(s') and has a
reward linear in phi, so phi is exactly linear Bellman complete. The factors
start nonnegative (phi rows on the simplex, mu rows distributions), which
makes P a valid kernel. They are then moved to a basis where the induced
next-feature operator M is a strict contraction (||M||_2 < sqrt(gamma) under
the reference policy, uniform unless one is given) and rescaled globally so
every feature has norm at most 1; the rescaling is absorbed into mu. Features
are signed afterwards.

The contraction holds for one policy only. `contract_for_policy` moves the same
span to the basis that contracts under another policy.
"""
import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy import linalg

from models.features import FeatureMap, TabularFeatureMap, expected_next_feature
from models.mdp import ROW_TOL, FiniteMdp, Policy
from utils.exceptions import ConstructionError, InvalidDimensionError, InvalidGammaError
from utils.seeding import Stream, make_rng

logger = logging.getLogger(__name__)

REWARD_SCALE = 0.95


def _check_sizes(num_states: int, num_actions: int, gamma: float) -> None:
    if num_states < 1 or num_actions < 1:
        raise InvalidDimensionError(f"need at least one state and action, got {num_states}x{num_actions}")
    if not 0.0 < gamma < 1.0:
        raise InvalidGammaError(f"gamma must lie in (0, 1), got {gamma}")


def make_random_tabular_mdp(
    seed: int,
    num_states: int,
    num_actions: int,
    gamma: float,
    stochastic: bool = True,
) -> FiniteMdp:
    _check_sizes(num_states, num_actions, gamma)
    rng = make_rng(seed, Stream.MDP)

    if stochastic:
        transition = rng.dirichlet(np.ones(num_states), size=(num_states, num_actions))
        transition /= transition.sum(axis=-1, keepdims=True)
    else:
        successors = rng.integers(num_states, size=(num_states, num_actions))
        transition = np.zeros((num_states, num_actions, num_states))
        np.put_along_axis(transition, successors[..., None], 1.0, axis=-1)

    reward = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
    initial = rng.dirichlet(np.ones(num_states))
    initial /= initial.sum()
    return FiniteMdp(transition, reward, gamma, initial)


@dataclass(frozen=True)
class LowRankFactors:
    features: np.ndarray  # phi*[s, a, :]
    mu: np.ndarray  # mu[:, s'], so P[s, a, :] = features[s, a] @ mu
    theta: np.ndarray  # r = features @ theta
    initial: np.ndarray

    @property
    def dim(self) -> int:
        return self.features.shape[-1]

    def kernel(self) -> np.ndarray:
        return self.features @ self.mu


def _contracting_basis(operator: np.ndarray, gamma: float) -> np.ndarray:
    """B with ||B^-1 K B||_2 < sqrt(gamma) for K of spectral radius gamma."""
    scaled = operator / np.sqrt(gamma)
    gram = linalg.solve_discrete_lyapunov(scaled.T, np.eye(operator.shape[0]))
    try:
        lower = linalg.cholesky(0.5 * (gram + gram.T), lower=True)
    except linalg.LinAlgError as exc:
        raise ConstructionError("Lyapunov solution is not positive definite") from exc
    return linalg.solve_triangular(lower.T, np.eye(operator.shape[0]), lower=False)


def low_rank_factors(
    seed: int,
    num_states: int,
    num_actions: int,
    feature_dim: int,
    gamma: float,
    reference: Optional[Policy] = None,
) -> LowRankFactors:
    _check_sizes(num_states, num_actions, gamma)
    if not 1 <= feature_dim <= num_states * num_actions:
        raise InvalidDimensionError(
            f"feature_dim must lie in [1, {num_states * num_actions}], got {feature_dim}"
        )
    rng = make_rng(seed, Stream.MDP)

    phi0 = rng.dirichlet(np.ones(feature_dim), size=(num_states, num_actions))
    mu0 = rng.dirichlet(np.ones(num_states), size=feature_dim)

    # next-feature operator in row convention: gamma * E phi0(s', pi) = phi0(s, a) @ K
    if reference is None:
        reference = Policy.uniform(num_states, num_actions)
    elif reference.probs.shape != (num_states, num_actions):
        raise InvalidDimensionError(f"reference policy is {reference.probs.shape}, expected {(num_states, num_actions)}")
    operator = gamma * mu0 @ reference.average(phi0)
    basis = _contracting_basis(operator, gamma)

    phi1 = phi0 @ basis
    scale = float(np.max(np.linalg.norm(phi1, axis=-1)))
    features = phi1 / scale
    mu = scale * linalg.solve(basis, mu0)

    theta = rng.standard_normal(feature_dim)
    peak = float(np.max(np.abs(features @ theta)))
    if peak == 0.0:
        raise ConstructionError("reward direction is orthogonal to every feature")
    theta *= REWARD_SCALE / peak
    initial = rng.dirichlet(np.ones(num_states))
    return LowRankFactors(features=features, mu=mu, theta=theta, initial=initial / initial.sum())


def make_low_rank_mdp(
    seed: int,
    num_states: int,
    num_actions: int,
    feature_dim: int,
    gamma: float,
    reference: Optional[Policy] = None,
) -> Tuple[FiniteMdp, TabularFeatureMap]:
    factors = low_rank_factors(seed, num_states, num_actions, feature_dim, gamma, reference)

    transition = factors.kernel()
    if np.any(transition < -ROW_TOL):
        raise ConstructionError("factorized kernel has negative entries")
    transition = np.clip(transition, 0.0, None)
    deviation = float(np.max(np.abs(transition.sum(axis=-1) - 1.0)))
    if deviation > ROW_TOL:
        raise ConstructionError(f"factorized kernel rows deviate from 1 by {deviation:.3e}")

    reward = factors.features @ factors.theta
    mdp = FiniteMdp(transition, reward, gamma, factors.initial)
    logger.debug("built low-rank MDP %dx%d with d=%d", num_states, num_actions, feature_dim)
    return mdp, TabularFeatureMap(factors.features, kind="low-rank-truth")


def contract_for_policy(mdp: FiniteMdp, phi: FeatureMap, pi: Policy) -> TabularFeatureMap:
    """Re-express an exactly complete feature map so its witness contracts under pi.

    Solves phi @ K = gamma * E phi(s', pi) for the row-convention operator K and
    applies the Lyapunov basis of K. The span, and with it exact completeness,
    is unchanged; only the coordinates move.
    """
    table = phi.flat_table()
    target = expected_next_feature(mdp, phi, pi).reshape(table.shape)
    operator, *_ = linalg.lstsq(table, target)
    residual = float(np.max(np.abs(table @ operator - target)))
    if residual > 1e-8:
        raise ConstructionError(f"next features leave the span of phi (residual {residual:.3e})")
    basis = _contracting_basis(operator, mdp.gamma)
    rebased = table @ basis
    rebased /= float(np.max(np.linalg.norm(rebased, axis=-1)))
    return TabularFeatureMap(rebased.reshape(phi.num_states, phi.num_actions, phi.dim), kind=phi.kind)
