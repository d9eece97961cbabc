"""Exact dynamic-programming ground truth on finite MDPs.

Everything here is computed by direct linear solves or exhaustive
enumeration; nothing is sampled.
"""
import logging
import math
import warnings
from dataclasses import dataclass
from typing import List, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.special import ndtri
from scipy.stats import qmc

from models.bcrl import Witness, fit_witness, ideal_objective
from models.features import FeatureMap, check_compatible, covariance, expected_next_feature
from models.mdp import FiniteMdp, Policy, StateActionDist
from models.regression import ball_constrained_lstsq, regression_moments
from utils.exceptions import DegenerateCovarianceWarning, InvalidDimensionError, ShapeMismatchError

logger = logging.getLogger(__name__)

SINGULAR_TOL = 1e-10
DEFAULT_EXTRA_DIRECTIONS = 64


@dataclass(frozen=True)
class ValueFunction:
    q: np.ndarray  # Q[s, a]

    def v_under(self, pi: Policy) -> np.ndarray:
        return pi.average(self.q)

    def value_at(self, p0: np.ndarray, pi: Policy) -> float:
        return float(np.asarray(p0) @ self.v_under(pi))


def _as_q(f) -> np.ndarray:
    return f.q if isinstance(f, ValueFunction) else np.asarray(f, dtype=np.float64)


def exact_value(mdp: FiniteMdp, pi: Policy) -> ValueFunction:
    """Q^pi from (I - gamma P^pi) Q = r."""
    system = np.eye(mdp.num_pairs) - mdp.gamma * mdp.pair_transition(pi)
    q = linalg.solve(system, mdp.reward.reshape(-1))
    return ValueFunction(q.reshape(mdp.num_states, mdp.num_actions))


def apply_bellman(mdp: FiniteMdp, pi: Policy, f) -> ValueFunction:
    """(T^pi f)(s, a) = r(s, a) + gamma E_{s'} f(s', pi)."""
    q = _as_q(f)
    if q.shape != (mdp.num_states, mdp.num_actions):
        raise ShapeMismatchError(f"value table has shape {q.shape}, MDP has {(mdp.num_states, mdp.num_actions)}")
    return ValueFunction(mdp.reward + mdp.gamma * mdp.transition @ pi.average(q))


def occupancy(mdp: FiniteMdp, pi: Policy, p0: np.ndarray) -> StateActionDist:
    """d^pi_p0 = (1 - gamma) sum_h gamma^h d_h, via its linear fixed point."""
    start = (np.asarray(p0, dtype=np.float64)[:, None] * pi.probs).reshape(-1)
    system = np.eye(mdp.num_pairs) - mdp.gamma * mdp.pair_transition(pi).T
    weights = linalg.solve(system, (1.0 - mdp.gamma) * start)
    weights = np.clip(weights, 0.0, None).reshape(mdp.num_states, mdp.num_actions)
    return StateActionDist.normalized(weights)


def state_marginal(mdp: FiniteMdp, pi: Policy, p0: np.ndarray, step: int) -> np.ndarray:
    """Distribution of s_h when s_0 ~ p0 and actions follow pi."""
    if step < 0:
        raise ValueError(f"step must be non-negative, got {step}")
    chain = mdp.state_transition(pi)
    marginal = np.array(p0, dtype=np.float64)
    for _ in range(step):
        marginal = marginal @ chain
    return marginal


def sphere_directions(dim: int, n_probes: int) -> np.ndarray:
    """Unit directions: the 2d signed axes, then a Halton sequence mapped to the sphere.

    Every call returns a prefix of the same infinite sequence.
    """
    if n_probes < 2 * dim:
        raise InvalidDimensionError(f"need at least 2d = {2 * dim} probes, got {n_probes}")
    axes = np.concatenate([np.eye(dim), -np.eye(dim)])
    extra = n_probes - 2 * dim
    if extra == 0:
        return axes
    points = qmc.Halton(d=dim, scramble=False).random(extra + 1)[1:]
    gaussian = ndtri(np.clip(points, 1e-12, 1 - 1e-12))
    gaussian /= np.linalg.norm(gaussian, axis=1, keepdims=True)
    return np.concatenate([axes, gaussian])


def _lbc_direction_errors(mdp, nu, phi, pi_e, inner_phi, w_radius, n_probes) -> np.ndarray:
    """Per-direction min over the inner ball of ||w2^T inner_phi - T(w1^T phi)||_nu."""
    features = inner_phi.flat_table()
    outer_next = expected_next_feature(mdp, phi, pi_e).reshape(-1, phi.dim)
    rewards = mdp.reward.reshape(-1)
    weights = nu.flat
    gram, _ = regression_moments(features, rewards, weights)

    errors = []
    for direction in sphere_directions(phi.dim, n_probes):
        targets = rewards + outer_next @ (w_radius * direction)
        solution = ball_constrained_lstsq(gram, (features * weights[:, None]).T @ targets, w_radius)
        residual = features @ solution.theta - targets
        errors.append(math.sqrt(max(float(weights @ (residual * residual)), 0.0)))
    return np.asarray(errors)


def _warn_if_singular(phi: FeatureMap, nu: StateActionDist) -> None:
    report = covariance(phi, nu)
    if report.lambda_min <= SINGULAR_TOL:
        message = f"feature covariance under nu is singular (lambda_min={report.lambda_min:.3e}); using pseudoinverse"
        logger.warning(message)
        warnings.warn(message, DegenerateCovarianceWarning, stacklevel=3)


def exact_lbc_error(
    mdp: FiniteMdp,
    nu: StateActionDist,
    phi: FeatureMap,
    pi_e: Policy,
    w_radius: float,
    n_probes: Optional[int] = None,
) -> float:
    """Lower bound on max_{w1 in B_W} min_{w2 in B_W} ||w2^T phi - T(w1^T phi)||_nu.

    The outer max runs over the deterministic direction sequence scaled to the
    W-sphere; the inner min is exact. Nondecreasing in n_probes.
    """
    if w_radius <= 0:
        raise ValueError(f"w_radius must be positive, got {w_radius}")
    check_compatible(phi, mdp.num_states, mdp.num_actions, "MDP")
    n_probes = n_probes if n_probes is not None else 2 * phi.dim + DEFAULT_EXTRA_DIRECTIONS
    _warn_if_singular(phi, nu)
    return float(np.max(_lbc_direction_errors(mdp, nu, phi, pi_e, phi, w_radius, n_probes)))


def inherent_bellman_error(
    mdp: FiniteMdp,
    nu: StateActionDist,
    feature_class: Sequence[FeatureMap],
    pi_e: Policy,
    w_radius: float,
    n_probes: Optional[int] = None,
) -> float:
    """max over f in F of min over g in F of ||g - T f||^2_nu, F = {w^T phi : phi in class, w in B_W}."""
    if not feature_class:
        raise InvalidDimensionError("feature class is empty")
    worst = 0.0
    for outer in feature_class:
        count = n_probes if n_probes is not None else 2 * outer.dim + DEFAULT_EXTRA_DIRECTIONS
        per_direction = np.min(
            [_lbc_direction_errors(mdp, nu, outer, pi_e, inner, w_radius, count) for inner in feature_class],
            axis=0,
        )
        worst = max(worst, float(np.max(per_direction)) ** 2)
    return worst


def relative_condition_number(
    nu: StateActionDist,
    pi_e: Policy,
    p0: np.ndarray,
    phi: FeatureMap,
    mdp: FiniteMdp,
) -> float:
    """sup_x x^T Sigma_d x / x^T Sigma_nu x with d = d^{pi_e}_{p0}; +inf if Sigma_nu is singular."""
    sigma_nu = covariance(phi, nu)
    if sigma_nu.lambda_min <= SINGULAR_TOL:
        logger.warning("relative condition number undefined: Sigma_nu has lambda_min %.3e", sigma_nu.lambda_min)
        return math.inf
    sigma_d = covariance(phi, occupancy(mdp, pi_e, p0)).matrix
    return float(linalg.eigh(sigma_d, sigma_nu.matrix, eigvals_only=True)[-1])


def pdl_residual(mdp: FiniteMdp, pi: Policy, p0: np.ndarray, f, pi_prime: Optional[Policy] = None) -> float:
    """|V^pi(p0) - E_p0 f(s, pi') - E_{d^pi_p0}[T^{pi'} f - f(s, pi')] / (1 - gamma)|."""
    pi_prime = pi_prime if pi_prime is not None else pi
    q = _as_q(f)
    p0 = np.asarray(p0, dtype=np.float64)
    value = exact_value(mdp, pi).value_at(p0, pi)
    f_prime = pi_prime.average(q)
    advantage = apply_bellman(mdp, pi_prime, q).q - f_prime[:, None]
    weights = occupancy(mdp, pi, p0).weights
    rhs = float(p0 @ f_prime) + float(np.sum(weights * advantage)) / (1.0 - mdp.gamma)
    return abs(value - rhs)


def weighted_norm(values: np.ndarray, weights: np.ndarray) -> float:
    return math.sqrt(max(float(np.sum(weights * values * values)), 0.0))


@dataclass(frozen=True)
class ChainCheck:
    eta: float
    errors: List[float]  # ||f_k - T f_k|| for k = 1..K
    bounds: List[float]  # 4 eta / (1 - gamma) + gamma^(k/2)
    holds: bool


def bellman_chain_check(result, mdp: FiniteMdp, pi_e: Policy, p0: np.ndarray, tol: float = 1e-9) -> ChainCheck:
    """Per-step regression error eta and Bellman errors of the iterates, in L2(d^{pi_e}_{p0}).

    ``result`` is anything with ``q_tables()`` returning (K + 1, S, A) with
    the first table identically zero.
    """
    tables = np.asarray(result.q_tables())
    weights = occupancy(mdp, pi_e, p0).weights
    regression, errors = [], []
    for k in range(1, len(tables)):
        regression.append(weighted_norm(tables[k] - apply_bellman(mdp, pi_e, tables[k - 1]).q, weights))
        errors.append(weighted_norm(tables[k] - apply_bellman(mdp, pi_e, tables[k]).q, weights))
    eta = max(regression) if regression else 0.0
    bounds = [4.0 * eta / (1.0 - mdp.gamma) + mdp.gamma ** (k / 2.0) for k in range(1, len(tables))]
    holds = all(e <= b + tol for e, b in zip(errors, bounds))
    return ChainCheck(eta, errors, bounds, holds)


def verify_double_sampling(mdp: FiniteMdp, nu: StateActionDist, pi_e: Policy, phi: FeatureMap, witness: Witness):
    """(E||x - E y||^2, E||x - y||^2 - min_g E||g - y||^2) by enumerating next states.

    x = M phi(s, a) and y = gamma phi(s', pi_e); the minimizing g is E[y | s, a].
    """
    table = phi.flat_table()
    x = table @ witness.m.T
    y = mdp.gamma * phi.policy_table(pi_e)
    kernel = mdp.transition.reshape(mdp.num_pairs, mdp.num_states)
    mean_y = kernel @ y

    lhs = float(nu.flat @ np.sum((x - mean_y) ** 2, axis=-1))
    joint = (kernel * np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)).sum(axis=1)
    variance = (kernel * np.sum((mean_y[:, None, :] - y[None, :, :]) ** 2, axis=-1)).sum(axis=1)
    rhs = float(nu.flat @ (joint - variance))
    return lhs, rhs


def concentrability_coefficient(mdp: FiniteMdp, nu: StateActionDist, pi_e: Policy, p0: np.ndarray) -> float:
    """max_{s,a} d^{pi_e}_{p0}(s, a) / nu(s, a), +inf where nu misses occupied pairs."""
    occupied = occupancy(mdp, pi_e, p0).weights
    ratio = np.divide(occupied, nu.weights, out=np.zeros_like(occupied), where=nu.weights > 0)
    if np.any((nu.weights == 0) & (occupied > 0)):
        return math.inf
    return float(ratio.max())


def lspe_error_bound(gamma: float, k_iters: int, eps_nu: float, concentrability: float) -> float:
    """Horizon and approximation terms of the LSPE error bound (no statistical term)."""
    return gamma ** (k_iters / 2.0) / (1.0 - gamma) + 4.0 * math.sqrt(concentrability) * eps_nu / (1.0 - gamma) ** 2


@dataclass(frozen=True)
class WitnessCertificate:
    witness: Witness
    residual: float  # exact nu-weighted witness loss
    m_norm: float
    rho_norm: float
    w_radius: float  # ||rho|| / (1 - ||M||), inf if ||M|| >= 1
    check_radius: float  # radius the forward bound is tested at
    min_forward_radius: float  # ||rho|| / sqrt(1 - ||M||^2), inf if ||M|| >= 1
    forward_bound_holds: bool  # ||M|| <= sqrt(1 - ||rho||^2 / check_radius^2)
    lbc_error: float  # exact_lbc_error at w_radius, nan when w_radius is infinite

    def as_dict(self):
        return {
            "residual": self.residual,
            "m_norm": self.m_norm,
            "rho_norm": self.rho_norm,
            "w_radius": self.w_radius,
            "check_radius": self.check_radius,
            "min_forward_radius": self.min_forward_radius,
            "forward_bound_holds": self.forward_bound_holds,
            "lbc_error": self.lbc_error,
        }


def forward_bound_holds(m_norm: float, rho_norm: float, radius: float, tol: float = 1e-9) -> bool:
    """Necessary condition for theta -> rho + M theta to map the radius-W ball into itself."""
    if not radius > 0:
        return False
    return m_norm <= math.sqrt(max(1.0 - (rho_norm / radius) ** 2, 0.0)) + tol


def certify_witness(
    phi: FeatureMap,
    mdp: FiniteMdp,
    nu: StateActionDist,
    pi_e: Policy,
    n_probes: Optional[int] = None,
    radius: Optional[float] = None,
) -> WitnessCertificate:
    """Fit (rho, M) on exact moments and check that it certifies linear Bellman completeness.

    The forward bound is tested at ``radius`` (default 1 / (1 - gamma)), not at
    the implied radius, where it always holds.
    """
    witness = fit_witness(phi, nu, pi_e, mdp=mdp, constrain=False)
    residual = ideal_objective(phi, witness, mdp, nu, pi_e)
    implied = witness.implied_radius
    check_radius = radius if radius is not None else 1.0 / (1.0 - mdp.gamma)
    m_norm, rho_norm = witness.m_norm, witness.rho_norm
    min_forward = rho_norm / math.sqrt(1.0 - m_norm ** 2) if m_norm < 1.0 else math.inf
    forward = forward_bound_holds(m_norm, rho_norm, check_radius)
    if math.isfinite(implied) and implied > 0:
        lbc = exact_lbc_error(mdp, nu, phi, pi_e, implied, n_probes)
    else:
        lbc = math.nan
    logger.info("witness: residual %.3e, ||M|| %.4f, ||rho|| %.4f, W %.4f", residual, m_norm, rho_norm, implied)
    return WitnessCertificate(witness, residual, m_norm, rho_norm, implied, check_radius, min_forward, forward, lbc)
