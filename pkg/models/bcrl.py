"""Bellman-complete representation learning.

A representation phi is linearly Bellman complete when a witness (rho, M)
maps phi(s, a) to the reward and the expected next feature:

    [M; rho^T] phi(s, a) ~ [gamma * E phi(s', pi_e); r(s, a)].

The trainer alternates an inner fit of the witness (and of the variance
model g in the stochastic regime) with a gradient step on phi that lowers
the witness residual plus an optimal-design penalty on the feature
covariance, and keeps an EMA copy of phi as the regression target.
"""
import logging
import math
import warnings
from dataclasses import dataclass
from typing import Any, Dict, List, Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy import linalg

from models.dataset import OfflineDataset, batch_schedule
from models.features import (
    FeatureMap,
    NetworkFeatureMap,
    check_compatible,
    covariance_report,
    expected_next_feature,
)
from models.mdp import FiniteMdp, Policy, StateActionDist
from models.network import TrainableNet
from models.optim import make_optimizer
from models.regression import PINV_TOL, pinv_solve, regression_moments
from utils.exceptions import (
    DegenerateCovarianceWarning,
    InvalidDimensionError,
    NumericAbortError,
    ShapeMismatchError,
)
from utils.seeding import Stream

logger = logging.getLogger(__name__)

FEASIBILITY_TOL = 1e-9
TRACE_COLUMNS = [
    "step", "bc_loss", "correction", "penalty", "objective",
    "lambda_min", "logdet", "m_norm", "rho_norm", "refit",
]


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    steps: int = Field(500, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    ema_tau: float = Field(0.05, gt=0, le=1)
    design_weight: float = Field(0.1, ge=0)
    design_kind: Literal["none", "logdet", "min-eig"] = "logdet"
    design_ridge: float = Field(1e-6, gt=0)
    regime: Literal["deterministic", "stochastic"] = "stochastic"
    batch_size: int = Field(256, ge=1)
    seed: int = Field(0, ge=0)
    refit_every: int = Field(25, ge=0)
    bc_weight: float = Field(1.0, ge=0)
    use_target: bool = True
    optimizer: Literal["sgd", "adam"] = "adam"
    constrain_witness: bool = True
    rho_bound: Optional[float] = Field(None, gt=0)
    m_spectral_bound: float = Field(0.99, gt=0, lt=1)
    feature_dim: int = Field(8, ge=1)
    width: int = Field(64, ge=1)
    hidden_layers: int = Field(2, ge=0)
    init: Literal["orthogonal", "normal"] = "orthogonal"


@dataclass(frozen=True)
class Witness:
    rho: np.ndarray
    m: np.ndarray
    rho_bound: float = math.inf
    m_spectral_bound: float = math.inf
    projected: bool = False

    def __post_init__(self):
        rho = np.array(self.rho, dtype=np.float64)
        m = np.array(self.m, dtype=np.float64)
        if rho.ndim != 1 or m.shape != (rho.size, rho.size):
            raise ShapeMismatchError(f"witness needs rho of shape (d,) and M of shape (d, d), got {rho.shape}, {m.shape}")
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "m", m)
        if self.rho_norm > self.rho_bound + FEASIBILITY_TOL:
            raise ValueError(f"||rho|| = {self.rho_norm:.6f} exceeds its bound {self.rho_bound}")
        if self.m_norm > self.m_spectral_bound + FEASIBILITY_TOL:
            raise ValueError(f"||M||_2 = {self.m_norm:.6f} exceeds its bound {self.m_spectral_bound}")

    @property
    def dim(self) -> int:
        return self.rho.size

    @property
    def rho_norm(self) -> float:
        return float(np.linalg.norm(self.rho))

    @property
    def m_norm(self) -> float:
        return float(np.linalg.norm(self.m, 2))

    @property
    def implied_radius(self) -> float:
        """Smallest W with rho + M^T w in B_W for every w in B_W."""
        if self.m_norm >= 1.0:
            return math.inf
        return self.rho_norm / (1.0 - self.m_norm)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.rho, self.m.reshape(-1)])

    @classmethod
    def zeros(cls, dim: int, rho_bound: float = math.inf, m_spectral_bound: float = math.inf) -> "Witness":
        return cls(np.zeros(dim), np.zeros((dim, dim)), rho_bound, m_spectral_bound)

    @classmethod
    def from_flat(cls, vector: np.ndarray, dim: int, rho_bound: float = math.inf,
                  m_spectral_bound: float = math.inf, project: bool = False) -> "Witness":
        rho, m = vector[:dim], vector[dim:].reshape(dim, dim)
        if project:
            return project_witness(rho, m, rho_bound, m_spectral_bound)
        return cls(rho, m, rho_bound, m_spectral_bound)


def project_witness(rho: np.ndarray, m: np.ndarray, rho_bound: float, m_spectral_bound: float) -> Witness:
    """Clamp the singular values of M and rescale rho onto its ball."""
    projected = False
    if np.isfinite(m_spectral_bound):
        u, s, vt = linalg.svd(m)
        if s.max(initial=0.0) > m_spectral_bound:
            m = (u * np.minimum(s, m_spectral_bound)) @ vt
            projected = True
    norm = float(np.linalg.norm(rho))
    if np.isfinite(rho_bound) and norm > rho_bound:
        rho = rho * (rho_bound / norm)
        projected = True
    if projected:
        logger.debug("witness projected onto its feasible set")
    return Witness(rho, m, rho_bound, m_spectral_bound, projected)


class GNet(NetworkFeatureMap):
    """Variance model g(s, a) ~ gamma * E phi(s', pi_e), bounded by gamma."""

    @classmethod
    def build(cls, num_states: int, num_actions: int, dim: int, gamma: float, width: int = 64,
              hidden_layers: int = 2, init: str = "orthogonal", seed: int = 0) -> "GNet":
        sizes = [num_states + num_actions] + [width] * hidden_layers + [dim]
        net = TrainableNet(sizes, head="bounded", head_scale=gamma, init=init, seed=seed,
                            stream=Stream.GNET)
        return cls(net, num_states, num_actions)


@dataclass
class LossTerms:
    value: float
    grad_rho: np.ndarray
    grad_m: np.ndarray
    grad_features: np.ndarray  # w.r.t. phi(s_i, a_i), shape (n, d)
    grad_next: Optional[np.ndarray]  # w.r.t. y_i = gamma phi(s'_i, pi_e); None when detached
    grad_params: Optional[np.ndarray] = None
    bc_value: float = 0.0
    correction: float = 0.0
    grad_g_outputs: Optional[np.ndarray] = None  # of the g-regression term
    grad_g: Optional[np.ndarray] = None

    @property
    def grad_witness(self) -> np.ndarray:
        return np.concatenate([self.grad_rho, self.grad_m.reshape(-1)])


@dataclass
class PenaltyTerms:
    value: float
    grad_features: np.ndarray
    lambda_min: float
    logdet: float
    grad_params: Optional[np.ndarray] = None


def bc_terms(features: np.ndarray, rewards: np.ndarray, next_target: np.ndarray, witness: Witness):
    """Mean of ||M phi - y||^2 + (rho^T phi - r)^2 and its partial derivatives."""
    n = features.shape[0]
    e = features @ witness.m.T - next_target
    u = features @ witness.rho - rewards
    value = (float(np.sum(e * e)) + float(np.sum(u * u))) / n
    grad_m = (2.0 / n) * e.T @ features
    grad_rho = (2.0 / n) * features.T @ u
    grad_features = (2.0 / n) * (e @ witness.m + u[:, None] * witness.rho)
    grad_next = -(2.0 / n) * e
    return value, grad_rho, grad_m, grad_features, grad_next


def _next_target(phi: FeatureMap, target_phi: Optional[FeatureMap], batch: OfflineDataset, pi_e: Policy):
    source = target_phi if target_phi is not None else phi
    return batch.gamma * source.policy_table(pi_e)[batch.next_states]


def pullback(phi: NetworkFeatureMap, batch: OfflineDataset, grad_features: np.ndarray,
             grad_next: Optional[np.ndarray] = None, pi_e: Optional[Policy] = None) -> np.ndarray:
    """Parameter gradient given gradients w.r.t. batch features and next-state targets."""
    upstream = np.zeros((phi.num_states * phi.num_actions, phi.dim))
    np.add.at(upstream, batch.states * phi.num_actions + batch.actions, grad_features)
    if grad_next is not None:
        per_state = np.zeros((phi.num_states, phi.dim))
        np.add.at(per_state, batch.next_states, batch.gamma * grad_next)
        upstream += (pi_e.probs[:, :, None] * per_state[:, None, :]).reshape(-1, phi.dim)
    return phi.table_vjp(upstream)


def bc_loss(
    phi: FeatureMap,
    witness: Witness,
    batch: OfflineDataset,
    pi_e: Policy,
    target_phi: Optional[FeatureMap] = None,
    next_target: Optional[np.ndarray] = None,
    with_param_grad: bool = True,
) -> LossTerms:
    """Witness residual on a batch.

    ``target_phi=None`` takes next-state features from phi itself, and they
    receive gradient. A target map, or an explicit ``next_target`` array, is
    treated as a constant.
    """
    check_compatible(phi, batch.num_states, batch.num_actions, "batch")
    features = phi.batch(batch.states, batch.actions)
    detached = next_target is not None or target_phi is not None
    if next_target is None:
        next_target = _next_target(phi, target_phi, batch, pi_e)
    value, grad_rho, grad_m, grad_features, grad_next = bc_terms(features, batch.rewards, next_target, witness)
    terms = LossTerms(value, grad_rho, grad_m, grad_features, None if detached else grad_next, bc_value=value)
    if with_param_grad and isinstance(phi, NetworkFeatureMap):
        terms.grad_params = pullback(phi, batch, terms.grad_features, terms.grad_next, pi_e)
    return terms


def double_sampling_corrected_loss(
    phi: FeatureMap,
    witness: Witness,
    g: FeatureMap,
    batch: OfflineDataset,
    pi_e: Policy,
    target_phi: Optional[FeatureMap] = None,
    next_target: Optional[np.ndarray] = None,
    with_param_grad: bool = True,
) -> LossTerms:
    """bc_loss minus the g-regression term mean ||g(s, a) - y||^2.

    ``grad_g`` is the gradient of the g-regression term itself, which is what
    g minimizes.
    """
    terms = bc_loss(phi, witness, batch, pi_e, target_phi, next_target, with_param_grad=False)
    if next_target is None:
        next_target = _next_target(phi, target_phi, batch, pi_e)
    n = len(batch)
    diff = g.batch(batch.states, batch.actions) - next_target
    correction = float(np.sum(diff * diff)) / n
    terms.correction = correction
    terms.value = terms.bc_value - correction
    terms.grad_g_outputs = (2.0 / n) * diff
    if terms.grad_next is not None:
        terms.grad_next = terms.grad_next + terms.grad_g_outputs
    if isinstance(g, NetworkFeatureMap):
        terms.grad_g = g.vjp(batch.states, batch.actions, terms.grad_g_outputs)
    if with_param_grad and isinstance(phi, NetworkFeatureMap):
        terms.grad_params = pullback(phi, batch, terms.grad_features, terms.grad_next, pi_e)
    return terms


def design_penalty_terms(features: np.ndarray, kind: str, ridge: float = 1e-6) -> PenaltyTerms:
    """-logdet(Sigma + ridge I) or -lambda_min(Sigma) for Sigma = F^T F / n.

    The min-eig gradient is a subgradient at repeated eigenvalues; it uses the
    first eigenvector returned by the symmetric solver.
    """
    n, dim = features.shape
    if n < dim:
        logger.warning("design batch of %d rows is smaller than d=%d; covariance is singular", n, dim)
    sigma = features.T @ features / n
    report = covariance_report(sigma)
    if kind == "logdet":
        shifted = sigma + ridge * np.eye(dim)
        _, logdet = np.linalg.slogdet(shifted)
        grad = -(2.0 / n) * features @ linalg.inv(shifted)
        return PenaltyTerms(-float(logdet), grad, report.lambda_min, report.logdet)
    if kind == "min-eig":
        eigenvalues, eigenvectors = linalg.eigh(0.5 * (sigma + sigma.T))
        v = eigenvectors[:, 0]
        grad = -(2.0 / n) * np.outer(features @ v, v)
        return PenaltyTerms(-float(eigenvalues[0]), grad, report.lambda_min, report.logdet)
    if kind == "none":
        return PenaltyTerms(0.0, np.zeros_like(features), report.lambda_min, report.logdet)
    raise ValueError(f"unknown design kind {kind!r}")


def design_penalty(phi: FeatureMap, batch: OfflineDataset, kind: str, ridge: float = 1e-6) -> PenaltyTerms:
    terms = design_penalty_terms(phi.batch(batch.states, batch.actions), kind, ridge)
    if isinstance(phi, NetworkFeatureMap):
        terms.grad_params = pullback(phi, batch, terms.grad_features)
    return terms


def _regression_problem(phi, source, pi_e, mdp, target_phi):
    target = target_phi if target_phi is not None else phi
    if isinstance(source, StateActionDist):
        if mdp is None:
            raise ValueError("fitting on an exact distribution needs the MDP")
        features = phi.flat_table()
        next_features = expected_next_feature(mdp, target, pi_e).reshape(-1, phi.dim)
        return features, next_features, mdp.reward.reshape(-1), source.flat
    if len(source) == 0:
        raise InvalidDimensionError("cannot fit a witness on an empty dataset")
    features = phi.batch(source.states, source.actions)
    return features, _next_target(phi, target_phi, source, pi_e), source.rewards, None


def fit_witness(
    phi: FeatureMap,
    source: Union[OfflineDataset, StateActionDist],
    pi_e: Policy,
    mdp: Optional[FiniteMdp] = None,
    target_phi: Optional[FeatureMap] = None,
    rho_bound: float = math.inf,
    m_spectral_bound: float = 0.99,
    constrain: bool = True,
) -> Witness:
    """Least squares for (rho, M), then projection onto the feasible set."""
    features, next_features, rewards, weights = _regression_problem(phi, source, pi_e, mdp, target_phi)
    gram, moments = regression_moments(features, np.column_stack([next_features, rewards]), weights)
    rank = int(np.sum(linalg.eigh(0.5 * (gram + gram.T), eigvals_only=True) > PINV_TOL))
    if rank < phi.dim:
        message = f"witness design has rank {rank} < d={phi.dim}; using the pseudoinverse"
        logger.warning(message)
        warnings.warn(message, DegenerateCovarianceWarning, stacklevel=2)
    solution = pinv_solve(gram, moments)
    m, rho = solution[:, :phi.dim].T, solution[:, phi.dim]
    if not constrain:
        return Witness(rho, m)
    return project_witness(rho, m, rho_bound, m_spectral_bound)


def _witness_targets(phi, witness, mdp, pi_e, target_phi):
    table = phi.flat_table()
    x = table @ witness.m.T
    u = table @ witness.rho - mdp.reward.reshape(-1)
    target = target_phi if target_phi is not None else phi
    y = mdp.gamma * target.policy_table(pi_e)  # (S, d), one row per next state
    return x, u, y


def ideal_objective(phi: FeatureMap, witness: Witness, mdp: FiniteMdp, nu: StateActionDist,
                    pi_e: Policy, target_phi: Optional[FeatureMap] = None) -> float:
    """E_nu ||M phi - gamma E phi(s', pi_e)||^2 + (rho^T phi - r)^2 with exact expectations."""
    x, u, _ = _witness_targets(phi, witness, mdp, pi_e, target_phi)
    expected = expected_next_feature(mdp, target_phi if target_phi is not None else phi, pi_e)
    sq_next = np.sum((x - expected.reshape(x.shape)) ** 2, axis=-1)
    return float(nu.flat @ (sq_next + u * u))


def expected_corrected_objective(phi: FeatureMap, witness: Witness, mdp: FiniteMdp, nu: StateActionDist,
                                 pi_e: Policy, g_table: np.ndarray,
                                 target_phi: Optional[FeatureMap] = None) -> float:
    """Exact expectation of the corrected loss for a fixed g given as an (S, A, d) table."""
    x, u, y = _witness_targets(phi, witness, mdp, pi_e, target_phi)
    kernel = mdp.transition.reshape(mdp.num_pairs, mdp.num_states)
    g = np.asarray(g_table).reshape(x.shape)
    sq_next = np.sum((x[:, None, :] - y[None, :, :]) ** 2, axis=-1)
    sq_g = np.sum((g[:, None, :] - y[None, :, :]) ** 2, axis=-1)
    return float(nu.flat @ ((kernel * sq_next).sum(axis=1) - (kernel * sq_g).sum(axis=1) + u * u))


@dataclass(frozen=True)
class FeasibilityReport:
    lambda_min: float
    threshold: float
    feasible: bool


def design_feasibility(phi: FeatureMap, data: OfflineDataset, beta: float) -> FeasibilityReport:
    """Checks the E-optimal constraint lambda_min(Sigma_hat(phi)) >= beta / 2."""
    features = phi.batch(data.states, data.actions)
    lambda_min = covariance_report(features.T @ features / len(data)).lambda_min
    return FeasibilityReport(lambda_min, beta / 2.0, lambda_min >= beta / 2.0)


@dataclass
class TrainResult:
    phi: NetworkFeatureMap
    target: Optional[NetworkFeatureMap]
    witness: Witness
    g: Optional[GNet]
    trace: pd.DataFrame
    config: TrainConfig

    @property
    def final_row(self) -> Dict[str, Any]:
        return self.trace.iloc[-1].to_dict()


def _as_feature_map(phi: Union[NetworkFeatureMap, TrainableNet], data: OfflineDataset) -> NetworkFeatureMap:
    if isinstance(phi, TrainableNet):
        return NetworkFeatureMap(phi, data.num_states, data.num_actions)
    return phi


def build_feature_net(config: TrainConfig, num_states: int, num_actions: int) -> NetworkFeatureMap:
    return NetworkFeatureMap.build(
        num_states, num_actions, config.feature_dim, width=config.width,
        hidden_layers=config.hidden_layers, init=config.init, seed=config.seed,
    )


def train(
    phi: Union[NetworkFeatureMap, TrainableNet],
    config: TrainConfig,
    data: OfflineDataset,
    pi_e: Policy,
) -> TrainResult:
    phi = _as_feature_map(phi, data)
    check_compatible(phi, data.num_states, data.num_actions, "dataset")
    if len(data) < 2 * config.batch_size:
        raise InvalidDimensionError(f"training needs at least {2 * config.batch_size} tuples, got {len(data)}")

    online = phi.copy()
    target = online.copy() if config.use_target else None
    dim = online.dim
    rho_bound = config.rho_bound if (config.constrain_witness and config.rho_bound) else math.inf
    m_bound = config.m_spectral_bound if config.constrain_witness else math.inf
    witness = Witness.zeros(dim, rho_bound, m_bound)
    stochastic = config.regime == "stochastic"
    g = None
    if stochastic:
        g = GNet.build(data.num_states, data.num_actions, dim, data.gamma, width=config.width,
                       hidden_layers=config.hidden_layers, init=config.init, seed=config.seed)

    phi_opt = make_optimizer(config.optimizer, config.learning_rate)
    witness_opt = make_optimizer(config.optimizer, config.learning_rate)
    g_opt = make_optimizer(config.optimizer, config.learning_rate)
    penalize = config.design_kind != "none" and config.design_weight > 0
    schedule = batch_schedule(len(data), config.batch_size, config.seed)

    logger.info("training %s-regime representation for %d steps on %d tuples", config.regime, config.steps, len(data))
    rows: List[Dict[str, Any]] = []
    for step in range(config.steps):
        batch = data.subset(next(schedule))

        refit = config.refit_every > 0 and step % config.refit_every == 0
        if refit:
            witness = fit_witness(online, data, pi_e, target_phi=target, rho_bound=rho_bound,
                                  m_spectral_bound=m_bound, constrain=config.constrain_witness)
        else:
            terms = bc_loss(online, witness, batch, pi_e, target_phi=target, with_param_grad=False)
            vector = witness.flat()
            witness_opt.step(vector, terms.grad_witness)
            witness = Witness.from_flat(vector, dim, rho_bound, m_bound, project=config.constrain_witness)

        if stochastic:
            terms = double_sampling_corrected_loss(online, witness, g, batch, pi_e, target_phi=target,
                                                   with_param_grad=False)
            g_opt.step(g.net.params, terms.grad_g)
            terms = double_sampling_corrected_loss(online, witness, g, batch, pi_e, target_phi=target,
                                                   with_param_grad=False)
        else:
            terms = bc_loss(online, witness, batch, pi_e, target_phi=target, with_param_grad=False)

        penalty = design_penalty_terms(online.batch(batch.states, batch.actions),
                                       config.design_kind if penalize else "none", config.design_ridge)
        objective = config.bc_weight * terms.value + config.design_weight * penalty.value
        grad_features = config.bc_weight * terms.grad_features + config.design_weight * penalty.grad_features
        grad_next = None if terms.grad_next is None else config.bc_weight * terms.grad_next

        row = {
            "step": step,
            "bc_loss": terms.bc_value,
            "correction": terms.correction,
            "penalty": penalty.value,
            "objective": objective,
            "lambda_min": penalty.lambda_min,
            "logdet": penalty.logdet,
            "m_norm": witness.m_norm,
            "rho_norm": witness.rho_norm,
            "refit": refit,
        }
        if not np.isfinite(objective):
            rows.append(row)
            raise NumericAbortError(f"non-finite objective at step {step}", rows)

        grad = pullback(online, batch, grad_features, grad_next, pi_e)
        if not np.all(np.isfinite(grad)):
            rows.append(row)
            raise NumericAbortError(f"non-finite gradient at step {step}", rows)
        phi_opt.step(online.net.params, grad)
        if target is not None:
            target.net.ema_update(online.net, config.ema_tau)

        rows.append(row)
        if step % 100 == 0:
            logger.debug("step %d: bc %.4e correction %.4e penalty %.4e", step, terms.bc_value,
                         terms.correction, penalty.value)

    logger.info("training finished: final bc loss %.4e", rows[-1]["bc_loss"])
    return TrainResult(online, target, witness, g, pd.DataFrame(rows, columns=TRACE_COLUMNS), config)
