"""Fitted Q evaluation over {w^T phi : phi a network} and the BCRL ablations."""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
import pandas as pd

from models.bcrl import TrainConfig
from models.dataset import OfflineDataset, batch_schedule
from models.features import NetworkFeatureMap
from models.mdp import Policy
from models.network import TrainableNet
from models.optim import Sgd
from utils.exceptions import InvalidDimensionError, NumericAbortError

logger = logging.getLogger(__name__)

ABLATIONS = ("no-design", "design-only")
DEFAULT_DESIGN_WEIGHT = 0.1
FQE_TRACE_COLUMNS = ["method", "iteration", "step", "loss"]


@dataclass
class FqeResult:
    tables: np.ndarray  # (K + 1, S, A), tables[0] is the initial Q (zero readout)
    pi_e: Policy
    gamma: float
    residuals: List[float]
    trace: pd.DataFrame
    method: str = "fqe"
    net: Optional[TrainableNet] = None  # the trained copy; the caller's net is untouched

    @property
    def k_iters(self) -> int:
        return len(self.tables) - 1

    def q_tables(self) -> np.ndarray:
        return self.tables

    def q_table(self, iteration: int = -1) -> np.ndarray:
        return self.tables[iteration]

    def value_at(self, p0: np.ndarray, iteration: int = -1) -> float:
        return float(np.asarray(p0) @ self.pi_e.average(self.tables[iteration]))

    def values_by_iteration(self, p0: np.ndarray) -> np.ndarray:
        return np.array([self.value_at(p0, k) for k in range(len(self.tables))])


def fqe_regression_terms(features: NetworkFeatureMap, readout: np.ndarray, states: np.ndarray,
                         actions: np.ndarray, targets: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """Loss mean((w^T net(s, a) - y)^2) and its gradients w.r.t. the net parameters and w."""
    batch_features = features.batch(states, actions)
    error = batch_features @ readout - targets
    scaled = (2.0 / len(targets)) * error
    grad_readout = batch_features.T @ scaled
    grad_net = features.net.backward(np.outer(scaled, readout))
    return float(np.mean(error * error)), grad_net, grad_readout


def fqe_run(
    net: TrainableNet,
    data: OfflineDataset,
    pi_e: Policy,
    k_iters: int,
    inner_steps: int,
    seed: int,
    learning_rate: float = 0.05,
    batch_size: Optional[int] = None,
    freeze_features: bool = False,
    encoding: str = "concat",
) -> FqeResult:
    """Iterated regression of Q(s, a) = w^T net(s, a) onto r + gamma * Qbar(s', pi_e).

    Qbar is the previous outer iteration's network, frozen. The readout starts
    at zero, so the first iterate is Q_0 = 0. With ``freeze_features`` only the
    readout is trained and FQE reduces to unconstrained LSPE on the net's
    features.
    """
    if k_iters < 1 or inner_steps < 1:
        raise InvalidDimensionError("FQE needs at least one outer iteration and one inner step")
    features = NetworkFeatureMap(net.copy(), data.num_states, data.num_actions, encoding)
    readout = np.zeros(features.dim)
    net_opt, readout_opt = Sgd(learning_rate), Sgd(learning_rate)
    schedule = batch_schedule(len(data), batch_size or len(data), seed)

    tables = [features.table() @ readout]
    residuals: List[float] = []
    rows = []
    step = 0
    for iteration in range(1, k_iters + 1):
        frozen_values = pi_e.average(tables[-1])
        targets = data.rewards + data.gamma * frozen_values[data.next_states]
        for _ in range(inner_steps):
            idx = next(schedule)
            features.net.zero_grad()
            loss, _, grad_readout = fqe_regression_terms(
                features, readout, data.states[idx], data.actions[idx], targets[idx]
            )
            if not np.isfinite(loss):
                raise NumericAbortError(f"non-finite FQE loss at iteration {iteration}", rows)
            if not freeze_features:
                net_opt.step(features.net.params, features.net.grad)
            readout_opt.step(readout, grad_readout)
            step += 1

        table = features.table() @ readout
        fitted = table[data.states, data.actions] - targets
        residuals.append(float(np.mean(fitted * fitted)))
        rows.append({"method": "fqe", "iteration": iteration, "step": step, "loss": residuals[-1]})
        tables.append(table)
        logger.debug("FQE iteration %d: regression loss %.3e", iteration, residuals[-1])

    logger.info("FQE finished %d iterations", k_iters)
    trace = pd.DataFrame(rows, columns=FQE_TRACE_COLUMNS)
    return FqeResult(np.array(tables), pi_e, data.gamma, residuals, trace, net=features.net)


def ablation_config(kind: str, reference: TrainConfig) -> TrainConfig:
    """The reference config with the design term (no-design) or the BC term (design-only) removed."""
    if kind == "no-design":
        return reference.model_copy(update={"design_weight": 0.0})
    if kind == "design-only":
        weight = reference.design_weight if reference.design_weight > 0 else DEFAULT_DESIGN_WEIGHT
        design_kind = reference.design_kind if reference.design_kind != "none" else "logdet"
        return reference.model_copy(update={"bc_weight": 0.0, "design_weight": weight, "design_kind": design_kind})
    raise ValueError(f"unknown ablation {kind!r}; expected one of {ABLATIONS}")
