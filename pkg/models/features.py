"""Feature maps over finite state-action spaces and covariance diagnostics."""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from models.mdp import FiniteMdp, Policy, StateActionDist
from models.network import TrainableNet
from utils.exceptions import InvalidDimensionError, ShapeMismatchError
from utils.seeding import Stream, make_rng

logger = logging.getLogger(__name__)

NORM_TOL = 1e-9
SINGULAR_TOL = 1e-12
FEATURE_KINDS = ("one-hot", "low-rank-truth", "random-fixed", "trainable")


class FeatureMap(ABC):
    """phi: (s, a) -> R^d with ||phi(s, a)||_2 <= 1."""

    kind: str
    dim: int
    num_states: int
    num_actions: int

    @abstractmethod
    def batch(self, states: np.ndarray, actions: np.ndarray) -> np.ndarray:
        """Features for paired index arrays, shape (n, d)."""

    def evaluate(self, state: int, action: int) -> np.ndarray:
        return self.batch(np.array([state]), np.array([action]))[0]

    def table(self) -> np.ndarray:
        """All features as an (S, A, d) array."""
        states, actions = np.divmod(np.arange(self.num_states * self.num_actions), self.num_actions)
        return self.batch(states, actions).reshape(self.num_states, self.num_actions, self.dim)

    def flat_table(self) -> np.ndarray:
        return self.table().reshape(-1, self.dim)

    def policy_table(self, pi: Policy) -> np.ndarray:
        """phi(s, pi) = sum_a pi(a|s) phi(s, a), shape (S, d)."""
        return pi.average(self.table())

    def freeze(self) -> "TabularFeatureMap":
        return TabularFeatureMap(self.table(), kind=self.kind)


class TabularFeatureMap(FeatureMap):
    def __init__(self, table: np.ndarray, kind: str = "one-hot"):
        table = np.array(table, dtype=np.float64)
        if table.ndim != 3 or min(table.shape) < 1:
            raise InvalidDimensionError(f"feature table must be (S, A, d), got {table.shape}")
        if kind not in FEATURE_KINDS:
            raise ValueError(f"unknown feature kind {kind!r}")
        worst = float(np.max(np.linalg.norm(table, axis=-1)))
        if worst > 1.0 + NORM_TOL:
            raise ValueError(f"feature norms must be at most 1 (found {worst:.6f})")
        table.setflags(write=False)
        self._table = table
        self.kind = kind
        self.num_states, self.num_actions, self.dim = table.shape

    def batch(self, states, actions):
        return self._table[np.asarray(states, dtype=int), np.asarray(actions, dtype=int)]

    def table(self):
        return self._table

    @classmethod
    def one_hot(cls, num_states: int, num_actions: int) -> "TabularFeatureMap":
        pairs = num_states * num_actions
        return cls(np.eye(pairs).reshape(num_states, num_actions, pairs), kind="one-hot")

    @classmethod
    def random_fixed(cls, num_states: int, num_actions: int, dim: int, seed: int) -> "TabularFeatureMap":
        rng = make_rng(seed, Stream.INIT)
        table = rng.standard_normal((num_states, num_actions, dim))
        table /= np.max(np.linalg.norm(table, axis=-1))
        return cls(table, kind="random-fixed")

    @classmethod
    def constant(cls, num_states: int, num_actions: int, dim: int, axis: int = 0) -> "TabularFeatureMap":
        table = np.zeros((num_states, num_actions, dim))
        table[..., axis] = 1.0
        return cls(table, kind="random-fixed")

    @classmethod
    def rank_one(cls, num_states: int, num_actions: int, dim: int, seed: int) -> "TabularFeatureMap":
        """phi(s, a) = c(s, a) u for a random unit direction u."""
        rng = make_rng(seed, Stream.INIT)
        direction = rng.standard_normal(dim)
        direction /= np.linalg.norm(direction)
        scale = rng.uniform(-1.0, 1.0, size=(num_states, num_actions))
        return cls(scale[..., None] * direction, kind="random-fixed")


def encode_pairs(states, actions, num_states: int, num_actions: int, encoding: str = "concat") -> np.ndarray:
    states = np.asarray(states, dtype=int)
    actions = np.asarray(actions, dtype=int)
    if encoding == "concat":
        out = np.zeros((states.size, num_states + num_actions))
        rows = np.arange(states.size)
        out[rows, states] = 1.0
        out[rows, num_states + actions] = 1.0
        return out
    if encoding == "pair":
        out = np.zeros((states.size, num_states * num_actions))
        out[np.arange(states.size), states * num_actions + actions] = 1.0
        return out
    raise ValueError(f"unknown encoding {encoding!r}")


class NetworkFeatureMap(FeatureMap):
    """A trainable feature map: net(one-hot(s) ++ one-hot(a)).

    The norm bound comes from the net's bounded head, so the head scale must
    not exceed 1.
    """

    kind = "trainable"

    def __init__(self, net: TrainableNet, num_states: int, num_actions: int, encoding: str = "concat"):
        expected = num_states + num_actions if encoding == "concat" else num_states * num_actions
        if net.input_dim != expected:
            raise ShapeMismatchError(f"{encoding} encoding needs input dim {expected}, net has {net.input_dim}")
        if net.head == "bounded" and net.head_scale > 1.0 + NORM_TOL:
            raise ValueError("feature networks need a bounded head with scale at most 1")
        self.net = net
        self.num_states = num_states
        self.num_actions = num_actions
        self.encoding = encoding
        self.dim = net.output_dim

    @classmethod
    def build(
        cls,
        num_states: int,
        num_actions: int,
        dim: int,
        width: int = 64,
        hidden_layers: int = 2,
        head_scale: float = 1.0,
        init: str = "orthogonal",
        seed: int = 0,
    ) -> "NetworkFeatureMap":
        sizes = [num_states + num_actions] + [width] * hidden_layers + [dim]
        net = TrainableNet(sizes, head="bounded", head_scale=head_scale, init=init, seed=seed)
        return cls(net, num_states, num_actions)

    def inputs(self, states, actions) -> np.ndarray:
        return encode_pairs(states, actions, self.num_states, self.num_actions, self.encoding)

    def batch(self, states, actions):
        return self.net.forward(self.inputs(states, actions))

    def vjp(self, states, actions, upstream: np.ndarray) -> np.ndarray:
        """Parameter gradient of sum(upstream * batch(states, actions))."""
        self.net.forward(self.inputs(states, actions))
        return self.net.backward(upstream)

    def table_vjp(self, upstream: np.ndarray) -> np.ndarray:
        """Parameter gradient of sum(upstream * table()), upstream shaped (S, A, d) or (S*A, d)."""
        states, actions = np.divmod(np.arange(self.num_states * self.num_actions), self.num_actions)
        return self.vjp(states, actions, np.asarray(upstream).reshape(-1, self.dim))

    def copy(self) -> "NetworkFeatureMap":
        return type(self)(self.net.copy(), self.num_states, self.num_actions, self.encoding)

    def freeze(self) -> TabularFeatureMap:
        return TabularFeatureMap(self.table(), kind="trainable")


@dataclass(frozen=True)
class CovarianceReport:
    matrix: np.ndarray
    eigenvalues: np.ndarray  # descending
    lambda_min: float
    condition_number: float
    logdet: float

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def as_dict(self):
        return {
            "lambda_min": self.lambda_min,
            "lambda_max": float(self.eigenvalues[0]),
            "condition_number": self.condition_number,
            "logdet": self.logdet,
        }


def covariance_report(matrix: np.ndarray) -> CovarianceReport:
    matrix = 0.5 * (matrix + matrix.T)
    eigenvalues = linalg.eigh(matrix, eigvals_only=True)[::-1]
    # symmetric noise can push zero eigenvalues slightly negative
    eigenvalues = np.where(eigenvalues < 0.0, 0.0, eigenvalues)
    lambda_min = float(eigenvalues[-1])
    if lambda_min <= SINGULAR_TOL:
        logdet = -np.inf
        condition = np.inf
    else:
        logdet = float(np.sum(np.log(eigenvalues)))
        condition = float(eigenvalues[0] / lambda_min)
    return CovarianceReport(matrix, eigenvalues, lambda_min, condition, logdet)


def covariance(phi: FeatureMap, source) -> CovarianceReport:
    """Empirical covariance over a dataset or exact covariance under a distribution."""
    if isinstance(source, StateActionDist):
        if source.shape != (phi.num_states, phi.num_actions):
            raise ShapeMismatchError(f"distribution shape {source.shape} does not match the feature map")
        features = phi.flat_table()
        matrix = features.T @ (source.flat[:, None] * features)
    else:
        if len(source) == 0:
            raise InvalidDimensionError("cannot compute a covariance over an empty dataset")
        features = phi.batch(source.states, source.actions)
        matrix = features.T @ features / len(source)
    return covariance_report(matrix)


def expected_next_feature(mdp: FiniteMdp, phi: FeatureMap, pi_e: Policy) -> np.ndarray:
    """gamma * E_{s' ~ P(s, a)} phi(s', pi_e) for every pair, shape (S, A, d)."""
    return mdp.gamma * np.einsum("sat,td->sad", mdp.transition, phi.policy_table(pi_e))


def feature_norm_bound(phi: FeatureMap) -> float:
    return float(np.max(np.linalg.norm(phi.table(), axis=-1)))


def check_compatible(phi: FeatureMap, num_states: int, num_actions: int, what: Optional[str] = None) -> None:
    if (phi.num_states, phi.num_actions) != (num_states, num_actions):
        raise ShapeMismatchError(
            f"{what or 'input'} has {num_states}x{num_actions} pairs, feature map has "
            f"{phi.num_states}x{phi.num_actions}"
        )
