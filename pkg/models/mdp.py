"""Finite discounted MDPs, policies and state-action distributions.

All three types are frozen dataclasses whose arrays are made read-only at
construction, so they can be shared freely across threads.
"""
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Union

import numpy as np

from utils.exceptions import (
    EmptySupportError,
    InvalidDimensionError,
    InvalidGammaError,
    ShapeMismatchError,
)

ROW_TOL = 1e-12
MDP_DOCUMENT_VERSION = 1


def _frozen(array: np.ndarray) -> np.ndarray:
    out = np.array(array, dtype=np.float64, copy=True)
    out.setflags(write=False)
    return out


def _check_stochastic(rows: np.ndarray, what: str) -> None:
    if np.any(rows < 0):
        raise ValueError(f"{what} has negative entries")
    sums = rows.sum(axis=-1)
    worst = float(np.max(np.abs(sums - 1.0))) if sums.size else 0.0
    if worst > ROW_TOL:
        raise ValueError(f"{what} rows must sum to 1 (worst deviation {worst:.3e})")


@dataclass(frozen=True)
class FiniteMdp:
    transition: np.ndarray  # P[s, a, s']
    reward: np.ndarray  # r[s, a]
    gamma: float
    initial_dist: np.ndarray  # d0[s]

    def __post_init__(self):
        transition = np.asarray(self.transition, dtype=np.float64)
        reward = np.asarray(self.reward, dtype=np.float64)
        initial = np.asarray(self.initial_dist, dtype=np.float64)

        if transition.ndim != 3 or transition.shape[0] != transition.shape[2]:
            raise ShapeMismatchError(f"transition must have shape (S, A, S), got {transition.shape}")
        num_states, num_actions = transition.shape[:2]
        if num_states < 1 or num_actions < 1:
            raise InvalidDimensionError("an MDP needs at least one state and one action")
        if reward.shape != (num_states, num_actions):
            raise ShapeMismatchError(f"reward must have shape {(num_states, num_actions)}, got {reward.shape}")
        if initial.shape != (num_states,):
            raise ShapeMismatchError(f"initial_dist must have shape ({num_states},), got {initial.shape}")
        # gamma = 0 is admitted for the one-step (contextual bandit) variants.
        if not 0.0 <= float(self.gamma) < 1.0:
            raise InvalidGammaError(f"gamma must lie in [0, 1), got {self.gamma}")
        if np.any(np.abs(reward) > 1.0):
            raise ValueError("rewards must be bounded by 1 in absolute value")

        _check_stochastic(transition, "transition")
        _check_stochastic(initial, "initial_dist")

        object.__setattr__(self, "transition", _frozen(transition))
        object.__setattr__(self, "reward", _frozen(reward))
        object.__setattr__(self, "initial_dist", _frozen(initial))
        object.__setattr__(self, "gamma", float(self.gamma))

    @property
    def num_states(self) -> int:
        return self.transition.shape[0]

    @property
    def num_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def num_pairs(self) -> int:
        return self.num_states * self.num_actions

    def with_gamma(self, gamma: float) -> "FiniteMdp":
        return FiniteMdp(self.transition, self.reward, gamma, self.initial_dist)

    def with_reward(self, reward: np.ndarray) -> "FiniteMdp":
        return FiniteMdp(self.transition, reward, self.gamma, self.initial_dist)

    def pair_transition(self, policy: "Policy") -> np.ndarray:
        """P^pi over state-action pairs: ((s, a), (s', a')) -> P(s'|s,a) pi(a'|s')."""
        flat = self.transition.reshape(self.num_pairs, self.num_states)
        return (flat[:, :, None] * policy.probs[None, :, :]).reshape(self.num_pairs, self.num_pairs)

    def state_transition(self, policy: "Policy") -> np.ndarray:
        """State chain under pi: s -> s'."""
        return np.einsum("sa,sat->st", policy.probs, self.transition)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.asarray(self.transition.shape, dtype="<i8").tobytes())
        for array in (self.transition, self.reward, self.initial_dist):
            digest.update(np.ascontiguousarray(array, dtype="<f8").tobytes())
        digest.update(np.asarray([self.gamma], dtype="<f8").tobytes())
        return digest.hexdigest()

    def to_document(self) -> Dict[str, Any]:
        # json renders floats with repr(), the shortest exact round-trip decimal.
        return {
            "format_version": MDP_DOCUMENT_VERSION,
            "num_states": self.num_states,
            "num_actions": self.num_actions,
            "gamma": self.gamma,
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "initial_dist": self.initial_dist.tolist(),
            "checksum": self.checksum(),
        }

    @classmethod
    def from_document(cls, document: Dict[str, Any]) -> "FiniteMdp":
        if document.get("format_version") != MDP_DOCUMENT_VERSION:
            raise ValueError(f"unsupported MDP document version {document.get('format_version')!r}")
        mdp = cls(
            transition=np.asarray(document["transition"], dtype=np.float64),
            reward=np.asarray(document["reward"], dtype=np.float64),
            gamma=float(document["gamma"]),
            initial_dist=np.asarray(document["initial_dist"], dtype=np.float64),
        )
        expected = document.get("checksum")
        if expected is not None and expected != mdp.checksum():
            raise ValueError("MDP document checksum does not match its contents")
        return mdp


@dataclass(frozen=True)
class Policy:
    probs: np.ndarray  # pi[s, a]

    def __post_init__(self):
        probs = np.asarray(self.probs, dtype=np.float64)
        if probs.ndim != 2 or min(probs.shape) < 1:
            raise InvalidDimensionError(f"policy table must be (S, A), got {probs.shape}")
        _check_stochastic(probs, "policy")
        object.__setattr__(self, "probs", _frozen(probs))

    @property
    def num_states(self) -> int:
        return self.probs.shape[0]

    @property
    def num_actions(self) -> int:
        return self.probs.shape[1]

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "Policy":
        return cls(np.full((num_states, num_actions), 1.0 / num_actions))

    @classmethod
    def deterministic(cls, actions, num_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        probs = np.zeros((actions.size, num_actions))
        probs[np.arange(actions.size), actions] = 1.0
        return cls(probs)

    @classmethod
    def softmax(cls, scores: np.ndarray, temperature: float) -> "Policy":
        if temperature <= 0:
            raise ValueError("temperature must be positive")
        logits = np.asarray(scores, dtype=np.float64) / temperature
        logits = logits - logits.max(axis=1, keepdims=True)
        weights = np.exp(logits)
        return cls(weights / weights.sum(axis=1, keepdims=True))

    def average(self, values: np.ndarray) -> np.ndarray:
        """E_{a~pi(s)} values[s, a, ...] for every state."""
        return np.einsum("sa,sa...->s...", self.probs, values)


@dataclass(frozen=True)
class StateActionDist:
    weights: np.ndarray  # nu[s, a]

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.ndim != 2 or min(weights.shape) < 1:
            raise InvalidDimensionError(f"distribution table must be (S, A), got {weights.shape}")
        if np.any(weights < 0):
            raise ValueError("distribution has negative entries")
        total = float(weights.sum())
        if total == 0.0:
            raise EmptySupportError("distribution has zero total mass")
        if abs(total - 1.0) > ROW_TOL:
            raise ValueError(f"distribution mass must be 1 (got {total!r})")
        object.__setattr__(self, "weights", _frozen(weights))

    @property
    def shape(self):
        return self.weights.shape

    @property
    def flat(self) -> np.ndarray:
        return self.weights.reshape(-1)

    def state_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=1)

    @classmethod
    def normalized(cls, weights: np.ndarray) -> "StateActionDist":
        weights = np.asarray(weights, dtype=np.float64)
        total = weights.sum()
        if total <= 0:
            raise EmptySupportError("distribution has zero total mass")
        return cls(weights / total)

    @classmethod
    def uniform(cls, num_states: int, num_actions: int) -> "StateActionDist":
        return cls(np.full((num_states, num_actions), 1.0 / (num_states * num_actions)))

    @classmethod
    def point_mass(cls, num_states: int, num_actions: int, state: int, action: int) -> "StateActionDist":
        weights = np.zeros((num_states, num_actions))
        weights[state, action] = 1.0
        return cls(weights)


def mixture_dist(a: StateActionDist, b: StateActionDist, w: float) -> StateActionDist:
    """Pointwise w * a + (1 - w) * b."""
    if a.shape != b.shape:
        raise ShapeMismatchError(f"cannot mix distributions of shapes {a.shape} and {b.shape}")
    if not 0.0 <= w <= 1.0:
        raise ValueError(f"mixture weight must lie in [0, 1], got {w}")
    if w == 1.0:
        return a
    if w == 0.0:
        return b
    return StateActionDist.normalized(w * a.weights + (1.0 - w) * b.weights)


def save_mdp(mdp: FiniteMdp, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(mdp.to_document(), indent=2))
    tmp.replace(path)
    return path


def load_mdp(path: Union[str, Path]) -> FiniteMdp:
    return FiniteMdp.from_document(json.loads(Path(path).read_text()))
