"""Least squares over a Euclidean ball.

Solves  min_{||theta|| <= W}  theta^T G theta - 2 b^T theta  for a PSD Gram
matrix G, which is the weighted regression  min ||Phi theta - y||^2_D  with
G = Phi^T D Phi and b = Phi^T D y. The unconstrained minimum-norm solution is
taken when it is feasible; otherwise the Tikhonov multiplier lambda with
||(G + lambda I)^-1 b|| = W is found by bisection on the eigenbasis of G.
"""
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg

from utils.exceptions import DegenerateDesignError, ShapeMismatchError

logger = logging.getLogger(__name__)

PINV_TOL = 1e-10
NORM_TOL = 1e-10
MAX_BISECTIONS = 200


@dataclass(frozen=True)
class BallSolution:
    theta: np.ndarray
    multiplier: float
    rank: int
    on_boundary: bool


def regression_moments(features: np.ndarray, targets: np.ndarray, weights: Optional[np.ndarray] = None):
    """(G, b) for the weighted regression of targets on features.

    Without weights the empirical mean is used.
    """
    features = np.asarray(features, dtype=np.float64)
    if weights is None:
        weights = np.full(features.shape[0], 1.0 / features.shape[0])
    weighted = features * weights[:, None]
    return weighted.T @ features, weighted.T @ targets


def weighted_loss(features: np.ndarray, targets: np.ndarray, theta: np.ndarray, weights: Optional[np.ndarray] = None) -> float:
    residual = features @ theta - targets
    if weights is None:
        return float(np.mean(residual ** 2))
    return float(np.sum(weights * residual ** 2))


def _eigen(gram: np.ndarray):
    eigenvalues, eigenvectors = linalg.eigh(0.5 * (gram + gram.T))
    return np.where(eigenvalues > PINV_TOL, eigenvalues, 0.0), eigenvectors


def pinv_solve(gram: np.ndarray, moment: np.ndarray) -> np.ndarray:
    """Minimum-norm solution of G x = b; b may hold several columns."""
    eigenvalues, eigenvectors = _eigen(gram)
    inverse = np.divide(1.0, eigenvalues, out=np.zeros_like(eigenvalues), where=eigenvalues > 0)
    projected = eigenvectors.T @ moment
    if projected.ndim == 2:
        inverse = inverse[:, None]
    return eigenvectors @ (inverse * projected)


def ball_constrained_lstsq(gram: np.ndarray, moment: np.ndarray, radius: float) -> BallSolution:
    if radius <= 0:
        raise ValueError(f"ball radius must be positive, got {radius}")
    gram = np.asarray(gram, dtype=np.float64)
    moment = np.asarray(moment, dtype=np.float64)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1] or moment.shape != (gram.shape[0],):
        raise ShapeMismatchError(f"incompatible Gram {gram.shape} and moment {moment.shape}")

    eigenvalues, eigenvectors = _eigen(gram)
    rank = int(np.count_nonzero(eigenvalues))
    if rank == 0:
        raise DegenerateDesignError("design Gram matrix is numerically zero")

    # moment lies in range(G); its null-space part is rounding noise
    coeffs = np.where(eigenvalues > 0, eigenvectors.T @ moment, 0.0)

    def solve(multiplier: float) -> np.ndarray:
        denom = eigenvalues + multiplier
        scaled = np.divide(coeffs, denom, out=np.zeros_like(coeffs), where=denom > 0)
        return eigenvectors @ scaled

    theta = solve(0.0)
    norm = float(np.linalg.norm(theta))
    if norm <= radius:
        return BallSolution(theta, 0.0, rank, False)

    low, high = 0.0, float(np.linalg.norm(coeffs)) / radius
    for _ in range(MAX_BISECTIONS):
        mid = 0.5 * (low + high)
        gap = float(np.linalg.norm(solve(mid))) - radius
        if abs(gap) <= NORM_TOL * max(1.0, radius):
            low = high = mid
            break
        if gap > 0:
            low = mid
        else:
            high = mid
        if high - low <= np.finfo(float).eps * max(1.0, high):
            break

    theta = solve(high)
    norm = float(np.linalg.norm(theta))
    if norm > radius:
        theta *= radius / norm
    return BallSolution(theta, high, rank, True)
