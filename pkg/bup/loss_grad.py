"""
Uncertainty-penalized likelihood and its analytic gradients.

For a node with class means m, variances v and label c*, the pairwise gaps
tau_c = theta_c - theta_c* (c != c*) are Gaussian with mean mu_c = m_c - m_c*
and covariance Lambda = diag(v_c) + v_c* 11^T. The exact likelihood is the
orthant probability P(tau < 0). Training drops Lambda's off-diagonal terms:

    L ~= prod_{c != c*} Phi_c,   Phi_c = 1/2 erfc(-z_c),
    z_c = (m_c* - m_c) / sqrt(2 s_c),   s_c = v_c + v_c*.

With r_c = d log Phi_c / d z_c = 2 / (sqrt(pi) erfcx(-z_c)):

    d nll / d m_c   =  r_c / sqrt(2 s_c)            (c != c*)
    d nll / d m_c*  = -sum_{c != c*} d nll / d m_c
    d nll / d v_c   =  r_c z_c / (2 s_c)            (c != c*)
    d nll / d v_c*  =  sum_{c != c*} d nll / d v_c
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import linalg, special

from bup.errors import InputError, InvariantViolation

_LOG = logging.getLogger("LossGrad")

ERFC_BRANCH = -4.0
LOG_TWO = math.log(2.0)
MIN_ORTHANT_SAMPLES = 1000
ORTHANT_CHUNK = 100_000


@dataclass(frozen=True, eq=False)
class PairwiseGaussianDiff:
    """Law of tau = theta_c - theta_c* over the C-1 classes c != c*."""

    mu: np.ndarray
    Lambda: np.ndarray
    label: int

    def __post_init__(self) -> None:
        k = self.mu.shape[0]
        if self.mu.ndim != 1 or self.Lambda.shape != (k, k):
            raise InputError(f"mu shape {self.mu.shape} and Lambda shape {self.Lambda.shape} disagree")

    @classmethod
    def from_prediction(cls, m: np.ndarray, var: np.ndarray, label: int) -> "PairwiseGaussianDiff":
        means, variances = _check_node(m, var, label)
        others = np.delete(np.arange(means.shape[0]), label)
        mu = means[others] - means[label]
        cov = np.diag(variances[others]) + variances[label]
        return cls(mu=mu, Lambda=cov, label=int(label))


@dataclass(frozen=True)
class OrthantEstimate:
    probability: float
    std_error: float
    num_samples: int


@dataclass(frozen=True)
class GradientCheckReport:
    max_rel_error: float
    worst_index: Tuple[int, ...]
    tolerance: float
    passed: bool


def _check_node(m: np.ndarray, var: np.ndarray, label: int) -> Tuple[np.ndarray, np.ndarray]:
    means = np.asarray(m, dtype=np.float64)
    variances = np.asarray(var, dtype=np.float64)
    if means.ndim != 1 or means.shape != variances.shape:
        raise InputError(f"m shape {means.shape} and var shape {variances.shape} must be equal 1-D vectors")
    if means.shape[0] < 2:
        raise InputError("at least two classes are required")
    if not 0 <= int(label) < means.shape[0]:
        raise InputError(f"label {label} outside [0, {means.shape[0]})")
    return means, variances


def log_half_erfc(x: np.ndarray) -> np.ndarray:
    """log(1/2 erfc(-x)), switching to erfcx below ERFC_BRANCH to avoid underflow."""
    x = np.asarray(x, dtype=np.float64)
    low = x < ERFC_BRANCH
    out = np.empty_like(x)
    out[~low] = np.log(0.5 * special.erfc(-x[~low]))
    out[low] = np.log(special.erfcx(-x[low])) - x[low] ** 2 - LOG_TWO
    return out


def _log_phi_slope(z: np.ndarray) -> np.ndarray:
    return 2.0 / (math.sqrt(math.pi) * special.erfcx(-z))


def batch_loss_and_grad(
    M: np.ndarray, V: np.ndarray, labels: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-row nll plus gradients wrt M and V. Rows are independent nodes.

    A single-column head has nothing to compare against: zero loss, zero gradients.
    """
    means = np.asarray(M, dtype=np.float64)
    variances = np.asarray(V, dtype=np.float64)
    targets = np.asarray(labels, dtype=np.int64)
    if means.ndim != 2 or means.shape != variances.shape or targets.shape != (means.shape[0],):
        raise InputError(
            f"M {means.shape}, V {variances.shape} and labels {targets.shape} are inconsistent"
        )
    if targets.size and (targets.min() < 0 or targets.max() >= means.shape[1]):
        raise InputError(f"labels must lie in [0, {means.shape[1]})")
    if not np.all(variances > 0.0):
        raise InvariantViolation("loss needs strictly positive variances")

    rows = np.arange(means.shape[0])
    m_star = means[rows, targets][:, None]
    v_star = variances[rows, targets][:, None]
    others = np.ones_like(means, dtype=bool)
    others[rows, targets] = False

    s = variances + v_star
    root = np.sqrt(2.0 * s)
    z = (m_star - means) / root
    nll = -np.where(others, log_half_erfc(z), 0.0).sum(axis=1)

    slope = np.where(others, _log_phi_slope(z), 0.0)
    grad_m = slope / root
    grad_m[rows, targets] = -grad_m.sum(axis=1)
    grad_v = slope * z / (2.0 * s)
    grad_v[rows, targets] = grad_v.sum(axis=1)
    return nll, grad_m, grad_v


def loss_diag_approx(m: np.ndarray, var: np.ndarray, label: int) -> Tuple[float, float]:
    means, variances = _check_node(m, var, label)
    nll, _, _ = batch_loss_and_grad(means[None, :], variances[None, :], np.array([label]))
    value = float(nll[0])
    return value, math.exp(-value)


def loss_and_grad(m: np.ndarray, var: np.ndarray, label: int) -> Tuple[float, np.ndarray, np.ndarray]:
    means, variances = _check_node(m, var, label)
    nll, grad_m, grad_v = batch_loss_and_grad(means[None, :], variances[None, :], np.array([label]))
    return float(nll[0]), grad_m[0], grad_v[0]


def mvn_orthant_mc(diff: PairwiseGaussianDiff, num_samples: int, seed: int) -> OrthantEstimate:
    """Monte Carlo estimate of P(tau < 0 componentwise) with its binomial standard error."""
    if num_samples < MIN_ORTHANT_SAMPLES:
        raise InputError(f"num_samples must be >= {MIN_ORTHANT_SAMPLES}, got {num_samples}")
    try:
        lower = linalg.cholesky(diff.Lambda, lower=True)
    except linalg.LinAlgError as exc:
        raise InvariantViolation(f"pairwise covariance is not positive definite: {exc}") from exc

    rng = np.random.Generator(np.random.PCG64(seed))
    dim = diff.mu.shape[0]
    hits = 0
    remaining = num_samples
    while remaining:
        size = min(remaining, ORTHANT_CHUNK)
        xi = rng.standard_normal((size, dim))
        tau = xi @ lower.T + diff.mu
        hits += int(np.count_nonzero(np.all(tau < 0.0, axis=1)))
        remaining -= size
    p = hits / num_samples
    return OrthantEstimate(probability=p, std_error=math.sqrt(p * (1.0 - p) / num_samples), num_samples=num_samples)


def batch_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    values = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(labels, dtype=np.int64)
    if values.ndim != 2 or targets.shape != (values.shape[0],):
        raise InputError(f"logits {values.shape} and labels {targets.shape} are inconsistent")
    if targets.size and (targets.min() < 0 or targets.max() >= values.shape[1]):
        raise InputError(f"labels must lie in [0, {values.shape[1]})")
    rows = np.arange(values.shape[0])
    loss = special.logsumexp(values, axis=1) - values[rows, targets]
    grad = special.softmax(values, axis=1)
    grad[rows, targets] -= 1.0
    return loss, grad


def cross_entropy_loss(logits: np.ndarray, label: int) -> Tuple[float, np.ndarray]:
    values = np.asarray(logits, dtype=np.float64)
    if values.ndim != 1:
        raise InputError(f"logits must be 1-D, got shape {values.shape}")
    if not 0 <= int(label) < values.shape[0]:
        raise InputError(f"label {label} outside [0, {values.shape[0]})")
    loss, grad = batch_cross_entropy(values[None, :], np.array([label]))
    return float(loss[0]), grad[0]


def finite_diff_check(
    f: Callable[[np.ndarray], Tuple[float, np.ndarray]],
    point: np.ndarray,
    h: float = 1e-5,
    tol: float = 1e-4,
    *,
    analytic: Optional[np.ndarray] = None,
) -> GradientCheckReport:
    """Compare ``f``'s analytic gradient with central differences at ``point``.

    ``f`` returns (value, gradient). Pass ``analytic`` to check a gradient
    computed elsewhere.
    """
    if not h > 0.0:
        raise InputError(f"h must be positive, got {h}")
    x = np.array(point, dtype=np.float64)
    grad = np.asarray(f(x)[1] if analytic is None else analytic, dtype=np.float64)
    if grad.shape != x.shape:
        raise InputError(f"gradient shape {grad.shape} does not match point shape {x.shape}")

    numeric = np.empty_like(x)
    for index in np.ndindex(x.shape):
        original = x[index]
        x[index] = original + h
        upper = f(x)[0]
        x[index] = original - h
        lower = f(x)[0]
        x[index] = original
        numeric[index] = (upper - lower) / (2.0 * h)

    rel = np.abs(grad - numeric) / np.maximum(1.0, np.maximum(np.abs(grad), np.abs(numeric)))
    if rel.size == 0:
        return GradientCheckReport(max_rel_error=0.0, worst_index=(), tolerance=tol, passed=True)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    max_rel = float(rel[worst])
    _LOG.debug("Gradient check max relative error %.3e at %s.", max_rel, worst)
    return GradientCheckReport(
        max_rel_error=max_rel,
        worst_index=tuple(int(i) for i in worst),
        tolerance=tol,
        passed=bool(max_rel < tol),
    )
