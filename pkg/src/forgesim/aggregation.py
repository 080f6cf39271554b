"""Server update rules.

Adaptive aggregation minimizes, over the global displacement d,

    J(d) = sum_i w_i (a_i.d - 1)^2 + alpha |d - gbar|^2,
    a_i  = g_i / (|g_i|^2 + eps),   gbar = sum_i w_i g_i.

J is a strongly convex quadratic for alpha > 0. Its minimizer solves
(A W A^T + alpha I) d = A w + alpha gbar with A = [a_1 .. a_S]. Writing
d = gbar + A c reduces this to the S x S system (W G + alpha I) c = W r
with G = A^T A and r = 1 - A^T gbar, so the parameter dimension never
appears in a dense matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataIntegrityError, EmptyRoundError, OracleFailure
from .model import ParamVector

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    g: np.ndarray
    n_samples: int


@dataclass(frozen=True)
class AggregationConfig:
    alpha_ag: float = 0.1
    eps_ag: float = 1e-8

    def __post_init__(self):
        if self.alpha_ag < 0:
            raise ConfigurationError(f"alpha_ag must be >= 0, got {self.alpha_ag}")
        if not self.eps_ag > 0:
            raise ConfigurationError(f"eps_ag must be > 0, got {self.eps_ag}")


def sampled_weights(base_w, participated, p) -> np.ndarray:
    """Inverse-propensity weights w_i * xi_i / p_i (zero for absent clients)."""
    base_w = np.asarray(base_w, dtype=float)
    xi = np.asarray(participated, dtype=bool)
    p = np.asarray(p, dtype=float)
    if np.any(p[xi] <= 0) or np.any(p > 1):
        raise ConfigurationError("participation probabilities must lie in (0, 1] for participants")
    out = np.zeros_like(base_w)
    out[xi] = base_w[xi] / p[xi]
    return out


def _stack(updates, dim: int) -> np.ndarray:
    ups = sorted(updates, key=lambda u: u.client_id)
    G = np.array([u.g for u in ups], dtype=float).reshape(len(ups), dim)
    if not np.all(np.isfinite(G)):
        raise DataIntegrityError("non-finite client update")
    return G


def _weights_for(updates, w_tilde) -> np.ndarray:
    w_tilde = np.asarray(w_tilde, dtype=float)
    return np.array([w_tilde[u.client_id] for u in sorted(updates, key=lambda u: u.client_id)])


def fedavg_anchor(theta: ParamVector, updates, w_tilde) -> ParamVector:
    """theta + sum_i w_i g_i."""
    w = _weights_for(updates, w_tilde)
    if not np.any(w != 0):
        raise EmptyRoundError("all sampled weights are zero")
    G = _stack(updates, theta.layout.size)
    return theta.with_values(theta.values + w @ G)


def projection_rows(G: np.ndarray, eps_ag: float) -> np.ndarray:
    return G / (np.sum(G * G, axis=1, keepdims=True) + eps_ag)


def aggregation_objective(d: np.ndarray, G: np.ndarray, w: np.ndarray, cfg: AggregationConfig) -> float:
    A = projection_rows(G, cfg.eps_ag)
    gbar = w @ G
    r = A @ d - 1.0
    return float(w @ (r * r) + cfg.alpha_ag * np.sum((d - gbar) ** 2))


def adaptive_displacement(G: np.ndarray, w: np.ndarray, cfg: AggregationConfig) -> np.ndarray:
    """Minimizer of the aggregation objective for update rows ``G`` (S x dim)."""
    keep = w != 0
    G, w = G[keep], w[keep]
    if len(w) == 0:
        raise EmptyRoundError("no participating update with nonzero weight")
    A = projection_rows(G, cfg.eps_ag)
    gbar = w @ G
    gram = A @ A.T
    if cfg.alpha_ag > 0:
        rhs = w * (1.0 - A @ gbar)
        c = np.linalg.solve(w[:, None] * gram + cfg.alpha_ag * np.eye(len(w)), rhs)
        return gbar + c @ A
    # alpha = 0: minimum-norm least squares, which lies in span{a_i}.
    sw = np.sqrt(w)
    y = np.linalg.pinv(sw[:, None] * gram * sw[None, :], rcond=1e-12, hermitian=True) @ sw
    return (sw * y) @ A


def dense_displacement(G: np.ndarray, w: np.ndarray, cfg: AggregationConfig) -> np.ndarray:
    """Same minimizer via the full dim x dim normal equations (small problems only)."""
    A = projection_rows(G, cfg.eps_ag)
    gbar = w @ G
    H = A.T @ (w[:, None] * A) + cfg.alpha_ag * np.eye(G.shape[1])
    b = A.T @ w + cfg.alpha_ag * gbar
    if cfg.alpha_ag > 0:
        return np.linalg.solve(H, b)
    return np.linalg.lstsq(H, b, rcond=None)[0]


def adaptive_aggregate(theta: ParamVector, updates, w_tilde, cfg: AggregationConfig) -> ParamVector:
    w = _weights_for(updates, w_tilde)
    G = _stack(updates, theta.layout.size)
    d = adaptive_displacement(G, w, cfg)
    return theta.with_values(theta.values + d)


def brute_force_minimizer(theta: ParamVector | np.ndarray, updates_or_G, w_tilde, cfg: AggregationConfig,
                          steps: int = 200_000, lr: float | None = None, tol: float = 1e-10):
    """Reference minimizer by gradient descent from the FedAvg anchor.

    Accepts either (ParamVector, list of ClientUpdate, per-client weights) or
    (zero-origin array, S x dim update matrix, per-row weights). Test use only.
    """
    if cfg.alpha_ag <= 0:
        raise ConfigurationError("brute-force oracle needs alpha_ag > 0")
    if isinstance(theta, ParamVector):
        G = _stack(updates_or_G, theta.layout.size)
        w = _weights_for(updates_or_G, w_tilde)
        origin = theta.values
    else:
        G = np.asarray(updates_or_G, dtype=float)
        w = np.asarray(w_tilde, dtype=float)
        origin = np.asarray(theta, dtype=float)
    A = projection_rows(G, cfg.eps_ag)
    gbar = w @ G
    if lr is None:
        # 1 / (trace bound on the Hessian's top eigenvalue)
        lr = 1.0 / (2.0 * float(w @ np.sum(A * A, axis=1)) + 2.0 * cfg.alpha_ag)
    d = gbar.copy()
    for _ in range(steps):
        grad = 2.0 * ((w * (A @ d - 1.0)) @ A) + 2.0 * cfg.alpha_ag * (d - gbar)
        if np.linalg.norm(grad) < tol:
            break
        d -= lr * grad
    else:
        raise OracleFailure(f"gradient descent did not reach |grad| < {tol} in {steps} steps")
    out = origin + d
    return theta.with_values(out) if isinstance(theta, ParamVector) else out
