"""Contrastive planning loss against the task bank, and the FedProx proximal term."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataIntegrityError, DomainError
from .model import ParamVector, smooth_normalize, smooth_normalize_backward

BANK_NORM_TOL = 1e-6


@dataclass(frozen=True)
class CPLossConfig:
    alpha_cp: float = 0.2
    tau: float = 0.07

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigurationError(f"tau must be > 0, got {self.tau}")
        if self.alpha_cp < 0:
            raise ConfigurationError(f"alpha_cp must be >= 0, got {self.alpha_cp}")


def check_bank_rows(rows: np.ndarray) -> None:
    # Smoothly normalized rows sit just under 1, so only the upper side is strict.
    norms = np.linalg.norm(rows, axis=1)
    if np.any(norms > 1.0 + BANK_NORM_TOL) or not np.all(np.isfinite(norms)):
        raise DataIntegrityError(f"bank rows must have norm <= 1 (max {norms.max():.9g})")


def _logsumexp(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    top = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - top)
    total = e.sum(axis=1, keepdims=True)
    return (top + np.log(total))[:, 0], e / total


def cp_loss_and_grad(z: np.ndarray, labels, bank_rows: np.ndarray, cfg: CPLossConfig,
                     eps_n: float) -> tuple[float, np.ndarray]:
    """Batch-mean contrastive planning loss and its gradient w.r.t. the raw latents.

    loss = -(alpha/K) * sum_k [ zhat_k.u_{t_k}/tau - logsumexp_m(zhat_k.u_m/tau) ]
    with zhat = smooth_normalize(z). The bank is treated as a constant.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    labels = np.asarray(labels, dtype=np.int64)
    K = z.shape[0]
    if K == 0:
        raise DomainError("empty batch")
    M = bank_rows.shape[0]
    if labels.shape != (K,) or labels.min() < 0 or labels.max() >= M:
        raise DomainError(f"labels must be {K} indices in [0, {M})")
    check_bank_rows(bank_rows)
    if cfg.alpha_cp == 0.0:
        return 0.0, np.zeros_like(z)

    zhat = smooth_normalize(z, eps_n)
    logits = zhat @ bank_rows.T / cfg.tau
    lse, prob = _logsumexp(logits)
    target = logits[np.arange(K), labels]
    loss = cfg.alpha_cp * float(np.sum(lse - target)) / K

    prob[np.arange(K), labels] -= 1.0
    dzhat = (cfg.alpha_cp / (cfg.tau * K)) * (prob @ bank_rows)
    return loss, smooth_normalize_backward(z, dzhat, eps_n)


def cp_loss_per_sample(zhat: np.ndarray, labels, bank_rows: np.ndarray,
                       cfg: CPLossConfig) -> np.ndarray:
    """Per-sample loss on already-normalized latents (used by diagnostics and tests)."""
    logits = np.atleast_2d(zhat) @ bank_rows.T / cfg.tau
    lse, _ = _logsumexp(logits)
    labels = np.asarray(labels, dtype=np.int64)
    return cfg.alpha_cp * (lse - logits[np.arange(len(labels)), labels])


def prox_loss_and_grad(theta: ParamVector, anchor: ParamVector, lam: float) -> tuple[float, np.ndarray]:
    """(lam/2)|theta - anchor|^2 and lam*(theta - anchor)."""
    if theta.layout != anchor.layout:
        raise DomainError("proximal term needs matching parameter layouts")
    if lam < 0:
        raise ConfigurationError(f"lambda must be >= 0, got {lam}")
    diff = theta.values - anchor.values
    return 0.5 * lam * float(diff @ diff), lam * diff
