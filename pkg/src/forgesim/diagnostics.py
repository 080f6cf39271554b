"""Measured quantities from the convergence analysis and the collapse study."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Dataset
from .errors import DataIntegrityError, DomainError
from .model import ParamVector, encode_batch, smooth_normalize


@dataclass(frozen=True)
class DistanceMatrix:
    values: np.ndarray  # (M, M)
    centroids: np.ndarray  # (M, d)

    @property
    def collapse_score(self) -> float:
        return collapse_score(self.values)


def centroid_distances(centroids: np.ndarray) -> np.ndarray:
    diff = centroids[:, None, :] - centroids[None, :, :]
    D = np.sqrt(np.sum(diff * diff, axis=-1))
    D = 0.5 * (D + D.T)
    np.fill_diagonal(D, 0.0)
    return D


def collapse_score(D: np.ndarray) -> float:
    """Mean off-diagonal distance; 0 means total collapse."""
    M = D.shape[0]
    if M < 2:
        return 0.0
    return float(D.sum() / (M * (M - 1)))


def task_centroids(theta: ParamVector, eval_sets, eps_n: float) -> np.ndarray:
    """Mean smooth-normalized latent per task, instructed with the true label."""
    rows = []
    for m, ds in enumerate(eval_sets):
        if ds is None or len(ds) == 0:
            raise DomainError(f"task {m} has no evaluation samples")
        rows.append(smooth_normalize(encode_batch(theta, ds.x, ds.t), eps_n).mean(axis=0))
    return np.array(rows)


def task_embedding_distances(theta: ParamVector, eval_sets, eps_n: float) -> DistanceMatrix:
    c = task_centroids(theta, eval_sets, eps_n)
    return DistanceMatrix(centroid_distances(c), c)


def intra_task_spread(theta: ParamVector, eval_sets, eps_n: float) -> np.ndarray:
    """Per-task mean distance of normalized latents to their centroid."""
    out = []
    for ds in eval_sets:
        zhat = smooth_normalize(encode_batch(theta, ds.x, ds.t), eps_n)
        out.append(float(np.linalg.norm(zhat - zhat.mean(axis=0), axis=1).mean()))
    return np.array(out)


def pca_projection(centroids: np.ndarray, k: int = 2) -> np.ndarray:
    """Project centroids onto their top-``k`` principal directions (zero-padded)."""
    centered = centroids - centroids.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    proj = centered @ vt[:k].T
    if proj.shape[1] < k:
        proj = np.pad(proj, ((0, 0), (0, k - proj.shape[1])))
    # fix the sign ambiguity so output is deterministic across LAPACK builds
    signs = np.sign(proj[np.argmax(np.abs(proj), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    return proj * signs


def gradient_dissimilarity(grads: np.ndarray, w) -> float:
    """sum_i w_i |grad_i - sum_j w_j grad_j|^2."""
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    w = np.asarray(w, dtype=float)
    mean = w @ grads
    dev = grads - mean
    return float(w @ np.sum(dev * dev, axis=1))


def gradient_dissimilarity_expanded(grads: np.ndarray, w) -> float:
    """Same quantity as sum_i w_i |grad_i|^2 - |grad|^2 (valid when sum w = 1)."""
    grads = np.atleast_2d(np.asarray(grads, dtype=float))
    w = np.asarray(w, dtype=float)
    mean = w @ grads
    return float(w @ np.sum(grads * grads, axis=1) - mean @ mean)


def participation_inflation(w, p) -> float:
    """max over rounds and clients of w_i (1 - p_i) / p_i.

    ``p`` is either one probability vector or a (rounds, N) array.
    """
    w = np.asarray(w, dtype=float)
    p = np.atleast_2d(np.asarray(p, dtype=float))
    if np.any(p <= 0) or np.any(p > 1):
        raise DomainError("participation probabilities must lie in (0, 1]")
    return float(np.max(w[None, :] * (1.0 - p) / p))


def bank_path_length(history) -> tuple[np.ndarray, np.ndarray]:
    """Per-step Frobenius norms |U^{e+1} - U^e|_F and their running sum."""
    snaps = [np.asarray(getattr(b, "rows", b), dtype=float) for b in history]
    if len(snaps) < 2:
        raise DomainError("bank path length needs at least two snapshots")
    if any(s.shape != snaps[0].shape for s in snaps):
        raise DataIntegrityError("bank snapshots have different shapes")
    steps = np.array([np.linalg.norm(b - a) for a, b in zip(snaps, snaps[1:])])
    return steps, np.cumsum(steps)


def per_task_sets(dataset: Dataset, M: int) -> list:
    return [dataset.subset(dataset.t == m) for m in range(M)]
