"""Global task representation bank: initialization, prototypes, refresh."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Dataset
from .errors import DataIntegrityError, DomainError
from .model import ParamVector, encode_batch, smooth_normalize
from .rng import stream


@dataclass(frozen=True)
class TaskBank:
    rows: np.ndarray  # (M, d)
    round: int = 0

    @property
    def M(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class PrototypeUpload:
    client_id: int
    entries: tuple  # of (task_id, mean normalized latent, sample_count)

    def __post_init__(self):
        ids = [e[0] for e in self.entries]
        if len(set(ids)) != len(ids):
            raise DataIntegrityError("duplicate task id in prototype upload")
        if any(e[2] < 1 for e in self.entries):
            raise DataIntegrityError("prototype sample_count must be >= 1")


def init_bank(M: int, d: int, seed: int) -> TaskBank:
    """Random unit rows; orthonormal when d >= M."""
    rng = stream(seed, "bank")
    raw = rng.standard_normal((M, d))
    if d >= M:
        q, r = np.linalg.qr(raw.T)
        rows = (q * np.sign(np.diag(r))).T
    else:
        rows = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    return TaskBank(np.ascontiguousarray(rows), 0)


def compute_prototypes(theta: ParamVector, dataset: Dataset, eps_n: float,
                       client_id: int = 0) -> PrototypeUpload:
    """Per predicted task: mean smooth-normalized latent and its sample count."""
    if len(dataset) == 0:
        raise DomainError("cannot compute prototypes of an empty dataset")
    labels = dataset.labels(use_predicted=True)
    zhat = smooth_normalize(encode_batch(theta, dataset.x, labels), eps_n)
    entries = []
    for m in np.unique(labels):
        mask = labels == m
        entries.append((int(m), zhat[mask].mean(axis=0), int(mask.sum())))
    return PrototypeUpload(client_id, tuple(entries))


def refresh_bank(bank: TaskBank, uploads, eps_n: float) -> TaskBank:
    """Count-weighted mean of uploaded prototypes per task, then smooth normalization.

    Tasks nobody uploaded keep their previous row.
    """
    sums = np.zeros_like(bank.rows)
    counts = np.zeros(bank.M)
    for up in sorted(uploads, key=lambda u: u.client_id):
        for task, proto, n in up.entries:
            if not 0 <= task < bank.M:
                raise DataIntegrityError(f"upload from client {up.client_id} names task {task} >= M={bank.M}")
            sums[task] += n * np.asarray(proto, dtype=float)
            counts[task] += n
    rows = bank.rows.copy()
    active = counts > 0
    if active.any():
        rows[active] = smooth_normalize(sums[active] / counts[active, None], eps_n)
    return TaskBank(rows, bank.round + 1)


def refresh_weights(uploads, M: int) -> np.ndarray:
    """rho[i, m]: share of task m's refresh contributed by the i-th upload (sorted by client)."""
    ups = sorted(uploads, key=lambda u: u.client_id)
    rho = np.zeros((len(ups), M))
    for i, up in enumerate(ups):
        for task, _, n in up.entries:
            rho[i, task] = n
    col = rho.sum(axis=0)
    np.divide(rho, col, out=rho, where=col > 0)
    return rho
