"""Synthetic multi-task regression data and task-level client partitioning.

Each task m owns a linear map W_m, an action offset b_m and an input shift
mu_m. Samples are x ~ N(mu_m, I), a = W_m x + b_m + noise. Clients hold only ``s`` of the ``M``
tasks, which is the non-i.i.d. regime the federation module studies.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, DataIntegrityError
from .rng import stream

UNLABELED = -1


@dataclass(frozen=True)
class TaskSpec:
    task_id: int
    generator_weights: np.ndarray  # (act_dim, in_dim)
    input_mean: np.ndarray  # (in_dim,)
    noise_std: float
    action_offset: np.ndarray | None = None  # (act_dim,)

    def __post_init__(self):
        if self.noise_std < 0:
            raise ConfigurationError(f"noise_std must be >= 0, got {self.noise_std}")

    @property
    def in_dim(self) -> int:
        return self.generator_weights.shape[1]

    @property
    def act_dim(self) -> int:
        return self.generator_weights.shape[0]


@dataclass(frozen=True)
class ClientPartition:
    assignments: tuple[tuple[int, ...], ...]
    tasks_per_client: int

    @property
    def n_clients(self) -> int:
        return len(self.assignments)

    def covered(self) -> set[int]:
        return {t for tasks in self.assignments for t in tasks}


@dataclass(frozen=True)
class LabeledSample:
    x: np.ndarray
    a: np.ndarray
    t: int
    t_hat: int = UNLABELED


@dataclass
class Dataset:
    """Column-oriented store of labeled samples.

    ``t_hat`` holds ``UNLABELED`` (-1) until the labeler fills it.
    """

    x: np.ndarray  # (n, in_dim)
    a: np.ndarray  # (n, act_dim)
    t: np.ndarray  # (n,) int
    t_hat: np.ndarray  # (n,) int

    def __post_init__(self):
        n = len(self.x)
        if not (len(self.a) == len(self.t) == len(self.t_hat) == n):
            raise DataIntegrityError("dataset columns have different lengths")

    def __len__(self) -> int:
        return len(self.x)

    def __getitem__(self, k: int) -> LabeledSample:
        return LabeledSample(self.x[k], self.a[k], int(self.t[k]), int(self.t_hat[k]))

    def __iter__(self) -> Iterator[LabeledSample]:
        return (self[k] for k in range(len(self)))

    @property
    def annotated(self) -> bool:
        return bool(np.all(self.t_hat >= 0))

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.a[idx], self.t[idx], self.t_hat[idx])

    def labels(self, use_predicted: bool) -> np.ndarray:
        if not use_predicted:
            return self.t
        if not self.annotated:
            raise DataIntegrityError("dataset has unannotated samples (t_hat unset)")
        return self.t_hat

    @classmethod
    def from_samples(cls, samples: Sequence[LabeledSample]) -> "Dataset":
        return cls(
            np.array([s.x for s in samples], dtype=float),
            np.array([s.a for s in samples], dtype=float),
            np.array([s.t for s in samples], dtype=np.int64),
            np.array([s.t_hat for s in samples], dtype=np.int64),
        )

    @classmethod
    def concat(cls, parts: Sequence["Dataset"]) -> "Dataset":
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.a for p in parts]),
            np.concatenate([p.t for p in parts]),
            np.concatenate([p.t_hat for p in parts]),
        )


def generate_task_set(M: int, in_dim: int, act_dim: int, seed: int,
                      noise_std: float = 0.1, mean_scale: float = 1.0,
                      similarity: float = 0.0, offset_scale: float = 0.0) -> list[TaskSpec]:
    """Draw ``M`` task specs from the seeded stream.

    Generator weights are sqrt(similarity) * W_shared + sqrt(1 - similarity) * W_m
    with all matrices N(0, 1/in_dim), so actions have O(1) scale for any
    similarity in [0, 1]. Input means are N(0, mean_scale^2) and action
    offsets N(0, offset_scale^2).
    """
    if not 0.0 <= similarity <= 1.0:
        raise ConfigurationError(f"similarity must lie in [0, 1], got {similarity}")
    if M < 1:
        raise ConfigurationError(f"M must be >= 1, got {M}")
    if in_dim < 1 or act_dim < 1:
        raise ConfigurationError("in_dim and act_dim must be >= 1")
    rng = stream(seed, "tasks")
    shared = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(act_dim, in_dim))
    specs = []
    for m in range(M):
        own = rng.normal(0.0, 1.0 / np.sqrt(in_dim), size=(act_dim, in_dim))
        W = np.sqrt(similarity) * shared + np.sqrt(1.0 - similarity) * own
        mu = rng.normal(0.0, mean_scale, size=in_dim)
        b = rng.normal(0.0, offset_scale, size=act_dim)
        specs.append(TaskSpec(m, W, mu, float(noise_std), b))
    return specs


def partition_clients(M: int, N: int, s: int, seed: int) -> ClientPartition:
    """Assign ``s`` distinct tasks to each of ``N`` clients.

    Tasks are first dealt round-robin (task m to client m mod N) so that
    every task is held by someone whenever N*s >= M; the remaining slots are
    filled by seeded sampling without replacement.
    """
    if N < 1:
        raise ConfigurationError(f"N must be >= 1, got {N}")
    if not 1 <= s <= M:
        raise ConfigurationError(f"tasks per client s={s} must satisfy 1 <= s <= M={M}")
    held: list[list[int]] = [[] for _ in range(N)]
    for m in range(M):
        i = m % N
        if len(held[i]) < s:
            held[i].append(m)
    rng = stream(seed, "partition")
    for i in range(N):
        need = s - len(held[i])
        if need:
            pool = np.setdiff1d(np.arange(M), held[i])
            held[i].extend(int(t) for t in rng.choice(pool, size=need, replace=False))
    return ClientPartition(tuple(tuple(sorted(h)) for h in held), s)


def synth_dataset(spec: TaskSpec, n: int, seed: int, *indices) -> Dataset:
    """Draw ``n`` samples of one task. Extra ``indices`` key the random stream."""
    if n < 1:
        raise ConfigurationError(f"sample count must be >= 1, got {n}")
    rng = stream(seed, "samples", spec.task_id, *indices)
    x = spec.input_mean + rng.standard_normal((n, spec.in_dim))
    a = x @ spec.generator_weights.T
    if spec.action_offset is not None:
        a = a + spec.action_offset
    if spec.noise_std > 0:
        a = a + rng.normal(0.0, spec.noise_std, size=a.shape)
    t = np.full(n, spec.task_id, dtype=np.int64)
    return Dataset(x, a, t, np.full(n, UNLABELED, dtype=np.int64))


def split_counts(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if k < extra else 0) for k in range(parts)]


def client_dataset(specs: Sequence[TaskSpec], tasks: Sequence[int], n: int,
                   seed: int, client_id: int) -> Dataset:
    """Local dataset of one client: ``n`` samples split evenly over its tasks."""
    parts = [synth_dataset(specs[m], k, seed, "client", client_id)
             for m, k in zip(tasks, split_counts(n, len(tasks))) if k > 0]
    return Dataset.concat(parts)
