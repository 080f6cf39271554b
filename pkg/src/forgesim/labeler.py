"""Confusion-matrix stand-in for the embodied instruction classifier."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import Dataset
from .errors import ConfigurationError, DataIntegrityError
from .rng import stream

# Classifier accuracy presets keyed by (adapter rank, training-data regime).
ACCURACY_PRESETS = {
    "r4_p0.9": 0.9834,
    "r4_p0.5": 0.9796,
    "r4_p0.2": 0.9230,
    "r4_p0.1": 0.8356,
    "r4_odpt": 0.7668,
    "r8_odpt": 0.8334,
    "r16_odpt": 0.8556,
    "r32_odpt": 0.8567,
}


@dataclass(frozen=True)
class ConfusionModel:
    accuracy: float
    rows: np.ndarray  # (M, M), rows[t] = P(t_hat | t)

    @property
    def M(self) -> int:
        return self.rows.shape[0]


def build_confusion(M: int, accuracy: float) -> ConfusionModel:
    """Diagonal ``accuracy``, remaining mass spread uniformly off the diagonal."""
    if M < 1:
        raise ConfigurationError(f"M must be >= 1, got {M}")
    if not 0.0 < accuracy <= 1.0:
        raise ConfigurationError(f"accuracy must lie in (0, 1], got {accuracy}")
    if M == 1:
        rows = np.ones((1, 1))
    else:
        rows = np.full((M, M), (1.0 - accuracy) / (M - 1))
        np.fill_diagonal(rows, accuracy)
    rows.setflags(write=False)
    return ConfusionModel(float(accuracy), rows)


def annotate(dataset: Dataset, model: ConfusionModel, seed: int, *indices) -> Dataset:
    """Return a copy of ``dataset`` with ``t_hat`` drawn from row ``t`` of the model."""
    t = dataset.t
    if len(t) and (t.min() < 0 or t.max() >= model.M):
        raise DataIntegrityError(f"true task labels must lie in [0, {model.M})")
    rng = stream(seed, "labels", *indices)
    u = rng.random(len(t))
    cdf = np.cumsum(model.rows, axis=1)[t]
    t_hat = np.minimum((u[:, None] >= cdf).sum(axis=1), model.M - 1).astype(np.int64)
    return Dataset(dataset.x, dataset.a, t.copy(), t_hat)
