"""Encoder-decoder regression network with hand-written gradients.

The encoder maps concat(x, one_hot(instruction)) through a tanh hidden layer
to a latent ``z``; the decoder is a linear map from ``z`` to the action.
All parameters live in one flat float64 vector described by a ``Layout``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np

from .errors import ConfigurationError, DataIntegrityError, DomainError
from .rng import stream

ENCODER_PARAMS = ("enc.W1", "enc.b1", "enc.W2", "enc.b2")
DECODER_PARAMS = ("dec.W3", "dec.b3")


@dataclass(frozen=True)
class Layout:
    in_dim: int
    n_tasks: int
    hidden: int
    latent_dim: int
    act_dim: int
    shapes: dict = field(init=False, repr=False, compare=False)
    offsets: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        for name in ("in_dim", "n_tasks", "hidden", "latent_dim", "act_dim"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        shapes = {
            "enc.W1": (self.hidden, self.in_dim + self.n_tasks),
            "enc.b1": (self.hidden,),
            "enc.W2": (self.latent_dim, self.hidden),
            "enc.b2": (self.latent_dim,),
            "dec.W3": (self.act_dim, self.latent_dim),
            "dec.b3": (self.act_dim,),
        }
        offsets, pos = {}, 0
        for name, shape in shapes.items():
            offsets[name] = pos
            pos += int(np.prod(shape))
        object.__setattr__(self, "shapes", shapes)
        object.__setattr__(self, "offsets", offsets)

    @property
    def size(self) -> int:
        return self.encoder_size + self.decoder_size

    @property
    def encoder_size(self) -> int:
        return self.offsets["dec.W3"]

    @property
    def decoder_size(self) -> int:
        return self.act_dim * self.latent_dim + self.act_dim

    @property
    def encoder(self) -> slice:
        return slice(0, self.encoder_size)

    @property
    def decoder(self) -> slice:
        return slice(self.encoder_size, self.size)

    def to_dict(self) -> dict:
        return {
            "in_dim": self.in_dim, "n_tasks": self.n_tasks, "hidden": self.hidden,
            "latent_dim": self.latent_dim, "act_dim": self.act_dim,
            "encoder": [0, self.encoder_size], "decoder": [self.encoder_size, self.decoder_size],
            "params": [[n, self.offsets[n], list(s)] for n, s in self.shapes.items()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Layout":
        return cls(d["in_dim"], d["n_tasks"], d["hidden"], d["latent_dim"], d["act_dim"])


@dataclass
class ParamVector:
    values: np.ndarray
    layout: Layout

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.layout.size,):
            raise DataIntegrityError(
                f"parameter vector has shape {self.values.shape}, layout expects ({self.layout.size},)")

    def unpack(self) -> dict[str, np.ndarray]:
        """Views (not copies) of every parameter block."""
        out = {}
        for name, shape in self.layout.shapes.items():
            off = self.layout.offsets[name]
            out[name] = self.values[off:off + int(np.prod(shape))].reshape(shape)
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.layout)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


def init_params(in_dim: int, M: int, hidden: int, d: int, act_dim: int, seed: int) -> ParamVector:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    layout = Layout(in_dim, M, hidden, d, act_dim)
    rng = stream(seed, "init")
    theta = ParamVector(np.zeros(layout.size), layout)
    for name, block in theta.unpack().items():
        if block.ndim == 2:
            block[...] = rng.normal(0.0, 1.0 / np.sqrt(block.shape[1]), size=block.shape)
    return theta


def smooth_normalize(z: np.ndarray, eps_n: float) -> np.ndarray:
    """z / sqrt(|z|^2 + eps_n^2), applied along the last axis."""
    if not eps_n > 0:
        raise ConfigurationError(f"eps_n must be > 0, got {eps_n}")
    z = np.asarray(z, dtype=float)
    scale = np.sqrt(np.sum(z * z, axis=-1, keepdims=True) + eps_n * eps_n)
    return z / scale


def smooth_normalize_backward(z: np.ndarray, grad_out: np.ndarray, eps_n: float) -> np.ndarray:
    """Pull ``grad_out`` (w.r.t. the normalized rows) back to the raw rows ``z``.

    The Jacobian is I/s - z z^T / s^3 with s = sqrt(|z|^2 + eps_n^2).
    """
    s = np.sqrt(np.sum(z * z, axis=-1, keepdims=True) + eps_n * eps_n)
    proj = np.sum(z * grad_out, axis=-1, keepdims=True)
    return grad_out / s - z * proj / s**3


def _check_instr(theta: ParamVector, instr: np.ndarray) -> None:
    if instr.size and (instr.min() < 0 or instr.max() >= theta.layout.n_tasks):
        raise DomainError(f"instruction index out of range [0, {theta.layout.n_tasks})")


def _encoder_input(x: np.ndarray, instr: np.ndarray, n_tasks: int) -> np.ndarray:
    u = np.zeros((x.shape[0], x.shape[1] + n_tasks))
    u[:, :x.shape[1]] = x
    u[np.arange(x.shape[0]), x.shape[1] + instr] = 1.0
    return u


@dataclass
class ForwardCache:
    u: np.ndarray
    h: np.ndarray
    z: np.ndarray
    y: np.ndarray


def forward_cache(theta: ParamVector, x: np.ndarray, instr: np.ndarray) -> ForwardCache:
    p = theta.unpack()
    instr = np.asarray(instr, dtype=np.int64)
    _check_instr(theta, instr)
    u = _encoder_input(np.atleast_2d(x), instr, theta.layout.n_tasks)
    h = np.tanh(u @ p["enc.W1"].T + p["enc.b1"])
    z = h @ p["enc.W2"].T + p["enc.b2"]
    y = z @ p["dec.W3"].T + p["dec.b3"]
    return ForwardCache(u, h, z, y)


def encode_batch(theta: ParamVector, x: np.ndarray, instr) -> np.ndarray:
    p = theta.unpack()
    instr = np.asarray(instr, dtype=np.int64)
    _check_instr(theta, instr)
    u = _encoder_input(np.atleast_2d(x), instr, theta.layout.n_tasks)
    h = np.tanh(u @ p["enc.W1"].T + p["enc.b1"])
    return h @ p["enc.W2"].T + p["enc.b2"]


def decode_batch(theta: ParamVector, z: np.ndarray) -> np.ndarray:
    p = theta.unpack()
    return np.atleast_2d(z) @ p["dec.W3"].T + p["dec.b3"]


def encode(theta: ParamVector, x: np.ndarray, instr: int) -> np.ndarray:
    return encode_batch(theta, np.asarray(x)[None, :], [instr])[0]


def decode(theta: ParamVector, z: np.ndarray) -> np.ndarray:
    return decode_batch(theta, np.asarray(z)[None, :])[0]


def forward(theta: ParamVector, x: np.ndarray, instr) -> np.ndarray:
    return decode_batch(theta, encode_batch(theta, x, instr))


def backward(theta: ParamVector, cache: ForwardCache, dy: np.ndarray,
             dz_extra: np.ndarray | None = None) -> np.ndarray:
    """Flat gradient given d(loss)/dy and an optional extra d(loss)/dz term."""
    p = theta.unpack()
    grad = ParamVector(np.zeros(theta.layout.size), theta.layout)
    g = grad.unpack()
    g["dec.W3"][...] = dy.T @ cache.z
    g["dec.b3"][...] = dy.sum(axis=0)
    dz = dy @ p["dec.W3"]
    if dz_extra is not None:
        dz = dz + dz_extra
    g["enc.W2"][...] = dz.T @ cache.h
    g["enc.b2"][...] = dz.sum(axis=0)
    dpre = (dz @ p["enc.W2"]) * (1.0 - cache.h**2)
    g["enc.W1"][...] = dpre.T @ cache.u
    g["enc.b1"][...] = dpre.sum(axis=0)
    return grad.values


def squared_error(y: np.ndarray, a: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean over rows of 0.5*|y - a|^2 and its gradient w.r.t. ``y``."""
    r = y - a
    n = y.shape[0]
    return 0.5 * float(np.sum(r * r)) / n, r / n


def task_loss_and_grad(theta: ParamVector, batch, use_predicted_labels: bool = True):
    """Mean 0.5*|f(x, instr) - a|^2 over ``batch`` and its exact gradient.

    The instruction is ``t_hat`` when ``use_predicted_labels`` is set, else ``t``.
    """
    if len(batch) == 0:
        raise DomainError("empty batch")
    instr = batch.labels(use_predicted_labels)
    cache = forward_cache(theta, batch.x, instr)
    loss, dy = squared_error(cache.y, batch.a)
    return loss, ParamVector(backward(theta, cache, dy), theta.layout)


# Checkpoints: one JSON header line, then little-endian float64 payload.

CHECKPOINT_FORMAT = "forgesim-checkpoint"
CHECKPOINT_VERSION = 1


def write_checkpoint(fh: BinaryIO, theta: ParamVector, extra_arrays: dict | None = None,
                     meta: dict | None = None) -> None:
    arrays = {"theta": theta.values}
    arrays.update(extra_arrays or {})
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layout": theta.layout.to_dict(),
        "arrays": [[name, list(np.shape(a))] for name, a in arrays.items()],
        "meta": meta or {},
    }
    fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
    for a in arrays.values():
        fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def read_checkpoint(fh: BinaryIO) -> tuple[ParamVector, dict, dict]:
    """Return (theta, other arrays by name, header)."""
    header = json.loads(fh.readline().decode("utf-8"))
    if header.get("format") != CHECKPOINT_FORMAT:
        raise DataIntegrityError("not a forgesim checkpoint")
    if header.get("version") != CHECKPOINT_VERSION:
        raise DataIntegrityError(f"unsupported checkpoint version {header.get('version')}")
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        buf = fh.read(8 * count)
        if len(buf) != 8 * count:
            raise DataIntegrityError(f"truncated checkpoint while reading {name!r}")
        arrays[name] = np.frombuffer(buf, dtype="<f8").astype(np.float64).reshape(shape)
    theta = ParamVector(arrays.pop("theta"), Layout.from_dict(header["layout"]))
    return theta, arrays, header
