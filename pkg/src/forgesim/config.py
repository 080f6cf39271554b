"""Run configuration and its flat ``key=value`` file format.

One pair per line, UTF-8, ``#`` starts a comment. Every field of
``FederationConfig`` is a key; unknown keys are errors. ``participation``
takes either one probability for all clients or a comma list of N values.
``samples_per_client`` likewise takes one count or a comma list.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .aggregation import AggregationConfig
from .errors import ConfigurationError
from .losses import CPLossConfig

METHODS = ("centralized", "fedavg", "fedprox", "forgevla")
LOCAL_MODES = ("epochs", "iterations")
CP_COUPLINGS = ("raw", "lr")
DEFAULT_LAMBDA_PROX = 0.1


@dataclass(frozen=True)
class FederationConfig:
    # protocol
    method: str = "forgevla"
    N: int = 10
    M: int = 10
    s: int = 3
    E: int = 20
    P: int = 5
    local_mode: str = "epochs"
    batch_size: int = 32
    # SGD step sizes: base rates times one toy-model multiplier
    lr_encoder: float = 1e-5
    lr_decoder: float = 1e-4
    lr_scale: float = 100.0
    lambda_prox: float | None = None
    participation: tuple[float, ...] = (1.0,)
    labeler_accuracy: float = 0.9230
    seed: int = 0
    # contrastive planning + adaptive aggregation
    alpha_cp: float = 0.2
    tau: float = 0.07
    alpha_cp_coupling: str = "raw"
    alpha_ag: float = 0.1
    eps_ag: float = 1e-8
    adaptive_aggregation: bool = True
    eps_n: float = 1e-3
    # model and synthetic data
    in_dim: int = 16
    hidden: int = 32
    latent_dim: int = 16
    act_dim: int = 4
    samples_per_client: tuple[int, ...] = (240,)
    eval_per_task: int = 100
    noise_std: float = 0.1
    input_mean_scale: float = 0.3
    task_similarity: float = 0.7
    action_offset_scale: float = 1.0

    def __post_init__(self):
        check = _Checker()
        check(self.method in METHODS, f"method must be one of {METHODS}, got {self.method!r}", "method")
        check(self.local_mode in LOCAL_MODES, f"local_mode must be one of {LOCAL_MODES}", "local_mode")
        check(self.alpha_cp_coupling in CP_COUPLINGS, f"alpha_cp_coupling must be one of {CP_COUPLINGS}", "alpha_cp_coupling")
        for name in ("N", "M", "E", "in_dim", "hidden", "latent_dim", "act_dim", "batch_size", "eval_per_task"):
            check(getattr(self, name) >= 1, f"{name} must be >= 1", name)
        check(self.P >= 0, "P must be >= 0", "P")
        check(1 <= self.s <= self.M, f"tasks per client s={self.s} violates 1 <= s <= M={self.M}", "s", "M")
        check(self.lr_encoder >= 0 and self.lr_decoder >= 0 and self.lr_scale > 0,
              "learning rates must be >= 0 and lr_scale > 0",
              "lr_encoder", "lr_decoder", "lr_scale")
        check(0 < self.labeler_accuracy <= 1, "labeler_accuracy must lie in (0, 1]", "labeler_accuracy")
        check(self.noise_std >= 0, "noise_std must be >= 0", "noise_std")
        check(self.action_offset_scale >= 0, "action_offset_scale must be >= 0", "action_offset_scale")
        check(0 <= self.task_similarity <= 1, "task_similarity must lie in [0, 1]", "task_similarity")
        check(len(self.participation) in (1, self.N),
              f"participation needs 1 or N={self.N} values, got {len(self.participation)}", "participation", "N")
        check(all(0 < p <= 1 for p in self.participation), "participation probabilities must lie in (0, 1]", "participation")
        check(len(self.samples_per_client) in (1, self.N),
              f"samples_per_client needs 1 or N={self.N} values", "samples_per_client", "N")
        check(all(k >= 1 for k in self.samples_per_client), "samples_per_client must be >= 1", "samples_per_client")
        if self.lambda_prox is not None:
            check(self.lambda_prox >= 0, "lambda_prox must be >= 0", "lambda_prox")
            check(self.method == "fedprox", "lambda_prox is only meaningful with method=fedprox", "lambda_prox", "method")
        check(self.tau > 0, "tau must be > 0", "tau")
        check(self.alpha_cp >= 0, "alpha_cp must be >= 0", "alpha_cp")
        check(self.alpha_ag >= 0, "alpha_ag must be >= 0", "alpha_ag")
        check(self.eps_ag > 0, "eps_ag must be > 0", "eps_ag")
        check(self.eps_n > 0, "eps_n must be > 0", "eps_n")

    # derived views

    @property
    def cp_config(self) -> CPLossConfig:
        return CPLossConfig(self.alpha_cp, self.tau)

    @property
    def aggregation_config(self) -> AggregationConfig:
        return AggregationConfig(self.alpha_ag, self.eps_ag)

    @property
    def prox(self) -> float:
        if self.method != "fedprox":
            return 0.0
        return DEFAULT_LAMBDA_PROX if self.lambda_prox is None else self.lambda_prox

    @property
    def uses_cp(self) -> bool:
        return self.method == "forgevla" and self.alpha_cp > 0

    @property
    def uses_adaptive(self) -> bool:
        return self.method == "forgevla" and self.adaptive_aggregation

    @property
    def lr_enc(self) -> float:
        return self.lr_encoder * self.lr_scale

    @property
    def lr_dec(self) -> float:
        return self.lr_decoder * self.lr_scale

    def effective_cp(self) -> CPLossConfig:
        """CP config actually used in local training (lr coupling multiplies alpha by the encoder step)."""
        if self.alpha_cp_coupling == "lr":
            return CPLossConfig(self.alpha_cp * self.lr_enc, self.tau)
        return self.cp_config

    def participation_probs(self) -> list[float]:
        return _broadcast(self.participation, self.N)

    def client_sample_counts(self) -> list[int]:
        return _broadcast(self.samples_per_client, self.N)

    def replace(self, **changes) -> "FederationConfig":
        return dataclasses.replace(self, **changes)


class _Checker:
    def __call__(self, ok: bool, message: str, *keys: str) -> None:
        if not ok:
            exc = ConfigurationError(message)
            exc.keys = keys
            raise exc


def _broadcast(values, n):
    return list(values) * n if len(values) == 1 else list(values)


_FIELDS = {f.name: f for f in dataclasses.fields(FederationConfig)}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(name: str, text: str):
    default = _FIELDS[name].default
    if name == "lambda_prox":
        return None if text.strip().lower() in ("", "none") else float(text)
    if name == "participation":
        return tuple(float(v) for v in text.split(","))
    if name == "samples_per_client":
        return tuple(int(v) for v in text.split(","))
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text.strip()


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(_format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> FederationConfig:
    values: dict = {}
    lines: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"expected key=value, got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigurationError(f"unknown key {key!r}", lineno)
        if key in values:
            raise ConfigurationError(f"duplicate key {key!r}", lineno)
        try:
            values[key] = _parse_value(key, value)
        except ValueError as exc:
            raise ConfigurationError(f"bad value for {key}: {exc}", lineno) from None
        lines[key] = lineno
    try:
        return FederationConfig(**values)
    except ConfigurationError as exc:
        hit = [lines[k] for k in getattr(exc, "keys", ()) if k in lines]
        raise ConfigurationError(str(exc), max(hit) if hit else None) from None


def load_config(path) -> FederationConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def dump_config(cfg: FederationConfig) -> str:
    out = []
    for name in _FIELDS:
        value = getattr(cfg, name)
        if value is None:
            continue
        out.append(f"{name}={_format_value(value)}")
    return "\n".join(out) + "\n"


def config_to_dict(cfg: FederationConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(cfg).items()}


def config_from_dict(d: dict) -> FederationConfig:
    unknown = set(d) - set(_FIELDS)
    if unknown:
        raise ConfigurationError(f"unknown keys {sorted(unknown)}")
    return FederationConfig(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})
