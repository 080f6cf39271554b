"""Round loop: participant sampling, local training, bank refresh, aggregation."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import diagnostics
from .aggregation import ClientUpdate, adaptive_aggregate, fedavg_anchor, sampled_weights
from .bank import PrototypeUpload, TaskBank, compute_prototypes, init_bank, refresh_bank
from .config import FederationConfig
from .datagen import Dataset, client_dataset, generate_task_set, partition_clients, synth_dataset
from .errors import DivergenceError, DomainError
from .labeler import annotate, build_confusion
from .losses import CPLossConfig, cp_loss_and_grad
from .model import ParamVector, backward, forward_cache, init_params, squared_error
from .rng import stream

log = logging.getLogger(__name__)


@dataclass
class Environment:
    """Everything a run needs that is fixed by the config and seed."""

    specs: list
    partition: object
    clients: list  # annotated Dataset per client
    eval_sets: list  # Dataset per task, true labels
    weights: np.ndarray  # w_i = K_i / sum K

    @property
    def pooled(self) -> Dataset:
        return Dataset.concat(self.clients)


def build_environment(cfg: FederationConfig) -> Environment:
    specs = generate_task_set(cfg.M, cfg.in_dim, cfg.act_dim, cfg.seed,
                              noise_std=cfg.noise_std, mean_scale=cfg.input_mean_scale,
                              similarity=cfg.task_similarity, offset_scale=cfg.action_offset_scale)
    part = partition_clients(cfg.M, cfg.N, cfg.s, cfg.seed)
    confusion = build_confusion(cfg.M, cfg.labeler_accuracy)
    clients = []
    for i, (tasks, n) in enumerate(zip(part.assignments, cfg.client_sample_counts())):
        raw = client_dataset(specs, tasks, n, cfg.seed, i)
        clients.append(annotate(raw, confusion, cfg.seed, i))
    eval_sets = [synth_dataset(spec, cfg.eval_per_task, cfg.seed, "eval") for spec in specs]
    counts = np.array([len(c) for c in clients], dtype=float)
    return Environment(specs, part, clients, eval_sets, counts / counts.sum())


@dataclass
class FederationState:
    theta: ParamVector
    bank: TaskBank
    round: int = 0


def initial_state(cfg: FederationConfig) -> FederationState:
    theta = init_params(cfg.in_dim, cfg.M, cfg.hidden, cfg.latent_dim, cfg.act_dim, cfg.seed)
    return FederationState(theta, init_bank(cfg.M, cfg.latent_dim, cfg.seed), 0)


# local training


def objective_and_grad(theta: ParamVector, batch: Dataset, bank_rows: np.ndarray | None,
                       cp: CPLossConfig | None, eps_n: float,
                       anchor: ParamVector | None = None, lam: float = 0.0):
    """Task loss (+ CP loss against ``bank_rows``) (+ proximal term) on ``batch``.

    Returns (total loss, flat gradient).
    """
    labels = batch.labels(use_predicted=True)
    cache = forward_cache(theta, batch.x, labels)
    loss, dy = squared_error(cache.y, batch.a)
    dz = None
    if cp is not None and bank_rows is not None:
        cp_loss, dz = cp_loss_and_grad(cache.z, labels, bank_rows, cp, eps_n)
        loss += cp_loss
    grad = backward(theta, cache, dy, dz)
    if anchor is not None and lam > 0:
        diff = theta.values - anchor.values
        loss += 0.5 * lam * float(diff @ diff)
        grad = grad + lam * diff
    return loss, grad


def step_sizes(theta: ParamVector, cfg: FederationConfig) -> np.ndarray:
    lr = np.empty(theta.layout.size)
    lr[theta.layout.encoder] = cfg.lr_enc
    lr[theta.layout.decoder] = cfg.lr_dec
    return lr


def batch_schedule(n: int, cfg: FederationConfig, rng: np.random.Generator):
    """Index arrays for the P local iterations (epochs or single mini-batches)."""
    bs = min(cfg.batch_size, n)
    if cfg.local_mode == "iterations":
        for _ in range(cfg.P):
            yield rng.choice(n, size=bs, replace=False)
        return
    for _ in range(cfg.P):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            yield order[start:start + bs]


@dataclass
class LocalResult:
    client_id: int
    theta: ParamVector
    upload: PrototypeUpload | None
    trace: list


def local_train(dataset: Dataset, theta: ParamVector, bank: TaskBank, cfg: FederationConfig,
                client_id: int, round_index: int) -> LocalResult | None:
    """Run the client routine; ``None`` signals an empty client that sits the round out."""
    if len(dataset) == 0:
        return None
    cp = cfg.effective_cp() if cfg.uses_cp else None
    lam = cfg.prox
    anchor = theta if lam > 0 else None
    lr = step_sizes(theta, cfg)
    rng = stream(cfg.seed, "train", client_id, round_index)
    current = theta.copy()
    trace = []
    with np.errstate(over="ignore", invalid="ignore"):
        for idx in batch_schedule(len(dataset), cfg, rng):
            loss, grad = objective_and_grad(current, dataset.subset(idx), bank.rows, cp, cfg.eps_n, anchor, lam)
            if not np.isfinite(loss):
                raise DivergenceError(round_index, f"non-finite local loss on client {client_id}")
            trace.append(loss)
            current = current.with_values(current.values - lr * grad)
    if not current.is_finite():
        raise DivergenceError(round_index, f"non-finite local model on client {client_id}")
    upload = compute_prototypes(current, dataset, cfg.eps_n, client_id) if cfg.uses_cp else None
    return LocalResult(client_id, current, upload, trace)


def sample_participants(p, round_index: int, seed: int) -> np.ndarray:
    """Independent Bernoulli(p_i) inclusion from a round-keyed stream."""
    p = np.asarray(p, dtype=float)
    u = stream(seed, "participation", round_index).random(len(p))
    return u < p


# evaluation


@dataclass(frozen=True)
class EvalResult:
    per_task: np.ndarray
    counts: np.ndarray

    @property
    def global_loss(self) -> float:
        return float(self.per_task @ self.counts / self.counts.sum())


def evaluate(theta: ParamVector, eval_sets) -> EvalResult:
    """Mean 0.5*|f(x, t) - a|^2 per task (true instructions) and the sample-weighted mean."""
    losses, counts = [], []
    for ds in eval_sets:
        cache = forward_cache(theta, ds.x, ds.t)
        losses.append(squared_error(cache.y, ds.a)[0])
        counts.append(len(ds))
    return EvalResult(np.array(losses), np.array(counts, dtype=float))


# server loop


@dataclass
class RoundMetrics:
    round: int
    global_loss: float
    task_losses: tuple
    participants: tuple
    local_loss: float
    xi: float
    gamma_pi: float
    bank_path: float
    bank_path_total: float
    collapse_score: float
    update_norm: float
    event: str = ""
    wall_time: float = field(default=0.0, compare=False)


@dataclass
class ExperimentResult:
    config: FederationConfig
    metrics: list
    state: FederationState
    distances: list  # (round, DistanceMatrix)


def client_gradients(env: Environment, state: FederationState, cfg: FederationConfig) -> np.ndarray:
    """Full-batch gradient of each client's round-frozen objective at the global model."""
    cp = cfg.effective_cp() if cfg.uses_cp else None
    return np.array([objective_and_grad(state.theta, ds, state.bank.rows, cp, cfg.eps_n)[1]
                     for ds in env.clients])


def run_round(env: Environment, state: FederationState, cfg: FederationConfig,
              path_so_far: float = 0.0) -> tuple[FederationState, RoundMetrics, diagnostics.DistanceMatrix]:
    start = time.perf_counter()
    e = state.round
    p = np.asarray(cfg.participation_probs())
    xi_stat = diagnostics.gradient_dissimilarity(client_gradients(env, state, cfg), env.weights)
    event = ""
    local_losses = []

    if cfg.method == "centralized":
        res = local_train(env.pooled, state.theta, state.bank, cfg, 0, e)
        participants = tuple(range(cfg.N))
        new_theta, new_bank = res.theta, state.bank
        local_losses = res.trace
    else:
        mask = sample_participants(p, e, cfg.seed)
        results = [local_train(env.clients[i], state.theta, state.bank, cfg, i, e)
                   for i in np.flatnonzero(mask)]
        results = sorted((r for r in results if r is not None), key=lambda r: r.client_id)
        participants = tuple(r.client_id for r in results)
        if not results:
            log.info("round %d: no participants, keeping model and bank", e)
            event = "empty_round"
            new_theta, new_bank = state.theta, state.bank
        else:
            present = np.zeros(cfg.N, dtype=bool)
            present[list(participants)] = True
            w_tilde = sampled_weights(env.weights, present, p)
            updates = [ClientUpdate(r.client_id, r.theta.values - state.theta.values,
                                    len(env.clients[r.client_id])) for r in results]
            if cfg.uses_cp:
                new_bank = refresh_bank(state.bank, [r.upload for r in results], cfg.eps_n)
            else:
                new_bank = state.bank
            if cfg.uses_adaptive:
                new_theta = adaptive_aggregate(state.theta, updates, w_tilde, cfg.aggregation_config)
            else:
                new_theta = fedavg_anchor(state.theta, updates, w_tilde)
            for r in results:
                local_losses.extend(r.trace)

    if new_bank is not state.bank or new_bank.round != e + 1:
        new_bank = TaskBank(new_bank.rows, e + 1)
    ev = evaluate(new_theta, env.eval_sets)
    if not np.isfinite(ev.global_loss) or not new_theta.is_finite():
        raise DivergenceError(e)
    dist = diagnostics.task_embedding_distances(new_theta, env.eval_sets, cfg.eps_n)
    bank_step = float(np.linalg.norm(new_bank.rows - state.bank.rows))
    metrics = RoundMetrics(
        round=e,
        global_loss=ev.global_loss,
        task_losses=tuple(float(v) for v in ev.per_task),
        participants=participants,
        local_loss=float(np.mean(local_losses)) if local_losses else float("nan"),
        xi=xi_stat,
        gamma_pi=diagnostics.participation_inflation(env.weights, p),
        bank_path=bank_step,
        bank_path_total=path_so_far + bank_step,
        collapse_score=dist.collapse_score,
        update_norm=float(np.linalg.norm(new_theta.values - state.theta.values)),
        event=event,
        wall_time=time.perf_counter() - start,
    )
    return FederationState(new_theta, new_bank, e + 1), metrics, dist


def run_experiment(cfg: FederationConfig, state: FederationState | None = None,
                   rounds: int | None = None, env: Environment | None = None,
                   on_round: Callable | None = None, path_so_far: float = 0.0) -> ExperimentResult:
    """Run ``rounds`` rounds (default ``cfg.E``) from ``state`` (default: fresh init).

    ``on_round(state, metrics, distances)`` is called after every round.
    """
    env = env or build_environment(cfg)
    state = state or initial_state(cfg)
    if state.theta.layout.n_tasks != cfg.M:
        raise DomainError("state does not match the configured task count")
    rounds = cfg.E if rounds is None else rounds
    metrics, dists = [], []
    total = path_so_far
    for _ in range(rounds):
        state, m, dist = run_round(env, state, cfg, total)
        total = m.bank_path_total
        metrics.append(m)
        dists.append((m.round, dist))
        log.debug("round %d loss %.6g collapse %.4f", m.round, m.global_loss, m.collapse_score)
        if on_round is not None:
            on_round(state, m, dist)
    return ExperimentResult(cfg, metrics, state, dists)
