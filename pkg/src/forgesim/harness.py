"""Run persistence (metrics CSV, checkpoints, manifest) and preset experiment grids."""

from __future__ import annotations

import csv
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .bank import TaskBank
from .config import FederationConfig, config_from_dict, config_to_dict, dump_config
from .errors import ConfigurationError, ForgeSimError
from .federation import FederationState, RoundMetrics, run_experiment
from .model import read_checkpoint, write_checkpoint

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRICS_HEADER = (
    "round", "n_participants", "participants", "global_loss", "local_loss", "xi", "gamma_pi",
    "bank_path", "bank_path_total", "collapse_score", "update_norm", "task_losses", "event",
)
SUMMARY_VERSION = 1
MANIFEST_VERSION = 1
MODULE_VERSIONS = {m: __version__ for m in (
    "datagen", "labeler", "model", "losses", "bank", "aggregation", "federation", "diagnostics", "harness")}

METRICS_FILE = "metrics.csv"
DISTANCES_FILE = "distances.csv"
PCA_FILE = "pca.csv"
CHECKPOINT_FILE = "checkpoint.bin"
SUMMARY_FILE = "summary.json"
MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.txt"


def _num(v: float) -> str:
    return repr(float(v))


def metrics_row(m: RoundMetrics) -> list[str]:
    return [
        str(m.round), str(len(m.participants)), ";".join(map(str, m.participants)),
        _num(m.global_loss), _num(m.local_loss), _num(m.xi), _num(m.gamma_pi),
        _num(m.bank_path), _num(m.bank_path_total), _num(m.collapse_score), _num(m.update_norm),
        ";".join(_num(v) for v in m.task_losses), m.event,
    ]


def read_metrics(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


class RunWriter:
    """Appends per-round output to a run directory as rounds complete."""

    def __init__(self, out_dir, cfg: FederationConfig, resume: bool = False):
        self.out = Path(out_dir)
        self.cfg = cfg
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / CONFIG_FILE).write_text(dump_config(cfg), encoding="utf-8")
            fresh = not resume or not (self.out / METRICS_FILE).exists()
            mode = "w" if fresh else "a"
            self._metrics = open(self.out / METRICS_FILE, mode, newline="", encoding="utf-8")
            self._dist = open(self.out / DISTANCES_FILE, mode, newline="", encoding="utf-8")
            self._pca = open(self.out / PCA_FILE, mode, newline="", encoding="utf-8")
        except OSError as exc:
            raise ForgeSimError(f"cannot open run directory {self.out}: {exc}") from exc
        self._mw, self._dw, self._pw = (csv.writer(f) for f in (self._metrics, self._dist, self._pca))
        if fresh:
            self._mw.writerow(METRICS_HEADER)
            self._dw.writerow(["round", "task"] + [f"d_{j}" for j in range(cfg.M)])
            self._pw.writerow(["round", "task", "pc1", "pc2"])
        self.wall_times: list[float] = []

    def on_round(self, state: FederationState, m: RoundMetrics, dist) -> None:
        from .diagnostics import pca_projection

        self._mw.writerow(metrics_row(m))
        for j, row in enumerate(dist.values):
            self._dw.writerow([m.round, j] + [_num(v) for v in row])
        for j, (a, b) in enumerate(pca_projection(dist.centroids)):
            self._pw.writerow([m.round, j, _num(a), _num(b)])
        for f in (self._metrics, self._dist, self._pca):
            f.flush()
        save_checkpoint(self.out / CHECKPOINT_FILE, state, self.cfg, m.bank_path_total)
        self.wall_times.append(m.wall_time)

    def close(self) -> None:
        for f in (self._metrics, self._dist, self._pca):
            f.close()


def save_checkpoint(path, state: FederationState, cfg: FederationConfig, bank_path_total: float = 0.0) -> None:
    """Atomically write model + bank in the binary checkpoint format."""
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    meta = {"round": state.round, "bank_round": state.bank.round, "bank_path_total": bank_path_total,
            "config": config_to_dict(cfg)}
    try:
        with open(tmp, "wb") as fh:
            write_checkpoint(fh, state.theta, {"bank": state.bank.rows}, meta)
        os.replace(tmp, path)
    except OSError as exc:
        raise ForgeSimError(f"cannot write checkpoint {path}: {exc}") from exc


def load_checkpoint(path) -> tuple[FederationState, dict]:
    try:
        with open(path, "rb") as fh:
            theta, arrays, header = read_checkpoint(fh)
    except OSError as exc:
        raise ForgeSimError(f"cannot read checkpoint {path}: {exc}") from exc
    meta = header["meta"]
    bank = TaskBank(arrays["bank"], meta["bank_round"])
    return FederationState(theta, bank, meta["round"]), header


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def summarize(cfg: FederationConfig, metrics: list, wall_times: list[float], start_round: int = 0) -> dict:
    """Summary of a run; diagnostics cover only the rounds in ``metrics`` (this invocation)."""
    last = metrics[-1] if metrics else None
    xis = [m.xi for m in metrics]
    return {
        "format_version": SUMMARY_VERSION,
        "metrics_version": METRICS_VERSION,
        "config": config_to_dict(cfg),
        "rounds_completed": start_round + len(metrics),
        "rounds_this_invocation": len(metrics),
        "final": None if last is None else {
            "round": last.round,
            "global_loss": last.global_loss,
            "task_losses": list(last.task_losses),
            "collapse_score": last.collapse_score,
        },
        "diagnostics": {
            "xi_max": max(xis) if xis else None,
            "xi_mean": float(np.mean(xis)) if xis else None,
            "gamma_pi": last.gamma_pi if last else None,
            "bank_path_total": last.bank_path_total if last else 0.0,
            "update_norm_max": max((m.update_norm for m in metrics), default=None),
            "empty_rounds": sum(1 for m in metrics if m.event == "empty_round"),
        },
        "wall_time_s": float(sum(wall_times)),
    }


def run_to_directory(cfg: FederationConfig, out_dir, resume_from=None) -> dict:
    """Run a config, streaming metrics into ``out_dir``; returns the summary dict.

    With ``resume_from`` (a checkpoint path) the run continues from the
    checkpointed round up to ``cfg.E`` total rounds.
    """
    out = Path(out_dir)
    started = _now()
    state, path_total = None, 0.0
    if resume_from is not None:
        state, header = load_checkpoint(resume_from)
        path_total = header["meta"].get("bank_path_total", 0.0)
    rounds = cfg.E - (state.round if state else 0)
    if rounds < 0:
        raise ConfigurationError(f"checkpoint is at round {state.round}, beyond E={cfg.E}")
    writer = RunWriter(out, cfg, resume=resume_from is not None)
    status = "failed"
    metrics: list = []
    try:
        run_experiment(cfg, state=state, rounds=rounds, on_round=_collect(writer, metrics),
                       path_so_far=path_total)
        status = "completed"
    except ForgeSimError as exc:
        status = f"failed: {exc}"
        raise
    finally:
        writer.close()
        summary = summarize(cfg, metrics, writer.wall_times, state.round if state else 0)
        summary["status"] = status
        _write_json(out / SUMMARY_FILE, summary)
        write_manifest(out, cfg, started, status)
    return summary


def _collect(writer: RunWriter, sink: list):
    def hook(state, m, dist):
        sink.append(m)
        writer.on_round(state, m, dist)
    return hook


def write_manifest(out_dir, cfg: FederationConfig, started: str, status: str) -> None:
    _write_json(Path(out_dir) / MANIFEST_FILE, {
        "format_version": MANIFEST_VERSION,
        "config": config_to_dict(cfg),
        "master_seed": cfg.seed,
        "started": started,
        "finished": _now(),
        "module_versions": MODULE_VERSIONS,
        "status": status,
    })


def read_manifest_config(path) -> FederationConfig:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return config_from_dict(data["config"])


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise ForgeSimError(f"cannot write {path}: {exc}") from exc


# preset grids


@dataclass(frozen=True)
class Cell:
    name: str
    changes: dict


def preset_cells(name: str) -> list[Cell]:
    if name == "table2_fedprox_sweep":
        cells = [Cell(f"fedprox_lambda_{lam}", {"method": "fedprox", "lambda_prox": lam})
                 for lam in (0.0, 0.1, 0.2, 0.5)]
        return cells + [Cell("forgevla", {"method": "forgevla"})]
    if name == "table4_ablation":
        return [
            Cell("neither", {"method": "fedavg"}),
            Cell("cp_only", {"method": "forgevla", "adaptive_aggregation": False}),
            Cell("ag_only", {"method": "forgevla", "alpha_cp": 0.0}),
            Cell("both", {"method": "forgevla"}),
        ]
    if name == "table5_sensitivity":
        cells = []
        for method in ("fedavg", "forgevla"):
            cells += [Cell(f"{method}_s_{s}", {"method": method, "s": s}) for s in (1, 2, 3, 5, 10)]
            # adapter rank has no analog here; hidden width plays its role
            cells += [Cell(f"{method}_hidden_{h}", {"method": method, "hidden": h}) for h in (4, 8, 16, 32, 64)]
        cells += [Cell(f"forgevla_alpha_cp_{a}", {"alpha_cp": a}) for a in (0.0, 0.1, 0.2, 0.5, 1.0, 2.0)]
        cells += [Cell(f"forgevla_alpha_ag_{a}", {"alpha_ag": a}) for a in (0.0, 0.05, 0.1, 0.2)]
        return cells
    if name == "fig2_collapse":
        return [
            Cell("centralized", {"method": "centralized"}),
            Cell("fedavg", {"method": "fedavg"}),
            Cell("fedprox", {"method": "fedprox", "lambda_prox": 0.5}),
            Cell("forgevla", {"method": "forgevla"}),
        ]
    raise ConfigurationError(f"unknown preset {name!r}; choose from {PRESETS}")


PRESETS = ("table2_fedprox_sweep", "table4_ablation", "table5_sensitivity", "fig2_collapse")


def _run_cell(args):
    cfg, out_dir = args
    summary = run_to_directory(cfg, out_dir)
    return summary["final"]


def run_preset(name: str, out_dir, seeds=(0,), base: FederationConfig | None = None, jobs: int = 1) -> dict:
    """Run every cell of a preset grid for every seed; returns the grid summary."""
    cells = preset_cells(name)
    base = base or FederationConfig()
    out = Path(out_dir) / name
    jobs_list = []
    for cell in cells:
        for seed in seeds:
            cfg = base.replace(seed=seed, **cell.changes)
            jobs_list.append((cell, seed, cfg, out / f"{cell.name}_seed{seed}"))
    started = time.perf_counter()
    args = [(cfg, d) for _, _, cfg, d in jobs_list]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            finals = list(pool.map(_run_cell, args))
    else:
        finals = [_run_cell(a) for a in args]
    grid = {
        "format_version": SUMMARY_VERSION,
        "preset": name,
        "seeds": list(seeds),
        "cells": [
            {"cell": cell.name, "seed": seed, "changes": cell.changes, "dir": str(d.relative_to(out)),
             "final_global_loss": f["global_loss"] if f else None,
             "final_collapse_score": f["collapse_score"] if f else None}
            for (cell, seed, _, d), f in zip(jobs_list, finals)
        ],
        "wall_time_s": time.perf_counter() - started,
    }
    _write_json(out / "grid_summary.json", grid)
    return grid
