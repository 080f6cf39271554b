import numpy as np
import pytest

from forgesim.config import FederationConfig
from forgesim.datagen import Dataset, generate_task_set, synth_dataset
from forgesim.labeler import annotate, build_confusion
from forgesim.model import init_params


def tiny_config(**changes) -> FederationConfig:
    base = dict(N=3, M=4, s=2, E=3, P=1, in_dim=5, hidden=6, latent_dim=4, act_dim=2,
                samples_per_client=(24,), eval_per_task=20, batch_size=8)
    base.update(changes)
    return FederationConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def small_model():
    # 5 inputs + 3 tasks -> 12 hidden -> 6 latent -> 3 actions: 207 parameters
    return init_params(5, 3, 12, 6, 3, seed=11)


@pytest.fixture
def small_batch():
    specs = generate_task_set(3, 5, 3, seed=4, noise_std=0.1, offset_scale=0.5)
    parts = [synth_dataset(s, 6, 4) for s in specs]
    return annotate(Dataset.concat(parts), build_confusion(3, 0.9), 4)


# acceptance report: one line per criterion, printed after the run
ACCEPTANCE: dict = {}


def report(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = f"criterion {criterion:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[criterion])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
