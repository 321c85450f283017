import os
from pathlib import Path

import numpy as np
import pytest

from stmlp.datapipe import window_and_split
from stmlp.graphprep import build_weighted_adjacency, scaled_laplacian_from_adjacency
from stmlp.model import ModelConfig, STMLP
from stmlp.synthetic import ring_edges, sinusoid_series
from stmlp.training import TrainConfig, fit

DATA_DIR = os.environ.get("STMLP_DATA_DIR")

# (criterion, status, detail) lines reported at the end of the session
ACCEPTANCE: list[tuple[str, str, str]] = []


def record(criterion: str, status: str, detail: str = "") -> None:
    ACCEPTANCE.append((criterion, status, detail))
    print(f"{status:<7} {criterion}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, status, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{status:<7} {criterion}: {detail}")


def pytest_collection_modifyitems(config, items):
    skip = pytest.mark.skip(reason="public traffic datasets not found; set STMLP_DATA_DIR")
    for item in items:
        # acceptance tests report their own BLOCKED line
        if "dataset" in item.keywords and "acceptance" not in item.keywords and not DATA_DIR:
            item.add_marker(skip)


def overfit_setup(seed=0):
    """Memorizable 8-node task: dropout off, no weight decay, lr halved every 5 epochs."""
    series = sinusoid_series(n_nodes=8, n_steps=2000)
    graph = scaled_laplacian_from_adjacency(build_weighted_adjacency(ring_edges(8), 8))
    splits = window_and_split(series)
    model = STMLP(ModelConfig(n_nodes=8, dropout_p=0.0), graph, seed=seed)
    cfg = TrainConfig(weight_decay=0.0, milestones=list(range(5, 100, 5)), num_epochs=100,
                      max_steps=2000, seed=seed)
    return model, splits, cfg


@pytest.fixture(scope="session")
def overfit_result():
    model, splits, cfg = overfit_setup()
    return fit(model, splits, cfg), splits


def pems_path(name: str) -> Path:
    return Path(DATA_DIR) / name


def find_dataset(*names: str) -> Path | None:
    """First existing file among ``names`` under STMLP_DATA_DIR (searched one level deep)."""
    if not DATA_DIR:
        return None
    root = Path(DATA_DIR)
    for name in names:
        for cand in (root / name, *root.glob(f"*/{name}")):
            if cand.exists():
                return cand
    return None
