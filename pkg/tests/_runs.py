"""Cached full-size experiment runs shared by the slow tests."""
import os
from pathlib import Path

from pilabel.cli import run_cached, shipped_config_path

RUNS = Path(os.environ.get("PILABEL_ACCEPTANCE_RUNS",
                           Path(__file__).resolve().parents[1] / "runs" / "acceptance"))


def paper_run(exp_id, scale=None):
    return run_cached(shipped_config_path(exp_id), RUNS, scale=scale)
