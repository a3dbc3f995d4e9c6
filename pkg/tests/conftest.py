import os
from pathlib import Path

import numpy as np
import pytest

from mnar_robust.greene import GreeneParams, SelectionData

DATA_DIR = Path(os.environ.get("MNAR_DATA_DIR", Path(__file__).resolve().parents[1] / "data"))

# criterion number -> (status, detail); filled by test_acceptance
ACCEPTANCE = {}


def data_files(*names):
    paths = [DATA_DIR / n for n in names]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        pytest.skip(f"dataset file(s) not supplied: {', '.join(missing)}")
    return paths


def random_selection_data(rng, n=20, dim_sel=4, n_pred=2, soft=False):
    """Random selection set with an intercept in column 0 (shared by both equations)."""
    x = np.c_[np.ones(n), rng.standard_normal((n, dim_sel - 1))]
    pred_idx = np.r_[0, rng.choice(np.arange(1, dim_sel), n_pred - 1, replace=False)]
    s = (rng.random(n) < 0.5).astype(float)
    if soft:
        s[s == 0] = rng.uniform(0.05, 0.6)
    y = np.where(s > 0, (rng.random(n) < 0.5).astype(float), np.nan)
    return SelectionData(x, pred_idx, y, s)


def random_params(rng, dim_pred, dim_sel):
    return GreeneParams(rng.normal(0, 0.8, dim_pred), rng.normal(0, 0.8, dim_sel),
                        float(rng.uniform(0.2, 1.5)), float(rng.uniform(-0.8, 0.8)))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE, key=lambda k: (int(str(k).rstrip("abcdefghijklmnopqrstuvwxyz")), str(k))):
        status, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:>2}: {status:<4}  {detail}")
