from __future__ import annotations

import math

import numpy as np
import pandas as pd
import pytest

from autodiff import RngStream
from data import generate, placeholder
from harness import RESULT_COLUMNS
from models import AnalyticModel, analytic_loss, build_model
from optimizers import OptimizerConfig


@pytest.fixture
def moons():
    return generate("two-moons", 60, noise=0.1, seed=0)


@pytest.fixture
def mlp(moons):
    return build_model("mlp[2-8-2]", RngStream(0).child("model"))


@pytest.fixture
def mlpbn(moons):
    return build_model("mlpbn[2-6-2]", RngStream(0).child("model"))


@pytest.fixture
def stripes():
    return generate("stripes", 40, noise=0.1, seed=0, side=5)


@pytest.fixture
def make_analytic():
    def make(kind, theta, **shape):
        model = AnalyticModel(analytic_loss(kind, **shape))
        return model, model.params(np.asarray(theta, dtype=np.float64))

    return make


@pytest.fixture
def sgd():
    return OptimizerConfig(base="sgd", lr=0.05, epochs=20, batch_size=8)


@pytest.fixture
def unit_data():
    return placeholder(1)


@pytest.fixture
def results_frame():
    """Two seeds of every mode, on val and on test, as a sweep writes them."""
    scores = {"baseline": [0.80, 0.90], "swa": [0.85, 0.95], "sam": [0.90, 0.90], "wasam": [0.90, 0.94]}
    settings = {"baseline": (math.nan, math.nan), "swa": (math.nan, 0.75), "sam": (0.05, math.nan),
                "wasam": (0.05, 0.75)}
    rows = []
    for mode, values in scores.items():
        for seed, value in enumerate(values):
            rho, frac = settings[mode]
            for split, metric in (("val", value - 0.01), ("test", value)):
                rows.append({"mode": mode, "rho": rho, "swa_start_frac": frac, "seed": seed,
                             "split": split, "metric": metric, "loss": 1.0 - metric, "diverged": 0})
    return pd.DataFrame(rows, columns=RESULT_COLUMNS)
