"""Shared simulation helpers for the test suite."""

import numpy as np
import pytest

import jointfit as jf


def make_dataset(columns: dict, levels=()) -> jf.Dataset:
    cols = {k: np.asarray(v, dtype=float) for k, v in columns.items()}
    n = len(next(iter(cols.values())))
    d = jf.Dataset(cols, n)
    if levels:
        d = jf.build_levels(d, tuple(levels))
    return d


def sim_weibull(n, lam, gamma, beta, seed=0, cens_rate=None):
    """Weibull PH data: h(t) = lam * gamma * t^(gamma-1) * exp(beta * x)."""
    rng = np.random.default_rng(seed)
    x = rng.integers(0, 2, n).astype(float)
    u = rng.random(n)
    t = (-np.log(u) / (lam * np.exp(beta * x))) ** (1.0 / gamma)
    if cens_rate is not None:
        c = rng.exponential(1.0 / cens_rate, n)
        obs = np.minimum(t, c)
        d = (t <= c).astype(float)
    else:
        obs, d = t, np.ones(n)
    return make_dataset({"t": obs, "d": d, "x": x})


def sim_lmm(n_clusters, n_per, beta0, beta1, sd_b, sd_e, seed=0):
    """Gaussian random-intercept data with one covariate x."""
    rng = np.random.default_rng(seed)
    ids = np.repeat(np.arange(n_clusters), n_per)
    b = rng.normal(0.0, sd_b, n_clusters)
    x = rng.normal(size=n_clusters * n_per)
    y = beta0 + beta1 * x + b[ids] + rng.normal(0.0, sd_e, len(ids))
    return make_dataset({"id": ids, "x": x, "y": y}, levels=("id",))


def sim_joint(n_clusters, assoc, seed=0, sd_b=0.5, sd_e=0.3,
              beta_t=0.2, base_rate=0.1, admin=5.0):
    """Shared-random-intercept joint data (longitudinal rows + one
    survival row per cluster)."""
    rng = np.random.default_rng(seed)
    rows = []
    for i in range(n_clusters):
        b0 = rng.normal(0.0, sd_b)
        lam = base_rate * np.exp(assoc * b0)
        t = min(rng.exponential(1.0 / lam), admin)
        d = float(t < admin)
        for tt in (0.0, 1.0, 2.0, 3.0):
            if tt > t:
                break
            y = 1.0 + beta_t * tt + b0 + rng.normal(0.0, sd_e)
            rows.append((i, tt, y, np.nan, np.nan))
        rows.append((i, np.nan, np.nan, t, d))
    arr = np.asarray(rows, dtype=float)
    return make_dataset(
        {"id": arr[:, 0], "time": arr[:, 1], "y": arr[:, 2],
         "st": arr[:, 3], "sd": arr[:, 4]},
        levels=("id",),
    )


def fit_spec(text, data, **controls):
    spec = jf.parse_spec_text(text)
    jf.validate_spec(spec, data)
    return jf.maximize(spec, data, jf.FitControls(**controls))


@pytest.fixture(scope="session")
def lmm_data():
    return sim_lmm(60, 5, 1.5, 0.8, sd_b=0.7, sd_e=0.5, seed=42)


@pytest.fixture(scope="session")
def weibull_data():
    return sim_weibull(800, lam=0.1, gamma=1.4, beta=0.5, seed=7, cens_rate=0.125)
