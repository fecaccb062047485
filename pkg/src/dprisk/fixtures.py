"""Named environments with their default parameters.

A fixture builder takes keyword parameters plus a per-run SeedSpec (used only
by fixtures with random ingredients, such as a random base demand) and
returns an Environment.
"""

from __future__ import annotations

import math
import os
from pathlib import Path

import numpy as np

from .core import ContractError, Environment, SeedSpec
from .data import load_gmc_csv, preprocess, synth_credit
from .distmaps import CosineMap, MixtureMap, NonlinearMap, PricingMap, StrategicMap
from .models import MLP2, LinearMeanLoss, LogisticLinear, PricingLoss, QuadraticLoss

GMC_PATH_ENV = "DPRISK_GMC_PATH"
# pool sizes used when the strategic fixture's n is left unset
SYNTHETIC_POOL_N = 2000
GMC_POOL_N = 120_000

DEFAULTS: dict[str, dict] = {
    "mixture": dict(gamma=0.5, a1=1.0, b1=1.0, a2=1.0, b2=1.0, sigma1=1.0, sigma2=0.25, box=[-1.0, 1.0]),
    "cosine": dict(sigma=1.0, box=[-1.5 * math.pi, 1.5 * math.pi]),
    "nonlinear": dict(a0=0.5, a1=1.0, sigma=1.0, box=None),
    "pricing": dict(
        dim=1, mu0=6.0, mu0_std=0.0, eps=1.5, cov_scale=1.0, lam=0.0, coupling_norm="L1", box=None
    ),
    "quadratic_pricing": dict(dim=1, mu0=6.0, mu0_std=0.0, eps=1.5, cov_scale=1.0, box=[-1.0, 1.0]),
    "strategic": dict(
        source="synthetic",
        path=None,
        n=None,
        feature_dim=5,
        separation=2.0,
        data_seed=0,
        model="logistic",
        hidden=16,
        eps=10.0,
        favorable_label=0,
        pathwise=False,
        replace=False,
        balance=True,
    ),
}

DESCRIPTIONS = {
    "mixture": "two-component Gaussian mixture with loss z*theta on [-1, 1]",
    "cosine": "N(cos theta, sigma^2) with loss z*theta on [-3pi/2, 3pi/2]",
    "nonlinear": "N(sqrt(a1 theta + a0), sigma^2) with loss z*theta",
    "pricing": "demand N(mu0 - eps theta, cov_scale I), revenue loss with optional coupling penalty",
    "quadratic_pricing": "pricing demand map with squared loss ||z - theta_M||^2 (jointly convex)",
    "strategic": "strategic classification over a credit pool (synthetic or the delinquency CSV)",
}


def _merge(fixture: str, params: dict | None) -> dict:
    if fixture not in DEFAULTS:
        raise ContractError(f"unknown fixture {fixture!r}; choose from {sorted(DEFAULTS)}")
    merged = dict(DEFAULTS[fixture])
    unknown = set(params or {}) - set(merged)
    if unknown:
        raise ContractError(f"fixture {fixture!r} has no parameter(s) {sorted(unknown)}")
    merged.update(params or {})
    return merged


def _box(box):
    return None if box is None else (np.asarray(box[0], dtype=np.float64), np.asarray(box[1], dtype=np.float64))


def _mu0(p: dict, seed: SeedSpec) -> np.ndarray:
    dim = int(p["dim"])
    mu0 = np.atleast_1d(np.asarray(p["mu0"], dtype=np.float64))
    if mu0.size == 1:
        mu0 = np.full(dim, mu0[0])
    if mu0.size != dim:
        raise ContractError(f"mu0 has {mu0.size} entries but dim is {dim}")
    if p["mu0_std"] > 0:
        mu0 = mu0 + p["mu0_std"] * seed.substream("fixture", "mu0").rng().standard_normal(dim)
    return mu0


def resolve_data_path(path, base_dir=None) -> Path:
    override = os.environ.get(GMC_PATH_ENV)
    if override:
        path = override
    if path is None:
        raise ContractError(f"the delinquency dataset needs a path (fixture parameter 'path' or ${GMC_PATH_ENV})")
    path = Path(path)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return path


def build_environment(fixture: str, params: dict | None = None, seed: SeedSpec = SeedSpec(), base_dir=None) -> Environment:
    p = _merge(fixture, params)
    if fixture == "mixture":
        m = MixtureMap(p["gamma"], p["a1"], p["b1"], p["a2"], p["b2"], p["sigma1"], p["sigma2"])
        return Environment(m, LinearMeanLoss(1), _box(p["box"]), fixture, {"params": p})
    if fixture == "cosine":
        return Environment(CosineMap(p["sigma"]), LinearMeanLoss(1), _box(p["box"]), fixture, {"params": p})
    if fixture == "nonlinear":
        m = NonlinearMap(p["a0"], p["a1"], p["sigma"])
        box = p["box"] if p["box"] is not None else list(m.declared_box)
        return Environment(m, LinearMeanLoss(1), _box(box), fixture, {"params": p})
    if fixture == "pricing":
        mu0 = _mu0(p, seed)
        m = PricingMap(mu0, p["eps"], p["cov_scale"])
        loss = PricingLoss(mu0.size, p["lam"], p["coupling_norm"])
        return Environment(m, loss, _box(p["box"]), fixture, {"params": p, "mu0": mu0})
    if fixture == "quadratic_pricing":
        mu0 = _mu0(p, seed)
        m = PricingMap(mu0, p["eps"], p["cov_scale"])
        return Environment(m, QuadraticLoss(mu0.size), _box(p["box"]), fixture, {"params": p, "mu0": mu0})
    # strategic
    data_seed = SeedSpec(int(p["data_seed"]))
    if p["source"] == "synthetic":
        n = SYNTHETIC_POOL_N if p["n"] is None else int(p["n"])
        ds = synth_credit(n, int(p["feature_dim"]), float(p["separation"]), data_seed)
    elif p["source"] == "gmc":
        raw = load_gmc_csv(resolve_data_path(p["path"], base_dir))
        n = GMC_POOL_N if p["n"] is None else int(p["n"])
        ds = preprocess(raw, balance=bool(p["balance"]), target_n=n, seed=data_seed)
    else:
        raise ContractError(f"unknown strategic data source {p['source']!r}; use 'synthetic' or 'gmc'")
    f = ds.features.shape[1]
    if p["model"] == "logistic":
        model = LogisticLinear(f)
    elif p["model"] == "mlp2":
        model = MLP2(f, int(p["hidden"]))
    else:
        raise ContractError(f"unknown strategic model {p['model']!r}; use 'logistic' or 'mlp2'")
    m = StrategicMap(
        ds.features, ds.labels, model, p["eps"], p["favorable_label"], bool(p["replace"]), bool(p["pathwise"])
    )
    return Environment(m, model, None, fixture, {"params": p, "dataset": ds})


def default_n(env: Environment, requested: int | None) -> int:
    """Sample size per step; strategic pools default to the full pool."""
    if isinstance(env.map, StrategicMap):
        return env.map.pool_size if requested is None else int(requested)
    return 1000 if requested is None else int(requested)


def list_fixtures() -> list[dict]:
    return [{"id": k, "description": DESCRIPTIONS[k], "defaults": DEFAULTS[k]} for k in DEFAULTS]
