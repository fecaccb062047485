"""Gradients of the decoupled risk.

grad_M_DR differentiates through the loss only. The data-side partial
grad_D_DR has three estimators: pathwise (reparametrization), score function
(REINFORCE) and central finite differences with common random numbers. Any
term of the loss that depends on theta_D directly (the pricing coupling
penalty) is added explicitly by every estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    CapabilityError,
    ContractError,
    Environment,
    NumericError,
    SampleBatch,
    SeedSpec,
    losses_on_batch,
)

ESTIMATORS = ("model_partial", "reparam", "reinforce", "finite_diff", "perf_chain")
DATA_ESTIMATORS = ("reparam", "reinforce", "finite_diff")
DEFAULT_FD_STEP = 1e-4


@dataclass(frozen=True)
class GradEstimate:
    vector: np.ndarray
    estimator: str
    n_samples: int
    seed: SeedSpec | None = None
    stderr: np.ndarray | None = None

    def __post_init__(self):
        if self.estimator not in ESTIMATORS:
            raise ContractError(f"unknown estimator tag {self.estimator!r}")
        vec = np.asarray(self.vector, dtype=np.float64)
        if not np.all(np.isfinite(vec)):
            bad = int(np.flatnonzero(~np.isfinite(vec))[0])
            raise NumericError(f"{self.estimator} gradient is non-finite at coordinate {bad}", index=bad)
        object.__setattr__(self, "vector", vec)

    @property
    def norm(self) -> float:
        return float(np.sqrt(np.sum(self.vector**2)))


def _stderr(per_sample: np.ndarray) -> np.ndarray:
    n = per_sample.shape[0]
    if n < 2:
        return np.full(per_sample.shape[1], np.inf)
    return per_sample.std(axis=0, ddof=1) / math.sqrt(n)


def _theta_M(env: Environment, theta_M) -> np.ndarray:
    return env.check(theta_M, "theta_M")


def grad_M_DR(
    env: Environment, batch: SampleBatch, theta_M, seed: SeedSpec | None = None, with_stderr: bool = False
) -> GradEstimate:
    """Mean of d loss / d theta_M over ``batch``."""
    theta_M = _theta_M(env, theta_M)
    args = (batch.features, batch.labels, theta_M, batch.inducing_params)
    stderr = None
    if with_stderr:
        per = env.model.grad_theta(*args)
        vec, stderr = per.mean(axis=0), _stderr(per)
    else:
        vec = env.model.mean_grad_theta(*args)
    return GradEstimate(vec, "model_partial", len(batch), seed, stderr)


def _require_pathwise(env: Environment):
    caps = env.map.capabilities
    if not caps.has_pushforward:
        raise CapabilityError(f"{env.map.name} map has no push-forward; use 'reinforce' or 'finite_diff'")
    if not caps.has_analytic_jacobian:
        raise CapabilityError(
            f"{env.map.name} map has no analytic push-forward Jacobian; use the 'finite_diff' estimator"
        )


def grad_D_DR_reparam(
    env: Environment, batch: SampleBatch, theta_M, seed: SeedSpec | None = None, with_stderr: bool = False
) -> GradEstimate:
    """Pathwise estimate: mean over base draws of grad_z loss^T d phi / d theta_D."""
    _require_pathwise(env)
    if batch.base is None:
        raise ContractError("the pathwise estimator needs a batch that carries its base draws")
    theta_M = _theta_M(env, theta_M)
    theta_D = batch.inducing_params
    g = env.model.grad_z(batch.features, batch.labels, theta_M, theta_D)
    explicit = env.model.grad_theta_D(theta_M, theta_D)
    stderr = None
    if with_stderr:
        per = env.map.vjp(batch.base, theta_D, g)
        vec, stderr = per.mean(axis=0), _stderr(per)
    else:
        vec = env.map.mean_vjp(batch.base, theta_D, g)
    return GradEstimate(vec + explicit, "reparam", len(batch), seed, stderr)


def _reinforce_terms(env: Environment, batch: SampleBatch, theta_M, baseline: bool) -> np.ndarray:
    caps = env.map.capabilities
    if not caps.has_log_density_grad:
        raise CapabilityError(f"{env.map.name} map has no usable log-density gradient; REINFORCE is unavailable")
    theta_D = batch.inducing_params
    losses = losses_on_batch(env, batch, theta_M)
    score = env.map.log_density_grad(batch.features, theta_D)
    n = losses.size
    if baseline and n > 1:
        # leave-one-out mean keeps each baseline independent of its own sample
        losses = losses - (losses.sum() - losses) / (n - 1)
    return losses[:, None] * score


def grad_D_DR_reinforce(
    env: Environment,
    batch: SampleBatch,
    theta_M,
    seed: SeedSpec | None = None,
    baseline: bool = True,
) -> GradEstimate:
    """Score-function estimate: mean of loss * d log p / d theta_D."""
    theta_M = _theta_M(env, theta_M)
    per = _reinforce_terms(env, batch, theta_M, baseline)
    explicit = env.model.grad_theta_D(theta_M, batch.inducing_params)
    return GradEstimate(per.mean(axis=0) + explicit, "reinforce", len(batch), seed, _stderr(per))


def grad_D_DR_fd(
    env: Environment,
    theta_M,
    theta_D,
    n: int,
    seed: SeedSpec,
    h: float = DEFAULT_FD_STEP,
    with_stderr: bool = False,
) -> GradEstimate:
    """Central differences of theta_D -> DR(theta_M, theta_D).

    Both probes of a coordinate reuse ``seed``, so they see the same base draws.
    """
    if not h > 0:
        raise ContractError("finite-difference step h must be positive")
    theta_M = _theta_M(env, theta_M)
    theta_D = env.check(theta_D, "theta_D")
    p = env.theta_dim
    vec = np.empty(p)
    stderr = np.empty(p) if with_stderr else None
    for i in range(p):
        up, down = theta_D.copy(), theta_D.copy()
        up[i] += h
        down[i] -= h
        lp = losses_on_batch(env, env.map.sample(up, n, seed), theta_M)
        lm = losses_on_batch(env, env.map.sample(down, n, seed), theta_M)
        vec[i] = (float(np.mean(lp)) - float(np.mean(lm))) / (2.0 * h)
        if not math.isfinite(vec[i]):
            raise NumericError(f"finite-difference probe along coordinate {i} is non-finite", index=i)
        if with_stderr:
            stderr[i] = _stderr(((lp - lm) / (2.0 * h))[:, None])[0]
    return GradEstimate(vec, "finite_diff", n, seed, stderr)


def default_estimator(env: Environment) -> str:
    caps = env.map.capabilities
    if caps.has_pushforward and caps.has_analytic_jacobian:
        return "reparam"
    if caps.has_log_density_grad:
        return "reinforce"
    return "finite_diff"


def grad_D_DR(
    env: Environment,
    batch: SampleBatch,
    theta_M,
    n: int,
    seed: SeedSpec,
    estimator: str = "auto",
    h: float = DEFAULT_FD_STEP,
    baseline: bool = True,
) -> GradEstimate:
    """Dispatch to one data-side estimator. ``batch`` must be map.sample(theta_D, n, seed)."""
    if estimator == "auto":
        estimator = default_estimator(env)
    if estimator == "reparam":
        return grad_D_DR_reparam(env, batch, theta_M, seed)
    if estimator == "reinforce":
        return grad_D_DR_reinforce(env, batch, theta_M, seed, baseline=baseline)
    if estimator == "finite_diff":
        return grad_D_DR_fd(env, theta_M, batch.inducing_params, n, seed, h)
    raise ContractError(f"unknown estimator {estimator!r}; choose from {DATA_ESTIMATORS} or 'auto'")


def perf_grad(
    env: Environment,
    theta,
    n: int,
    seed: SeedSpec,
    estimator: str = "auto",
    h: float = DEFAULT_FD_STEP,
) -> GradEstimate:
    """Performative gradient grad_M DR + grad_D DR at theta_M = theta_D = theta on one shared batch."""
    theta = env.check(theta)
    batch = env.map.sample(theta, n, seed)
    gm = grad_M_DR(env, batch, theta, seed)
    gd = grad_D_DR(env, batch, theta, n, seed, estimator, h)
    return GradEstimate(gm.vector + gd.vector, "perf_chain", n, seed)


def _max_rel_err(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale


def validate_gradients(
    env: Environment,
    theta_M,
    theta_D,
    n: int,
    seed: SeedSpec,
    tolerance: float = 1e-6,
    fd_tolerance: float = 1e-3,
    h: float = DEFAULT_FD_STEP,
    z_crit: float = 3.0,
    require_analytic: bool = False,
) -> dict:
    """Cross-check every available data-side estimator.

    Deterministic pairs (pathwise vs finite differences) must agree to
    ``tolerance`` in max relative error; finite differences at h and h/2 must
    agree to ``fd_tolerance``; REINFORCE is stochastic and must sit within
    ``z_crit`` combined standard errors of the pathwise (or FD) estimate.
    """
    theta_M = _theta_M(env, theta_M)
    theta_D = env.check(theta_D, "theta_D")
    caps = env.map.capabilities
    if require_analytic and not (caps.has_pushforward and caps.has_analytic_jacobian):
        raise CapabilityError(f"{env.map.name} map has no analytic path; only finite differences are available")
    batch = env.map.sample(theta_D, n, seed)
    est: dict[str, GradEstimate] = {}
    if caps.has_pushforward and caps.has_analytic_jacobian:
        est["reparam"] = grad_D_DR_reparam(env, batch, theta_M, seed, with_stderr=True)
    if caps.has_log_density_grad:
        est["reinforce"] = grad_D_DR_reinforce(env, batch, theta_M, seed)
    est["finite_diff"] = grad_D_DR_fd(env, theta_M, theta_D, n, seed, h, with_stderr=True)
    est["finite_diff_half"] = grad_D_DR_fd(env, theta_M, theta_D, n, seed, h / 2.0, with_stderr=True)

    pairs = []

    def exact(a, b, tol):
        err = _max_rel_err(est[a].vector, est[b].vector)
        pairs.append(
            {"estimator_pair": f"{a}~{b}", "kind": "exact", "max_rel_err": err, "tolerance": tol, "passed": err <= tol}
        )

    if "reparam" in est:
        exact("reparam", "finite_diff", tolerance)
    exact("finite_diff", "finite_diff_half", fd_tolerance)
    if "reinforce" in est:
        ref = "reparam" if "reparam" in est else "finite_diff"
        a, b = est["reinforce"], est[ref]
        se = np.sqrt(a.stderr**2 + b.stderr**2)
        diff = np.abs(a.vector - b.vector)
        with np.errstate(divide="ignore", invalid="ignore"):
            z = np.where(se > 0, diff / se, np.where(diff > 0, np.inf, 0.0))
        max_z = float(np.max(z))
        pairs.append(
            {
                "estimator_pair": f"reinforce~{ref}",
                "kind": "stochastic",
                "max_rel_err": _max_rel_err(a.vector, b.vector),
                "max_z": max_z,
                "tolerance": z_crit,
                "passed": max_z <= z_crit,
            }
        )
    for p in pairs:
        p["n"] = int(n)
        p["seed"] = seed.to_dict()
    return {
        "passed": all(p["passed"] for p in pairs),
        "map": env.map.name,
        "theta_dim": env.theta_dim,
        "estimates": {k: v.vector.tolist() for k, v in est.items()},
        "pairs": pairs,
    }
