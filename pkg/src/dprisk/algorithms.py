"""Repeated retraining and performative descent.

Standard performative prediction alternates two phases: an optimization
phase that moves theta_M on the current data, and a deployment phase that
sets theta_D = theta_M and resamples. DPerfGD instead descends on both
partials of the decoupled risk at once and never couples theta_M and theta_D.

Every record is evaluated at its own (theta_M, theta_D) pair on a batch drawn
at theta_D. Step t draws that batch from ``seed.substream("step", t)``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .core import (
    ContractError,
    Environment,
    NumericError,
    SampleBatch,
    SeedSpec,
    norm,
    risk_on_batch,
)
from .riskgrad import grad_D_DR, grad_M_DR

OPTIMIZERS = ("gd", "momentum", "adam")
PHASES = ("optimization", "deployment")
CSV_THETA_CAP = 16


# -- optimizers -----------------------------------------------------------
@dataclass(frozen=True)
class OptimizerState:
    """Optimizer hyperparameters plus its running moments.

    momentum: v <- m v + g, theta <- theta - lr v.
    adam: bias-corrected first and second moments.
    """

    kind: str = "gd"
    learning_rate: float = 0.1
    momentum: float = 0.9
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    velocity: np.ndarray | None = None
    second: np.ndarray | None = None
    t: int = 0

    def __post_init__(self):
        if self.kind not in OPTIMIZERS:
            raise ContractError(f"unknown optimizer {self.kind!r}; choose from {OPTIMIZERS}")
        if not self.learning_rate >= 0:
            raise ContractError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")

    def fresh(self) -> OptimizerState:
        return replace(self, velocity=None, second=None, t=0)


def optimizer_step(state: OptimizerState, theta, grad) -> tuple[np.ndarray, OptimizerState]:
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if theta.shape != grad.shape:
        raise ContractError(f"gradient shape {grad.shape} does not match parameter shape {theta.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.flatnonzero(~np.isfinite(grad))[0])
        raise NumericError(f"non-finite gradient at coordinate {bad}", index=bad)
    lr = state.learning_rate
    if state.kind == "gd":
        return theta - lr * grad, replace(state, t=state.t + 1)
    if state.kind == "momentum":
        v = grad if state.velocity is None else state.momentum * state.velocity + grad
        return theta - lr * v, replace(state, velocity=v, t=state.t + 1)
    t = state.t + 1
    m = np.zeros_like(grad) if state.velocity is None else state.velocity
    s = np.zeros_like(grad) if state.second is None else state.second
    m = state.beta1 * m + (1.0 - state.beta1) * grad
    s = state.beta2 * s + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    s_hat = s / (1.0 - state.beta2**t)
    step = lr * m_hat / (np.sqrt(s_hat) + state.adam_eps)
    return theta - step, replace(state, velocity=m, second=s, t=t)


@dataclass(frozen=True)
class StopRule:
    max_steps: int = 100
    param_tol: float = 0.0

    def __post_init__(self):
        if self.max_steps < 1:
            raise ContractError("max_steps must be at least 1")
        if self.param_tol < 0:
            raise ContractError("param_tol must be non-negative")


# -- trajectories ---------------------------------------------------------
@dataclass
class TrajectoryRecord:
    step: int
    phase: str
    theta_M: np.ndarray
    theta_D: np.ndarray
    risk: float
    grad_M_norm: float
    grad_D_norm: float
    grad_PR_norm: float
    wallclock_ms: float = 0.0
    metrics: dict = field(default_factory=dict)
    inner_converged: bool | None = None
    inner_steps: int | None = None

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "step": self.step,
            "phase": self.phase,
            "theta_M": [float(v) for v in self.theta_M],
            "theta_D": [float(v) for v in self.theta_D],
            "risk": self.risk,
            "grad_M_norm": self.grad_M_norm,
            "grad_D_norm": self.grad_D_norm,
            "grad_PR_norm": self.grad_PR_norm,
        }
        if include_timing:
            out["wallclock_ms"] = self.wallclock_ms
        if self.metrics:
            out["metrics"] = dict(self.metrics)
        if self.inner_converged is not None:
            out["inner_converged"] = self.inner_converged
            out["inner_steps"] = self.inner_steps
        return out

    @classmethod
    def from_dict(cls, d: dict) -> TrajectoryRecord:
        return cls(
            step=int(d["step"]),
            phase=d["phase"],
            theta_M=np.asarray(d["theta_M"], dtype=np.float64),
            theta_D=np.asarray(d["theta_D"], dtype=np.float64),
            risk=float(d["risk"]),
            grad_M_norm=float(d["grad_M_norm"]),
            grad_D_norm=float(d["grad_D_norm"]),
            grad_PR_norm=float(d["grad_PR_norm"]),
            wallclock_ms=float(d.get("wallclock_ms", 0.0)),
            metrics=dict(d.get("metrics", {})),
            inner_converged=d.get("inner_converged"),
            inner_steps=d.get("inner_steps"),
        )


CSV_HEAD = ["step", "phase", "risk", "grad_M_norm", "grad_D_norm", "grad_PR_norm"]


@dataclass
class Trajectory:
    algorithm: str
    records: list[TrajectoryRecord] = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""

    def __len__(self):
        return len(self.records)

    @property
    def final(self) -> TrajectoryRecord:
        return self.records[-1]

    def by_phase(self, phase: str) -> list[TrajectoryRecord]:
        return [r for r in self.records if r.phase == phase]

    def to_jsonl(self, include_timing: bool = False) -> str:
        return "".join(json.dumps(r.to_dict(include_timing)) + "\n" for r in self.records)

    @classmethod
    def from_jsonl(cls, text: str, algorithm: str = "") -> Trajectory:
        recs = [TrajectoryRecord.from_dict(json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(algorithm, recs)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        dim = self.records[0].theta_M.size if self.records else 0
        if dim > CSV_THETA_CAP:
            theta_cols = ["theta_M_norm", "theta_D_norm"]
        else:
            theta_cols = [f"theta_M_{i}" for i in range(dim)] + [f"theta_D_{i}" for i in range(dim)]
        w.writerow(CSV_HEAD + theta_cols)
        for r in self.records:
            row = [r.step, r.phase] + [repr(float(v)) for v in (r.risk, r.grad_M_norm, r.grad_D_norm, r.grad_PR_norm)]
            if dim > CSV_THETA_CAP:
                row += [repr(norm(r.theta_M)), repr(norm(r.theta_D))]
            else:
                row += [repr(float(v)) for v in r.theta_M] + [repr(float(v)) for v in r.theta_D]
            w.writerow(row)
        return buf.getvalue()


# -- evaluation -----------------------------------------------------------
Metrics = Callable[[Environment, SampleBatch, np.ndarray], dict]


@dataclass
class _Eval:
    risk: float
    g_M: np.ndarray
    g_D: np.ndarray


class _Runner:
    """Shared bookkeeping for one trajectory."""

    def __init__(self, env, n, seed, estimator, metrics, fd_step):
        if n < 1:
            raise ContractError("n must be at least 1")
        self.env, self.n, self.seed = env, int(n), seed
        self.estimator, self.metrics, self.fd_step = estimator, metrics, fd_step
        self.t0 = time.perf_counter()

    def batch(self, theta_D, step: int) -> tuple[SampleBatch, SeedSpec]:
        s = self.seed.substream("step", step)
        return self.env.map.sample(theta_D, self.n, s), s

    def evaluate(self, batch, bseed, theta_M, need_D: bool = True) -> _Eval:
        env = self.env
        g_M = grad_M_DR(env, batch, theta_M).vector
        if need_D:
            g_D = grad_D_DR(env, batch, theta_M, self.n, bseed, self.estimator, self.fd_step).vector
        else:
            g_D = np.full(env.theta_dim, np.nan)
        return _Eval(risk_on_batch(env, batch, theta_M), g_M, g_D)

    def record(self, step, phase, theta_M, theta_D, ev: _Eval, batch, pr_norm=None, **extra):
        metrics = self.metrics(self.env, batch, theta_M) if self.metrics else {}
        g_D_norm = norm(ev.g_D) if np.all(np.isfinite(ev.g_D)) else float("nan")
        if pr_norm is None:
            pr_norm = norm(ev.g_M + ev.g_D) if np.all(np.isfinite(ev.g_D)) else float("nan")
        return TrajectoryRecord(
            step=step,
            phase=phase,
            theta_M=np.array(theta_M, dtype=np.float64),
            theta_D=np.array(theta_D, dtype=np.float64),
            risk=ev.risk,
            grad_M_norm=norm(ev.g_M),
            grad_D_norm=g_D_norm,
            grad_PR_norm=pr_norm,
            wallclock_ms=(time.perf_counter() - self.t0) * 1e3,
            metrics=metrics,
            **extra,
        )


def _finite_or_raise(theta: np.ndarray, what: str):
    if not np.all(np.isfinite(theta)):
        bad = int(np.flatnonzero(~np.isfinite(theta))[0])
        raise NumericError(f"{what} became non-finite at coordinate {bad}", index=bad)


def _start(env: Environment, theta0) -> np.ndarray:
    return np.array(env.clip(env.check(theta0, "theta0")), dtype=np.float64)


def _standard_pp(
    name: str,
    env: Environment,
    theta0,
    opt: OptimizerState,
    stop: StopRule,
    n: int,
    seed: SeedSpec,
    estimator: str,
    metrics: Metrics | None,
    fd_step: float,
    use_perf: bool,
    diagnostics: bool,
) -> Trajectory:
    run = _Runner(env, n, seed, estimator, metrics, fd_step)
    traj = Trajectory(name)
    state = opt.fresh()
    need_D = use_perf or diagnostics
    try:
        theta = _start(env, theta0)
        batch, bseed = run.batch(theta, 0)
        ev = run.evaluate(batch, bseed, theta, need_D)
        traj.records.append(run.record(0, "deployment", theta, theta, ev, batch))
        for t in range(1, stop.max_steps + 1):
            grad = ev.g_M + ev.g_D if use_perf else ev.g_M
            new, state = optimizer_step(state, theta, grad)
            _finite_or_raise(new, "theta_M")
            new = env.clip(new)
            ev_opt = run.evaluate(batch, bseed, new, need_D)
            traj.records.append(run.record(t, "optimization", new, theta, ev_opt, batch))
            moved = norm(new - theta)
            theta = new
            batch, bseed = run.batch(theta, t)
            ev = run.evaluate(batch, bseed, theta, need_D)
            traj.records.append(run.record(t, "deployment", theta, theta, ev, batch))
            if moved < stop.param_tol:
                break
    except NumericError as exc:
        traj.aborted, traj.abort_reason = True, str(exc)
    return traj


def run_rgd(
    env: Environment,
    theta0,
    opt: OptimizerState,
    stop: StopRule,
    n: int,
    seed: SeedSpec,
    estimator: str = "auto",
    metrics: Metrics | None = None,
    fd_step: float = 1e-4,
    diagnostics: bool = True,
) -> Trajectory:
    """Repeated gradient descent: one step on grad_M DR, then deploy.

    With ``diagnostics`` the data-side gradient is also estimated so records
    carry all three gradient norms; it never affects the iterates.
    """
    return _standard_pp("rgd", env, theta0, opt, stop, n, seed, estimator, metrics, fd_step, False, diagnostics)


def run_perfgd(
    env: Environment,
    theta0,
    opt: OptimizerState,
    stop: StopRule,
    n: int,
    seed: SeedSpec,
    estimator: str = "auto",
    metrics: Metrics | None = None,
    fd_step: float = 1e-4,
) -> Trajectory:
    """Performative gradient descent: step on grad_M DR + grad_D DR, then deploy."""
    return _standard_pp("perfgd", env, theta0, opt, stop, n, seed, estimator, metrics, fd_step, True, True)


def run_rrm(
    env: Environment,
    theta0,
    inner_opt: OptimizerState,
    inner_tol: float,
    stop: StopRule,
    n: int,
    seed: SeedSpec,
    estimator: str = "auto",
    metrics: Metrics | None = None,
    fd_step: float = 1e-4,
    inner_cap: int = 10_000,
    diagnostics: bool = True,
) -> Trajectory:
    """Repeated risk minimization.

    Each outer step freezes theta_D and runs full-batch descent on theta_M
    until an update moves less than ``inner_tol`` (that last update is not
    applied) or ``inner_cap`` steps elapse, then deploys.
    """
    if env.param_box is None:
        raise ContractError("repeated risk minimization needs a param_box; the inner argmin can be unbounded")
    if inner_tol < 0:
        raise ContractError("inner_tol must be non-negative")
    run = _Runner(env, n, seed, estimator, metrics, fd_step)
    traj = Trajectory("rrm")
    try:
        theta = _start(env, theta0)
        batch, bseed = run.batch(theta, 0)
        ev = run.evaluate(batch, bseed, theta, diagnostics)
        traj.records.append(run.record(0, "deployment", theta, theta, ev, batch))
        for t in range(1, stop.max_steps + 1):
            state = inner_opt.fresh()
            cur = theta.copy()
            converged, k = False, 0
            for k in range(inner_cap):
                g = grad_M_DR(env, batch, cur).vector
                new, state = optimizer_step(state, cur, g)
                _finite_or_raise(new, "theta_M")
                new = env.clip(new)
                if norm(new - cur) < inner_tol:
                    converged = True
                    break
                cur = new
            ev_opt = run.evaluate(batch, bseed, cur, diagnostics)
            traj.records.append(
                run.record(t, "optimization", cur, theta, ev_opt, batch, inner_converged=converged, inner_steps=k)
            )
            moved = norm(cur - theta)
            theta = cur
            batch, bseed = run.batch(theta, t)
            ev = run.evaluate(batch, bseed, theta, diagnostics)
            traj.records.append(run.record(t, "deployment", theta, theta, ev, batch))
            if moved < stop.param_tol:
                break
    except NumericError as exc:
        traj.aborted, traj.abort_reason = True, str(exc)
    return traj


def run_dperfgd(
    env: Environment,
    theta_M0,
    theta_D0,
    opt: OptimizerState,
    stop: StopRule,
    n: int,
    seed: SeedSpec,
    estimator: str = "auto",
    metrics: Metrics | None = None,
    fd_step: float = 1e-4,
    alternating: bool = False,
) -> Trajectory:
    """Decoupled descent: theta_M on grad_M DR and theta_D on grad_D DR, each clipped.

    Updates are simultaneous by default. With ``alternating`` theta_M moves
    first and grad_D DR is re-evaluated at the new theta_M on the same batch.
    Both partials share one batch per step.
    """
    run = _Runner(env, n, seed, estimator, metrics, fd_step)
    traj = Trajectory("dperfgd")
    state_M, state_D = opt.fresh(), opt.fresh()
    try:
        theta_M = _start(env, theta_M0)
        theta_D = _start(env, theta_D0)
        batch, bseed = run.batch(theta_D, 0)
        ev = run.evaluate(batch, bseed, theta_M)
        traj.records.append(run.record(0, "optimization", theta_M, theta_D, ev, batch))
        for t in range(1, stop.max_steps + 1):
            new_M, state_M = optimizer_step(state_M, theta_M, ev.g_M)
            _finite_or_raise(new_M, "theta_M")
            new_M = env.clip(new_M)
            g_D = ev.g_D
            if alternating:
                g_D = grad_D_DR(env, batch, new_M, run.n, bseed, estimator, fd_step).vector
            new_D, state_D = optimizer_step(state_D, theta_D, g_D)
            _finite_or_raise(new_D, "theta_D")
            new_D = env.clip(new_D)
            moved = math.hypot(norm(new_M - theta_M), norm(new_D - theta_D))
            theta_M, theta_D = new_M, new_D
            batch, bseed = run.batch(theta_D, t)
            ev = run.evaluate(batch, bseed, theta_M)
            traj.records.append(run.record(t, "optimization", theta_M, theta_D, ev, batch))
            if moved < stop.param_tol:
                break
    except NumericError as exc:
        traj.aborted, traj.abort_reason = True, str(exc)
    return traj


ALGORITHMS = ("rgd", "rrm", "perfgd", "dperfgd")
