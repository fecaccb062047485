"""Multi-seed experiment runs, aggregation and export.

A config is one JSON document. Runs use run_index 0..n_runs-1 under the same
master seed; every output file is written after all runs finish.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .algorithms import (
    ALGORITHMS,
    OptimizerState,
    StopRule,
    Trajectory,
    run_dperfgd,
    run_perfgd,
    run_rgd,
    run_rrm,
)
from .core import ContractError, Environment, SampleBatch, SeedSpec
from .fixtures import DEFAULTS, build_environment, default_n
from .landscape import dr_grid_1d, dr_slice
from .models import PricingLoss
from .riskgrad import DATA_ESTIMATORS


class ConfigError(ContractError):
    """The experiment config is malformed or references unknown ids."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class FixtureSpec(_Strict):
    id: str
    params: dict = Field(default_factory=dict)

    @field_validator("id")
    @classmethod
    def _known(cls, v):
        if v not in DEFAULTS:
            raise ValueError(f"unknown fixture id {v!r}; choose from {sorted(DEFAULTS)}")
        return v


class OptimizerSpec(_Strict):
    kind: Literal["gd", "momentum", "adam"] = "gd"
    learning_rate: float = Field(0.1, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)

    def state(self) -> OptimizerState:
        return OptimizerState(self.kind, self.learning_rate, self.momentum)


class StopSpec(_Strict):
    max_steps: int = Field(100, ge=1)
    param_tol: float = Field(0.0, ge=0)


class AlgorithmSpec(_Strict):
    id: str
    estimator: str = "auto"
    optimizer: OptimizerSpec = Field(default_factory=OptimizerSpec)
    stop: StopSpec = Field(default_factory=StopSpec)
    inner_tol: float = Field(1e-4, ge=0)
    inner_cap: int = Field(10_000, ge=1)
    alternating: bool = False
    fd_step: float = Field(1e-4, gt=0)

    @field_validator("id")
    @classmethod
    def _known(cls, v):
        if v not in ALGORITHMS:
            raise ValueError(f"unknown algorithm id {v!r}; choose from {list(ALGORITHMS)}")
        return v

    @field_validator("estimator")
    @classmethod
    def _estimator(cls, v):
        if v != "auto" and v not in DATA_ESTIMATORS:
            raise ValueError(f"unknown estimator {v!r}; choose from {list(DATA_ESTIMATORS)} or 'auto'")
        return v


class Theta0Spec(_Strict):
    kind: Literal["normal", "zeros", "value"] = "normal"
    value: list[float] | float | None = None
    scale: float = 1.0


class OutputSpec(_Strict):
    kind: Literal["trajectory", "metrics", "landscape"]
    format: Literal["jsonl", "csv", "json"] | None = None
    mode: Literal["grid1d", "slice"] = "grid1d"
    resolution: int = Field(101, ge=2)
    lo: float | None = None
    hi: float | None = None
    direction_seed: int = 0


class ExperimentConfig(_Strict):
    fixture: FixtureSpec
    algorithm: AlgorithmSpec
    n_runs: int = Field(10, ge=1)
    n_samples: int | None = Field(None, ge=1)
    master_seed: int = Field(0, ge=0, lt=2**64)
    theta0: Theta0Spec = Field(default_factory=Theta0Spec)
    outputs: list[OutputSpec] = Field(default_factory=lambda: [OutputSpec(kind="metrics")])


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: invalid JSON ({exc.msg})") from None
    return parse_config(raw, str(path))


def parse_config(raw: dict, origin: str = "<config>") -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        lines = []
        for err in exc.errors():
            where = ".".join(str(p) for p in err["loc"])
            lines.append(f"{origin}: {where}: {err['msg']}")
        raise ConfigError("\n".join(lines)) from None


# -- metrics -----------------------------------------------------------------
def revenue_metric(batch: SampleBatch, theta_M) -> float:
    """Mean revenue theta_M . z over the batch (the pricing loss without its penalty)."""
    theta_M = np.asarray(theta_M, dtype=np.float64)
    return float(np.mean(batch.features @ theta_M))


def task_metrics(env: Environment, batch: SampleBatch, theta_M) -> dict:
    if isinstance(env.model, PricingLoss):
        return {"revenue": revenue_metric(batch, theta_M)}
    if env.model.is_classifier:
        return {"accuracy": env.model.accuracy(batch, theta_M)}
    return {}


# -- running -----------------------------------------------------------------
RECORD_METRICS = ("risk", "grad_M_norm", "grad_D_norm", "grad_PR_norm")


def step_records(traj: Trajectory):
    """One record per step: deployments for retraining schemes, every record for DPerfGD."""
    if traj.algorithm == "dperfgd":
        return list(traj.records)
    return traj.by_phase("deployment")


@dataclass
class AggregateResult:
    steps: np.ndarray
    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    n_runs: int
    padded: list[bool]
    partial: bool
    finals: list[dict]
    trajectories: list[Trajectory] = field(repr=False, default_factory=list)
    errors: list[str] = field(default_factory=list)

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["step", "metric", "mean", "std"])
        for i, s in enumerate(self.steps):
            for name in self.mean:
                w.writerow([int(s), name, repr(float(self.mean[name][i])), repr(float(self.std[name][i]))])
        return buf.getvalue()

    def meta(self) -> dict:
        return {
            "n_runs": self.n_runs,
            "partial": self.partial,
            "padded": self.padded,
            "errors": self.errors,
            "finals": self.finals,
        }

    def final_mean(self, metric: str) -> float:
        return float(self.mean[metric][-1])

    def final_std(self, metric: str) -> float:
        return float(self.std[metric][-1])


def _theta0(cfg: ExperimentConfig, env: Environment, seed: SeedSpec) -> np.ndarray:
    init = cfg.theta0
    if init.kind == "zeros":
        return np.zeros(env.theta_dim)
    if init.kind == "value":
        if init.value is None:
            raise ConfigError("theta0.kind 'value' needs theta0.value")
        v = np.atleast_1d(np.asarray(init.value, dtype=np.float64))
        return np.full(env.theta_dim, v[0]) if v.size == 1 else v
    return init.scale * env.model.init_params(seed.substream("theta0").rng())


def run_one(cfg: ExperimentConfig, run_index: int, base_dir=None) -> tuple[Environment, Trajectory]:
    seed = SeedSpec(cfg.master_seed, run_index)
    env = build_environment(cfg.fixture.id, cfg.fixture.params, seed, base_dir)
    n = default_n(env, cfg.n_samples)
    alg = cfg.algorithm
    opt = alg.optimizer.state()
    stop = StopRule(alg.stop.max_steps, alg.stop.param_tol)
    theta0 = _theta0(cfg, env, seed)
    run_seed = seed.substream("run")
    common = dict(estimator=alg.estimator, metrics=task_metrics, fd_step=alg.fd_step)
    if alg.id == "rgd":
        traj = run_rgd(env, theta0, opt, stop, n, run_seed, **common)
    elif alg.id == "perfgd":
        traj = run_perfgd(env, theta0, opt, stop, n, run_seed, **common)
    elif alg.id == "rrm":
        traj = run_rrm(env, theta0, opt, alg.inner_tol, stop, n, run_seed, inner_cap=alg.inner_cap, **common)
    else:
        traj = run_dperfgd(env, theta0, theta0, opt, stop, n, run_seed, alternating=alg.alternating, **common)
    return env, traj


def aggregate(trajectories: list[Trajectory], errors: list[str] | None = None) -> AggregateResult:
    """Align runs by step index, padding short runs with their final value."""
    errors = list(errors or [])
    series = [step_records(t) for t in trajectories if t.records]
    if not series:
        raise ContractError("no run produced any records")
    names = list(RECORD_METRICS) + sorted({k for s in series for r in s for k in r.metrics})
    length = max(len(s) for s in series)
    steps = None
    table = {k: np.empty((len(series), length)) for k in names}
    padded = []
    for i, recs in enumerate(series):
        padded.append(len(recs) < length)
        if len(recs) == length:
            steps = np.array([r.step for r in recs])
        for k in names:
            vals = [getattr(r, k) if k in RECORD_METRICS else r.metrics.get(k, np.nan) for r in recs]
            vals += [vals[-1]] * (length - len(vals))
            table[k][i] = vals
    finals = []
    for t in trajectories:
        if not t.records:
            finals.append({"aborted": True, "reason": t.abort_reason})
            continue
        last = step_records(t)[-1]
        d = last.to_dict()
        if len(d["theta_M"]) > 16:
            d["theta_M"] = d["theta_D"] = None
        d.update(aborted=t.aborted, reason=t.abort_reason)
        finals.append(d)
    partial = bool(errors) or any(t.aborted for t in trajectories)
    return AggregateResult(
        steps=steps,
        mean={k: table[k].mean(axis=0) for k in names},
        std={k: table[k].std(axis=0) for k in names},
        n_runs=len(trajectories),
        padded=padded,
        partial=partial,
        finals=finals,
        trajectories=trajectories,
        errors=errors,
    )


def _landscape(cfg: ExperimentConfig, out: OutputSpec, env: Environment, n: int):
    seed = SeedSpec(cfg.master_seed, 0).substream("landscape")
    if out.mode == "grid1d":
        if env.param_box is not None:
            lo, hi = float(env.param_box[0][0]), float(env.param_box[1][0])
        else:
            lo, hi = -1.0, 1.0
        lo = out.lo if out.lo is not None else lo
        hi = out.hi if out.hi is not None else hi
        return dr_grid_1d(env, lo, hi, out.resolution, n, seed)
    center = np.zeros(env.theta_dim)
    return dr_slice(env, center, out.resolution, n=n, seed=seed, direction_seed=out.direction_seed)


def run_experiment(cfg: ExperimentConfig, out_dir=None, base_dir=None) -> AggregateResult:
    """Run every seed, aggregate, and write the requested exports under ``out_dir``."""
    trajs, errors = [], []
    env0 = None
    for k in range(cfg.n_runs):
        try:
            env, traj = run_one(cfg, k, base_dir)
        except (ContractError, FloatingPointError) as exc:
            if k == 0 and not isinstance(exc, FloatingPointError):
                raise
            errors.append(f"run {k}: {exc}")
            continue
        env0 = env0 or env
        trajs.append(traj)
    result = aggregate(trajs, errors)
    if out_dir is not None:
        files = {}
        for out in cfg.outputs:
            if out.kind == "metrics":
                files["metrics.csv"] = result.metrics_csv()
                files["metrics_meta.json"] = json.dumps(result.meta(), indent=1) + "\n"
            elif out.kind == "trajectory":
                fmt = out.format or "jsonl"
                for k, t in enumerate(trajs):
                    files[f"trajectory_run{k}.{fmt}"] = t.to_csv() if fmt == "csv" else t.to_jsonl()
            else:
                grid = _landscape(cfg, out, env0, default_n(env0, cfg.n_samples))
                files["landscape.csv"] = grid.to_csv()
                files["landscape.json"] = grid.to_json()
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, text in files.items():
            with open(out_dir / name, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(text)
    return result
