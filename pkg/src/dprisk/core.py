"""Parameter vectors, sample batches, environments and the seeding contract.

Everything here is an immutable value. Risk evaluation is a pure function of
its arguments and a :class:`SeedSpec`, so repeated calls return identical
floats and concurrent evaluation needs no locking.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterator, NamedTuple, Sequence

import numpy as np

if TYPE_CHECKING:
    from .distmaps import DistributionMap
    from .models import Model


class DPRiskError(Exception):
    """Base class for all toolkit errors."""


class ContractError(DPRiskError, ValueError):
    """A caller violated a precondition (wrong dimension, bad argument)."""


class DomainError(DPRiskError, ValueError):
    """A parameter lies outside the region where a map or oracle is defined."""


class CapabilityError(DPRiskError, TypeError):
    """The requested operation is not supported by this map or model."""


class NumericError(DPRiskError, FloatingPointError):
    """A computation produced NaN or Inf.

    ``index`` is the offending sample (or coordinate) when one can be named.
    """

    def __init__(self, message: str, index: int | None = None):
        super().__init__(message)
        self.index = index


def as_param(values, dim: int | None = None, name: str = "theta") -> np.ndarray:
    """Validate and freeze a parameter vector.

    Scalars become length-1 vectors. The result is a read-only float64 copy.
    """
    arr = np.array(values, dtype=np.float64, copy=True)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.size == 0:
        raise ContractError(f"{name} must be a non-empty 1-D vector, got shape {arr.shape}")
    if dim is not None and arr.size != dim:
        raise ContractError(f"{name} has dimension {arr.size}, expected {dim}")
    if not np.all(np.isfinite(arr)):
        bad = int(np.flatnonzero(~np.isfinite(arr))[0])
        raise NumericError(f"{name} has a non-finite entry at coordinate {bad}", index=bad)
    arr.flags.writeable = False
    return arr


def _stream_key(key) -> int:
    if isinstance(key, str):
        return zlib.crc32(key.encode("utf-8"))
    key = int(key)
    if key < 0:
        raise ContractError(f"stream keys must be non-negative, got {key}")
    return key


@dataclass(frozen=True)
class SeedSpec:
    """Seed for one run of an experiment.

    Each (master_seed, run_index, stream) triple maps to its own counter-based
    Philox generator. Operations draw from named substreams, so adding a new
    consumer of randomness never shifts the draws seen by existing ones.
    """

    master_seed: int = 0
    run_index: int = 0
    stream: tuple[int, ...] = ()

    def __post_init__(self):
        if not 0 <= int(self.master_seed) < 2**64:
            raise ContractError("master_seed must be a 64-bit unsigned integer")
        if int(self.run_index) < 0:
            raise ContractError("run_index must be non-negative")

    def substream(self, *keys) -> SeedSpec:
        return SeedSpec(self.master_seed, self.run_index, self.stream + tuple(_stream_key(k) for k in keys))

    def rng(self) -> np.random.Generator:
        seq = np.random.SeedSequence(
            entropy=int(self.master_seed), spawn_key=(int(self.run_index),) + self.stream
        )
        return np.random.Generator(np.random.Philox(seq))

    def to_dict(self) -> dict:
        return {"master_seed": int(self.master_seed), "run_index": int(self.run_index)}


class Sample(NamedTuple):
    features: np.ndarray
    label: int | None = None


@dataclass(frozen=True)
class BaseDraw:
    """Draws from the base distribution before the push-forward.

    ``values`` holds the continuous part (standard normal noise for the
    Gaussian maps, raw demand for pricing, original features for strategic
    maps). ``components`` holds the mixture component index per row; it is
    part of the base draw and never differentiated through. ``labels`` rides
    along unchanged for classification pools.
    """

    values: np.ndarray
    components: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class SampleBatch:
    features: np.ndarray
    inducing_params: np.ndarray
    labels: np.ndarray | None = None
    base: BaseDraw | None = None

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats.reshape(-1, 1)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ContractError(f"a batch needs a non-empty (n, d) feature array, got {feats.shape}")
        object.__setattr__(self, "features", feats)
        if self.labels is not None and len(self.labels) != feats.shape[0]:
            raise ContractError("labels and features have different lengths")
        if self.base is not None and len(self.base) != feats.shape[0]:
            raise ContractError("base draws and samples have different lengths")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> Iterator[Sample]:
        for i in range(len(self)):
            label = None if self.labels is None else int(self.labels[i])
            yield Sample(self.features[i], label)


def _as_box(box, dim: int) -> tuple[np.ndarray, np.ndarray] | None:
    if box is None:
        return None
    lo, hi = box
    lo = np.broadcast_to(np.asarray(lo, dtype=np.float64), (dim,)).copy()
    hi = np.broadcast_to(np.asarray(hi, dtype=np.float64), (dim,)).copy()
    if np.any(lo > hi):
        raise ContractError("param_box has lo > hi")
    lo.flags.writeable = False
    hi.flags.writeable = False
    return lo, hi


@dataclass(frozen=True)
class Environment:
    """A distribution map bound to a model/loss, defining DR(theta_M, theta_D)."""

    map: DistributionMap
    model: Model
    param_box: tuple[np.ndarray, np.ndarray] | None = None
    name: str = ""
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.map.theta_dim != self.model.theta_dim:
            raise ContractError(
                f"map expects theta of dimension {self.map.theta_dim}, "
                f"model expects {self.model.theta_dim}"
            )
        object.__setattr__(self, "param_box", _as_box(self.param_box, self.theta_dim))

    @property
    def theta_dim(self) -> int:
        return self.model.theta_dim

    @property
    def feature_dim(self) -> int:
        return self.map.feature_dim

    def check(self, theta, name: str = "theta") -> np.ndarray:
        return as_param(theta, self.theta_dim, name)

    def clip(self, theta: np.ndarray) -> np.ndarray:
        if self.param_box is None:
            return theta
        return np.clip(theta, self.param_box[0], self.param_box[1])


def losses_on_batch(env: Environment, batch: SampleBatch, theta_M: np.ndarray) -> np.ndarray:
    """Per-sample losses of ``theta_M`` on ``batch``; raises on any non-finite value."""
    losses = env.model.losses(batch.features, batch.labels, theta_M, batch.inducing_params)
    bad = ~np.isfinite(losses)
    if bad.any():
        i = int(np.flatnonzero(bad)[0])
        raise NumericError(f"non-finite loss at sample {i}", index=i)
    return losses


def risk_on_batch(env: Environment, batch: SampleBatch, theta_M: np.ndarray) -> float:
    return float(np.mean(losses_on_batch(env, batch, theta_M)))


def decoupled_risk(env: Environment, theta_M, theta_D, n: int, seed: SeedSpec) -> float:
    """Empirical DR: mean loss of ``theta_M`` over n draws from D(theta_D)."""
    theta_M = env.check(theta_M, "theta_M")
    theta_D = env.check(theta_D, "theta_D")
    if n < 1:
        raise ContractError("n must be at least 1")
    batch = env.map.sample(theta_D, n, seed)
    return risk_on_batch(env, batch, theta_M)


def performative_risk(env: Environment, theta, n: int, seed: SeedSpec) -> float:
    """PR(theta) = DR(theta, theta); shares the exact code path and seed."""
    return decoupled_risk(env, theta, theta, n, seed)


def norm(v: Sequence[float] | np.ndarray) -> float:
    """Euclidean norm, sqrt of the sum of squared entries."""
    return float(np.sqrt(np.sum(np.square(v))))
