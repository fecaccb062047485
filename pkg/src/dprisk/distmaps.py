"""Distribution maps D(theta_D).

Every map here is written as a push-forward of a fixed base distribution:
``sample`` draws base noise from a seeded substream and transports it with
``pushforward``. Because the base draw does not depend on theta_D, two calls
with the same seed at different theta_D share common random numbers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import (
    BaseDraw,
    CapabilityError,
    ContractError,
    DomainError,
    SampleBatch,
    SeedSpec,
    as_param,
)
from .models import LogisticLinear, MLP2, Model


@dataclass(frozen=True)
class MapCapabilities:
    has_log_density_grad: bool
    has_pushforward: bool
    has_analytic_mean: bool
    has_analytic_jacobian: bool = True


class DistributionMap:
    theta_dim: int
    feature_dim: int
    name = "map"
    declared_box: tuple[float, float] | None = None

    @property
    def capabilities(self) -> MapCapabilities:
        raise NotImplementedError

    # -- sampling -------------------------------------------------------
    def sample_base(self, n: int, rng: np.random.Generator) -> BaseDraw:
        raise NotImplementedError

    def _pushforward(self, base: BaseDraw, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def check_domain(self, theta: np.ndarray) -> None:
        pass

    def pushforward(self, base: BaseDraw, theta_D) -> np.ndarray:
        if not self.capabilities.has_pushforward:
            raise CapabilityError(f"{self.name} map has no push-forward representation")
        theta = as_param(theta_D, self.theta_dim, "theta_D")
        self.check_domain(theta)
        return self._pushforward(base, theta)

    def sample(self, theta_D, n: int, seed: SeedSpec) -> SampleBatch:
        theta = as_param(theta_D, self.theta_dim, "theta_D")
        if n < 1:
            raise ContractError("n must be at least 1")
        self.check_domain(theta)
        base = self.sample_base(int(n), seed.substream("sample").rng())
        return SampleBatch(self._pushforward(base, theta), theta, base.labels, base)

    # -- derivatives ----------------------------------------------------
    def pushforward_jacobian(self, base: BaseDraw, theta_D) -> np.ndarray:
        """d phi(z_o; theta_D) / d theta_D, shape (n, feature_dim, theta_dim)."""
        raise CapabilityError(f"{self.name} map has no analytic push-forward Jacobian")

    def vjp(self, base: BaseDraw, theta_D, g: np.ndarray) -> np.ndarray:
        """Per-sample g^T J, shape (n, theta_dim); g has shape (n, feature_dim)."""
        jac = self.pushforward_jacobian(base, theta_D)
        return np.einsum("nf,nfp->np", g, jac)

    def mean_vjp(self, base: BaseDraw, theta_D, g: np.ndarray) -> np.ndarray:
        """Batch mean of :meth:`vjp`, shape (theta_dim,)."""
        return self.vjp(base, theta_D, g).mean(axis=0)

    def log_density_grad(self, z, theta_D) -> np.ndarray:
        raise CapabilityError(f"{self.name} map has no tractable log-density")

    def analytic_mean(self, theta_D) -> np.ndarray:
        raise CapabilityError(f"{self.name} map has no closed-form mean")


def _col(z) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return z.reshape(-1, 1) if z.ndim <= 1 else z


class MixtureMap(DistributionMap):
    """gamma N(a1 theta + b1, s1^2) + (1 - gamma) N(a2 theta + b2, s2^2), scalar theta.

    A base draw is (component, u) with u ~ N(0, 1); the push-forward is
    z = s_c u + a_c theta + b_c. Zero sigmas are allowed (degenerate mode).
    """

    name = "mixture"
    theta_dim = 1
    feature_dim = 1
    declared_box = (-1.0, 1.0)

    def __init__(self, gamma=0.5, a1=1.0, b1=1.0, a2=1.0, b2=1.0, sigma1=1.0, sigma2=0.25):
        if not 0.0 <= gamma <= 1.0:
            raise ContractError(f"gamma must lie in [0, 1], got {gamma}")
        if sigma1 < 0 or sigma2 < 0:
            raise ContractError("mixture sigmas must be non-negative")
        self.gamma = float(gamma)
        self.a = np.array([a1, a2], dtype=np.float64)
        self.b = np.array([b1, b2], dtype=np.float64)
        self.sigma = np.array([sigma1, sigma2], dtype=np.float64)
        self.weights = np.array([self.gamma, 1.0 - self.gamma])

    @property
    def A(self) -> float:
        return float(self.weights @ self.a)

    @property
    def B(self) -> float:
        return float(self.weights @ self.b)

    @property
    def capabilities(self):
        live = self.weights > 0
        return MapCapabilities(
            has_log_density_grad=bool(np.all(self.sigma[live] > 0)),
            has_pushforward=True,
            has_analytic_mean=True,
        )

    def sample_base(self, n, rng):
        comp = np.where(rng.random(n) < self.gamma, 0, 1)
        u = rng.standard_normal(n)
        return BaseDraw(u.reshape(-1, 1), components=comp)

    def _pushforward(self, base, theta):
        c = base.components
        z = self.sigma[c] * base.values[:, 0] + (self.a[c] * theta[0] + self.b[c])
        return z.reshape(-1, 1)

    def pushforward_jacobian(self, base, theta_D):
        as_param(theta_D, 1, "theta_D")
        return self.a[base.components].reshape(-1, 1, 1).copy()

    def vjp(self, base, theta_D, g):
        as_param(theta_D, 1, "theta_D")
        return (np.asarray(g)[:, 0] * self.a[base.components]).reshape(-1, 1)

    def log_density_grad(self, z, theta_D):
        theta = as_param(theta_D, 1, "theta_D")
        if not self.capabilities.has_log_density_grad:
            raise DomainError("mixture log-density is degenerate: a component with weight > 0 has sigma = 0")
        z = _col(z)[:, 0]
        live = np.flatnonzero(self.weights > 0)
        means = self.a[live] * theta[0] + self.b[live]
        sig = self.sigma[live]
        resid = z[:, None] - means
        logp = np.log(self.weights[live]) - np.log(sig) - 0.5 * (resid / sig) ** 2
        resp = np.exp(logp - logsumexp(logp, axis=1, keepdims=True))
        score = np.sum(resp * self.a[live] * resid / sig**2, axis=1)
        return score.reshape(-1, 1)

    def analytic_mean(self, theta_D):
        theta = as_param(theta_D, 1, "theta_D")
        return np.array([self.A * theta[0] + self.B])


class _ScalarGaussianMap(DistributionMap):
    """N(m(theta), sigma^2) with scalar theta; subclasses define m and m'."""

    theta_dim = 1
    feature_dim = 1

    def __init__(self, sigma: float):
        if sigma < 0:
            raise ContractError("sigma must be non-negative")
        self.sigma = float(sigma)

    def mean_fn(self, theta: float) -> float:
        raise NotImplementedError

    def mean_deriv(self, theta: float) -> float:
        raise NotImplementedError

    @property
    def capabilities(self):
        return MapCapabilities(self.sigma > 0, True, True)

    def sample_base(self, n, rng):
        return BaseDraw(rng.standard_normal(n).reshape(-1, 1))

    def _pushforward(self, base, theta):
        return self.sigma * base.values + self.mean_fn(theta[0])

    def pushforward_jacobian(self, base, theta_D):
        theta = as_param(theta_D, 1, "theta_D")
        self.check_domain(theta)
        return np.full((len(base), 1, 1), self.mean_deriv(theta[0]))

    def vjp(self, base, theta_D, g):
        theta = as_param(theta_D, 1, "theta_D")
        self.check_domain(theta)
        return np.asarray(g)[:, :1] * self.mean_deriv(theta[0])

    def log_density_grad(self, z, theta_D):
        theta = as_param(theta_D, 1, "theta_D")
        self.check_domain(theta)
        if self.sigma == 0:
            raise DomainError(f"{self.name} map with sigma = 0 has a degenerate density")
        z = _col(z)
        return (z - self.mean_fn(theta[0])) / self.sigma**2 * self.mean_deriv(theta[0])

    def analytic_mean(self, theta_D):
        theta = as_param(theta_D, 1, "theta_D")
        self.check_domain(theta)
        return np.array([self.mean_fn(theta[0])])


class GaussianLinearMap(_ScalarGaussianMap):
    """Single Gaussian N(a theta + b, sigma^2)."""

    name = "gaussian"

    def __init__(self, a=1.0, b=0.0, sigma=1.0):
        super().__init__(sigma)
        self.a, self.b = float(a), float(b)

    def mean_fn(self, theta):
        return self.a * theta + self.b

    def mean_deriv(self, theta):
        return self.a


class CosineMap(_ScalarGaussianMap):
    """N(cos theta, sigma^2) on theta in [-3 pi / 2, 3 pi / 2]."""

    name = "cosine"
    declared_box = (-1.5 * math.pi, 1.5 * math.pi)

    def __init__(self, sigma=1.0):
        super().__init__(sigma)

    def mean_fn(self, theta):
        return math.cos(theta)

    def mean_deriv(self, theta):
        return -math.sin(theta)


class NonlinearMap(_ScalarGaussianMap):
    """N(sqrt(a1 theta + a0), sigma^2); undefined where a1 theta + a0 < 0."""

    name = "nonlinear"

    def __init__(self, a0=0.5, a1=1.0, sigma=1.0):
        super().__init__(sigma)
        self.a0, self.a1 = float(a0), float(a1)
        lo, hi = -1.0, 1.0
        if self.a1 > 0:
            lo = max(lo, -self.a0 / self.a1)
        elif self.a1 < 0:
            hi = min(hi, -self.a0 / self.a1)
        if lo > hi:
            raise DomainError("a1 theta + a0 >= 0 has no solution in [-1, 1]")
        self.declared_box = (lo, hi)

    def check_domain(self, theta):
        inner = self.a1 * theta[0] + self.a0
        if inner < 0:
            raise DomainError(
                f"nonlinear map requires a1*theta + a0 >= 0; got {self.a1}*{theta[0]} + {self.a0} = {inner}"
            )

    def mean_fn(self, theta):
        return math.sqrt(self.a1 * theta + self.a0)

    def mean_deriv(self, theta):
        root = self.mean_fn(theta)
        if root == 0.0:
            raise DomainError("the nonlinear map is not differentiable where a1*theta + a0 = 0")
        return self.a1 / (2.0 * root)


class PricingMap(DistributionMap):
    """Demand N(mu0 - eps theta, cov_scale * I); z = z_o - eps theta with z_o ~ N(mu0, Sigma)."""

    name = "pricing"

    def __init__(self, mu0, eps=1.5, cov_scale=1.0):
        self.mu0 = np.atleast_1d(np.asarray(mu0, dtype=np.float64)).copy()
        if eps <= 0:
            raise ContractError("price sensitivity eps must be positive")
        if cov_scale < 0:
            raise ContractError("cov_scale must be non-negative")
        self.eps = float(eps)
        self.cov_scale = float(cov_scale)
        self.theta_dim = self.feature_dim = self.mu0.size

    @property
    def capabilities(self):
        return MapCapabilities(self.cov_scale > 0, True, True)

    def sample_base(self, n, rng):
        u = rng.standard_normal((n, self.feature_dim))
        return BaseDraw(self.mu0 + math.sqrt(self.cov_scale) * u)

    def _pushforward(self, base, theta):
        return base.values - self.eps * theta

    def pushforward_jacobian(self, base, theta_D):
        as_param(theta_D, self.theta_dim, "theta_D")
        return np.broadcast_to(-self.eps * np.eye(self.theta_dim), (len(base), self.theta_dim, self.theta_dim)).copy()

    def vjp(self, base, theta_D, g):
        as_param(theta_D, self.theta_dim, "theta_D")
        return -self.eps * np.asarray(g, dtype=np.float64)

    def log_density_grad(self, z, theta_D):
        theta = as_param(theta_D, self.theta_dim, "theta_D")
        if self.cov_scale == 0:
            raise DomainError("pricing map with cov_scale = 0 has a degenerate density")
        z = np.asarray(z, dtype=np.float64).reshape(-1, self.feature_dim)
        return -self.eps * (z - (self.mu0 - self.eps * theta)) / self.cov_scale

    def analytic_mean(self, theta_D):
        theta = as_param(theta_D, self.theta_dim, "theta_D")
        return self.mu0 - self.eps * theta


class StrategicMap(DistributionMap):
    """Agents move x = x_o + eps * grad_x f(x_o; theta_D) over an empirical pool.

    f is the score model's logit for the favourable label. Labels never change.
    Sampling draws rows uniformly; with ``replace=False`` and n equal to the
    pool size the whole pool is returned in its stored order (full batch).

    For a linear score the Jacobian is analytic. For the two-layer perceptron
    it is only available with ``pathwise=True``, which differentiates through
    grad_x f holding the rectifier masks fixed; otherwise callers must use the
    finite-difference estimator.
    """

    name = "strategic"

    def __init__(
        self,
        base_features,
        base_labels,
        score_model: Model,
        eps: float = 10.0,
        favorable_label: int = 1,
        replace: bool = False,
        pathwise: bool = False,
    ):
        feats = np.asarray(base_features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] == 0:
            raise ContractError("the base pool must be a non-empty (n, d) array")
        if eps < 0:
            raise ContractError("gaming strength eps must be non-negative")
        if not score_model.is_classifier:
            raise CapabilityError("strategic maps need a classifier score model")
        if score_model.feature_dim != feats.shape[1]:
            raise ContractError("score model and base pool disagree on feature dimension")
        if favorable_label not in (0, 1):
            raise ContractError("favorable_label must be 0 or 1")
        self.base_features = feats
        self.base_labels = np.asarray(base_labels, dtype=np.int64)
        if self.base_labels.shape != (feats.shape[0],):
            raise ContractError("base labels must have one entry per pool row")
        self.score_model = score_model
        self.eps = float(eps)
        self.favorable_label = int(favorable_label)
        self.replace = bool(replace)
        self.pathwise = bool(pathwise)
        self.theta_dim = score_model.theta_dim
        self.feature_dim = feats.shape[1]

    @property
    def pool_size(self) -> int:
        return self.base_features.shape[0]

    @property
    def _step(self) -> float:
        return self.eps if self.favorable_label == 1 else -self.eps

    @property
    def capabilities(self):
        analytic = isinstance(self.score_model, LogisticLinear) or (
            isinstance(self.score_model, MLP2) and self.pathwise
        )
        return MapCapabilities(False, True, False, has_analytic_jacobian=analytic)

    def sample_base(self, n, rng):
        size = self.pool_size
        if self.replace:
            idx = rng.integers(0, size, n)
        elif n == size:
            idx = np.arange(size)
        elif n < size:
            idx = rng.choice(size, n, replace=False)
        else:
            raise ContractError(f"cannot draw {n} rows without replacement from a pool of {size}")
        return BaseDraw(self.base_features[idx], labels=self.base_labels[idx])

    def _pushforward(self, base, theta):
        if self.eps == 0.0:
            return base.values.copy()
        return base.values + self._step * self.score_model.score_grad_x(base.values, theta)

    def _require_analytic(self):
        if not self.capabilities.has_analytic_jacobian:
            raise CapabilityError(
                "the strategic map over a two-layer perceptron has no analytic Jacobian; "
                "use the finite-difference estimator (or enable pathwise differentiation)"
            )

    def vjp(self, base, theta_D, g):
        self._require_analytic()
        theta = as_param(theta_D, self.theta_dim, "theta_D")
        g = np.asarray(g, dtype=np.float64)
        n = g.shape[0]
        if isinstance(self.score_model, LogisticLinear):
            return self._step * np.hstack([g, np.zeros((n, 1))])
        model: MLP2 = self.score_model
        W1, b1, W2, _ = model.unflatten(theta)
        active = (base.values @ W1.T + b1) > 0.0
        masked_w2 = active * W2
        dW1 = (masked_w2[:, :, None] * g[:, None, :]).reshape(n, -1)
        dW2 = active * (g @ W1.T)
        zeros_h = np.zeros((n, model.hidden))
        return self._step * np.hstack([dW1, zeros_h, dW2, np.zeros((n, 1))])

    def mean_vjp(self, base, theta_D, g):
        if not isinstance(self.score_model, MLP2):
            return super().mean_vjp(base, theta_D, g)
        self._require_analytic()
        theta = as_param(theta_D, self.theta_dim, "theta_D")
        g = np.asarray(g, dtype=np.float64)
        n = g.shape[0]
        model: MLP2 = self.score_model
        W1, b1, W2, _ = model.unflatten(theta)
        active = (base.values @ W1.T + b1) > 0.0
        dW1 = ((active * W2).T @ g).reshape(-1) / n
        dW2 = np.mean(active * (g @ W1.T), axis=0)
        zeros_h = np.zeros(model.hidden)
        return self._step * np.concatenate([dW1, zeros_h, dW2, [0.0]])

    def pushforward_jacobian(self, base, theta_D):
        self._require_analytic()
        n, f = len(base), self.feature_dim
        if isinstance(self.score_model, LogisticLinear):
            jac = np.zeros((n, f, self.theta_dim))
            jac[:, :, :f] = self._step * np.eye(f)
            return jac
        rows = [self.vjp(base, theta_D, np.tile(np.eye(f)[k], (n, 1))) for k in range(f)]
        return np.stack(rows, axis=1)

    def log_density_grad(self, z, theta_D):
        raise CapabilityError("the strategic map is an empirical push-forward and has no log-density")

    def analytic_mean(self, theta_D):
        raise CapabilityError("the strategic map's mean depends on the data pool")
