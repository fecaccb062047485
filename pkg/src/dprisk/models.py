"""Loss functions with hand-derived gradients.

All methods are vectorised over a batch: ``x`` is an ``(n, feature_dim)``
array and ``y`` an ``(n,)`` label array (or ``None`` for regression-style
losses). Per-sample quantities come back with a leading ``n`` axis.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .core import CapabilityError, ContractError, SampleBatch


def _x2d(x, feature_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1) if feature_dim > 1 or x.size == 1 else x.reshape(-1, 1)
    if x.ndim != 2 or x.shape[1] != feature_dim:
        raise ContractError(f"expected samples with {feature_dim} features, got shape {x.shape}")
    return x


def _theta(theta, dim: int, name: str = "theta") -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64).reshape(-1)
    if theta.size != dim:
        raise ContractError(f"{name} has dimension {theta.size}, expected {dim}")
    return theta


class Model:
    """Interface shared by every loss.

    ``theta_D`` is accepted everywhere because the pricing loss penalises the
    gap between the model and the advertised parameters; other losses ignore it.
    """

    theta_dim: int
    feature_dim: int
    is_classifier = False
    name = "model"

    def losses(self, x, y, theta_M, theta_D=None) -> np.ndarray:
        raise NotImplementedError

    def grad_theta(self, x, y, theta_M, theta_D=None) -> np.ndarray:
        raise NotImplementedError

    def mean_grad_theta(self, x, y, theta_M, theta_D=None) -> np.ndarray:
        return self.grad_theta(x, y, theta_M, theta_D).mean(axis=0)

    def grad_z(self, x, y, theta_M, theta_D=None) -> np.ndarray:
        raise NotImplementedError

    def grad_theta_D(self, theta_M, theta_D) -> np.ndarray:
        """Gradient of any term that depends on theta_D directly (not via the data)."""
        return np.zeros(self.theta_dim)

    def score(self, x, theta) -> np.ndarray:
        raise CapabilityError(f"{self.name} is not a classifier and has no score")

    def score_grad_x(self, x, theta) -> np.ndarray:
        raise CapabilityError(f"{self.name} is not a classifier; score_grad_x is undefined")

    def accuracy(self, batch: SampleBatch, theta_M) -> float:
        if not self.is_classifier:
            raise CapabilityError(f"{self.name} is not a classifier")
        if batch.labels is None:
            raise CapabilityError("accuracy needs a labelled batch")
        # sigmoid(s) >= 0.5  <=>  s >= 0; ties go to class 1
        pred = (self.score(batch.features, theta_M) >= 0.0).astype(np.int64)
        return float(np.mean(pred == batch.labels))

    def init_params(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(self.theta_dim)


class LinearMeanLoss(Model):
    """loss(z; theta) = z . theta (bilinear, not jointly convex)."""

    name = "linear"

    def __init__(self, dim: int = 1):
        self.theta_dim = self.feature_dim = int(dim)

    def losses(self, x, y, theta_M, theta_D=None):
        return _x2d(x, self.feature_dim) @ _theta(theta_M, self.theta_dim)

    def grad_theta(self, x, y, theta_M, theta_D=None):
        return _x2d(x, self.feature_dim).copy()

    def grad_z(self, x, y, theta_M, theta_D=None):
        x = _x2d(x, self.feature_dim)
        return np.broadcast_to(_theta(theta_M, self.theta_dim), x.shape).copy()


class QuadraticLoss(Model):
    """loss(z; theta) = ||z - theta||^2, jointly convex in (z, theta)."""

    name = "quadratic"

    def __init__(self, dim: int = 1):
        self.theta_dim = self.feature_dim = int(dim)

    def losses(self, x, y, theta_M, theta_D=None):
        diff = _x2d(x, self.feature_dim) - _theta(theta_M, self.theta_dim)
        return np.sum(diff * diff, axis=1)

    def grad_theta(self, x, y, theta_M, theta_D=None):
        return 2.0 * (_theta(theta_M, self.theta_dim) - _x2d(x, self.feature_dim))

    def grad_z(self, x, y, theta_M, theta_D=None):
        return 2.0 * (_x2d(x, self.feature_dim) - _theta(theta_M, self.theta_dim))


class PricingLoss(Model):
    """Negative revenue plus a penalty on the gap between real and advertised prices.

    loss(z; theta_M, theta_D) = -theta_M . z + lam * ||theta_M - theta_D||

    The norm is L1 by default (coordinate-separable). With theta_M == theta_D
    the penalty vanishes and this is the plain pricing loss.
    """

    name = "pricing"

    def __init__(self, dim: int = 1, lam: float = 0.0, coupling_norm: str = "L1"):
        if lam < 0:
            raise ContractError("lambda must be non-negative")
        if coupling_norm not in ("L1", "L2"):
            raise ContractError(f"coupling_norm must be 'L1' or 'L2', got {coupling_norm!r}")
        self.theta_dim = self.feature_dim = int(dim)
        self.lam = float(lam)
        self.coupling_norm = coupling_norm

    def _gap(self, theta_M, theta_D):
        theta_M = _theta(theta_M, self.theta_dim, "theta_M")
        if theta_D is None:
            return theta_M, np.zeros_like(theta_M)
        return theta_M, theta_M - _theta(theta_D, self.theta_dim, "theta_D")

    def coupling(self, theta_M, theta_D) -> float:
        _, gap = self._gap(theta_M, theta_D)
        if self.coupling_norm == "L1":
            return self.lam * float(np.sum(np.abs(gap)))
        return self.lam * float(np.sqrt(np.sum(gap * gap)))

    def _coupling_subgrad(self, gap):
        if self.coupling_norm == "L1":
            return self.lam * np.sign(gap)
        size = np.sqrt(np.sum(gap * gap))
        return np.zeros_like(gap) if size == 0.0 else self.lam * gap / size

    def losses(self, x, y, theta_M, theta_D=None):
        theta_M, _ = self._gap(theta_M, theta_D)
        return -(_x2d(x, self.feature_dim) @ theta_M) + self.coupling(theta_M, theta_D)

    def grad_theta(self, x, y, theta_M, theta_D=None):
        _, gap = self._gap(theta_M, theta_D)
        return -_x2d(x, self.feature_dim) + self._coupling_subgrad(gap)

    def grad_z(self, x, y, theta_M, theta_D=None):
        x = _x2d(x, self.feature_dim)
        return np.broadcast_to(-_theta(theta_M, self.theta_dim), x.shape).copy()

    def grad_theta_D(self, theta_M, theta_D):
        _, gap = self._gap(theta_M, theta_D)
        return -self._coupling_subgrad(gap)

    def revenue(self, x, theta_M) -> np.ndarray:
        return _x2d(x, self.feature_dim) @ _theta(theta_M, self.theta_dim)


def _labels(y) -> np.ndarray:
    if y is None:
        raise CapabilityError("classification losses need labels")
    return np.asarray(y, dtype=np.float64)


def _bce(score: np.ndarray, y) -> np.ndarray:
    # log(1 + e^s) - y s, stable for large |s|
    return np.logaddexp(0.0, score) - _labels(y) * score


class LogisticLinear(Model):
    """Binary cross-entropy of sigmoid(w . x + b); theta = [w, b]."""

    name = "logistic"
    is_classifier = True

    def __init__(self, feature_dim: int):
        self.feature_dim = int(feature_dim)
        self.theta_dim = self.feature_dim + 1

    def score(self, x, theta):
        theta = _theta(theta, self.theta_dim)
        return _x2d(x, self.feature_dim) @ theta[:-1] + theta[-1]

    def losses(self, x, y, theta_M, theta_D=None):
        return _bce(self.score(x, theta_M), y)

    def grad_theta(self, x, y, theta_M, theta_D=None):
        x = _x2d(x, self.feature_dim)
        resid = expit(self.score(x, theta_M)) - _labels(y)
        return np.hstack([resid[:, None] * x, resid[:, None]])

    def grad_z(self, x, y, theta_M, theta_D=None):
        theta_M = _theta(theta_M, self.theta_dim)
        resid = expit(self.score(x, theta_M)) - _labels(y)
        return resid[:, None] * theta_M[:-1]

    def score_grad_x(self, x, theta):
        x = _x2d(x, self.feature_dim)
        return np.broadcast_to(_theta(theta, self.theta_dim)[:-1], x.shape).copy()


class MLP2(Model):
    """Two-layer perceptron feature_dim -> hidden -> 1 with a rectifier.

    Parameters are flattened as W1 (hidden x feature_dim, row-major), b1,
    W2 (hidden), b2. That order is part of the checkpoint format.
    The rectifier's derivative at 0 is taken as 0.
    """

    name = "mlp2"
    is_classifier = True

    def __init__(self, feature_dim: int, hidden: int = 100):
        self.feature_dim = int(feature_dim)
        self.hidden = int(hidden)
        self.theta_dim = self.hidden * self.feature_dim + 2 * self.hidden + 1

    def unflatten(self, theta):
        theta = _theta(theta, self.theta_dim)
        h, f = self.hidden, self.feature_dim
        W1 = theta[: h * f].reshape(h, f)
        b1 = theta[h * f : h * f + h]
        W2 = theta[h * f + h : h * f + 2 * h]
        b2 = theta[-1]
        return W1, b1, W2, b2

    def flatten(self, W1, b1, W2, b2) -> np.ndarray:
        W1 = np.asarray(W1, dtype=np.float64)
        if W1.shape != (self.hidden, self.feature_dim):
            raise ContractError(f"W1 must have shape {(self.hidden, self.feature_dim)}")
        return np.concatenate([W1.reshape(-1), np.ravel(b1), np.ravel(W2), np.ravel(b2)])

    def _forward(self, x, theta):
        x = _x2d(x, self.feature_dim)
        W1, b1, W2, b2 = self.unflatten(theta)
        pre = x @ W1.T + b1
        active = pre > 0.0
        score = np.where(active, pre, 0.0) @ W2 + b2
        return x, pre, active, score

    def score(self, x, theta):
        return self._forward(x, theta)[3]

    def losses(self, x, y, theta_M, theta_D=None):
        return _bce(self.score(x, theta_M), y)

    def _backward(self, x, y, theta_M):
        x, pre, active, score = self._forward(x, theta_M)
        _, _, W2, _ = self.unflatten(theta_M)
        resid = expit(score) - _labels(y)
        hidden_out = np.where(active, pre, 0.0)
        d_pre = resid[:, None] * W2 * active
        return x, resid, hidden_out, d_pre

    def grad_theta(self, x, y, theta_M, theta_D=None):
        x, resid, hidden_out, d_pre = self._backward(x, y, theta_M)
        n = x.shape[0]
        dW1 = (d_pre[:, :, None] * x[:, None, :]).reshape(n, -1)
        return np.hstack([dW1, d_pre, resid[:, None] * hidden_out, resid[:, None]])

    def mean_grad_theta(self, x, y, theta_M, theta_D=None):
        x, resid, hidden_out, d_pre = self._backward(x, y, theta_M)
        n = x.shape[0]
        return np.concatenate(
            [
                (d_pre.T @ x).reshape(-1) / n,
                d_pre.mean(axis=0),
                hidden_out.T @ resid / n,
                [resid.mean()],
            ]
        )

    def score_grad_x(self, x, theta):
        x, _, active, _ = self._forward(x, theta)
        W1, _, W2, _ = self.unflatten(theta)
        return (active * W2) @ W1

    def grad_z(self, x, y, theta_M, theta_D=None):
        resid = expit(self.score(x, theta_M)) - _labels(y)
        return resid[:, None] * self.score_grad_x(x, theta_M)
