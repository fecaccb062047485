"""Decoupled-risk landscapes, closed-form interest points and a convexity probe."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .algorithms import OptimizerState, optimizer_step
from .core import (
    ContractError,
    DomainError,
    Environment,
    SeedSpec,
    as_param,
    norm,
    risk_on_batch,
)
from .riskgrad import grad_M_DR

MODES = ("scalar_theta", "direction_slice")


@dataclass
class LandscapeGrid:
    """DR values with rows indexed by axis_D and columns by axis_M."""

    axis_D: np.ndarray
    axis_M: np.ndarray
    values: np.ndarray
    mode: str
    n: int
    seed: SeedSpec
    center: np.ndarray | None = None
    direction: np.ndarray | None = None
    direction_seed: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown landscape mode {self.mode!r}")
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.axis_D), len(self.axis_M)):
            raise ContractError("values shape must be |axis_D| x |axis_M|")

    def diagonal(self) -> np.ndarray:
        if len(self.axis_D) != len(self.axis_M) or not np.array_equal(self.axis_D, self.axis_M):
            raise ContractError("the diagonal is only defined when axis_D equals axis_M elementwise")
        return np.diag(self.values).copy()

    def diagonal_argmin(self) -> tuple[float, float]:
        """(axis value, PR value) of the smallest diagonal entry."""
        diag = self.diagonal()
        i = int(np.argmin(diag))
        return float(self.axis_D[i]), float(diag[i])

    def grid_min(self) -> float:
        return float(np.min(self.values))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if self.mode == "scalar_theta":
            w.writerow(["theta_D", "theta_M", "dr_value"])
        else:
            w.writerow(["alpha_D", "alpha_M", "dr_value"])
        for i, d in enumerate(self.axis_D):
            for j, m in enumerate(self.axis_M):
                w.writerow([repr(float(d)), repr(float(m)), repr(float(self.values[i, j]))])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "axis_D": [float(v) for v in self.axis_D],
            "axis_M": [float(v) for v in self.axis_M],
            "values": [[float(v) for v in row] for row in self.values],
            "center": None if self.center is None else [float(v) for v in self.center],
            "direction": None if self.direction is None else [float(v) for v in self.direction],
            "n": int(self.n),
            "seed": self.seed.to_dict(),
            "direction_seed": self.direction_seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> LandscapeGrid:
        d = json.loads(text)
        opt = lambda v: None if v is None else np.asarray(v, dtype=np.float64)  # noqa: E731
        return cls(
            axis_D=np.asarray(d["axis_D"], dtype=np.float64),
            axis_M=np.asarray(d["axis_M"], dtype=np.float64),
            values=np.asarray(d["values"], dtype=np.float64),
            mode=d["mode"],
            n=int(d["n"]),
            seed=SeedSpec(**d["seed"]),
            center=opt(d.get("center")),
            direction=opt(d.get("direction")),
            direction_seed=d.get("direction_seed"),
        )


def _sample_row(env: Environment, theta_D, n, seed, where: str):
    try:
        return env.map.sample(theta_D, n, seed)
    except DomainError as exc:
        raise DomainError(f"{exc} (at {where})") from exc


def dr_grid_1d(env: Environment, lo: float, hi: float, resolution: int = 101, n: int = 1000, seed=SeedSpec()):
    """DR over a square grid of scalar (theta_D, theta_M).

    Each row reuses one batch for every theta_M, and all rows share ``seed``,
    so the diagonal equals performative_risk at the same seed bit for bit.
    """
    if env.theta_dim != 1:
        raise ContractError("dr_grid_1d needs a scalar parameter; use dr_slice instead")
    if resolution < 2:
        raise ContractError("resolution must be at least 2")
    if not lo < hi:
        raise ContractError("need lo < hi")
    axis = np.linspace(lo, hi, resolution)
    values = np.empty((resolution, resolution))
    thetas = [as_param(v, 1) for v in axis]
    for i, td in enumerate(thetas):
        batch = _sample_row(env, td, n, seed, f"theta_D={axis[i]!r}")
        for j, tm in enumerate(thetas):
            values[i, j] = risk_on_batch(env, batch, tm)
    return LandscapeGrid(axis, axis.copy(), values, "scalar_theta", n, seed)


def slice_axis(alpha_lo: float, alpha_hi: float, resolution: int) -> np.ndarray:
    alphas = np.linspace(alpha_lo, alpha_hi, resolution)
    if alpha_lo == -alpha_hi:
        # exact antisymmetry so that flipping the direction mirrors the grid bit for bit
        alphas = 0.5 * (alphas - alphas[::-1])
    return alphas


def slice_direction(theta_dim: int, direction_seed: int) -> np.ndarray:
    return SeedSpec(direction_seed).substream("direction").rng().standard_normal(theta_dim)


def dr_slice(
    env: Environment,
    center,
    resolution: int = 101,
    alpha_lo: float = -0.5,
    alpha_hi: float = 0.5,
    n: int = 1000,
    seed=SeedSpec(),
    direction_seed: int = 0,
    direction=None,
) -> LandscapeGrid:
    """DR(center + a_D delta, center + a_M delta) for a random Gaussian direction delta."""
    center = env.check(center, "center")
    if resolution < 2:
        raise ContractError("resolution must be at least 2")
    if direction is None:
        delta = slice_direction(env.theta_dim, direction_seed)
    else:
        delta = np.asarray(env.check(direction, "direction"), dtype=np.float64)
    alphas = slice_axis(alpha_lo, alpha_hi, resolution)
    points = [as_param(center + a * delta, env.theta_dim) for a in alphas]
    values = np.empty((resolution, resolution))
    for i, td in enumerate(points):
        batch = _sample_row(env, td, n, seed, f"alpha_D={alphas[i]!r}")
        for j, tm in enumerate(points):
            values[i, j] = risk_on_batch(env, batch, tm)
    return LandscapeGrid(
        alphas, alphas.copy(), values, "direction_slice", n, seed, np.array(center), delta, direction_seed
    )


# -- closed-form interest points ------------------------------------------
@dataclass
class InterestPoints:
    theta_OP: np.ndarray
    pr_at_OP: float
    theta_ST: np.ndarray | None = None
    pr_at_ST: float | None = None
    decoupled_opt: tuple[np.ndarray, np.ndarray] | None = None  # (theta_D, theta_M)
    dr_at_decoupled: float | None = None
    stable_candidates: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.pr_at_ST is not None and self.pr_at_OP > self.pr_at_ST + 1e-12:
            raise DomainError("optimal risk exceeds stable risk; the fixture parameters are inconsistent")
        if self.dr_at_decoupled is not None and self.dr_at_decoupled > self.pr_at_OP + 1e-12:
            raise DomainError("decoupled optimum exceeds the performative optimum")

    def to_dict(self) -> dict:
        vec = lambda v: None if v is None else [float(x) for x in v]  # noqa: E731
        out = {
            "theta_ST": vec(self.theta_ST),
            "theta_OP": vec(self.theta_OP),
            "pr_at_ST": self.pr_at_ST,
            "pr_at_OP": self.pr_at_OP,
            "decoupled_opt": None
            if self.decoupled_opt is None
            else {"theta_D": vec(self.decoupled_opt[0]), "theta_M": vec(self.decoupled_opt[1])},
            "dr_at_decoupled": self.dr_at_decoupled,
        }
        if self.stable_candidates:
            out["stable_candidates"] = list(self.stable_candidates)
        return out


def mixture_oracle(gamma=0.5, a1=1.0, b1=1.0, a2=1.0, b2=1.0, box=(-1.0, 1.0), **_ignored) -> InterestPoints:
    """Mixture map with loss z * theta: DR = theta_M (A theta_D + B)."""
    if not 0.0 <= gamma <= 1.0:
        raise DomainError("gamma must lie in [0, 1]")
    if min(a1, a2, b1, b2) < 0:
        raise DomainError("the mixture oracle requires a_i >= 0 and b_i >= 0")
    A = gamma * a1 + (1 - gamma) * a2
    B = gamma * b1 + (1 - gamma) * b2
    if A <= 0:
        raise DomainError("the mixture oracle requires gamma*a1 + (1-gamma)*a2 > 0")
    if B > 2 * A:
        raise DomainError(
            f"existence condition violated: gamma*b1 + (1-gamma)*b2 <= 2*(gamma*a1 + (1-gamma)*a2) "
            f"fails ({B} > {2 * A})"
        )
    lo, hi = box
    theta_op = -B / (2 * A)
    theta_st = -B / A
    st_inside = lo <= theta_st <= hi
    corners = [(d, m, m * (A * d + B)) for d in (lo, hi) for m in (lo, hi)]
    d_star, m_star, dr_star = min(corners, key=lambda c: c[2])
    return InterestPoints(
        theta_OP=np.array([theta_op]),
        pr_at_OP=-B * B / (4 * A),
        theta_ST=np.array([theta_st]) if st_inside else None,
        pr_at_ST=0.0 if st_inside else None,
        decoupled_opt=(np.array([d_star]), np.array([m_star])),
        dr_at_decoupled=dr_star,
    )


def _cosine_dpr(theta: float) -> float:
    return math.cos(theta) - theta * math.sin(theta)


def cosine_oracle(box=(-1.5 * math.pi, 1.5 * math.pi), **_ignored) -> InterestPoints:
    """Cosine map with loss z * theta: PR = theta cos theta.

    theta_OP is the minimizing root of cos t = t sin t. Stable points satisfy
    cos t = 0 (the model gradient at the diagonal is the mean, cos t).
    """
    lo, hi = box
    grid = np.linspace(lo, hi, 4001)
    vals = np.array([_cosine_dpr(t) for t in grid])
    roots = []
    for i in np.flatnonzero(np.sign(vals[:-1]) * np.sign(vals[1:]) < 0):
        roots.append(brentq(_cosine_dpr, grid[i], grid[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps))
    candidates = roots + [lo, hi]
    theta_op = min(candidates, key=lambda t: t * math.cos(t))
    stable = [k * math.pi / 2 for k in (-3, -1, 1, 3) if lo <= k * math.pi / 2 <= hi]
    # of the stable candidates, those with sin < 0 attract repeated gradient descent
    attracting = [t for t in stable if math.sin(t) < 0]
    theta_st = attracting[0] if attracting else (stable[0] if stable else None)
    return InterestPoints(
        theta_OP=np.array([theta_op]),
        pr_at_OP=theta_op * math.cos(theta_op),
        theta_ST=None if theta_st is None else np.array([theta_st]),
        pr_at_ST=None if theta_st is None else theta_st * math.cos(theta_st),
        stable_candidates=stable,
    )


def nonlinear_oracle(a0=0.5, a1=1.0, **_ignored) -> InterestPoints:
    """Map N(sqrt(a1 theta + a0), s^2) with loss z * theta: PR = theta sqrt(a1 theta + a0)."""
    if not (a1 > 0 and a0 > 0):
        raise DomainError("the nonlinear oracle requires a1 > 0 and a0 > 0")
    theta_st = -a0 / a1
    theta_op = -2 * a0 / (3 * a1)
    return InterestPoints(
        theta_OP=np.array([theta_op]),
        pr_at_OP=theta_op * math.sqrt(a1 * theta_op + a0),
        theta_ST=np.array([theta_st]),
        pr_at_ST=0.0,
    )


def pricing_oracle(mu0=6.0, eps=1.5, dim=None, lam=None, box=None, coupling_norm="L1", **_ignored) -> InterestPoints:
    """Pricing with demand mu0 - eps theta and loss -theta_M . z (+ lam |theta_M - theta_D|).

    The decoupled optimum is reported only for an L1 coupling on a box; the
    problem is separable and each coordinate's minimum lies at a box vertex
    or on the diagonal.
    """
    mu0 = np.atleast_1d(np.asarray(mu0, dtype=np.float64))
    if dim is not None and mu0.size == 1:
        mu0 = np.full(int(dim), mu0[0])
    if eps <= 0:
        raise DomainError("pricing oracle requires eps > 0")
    theta_st = mu0 / eps
    theta_op = mu0 / (2 * eps)
    pr = lambda t: float(-t @ (mu0 - eps * t))  # noqa: E731
    pts = InterestPoints(theta_OP=theta_op, pr_at_OP=pr(theta_op), theta_ST=theta_st, pr_at_ST=pr(theta_st))
    if lam is not None and box is not None and coupling_norm == "L1":
        lo = np.broadcast_to(np.asarray(box[0], dtype=np.float64), mu0.shape)
        hi = np.broadcast_to(np.asarray(box[1], dtype=np.float64), mu0.shape)
        d_star, m_star, total = np.empty_like(mu0), np.empty_like(mu0), 0.0
        for i, mu in enumerate(mu0):
            f = lambda m, d: -m * (mu - eps * d) + lam * abs(m - d)  # noqa: E731
            diag = min(max(mu / (2 * eps), lo[i]), hi[i])
            cands = [(m, d) for m in (lo[i], hi[i]) for d in (lo[i], hi[i])] + [(diag, diag)]
            m_i, d_i = min(cands, key=lambda c: f(*c))
            m_star[i], d_star[i] = m_i, d_i
            total += f(m_i, d_i)
        pts.decoupled_opt = (d_star, m_star)
        pts.dr_at_decoupled = total
        if not (np.all(lo <= theta_op) and np.all(theta_op <= hi)):
            raise DomainError("theta_OP lies outside the box; the decoupled comparison is undefined")
    return pts


ORACLES = {
    "mixture": mixture_oracle,
    "cosine": cosine_oracle,
    "nonlinear": nonlinear_oracle,
    "pricing": pricing_oracle,
}


def oracle_points(fixture: str, **params) -> InterestPoints:
    try:
        fn = ORACLES[fixture]
    except KeyError:
        raise ContractError(f"no closed-form oracle for fixture {fixture!r}; choose from {sorted(ORACLES)}") from None
    return fn(**params)


# -- decoupled stable points -----------------------------------------------
@dataclass
class DecoupledStableResult:
    theta_M: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    at_boundary: bool


def decoupled_stable(
    env: Environment,
    theta_D,
    inner_opt: OptimizerState | None = None,
    tol: float = 1e-8,
    n: int = 1000,
    seed=SeedSpec(),
    theta_M0=None,
    max_iter: int = 10_000,
) -> DecoupledStableResult:
    """argmin over theta_M of DR(theta_M, theta_D) by projected descent on one fixed batch.

    Converges when the projected gradient (the clipped step divided by the
    learning rate) has norm below ``tol``; this covers interior minima, where
    grad_M DR vanishes, and minima pinned to the box.
    """
    theta_D = env.check(theta_D, "theta_D")
    opt = (inner_opt or OptimizerState("gd", 0.1)).fresh()
    if opt.learning_rate <= 0:
        raise ContractError("decoupled_stable needs a positive learning rate")
    batch = env.map.sample(theta_D, n, seed)
    cur = np.array(env.clip(theta_D if theta_M0 is None else env.check(theta_M0, "theta_M0")))
    for k in range(1, max_iter + 1):
        g = grad_M_DR(env, batch, cur).vector
        new, opt = optimizer_step(opt, cur, g)
        new = env.clip(new)
        projected = norm(new - cur) / opt.learning_rate
        cur = new
        if projected < tol:
            g_end = grad_M_DR(env, batch, cur).vector
            return DecoupledStableResult(cur, True, k, norm(g_end), norm(g_end) >= tol)
    g_end = norm(grad_M_DR(env, batch, cur).vector)
    return DecoupledStableResult(cur, False, max_iter, g_end, False)


# -- joint convexity --------------------------------------------------------
@dataclass
class ConvexityReport:
    n_probes: int
    max_violation: float
    worst: dict | None
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_violation <= self.tolerance

    def to_dict(self) -> dict:
        return {
            "n_probes": self.n_probes,
            "max_violation": self.max_violation,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "worst": self.worst,
        }


def convexity_probe(
    env: Environment,
    n_pairs: int,
    lambda_grid=(0.25, 0.5, 0.75),
    n: int = 1000,
    seed=SeedSpec(),
    tolerance: float = 1e-9,
) -> ConvexityReport:
    """Search for violations of DR(lam p + (1-lam) q) <= lam DR(p) + (1-lam) DR(q).

    Points p = (theta_M, theta_D) are uniform in the box. Every DR evaluation
    uses the same seed, so all of them share one base draw.
    """
    if env.param_box is None:
        raise ContractError("the convexity probe samples inside param_box; the environment has none")
    if n_pairs < 0:
        raise ContractError("n_pairs must be non-negative")
    lo, hi = env.param_box
    p = env.theta_dim
    rng = seed.substream("probe").rng()

    def dr(tm, td):
        return risk_on_batch(env, env.map.sample(td, n, seed), as_param(tm, p))

    worst, max_v, count = None, -math.inf, 0
    for _ in range(n_pairs):
        a_M, a_D, b_M, b_D = (rng.uniform(lo, hi) for _ in range(4))
        fa, fb = dr(a_M, a_D), dr(b_M, b_D)
        for lam in lambda_grid:
            mid = dr(lam * a_M + (1 - lam) * b_M, lam * a_D + (1 - lam) * b_D)
            v = mid - (lam * fa + (1 - lam) * fb)
            count += 1
            if v > max_v:
                max_v = v
                worst = {
                    "p": {"theta_M": a_M.tolist(), "theta_D": a_D.tolist()},
                    "q": {"theta_M": b_M.tolist(), "theta_D": b_D.tolist()},
                    "lambda": float(lam),
                    "violation": float(v),
                }
    if count == 0:
        max_v = 0.0
    return ConvexityReport(count, float(max_v), worst, tolerance)
