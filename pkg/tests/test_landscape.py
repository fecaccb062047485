import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dprisk.core import ContractError, DomainError, SeedSpec, performative_risk
from dprisk.fixtures import build_environment
from dprisk.landscape import (
    LandscapeGrid,
    convexity_probe,
    cosine_oracle,
    decoupled_stable,
    dr_grid_1d,
    dr_slice,
    mixture_oracle,
    nonlinear_oracle,
    oracle_points,
    pricing_oracle,
)

from oracles import FROZEN, cosine_op_newton, mixture_dr, nonlinear_points


def test_mixture_grid_matches_closed_form(mixture_exact, seed):
    g = dr_grid_1d(mixture_exact, -1.0, 1.0, 5, 10, seed)
    for i, d in enumerate(g.axis_D):
        for j, m in enumerate(g.axis_M):
            assert g.values[i, j] == mixture_dr(m, d)
    assert g.values[-1, 0] == FROZEN["mixture_dr_grid_corner"]
    assert np.all(g.values[:, 2] == 0.0)


def test_diagonal_is_performative_risk():
    env = build_environment("mixture")
    seed = SeedSpec(4)
    g = dr_grid_1d(env, -1.0, 1.0, 7, 300, seed)
    pr = [performative_risk(env, [t], 300, seed) for t in g.axis_D]
    assert np.array_equal(g.diagonal(), pr)


def test_slice_examples(seed):
    env = build_environment("pricing", dict(dim=2, cov_scale=0.0))
    g = dr_slice(env, [2.0, 2.0], 5, n=5, seed=seed, direction=[1.0, 0.0])
    i, j = list(g.axis_D).index(0.5), list(g.axis_M).index(-0.5)
    assert g.values[i, j] == pytest.approx(FROZEN["pricing_slice_cell"], abs=1e-12)
    mid = list(g.axis_D).index(0.0)
    assert g.values[mid, mid] == performative_risk(env, [2.0, 2.0], 5, seed)
    flat = dr_slice(env, [1.0, 3.0], 4, n=5, seed=seed, direction=[0.0, 0.0])
    assert np.all(flat.values == performative_risk(env, [1.0, 3.0], 5, seed))


def test_slice_direction_flip_reverses_both_axes():
    env = build_environment("pricing", dict(dim=3))
    seed = SeedSpec(2)
    d = np.array([0.3, -1.0, 0.5])
    a = dr_slice(env, [1.0, 2.0, 3.0], 9, n=100, seed=seed, direction=d)
    b = dr_slice(env, [1.0, 2.0, 3.0], 9, n=100, seed=seed, direction=-d)
    assert np.array_equal(a.values, b.values[::-1, ::-1])


def test_slice_direction_is_seeded():
    env = build_environment("pricing", dict(dim=4))
    a = dr_slice(env, np.zeros(4), 3, n=10, direction_seed=1)
    b = dr_slice(env, np.zeros(4), 3, n=10, direction_seed=1)
    c = dr_slice(env, np.zeros(4), 3, n=10, direction_seed=2)
    assert np.array_equal(a.direction, b.direction) and not np.array_equal(a.direction, c.direction)


def test_grid_contracts():
    with pytest.raises(ContractError):
        LandscapeGrid(np.zeros(3), np.zeros(2), np.zeros((2, 3)), "scalar_theta", 1, SeedSpec())
    g = LandscapeGrid(np.array([0.0, 1.0]), np.array([0.0, 2.0]), np.zeros((2, 2)), "scalar_theta", 1, SeedSpec())
    with pytest.raises(ContractError):
        g.diagonal()
    with pytest.raises(ContractError):
        dr_grid_1d(build_environment("pricing", dict(dim=2)), 0, 1, 3)


def test_grid_domain_error_names_the_row():
    env = build_environment("nonlinear", dict(box=None))
    with pytest.raises(DomainError, match="theta_D"):
        dr_grid_1d(env, -2.0, 0.0, 5, 10)


@pytest.mark.parametrize("fixture", ["mixture", "pricing", "cosine", "nonlinear"])
def test_grid_is_coherent_with_oracles(fixture):
    noiseless = {"mixture": dict(sigma1=0.0, sigma2=0.0), "pricing": dict(cov_scale=0.0)}.get(fixture, dict(sigma=0.0))
    env = build_environment(fixture, noiseless)
    pts = oracle_points(fixture, **env.meta["params"])
    lo, hi = {"pricing": (0.0, 6.0), "nonlinear": (-0.5, 1.0)}.get(fixture, tuple(float(b[0]) for b in env.param_box or ((-1,), (1,))))
    if fixture == "cosine":
        lo, hi = -1.5 * math.pi, 1.5 * math.pi
    g = dr_grid_1d(env, lo, hi, 201, 10, SeedSpec(0))
    cell = (hi - lo) / 200
    at, _ = g.diagonal_argmin()
    assert abs(at - pts.theta_OP.item()) <= cell
    assert g.grid_min() <= g.diagonal().min()
    st_val = pts.theta_ST.item()
    k = int(np.argmin(np.abs(g.axis_D - st_val)))
    if abs(g.axis_D[k] - st_val) < 1e-12 and fixture != "cosine":
        assert np.ptp(g.values[k]) <= 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["mixture", "pricing", "cosine"]))
def test_full_grid_min_never_exceeds_diagonal_min(s, fixture):
    env = build_environment(fixture)
    g = dr_grid_1d(env, -1.0, 1.0, 9, 50, SeedSpec(s))
    assert g.grid_min() <= g.diagonal().min()


def test_oracle_examples():
    m = mixture_oracle()
    assert (m.theta_OP.item(), m.pr_at_OP, m.theta_ST.item(), m.pr_at_ST) == (-0.5, -0.25, -1.0, 0.0)
    assert (m.decoupled_opt[0].item(), m.decoupled_opt[1].item(), m.dr_at_decoupled) == (1.0, -1.0, -2.0)
    p = pricing_oracle(6.0, 1.5, dim=3)
    assert p.theta_ST.tolist() == [4.0] * 3 and p.theta_OP.tolist() == [2.0] * 3
    n = nonlinear_oracle(0.5, 1.0)
    assert (n.theta_ST.item(), n.theta_OP.item()) == FROZEN["nonlinear_a0_0.5_a1_1"]


def test_nonlinear_oracle_matches_grid_scan():
    for a0, a1 in ((0.5, 1.0), (1.0, 2.0), (0.3, 0.7)):
        st_, op = nonlinear_points(a0, a1)
        pts = nonlinear_oracle(a0, a1)
        assert pts.theta_ST.item() == pytest.approx(st_, abs=1e-12)
        assert pts.theta_OP.item() == pytest.approx(op, abs=1e-4)


def test_cosine_oracle_certificate():
    pts = cosine_oracle()
    t = pts.theta_OP.item()
    assert abs(math.cos(t) - t * math.sin(t)) < 1e-9
    assert t == pytest.approx(cosine_op_newton(), abs=1e-12)
    assert t == pytest.approx(3.426, abs=5e-4)
    h = 1e-3
    pr = lambda x: x * math.cos(x)  # noqa: E731
    assert pr(t + h) - 2 * pr(t) + pr(t - h) > 0
    assert pts.stable_candidates == [k * math.pi / 2 for k in (-3, -1, 1, 3)]
    assert math.cos(pts.theta_ST.item()) == pytest.approx(0.0, abs=1e-15)


def test_mixture_existence_condition():
    with pytest.raises(DomainError, match="existence condition"):
        mixture_oracle(b1=3.0, b2=3.0)


def test_pricing_decoupled_optimum_beats_performative_optimum():
    p = pricing_oracle(6.0, 1.5, dim=2, lam=0.4, box=(0.0, 8.0))
    assert p.decoupled_opt[0].tolist() == [0.0, 0.0] and p.decoupled_opt[1].tolist() == [8.0, 8.0]
    assert p.dr_at_decoupled == pytest.approx(2 * (-48 + 0.4 * 8))
    assert p.dr_at_decoupled < p.pr_at_OP


def test_unknown_oracle():
    with pytest.raises(ContractError):
        oracle_points("strategic")


def test_decoupled_stable_examples(seed):
    env = build_environment("quadratic_pricing", dict(cov_scale=0.0, box=None))
    r = decoupled_stable(env, [1.0], n=5, seed=seed)
    assert r.converged and not r.at_boundary
    assert r.theta_M.item() == pytest.approx(6.0 - 1.5, abs=1e-7)
    env = build_environment("mixture", dict(sigma1=0.0, sigma2=0.0))
    r = decoupled_stable(env, [0.5], n=5, seed=seed)
    assert r.theta_M.item() == -1.0 and r.at_boundary
    env = build_environment("pricing", dict(cov_scale=0.0, box=[0.0, 8.0]))
    r = decoupled_stable(env, [4.0], n=5, seed=seed, theta_M0=[4.0])
    assert r.theta_M.item() == 4.0 and r.converged


def test_decoupled_stable_cap_is_flagged(seed):
    env = build_environment("quadratic_pricing", dict(cov_scale=0.0, box=None))
    r = decoupled_stable(env, [0.0], n=5, seed=seed, max_iter=3)
    assert not r.converged and r.iterations == 3


def test_convexity_probe_cases():
    quad = build_environment("quadratic_pricing", dict(box=[-3.0, 3.0]))
    assert convexity_probe(quad, 200, n=200).max_violation <= 1e-9
    ext = build_environment("pricing", dict(lam=0.4, box=[0.0, 8.0]))
    rep = convexity_probe(ext, 200, n=200)
    assert rep.max_violation > 1e-3 and rep.worst["violation"] == rep.max_violation
    empty = convexity_probe(quad, 0)
    assert empty.n_probes == 0 and empty.passed
    with pytest.raises(ContractError):
        convexity_probe(build_environment("pricing"), 5)


def test_landscape_exports_round_trip(seed):
    env = build_environment("pricing", dict(dim=2))
    g = dr_slice(env, [1.0, 1.0], 4, n=20, seed=seed, direction_seed=3)
    back = LandscapeGrid.from_json(g.to_json())
    assert back.to_json() == g.to_json()
    rows = g.to_csv().splitlines()
    assert rows[0] == "alpha_D,alpha_M,dr_value" and len(rows) == 1 + 16
    vals = [float(r.split(",")[2]) for r in rows[1:]]
    assert vals == g.values.ravel().tolist()
    g1 = dr_grid_1d(build_environment("mixture"), -1, 1, 3, 10, seed)
    assert g1.to_csv().splitlines()[0] == "theta_D,theta_M,dr_value"
