import numpy as np
import pytest

from abrfair.core import BitrateLadder
from abrfair.policies import LBB, LRB, RB
from abrfair.stability import (
    INCONCLUSIVE,
    STABLE,
    UNSTABLE,
    absorbing_box,
    check_agreement,
    contraction_estimate,
    lbb_stability_check,
    rb_equilibrium,
    simulate_convergence,
)
from abrfair.tcp import TcpShareModel, share_jacobian, tcp_share

DEFAULT = TcpShareModel()
STEEP = TcpShareModel(0.05, 3000.0, 2.0)

# (c, kappa, hill) settings with a decisive classification, used by the agreement checks
STABLE_SETTINGS = [(0.5, 1000.0, 1.0), (2.0, 500.0, 1.0), (1.0, 1000.0, 2.0), (0.5, 1500.0, 2.0), (0.3, 3000.0, 3.0)]
UNSTABLE_SETTINGS = [(0.05, 3000.0, 2.0), (0.01, 3000.0, 2.0), (0.02, 5000.0, 2.0), (0.01, 2500.0, 3.0)]


def test_rb_equilibrium_examples():
    rep = rb_equilibrium(LRB(0.8), 3000.0, 2)
    assert np.allclose(rep.equilibrium_r, [1200.0, 1200.0]) and np.allclose(rep.equilibrium_w, [1500.0, 1500.0])
    rep = rb_equilibrium(LRB(1.0), 2000.0, 4)
    assert np.allclose(rep.equilibrium_r, 500.0) and np.allclose(rep.equilibrium_w, 500.0)
    table = RB((0.0, 2000.0), (200.0, 2200.0))
    rep = rb_equilibrium(table, 3000.0, 3)
    assert np.allclose(rep.equilibrium_r, table.raw(1000.0, 0.0))


@pytest.mark.parametrize("c,kappa,hill", STABLE_SETTINGS + UNSTABLE_SETTINGS)
def test_rb_equilibrium_is_fixed_point(c, kappa, hill):
    rep = rb_equilibrium(LRB(0.8), 3000.0, 2, model=TcpShareModel(c, kappa, hill))
    assert rep.evidence["fixed_point_residual"] < 1e-9


def test_ideal_sharing_is_fully_contractive():
    rep = contraction_estimate(TcpShareModel.ideal(), LRB(0.8), 3000.0, 2)
    assert rep.lipschitz == 0.0 and rep.classification == STABLE


def pairwise_lipschitz(model, policy, W, lo, hi, pairs=10_000, seed=1):
    """Independent sampler: largest |F(x)-F(y)|_inf / |x-y|_inf over uniform pairs in the box."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(lo, hi, (pairs, 2))
    y = rng.uniform(lo, hi, (pairs, 2))
    lad = BitrateLadder()

    def F(r):
        return np.clip(policy.raw(tcp_share(model, r, W), 0.0), lad.min_kbps, lad.max_kbps)

    num = np.max(np.abs(F(x) - F(y)), axis=1)
    den = np.max(np.abs(x - y), axis=1)
    return float(np.max(num / den))


def jacobian_norm_sup(model, policy, W, lo, hi, grid=301, h=1e-3):
    """Independent bound: sup of the row-sum norm of a central-difference Jacobian on a fine grid.

    On a convex box this is the infinity-norm Lipschitz constant of the map.
    """
    lad = BitrateLadder()

    def F(r):
        return np.clip(policy.raw(tcp_share(model, r, W), 0.0), lad.min_kbps, lad.max_kbps)

    ax = np.linspace(lo, hi, grid)
    X = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2)
    J = np.stack([(F(X + h * e) - F(X - h * e)) / (2 * h) for e in np.eye(2)], axis=-1)
    return float(np.abs(J).sum(axis=-1).max())


def test_default_lipschitz_against_independent_bounds():
    rep = contraction_estimate(DEFAULT, LRB(0.8), 3000.0, 2)
    lo, hi = rep.domain
    assert (lo, hi) == absorbing_box(DEFAULT, LRB(0.8), 3000.0, 2, BitrateLadder())
    # uniform pairs bound it from below, the Jacobian norm from above
    assert pairwise_lipschitz(DEFAULT, LRB(0.8), 3000.0, lo, hi) <= rep.lipschitz * (1 + 1e-9)
    sup = jacobian_norm_sup(DEFAULT, LRB(0.8), 3000.0, lo, hi)
    assert 0.9 * sup <= rep.lipschitz <= sup * (1 + 1e-6)
    assert rep.classification == STABLE


def test_steep_sharing_is_unstable():
    rep = contraction_estimate(TcpShareModel(0.01, 3000.0, 2.0), LRB(1.0), 3000.0, 2)
    assert rep.classification == UNSTABLE and rep.spectral_radius_eq > 1.0


def test_lbb_check_ideal_is_inconclusive():
    rep = lbb_stability_check(TcpShareModel.ideal(), 2, 3000.0)
    assert rep.classification == INCONCLUSIVE
    assert rep.evidence["cross_partial_min"] == 0.0 == rep.evidence["cross_partial_max"]


def test_lbb_check_default_against_analytic_partial():
    rep = lbb_stability_check(DEFAULT, 2, 3000.0)
    # d h_1 / d r_2 at r = (1500, 1500) for g = c + r/(r+kappa): -W g dg / (2g)^2 = -W dg / (4 g)
    g = 0.5 + 1500.0 / 2500.0
    dg = 1000.0 / 2500.0**2
    assert rep.evidence["cross_partial_min"] == pytest.approx(-3000.0 * dg / (4 * g), rel=1e-6)
    assert rep.classification == STABLE


def test_lbb_cross_partial_approaches_boundary():
    cs = (1e-1, 1e-2, 1e-3, 1e-4)
    cross = [lbb_stability_check(TcpShareModel(c, 1e6), 2, 3000.0).evidence["cross_partial_min"] for c in cs]
    dg = 1e6 / (1500.0 + 1e6) ** 2
    for c, v in zip(cs, cross):
        g = c + 1500.0 / (1500.0 + 1e6)
        assert v == pytest.approx(-3000.0 * dg / (4 * g), rel=1e-6)
    # as c -> 0 and kappa -> inf the partial tends to -1/2 from above
    assert all(b < a for a, b in zip(cross, cross[1:]))
    assert -0.5 < cross[-1] < -0.45


@pytest.mark.parametrize("c,kappa,hill", STABLE_SETTINGS + UNSTABLE_SETTINGS)
def test_jacobian_row_sums_vanish(c, kappa, hill):
    model = TcpShareModel(c, kappa, hill)
    J = share_jacobian(model, np.full(3, 1000.0), 3000.0)
    # moving all bitrates together along the diagonal leaves the equal split unchanged
    assert np.allclose(J.sum(axis=1), 0.0, atol=1e-9)
    rep = lbb_stability_check(model, 3, 3000.0)
    assert rep.evidence["row_sum_max"] < 1e-9


def test_lbb_converges_to_equal_share():
    res = simulate_convergence(DEFAULT, [LBB(), LBB()], 3000.0, [500.0, 2500.0])
    assert res.converged
    assert np.allclose(res.limit_r, [1500.0, 1500.0], atol=1.0)


def test_ideal_sharing_converges_in_two_steps():
    res = simulate_convergence(TcpShareModel.ideal(), [LRB(0.8), LRB(0.8)], 3000.0, [300.0, 2900.0])
    assert res.converged and res.steps_taken <= 2
    assert np.allclose(res.limit_r, 1200.0)


def test_unstable_lbb_leaves_equal_share():
    assert lbb_stability_check(STEEP, 2, 3000.0).classification == UNSTABLE
    res = simulate_convergence(STEEP, [LBB(), LBB()], 3000.0, [1400.0, 1600.0])
    assert np.max(np.abs(res.limit_r - 1500.0)) > 1.0


@pytest.mark.parametrize("c,kappa,hill", STABLE_SETTINGS + UNSTABLE_SETTINGS)
@pytest.mark.parametrize("policy", [LRB(0.8), LBB()], ids=["LRB", "LBB"])
def test_agreement(c, kappa, hill, policy):
    res = check_agreement(TcpShareModel(c, kappa, hill), policy, 3000.0, 2, starts=100, seed=0)
    expected = STABLE if (c, kappa, hill) in STABLE_SETTINGS else UNSTABLE
    assert res.predicted == expected
    assert res.agrees
