"""Weighted-in-time energy inequalities: weights, synthetic data, the four
evaluators, and the parameter searches."""

import math

import numpy as np
import pytest

from mfglab import Grid, ScenarioTree
from mfglab import carleman as C
from mfglab.carleman import CarlemanError, CarlemanWeight


@pytest.fixture(scope="module")
def small():
    """Backward-kind data live on a recombining tree."""
    g = Grid(n=1, L=1.0, N=64, T=1.0, K=16)
    tree = ScenarioTree(K=16, dt=g.dt, recombining=True)
    return g, tree


@pytest.fixture(scope="module")
def fsmall():
    """Forward-kind data are path dependent and need the full tree."""
    g = Grid(n=1, L=1.0, N=64, T=1.0, K=12)
    tree = ScenarioTree(K=12, dt=g.dt, recombining=False)
    return g, tree


# -- weight --------------------------------------------------------------------

def test_weight_log_values():
    w = CarlemanWeight.from_lambda(1.0, 1.0, 1.0)
    assert w.weight_log(0.0) == pytest.approx(2.0)
    assert w.weight_log(1.0) == pytest.approx(3.0)
    with pytest.raises(CarlemanError):
        w.weight_log(2.0)


def test_weight_normalization_at_terminal_time():
    w = CarlemanWeight.from_lambda(0.5, 3.0, 1.0)
    assert w.normalized_log_weight(1.0, 2.0) == 0.0
    # theta(0)^2 / theta(T)^2 = exp(2 lam (2^mu - 3^mu))
    expect = 2.0 * 0.5 * (2.0**3 - 3.0**3)
    assert w.normalized_log_weight(0.0, 2.0) == pytest.approx(expect)


def test_weight_survives_extreme_parameters():
    """Parameters far beyond double range stay finite in log space."""
    mu = C.mu_min(1.0)
    w = CarlemanWeight(log_lambda=-mu * math.log(3.0), mu=mu, T=1.0)
    v0 = w.normalized_log_weight(0.0, 2.0)
    assert v0 < 0.0 and np.isfinite(v0)
    assert w.normalized_log_weight(1.0, 2.0) == 0.0


def test_mu_min_values():
    assert C.mu_min(1.0) == pytest.approx(1296.0)
    assert C.mu_min(0.5) == pytest.approx(900.0)
    with pytest.raises(CarlemanError):
        C.mu_min(0.0)


# -- synthetic data ------------------------------------------------------------

def test_backward_datum_satisfies_equation(small):
    g, tree = small
    for beta in (0.0, 0.5, 1.0):
        d = C.make_synthetic("backward", 7, tree, g, beta)
        assert C.datum_residual(d) < 1e-10


def test_forward_datum_satisfies_equation(fsmall):
    g, tree = fsmall
    for beta in (0.0, 0.5, 1.0):
        d = C.make_synthetic("forward", 7, tree, g, beta)
        assert C.datum_residual(d) < 1e-10


def test_dirichlet_forward_datum():
    g = Grid(n=1, L=1.0, N=128, T=1.0, K=12)
    tree = ScenarioTree(K=12, dt=g.dt, recombining=False)
    d = C.make_synthetic("forward", 3, tree, g, 0.5, boundary="dirichlet")
    assert C.datum_residual(d) < 1e-10
    for k in (0, g.K // 2, g.K):
        v = np.asarray(d.p[k])
        assert np.max(np.abs(v[:, 0])) == 0.0
        assert np.max(np.abs(v[:, g.N // 2])) == 0.0


def test_dirichlet_needs_room_for_the_support():
    g = Grid(n=1, L=1.0, N=32, T=1.0, K=12)  # (K+2) h = 0.875 >= 0.25
    tree = ScenarioTree(K=12, dt=g.dt, recombining=False)
    with pytest.raises(CarlemanError):
        C.make_synthetic("forward", 0, tree, g, 0.5, boundary="dirichlet")


def test_random_smooth_field_resolution_independent():
    rng_a = np.random.default_rng(9)
    rng_b = np.random.default_rng(9)
    coarse = C.random_smooth_field(Grid(n=1, L=1.0, N=64, T=1.0, K=4), rng_a)
    fine = C.random_smooth_field(Grid(n=1, L=1.0, N=128, T=1.0, K=4), rng_b)
    np.testing.assert_allclose(coarse, fine[::2], rtol=1e-12, atol=1e-13)


# -- evaluators ----------------------------------------------------------------

def test_th1_satisfied_and_scale_invariant(small):
    g, tree = small
    d = C.make_synthetic("backward", 1, tree, g, 0.5)
    w = CarlemanWeight.from_lambda(2.0, 2.0, g.T)
    rep = C.check_th1(d, w)
    assert rep.satisfied() and rep.finite_terms()
    rep_scaled = C.check_th1(d.scaled(17.0), w)
    assert rep_scaled.relative_margin == pytest.approx(rep.relative_margin,
                                                       rel=1e-9)


def test_th1_requires_backward_kind(fsmall):
    g, tree = fsmall
    d = C.make_synthetic("forward", 0, tree, g, 0.5)
    with pytest.raises(CarlemanError):
        C.check_th1(d, CarlemanWeight.from_lambda(1.0, 2.0, g.T))


def test_th1_beta_one_drops_divergence_term(small):
    """At full noise intensity the (1 - beta^2)/2 coefficient vanishes and
    the divergence term must drop out instead of polluting the sum."""
    g, tree = small
    d = C.make_synthetic("backward", 2, tree, g, 1.0)
    rep = C.check_th1(d, CarlemanWeight.from_lambda(1.0, 2.0, g.T))
    assert rep.lhs_terms["div_f2"] == 0.0
    assert rep.lhs_logs["div_f2"] == float("-inf")


def test_th2_scan_finds_finite_passing_weight(fsmall):
    g, tree = fsmall
    d = C.make_synthetic("forward", 1, tree, g, 0.5)
    w, rep, rows = C.scan_lambda(d, C.mu_min(g.T))
    assert rep.finite_terms() and rep.satisfied()
    assert any(not r.finite for r in rows)  # the scan spans degenerate ground


def test_th3_certifies_with_nonzero_f3(small):
    g, tree = small
    data = [C.make_synthetic("backward", s, tree, g, 0.5,
                             boundary="dirichlet", f3_amplitude=0.3)
            for s in range(5)]
    cert = C.certify_constants(data, checker=C.check_th3)
    assert cert.n_pass == cert.n_total == 5
    assert cert.mu0 >= 2.0


def test_th4_certifies_at_huge_mu():
    g = Grid(n=1, L=1.0, N=128, T=1.0, K=12)
    tree = ScenarioTree(K=12, dt=g.dt, recombining=False)
    data = [C.make_synthetic("forward", s, tree, g, 0.5,
                             boundary="dirichlet") for s in range(3)]
    mu = C.mu_min(g.T)
    cert = C.certify_constants(data, checker=C.check_th4, mu_start=mu,
                               log_lambda_start=-mu * math.log(3.0))
    assert cert.n_pass == cert.n_total == 3
    assert cert.mu0 == mu


def test_boundary_check_rejects_interior_support(small):
    g, tree = small
    d = C.make_synthetic("backward", 0, tree, g, 0.5)  # periodic, no trace
    with pytest.raises(CarlemanError):
        C.check_th3(d, CarlemanWeight.from_lambda(1.0, 2.0, g.T))


def test_half_domain_below_box_energy(small):
    """The half-domain evaluation of a Dirichlet datum can never exceed
    the full-box evaluation of the same fields."""
    g, tree = small
    d = C.make_synthetic("backward", 4, tree, g, 0.5, boundary="dirichlet")
    w = CarlemanWeight.from_lambda(1.0, 2.0, g.T)
    half = C.check_th1(d, w, domain="half", f2_coeff=0.5, f1_coeff=4.0)
    box = C.check_th1(d, w)
    for key in ("lap_w", "w", "grad_w"):
        assert half.lhs_terms[key] <= box.lhs_terms[key] * (1 + 1e-12)


def test_interior_term_against_direct_quadrature(small):
    """Hand oracle: constant coefficient, single constant field, modest
    lambda - the per-interval mass should reproduce the closed-form
    integral of the weight to quadrature accuracy."""
    from scipy.integrate import quad
    g, tree = small
    w = CarlemanWeight.from_lambda(0.3, 2.0, g.T)
    fields = lambda k: np.ones((tree.levels(k),) + g.shape)
    val = C._interior_term(w, tree, g, "box", fields, lambda t: 0.0)
    ref_shift = 2.0 * 0.3 * (g.T + 2.0) ** 2
    exact, _ = quad(lambda t: math.exp(2 * 0.3 * (t + 2) ** 2 - ref_shift),
                    0.0, g.T)
    exact *= 2.0  # spatial volume of the box
    assert val == pytest.approx(math.log(exact), abs=1e-10)


def test_report_row_is_flat_and_complete(small):
    g, tree = small
    d = C.make_synthetic("backward", 0, tree, g, 0.5)
    w = CarlemanWeight.from_lambda(1.0, 2.0, g.T)
    rep = C.check_th1(d, w)
    row = C.report_row(rep, w, 0.5, g)
    assert row["theorem"] == "th1"
    assert row["margin"] == pytest.approx(rep.margin)
    assert all(np.isscalar(v) for v in row.values())


def test_scan_prefers_finite_terms(fsmall):
    g, tree = fsmall
    d = C.make_synthetic("forward", 2, tree, g, 0.5)
    _, rep, rows = C.scan_lambda(d, C.mu_min(g.T))
    finite_rows = [r for r in rows if r.finite]
    assert finite_rows, "scan found no all-finite weight"
    assert rep.finite_terms()
