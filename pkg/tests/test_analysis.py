import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predsls import analysis as an
from predsls.model import build_chain_example
from predsls.synthesis import synthesize
from predsls.topology import star


@pytest.fixture(scope="module")
def chain6():
    return build_chain_example(N=6, T=10)


def test_log_linear_fit_recovers_exact_geometric_data():
    grid = np.arange(8)
    fit = an.fit_log_linear(grid, 3.0 * 0.4 ** grid)
    assert fit.rate == pytest.approx(0.4, rel=1e-12)
    assert fit.constant == pytest.approx(3.0, rel=1e-12)
    assert fit.r2 == pytest.approx(1.0)
    assert fit.decaying


def test_fit_ignores_values_below_floor():
    values = np.array([1.0, 0.5, 0.25, 0.0, 1e-20])
    fit = an.fit_log_linear(np.arange(5), values)
    assert fit.used.tolist() == [True, True, True, False, False]
    assert fit.rate == pytest.approx(0.5)
    with pytest.raises(an.FitError):
        an.fit_log_linear(np.arange(3), [1.0, 0.0, 0.0])


def test_bound_constants_reference_values():
    c = an.BoundConstants(C=1.0, rho=0.5, D=1.0, theta=0.5)
    assert c.C1 == pytest.approx(9.0)
    assert c.C3 == pytest.approx(25.0)
    assert c.rho0 == pytest.approx(np.sqrt(0.5))
    assert c.C2 > 0


def test_bound_constants_reject_non_decaying_rates():
    with pytest.raises(an.FitError):
        an.BoundConstants(C=1.0, rho=1.2, D=1.0, theta=0.5)


def test_neighborhood_bound_chain():
    s = build_chain_example(N=6, T=4)
    assert an.neighborhood_bound(s).tolist() == [1, 4, 6, 8, 10, 12]


def test_neighborhood_bound_star():
    from predsls.model import build_graph_system

    p = an.neighborhood_bound(build_graph_system(star(4), T=3))
    assert p.tolist() == [1, 8, 12]


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 12))
def test_neighborhood_bound_is_non_decreasing(n):
    s = build_chain_example(N=n, T=2)
    p = an.neighborhood_bound(s)
    assert np.all(np.diff(p) >= 0) and p[0] == 1


@settings(max_examples=30, deadline=None)
@given(st.floats(0.01, 0.95), st.floats(0.01, 0.95), st.floats(0.0, 5.0), st.floats(0.1, 3.0))
def test_doubling_W_quadruples_the_W_terms(rho, theta, eps_bar, W):
    c = an.BoundConstants(C=1.3, rho=rho, D=0.7, theta=theta)
    p = np.array([1.0, 4, 6, 8])
    a = an.evaluate_regret_bound(c, p, eps_bar, W)
    b = an.evaluate_regret_bound(c, p, eps_bar, 2 * W)
    assert np.allclose(b.terms[0], a.terms[0])
    assert np.allclose(b.terms[1:], 4 * a.terms[1:])
    assert np.allclose(a.values, a.terms.sum(axis=0))


def test_without_prediction_error_the_bound_prefers_full_communication():
    c = an.BoundConstants(C=3.2, rho=0.16, D=0.7, theta=0.22)
    p = an.neighborhood_bound(build_chain_example(N=16, T=2))
    curve = an.evaluate_regret_bound(c, p, 0.0, 2.3)
    assert curve.kappa_star == 15
    assert curve.terms[2, -1] == 0.0


def test_large_error_pulls_bound_minimizer_inward():
    c = an.BoundConstants(C=3.2, rho=0.16, D=0.7, theta=0.22)
    p = an.neighborhood_bound(build_chain_example(N=16, T=2))
    stars = [an.evaluate_regret_bound(c, p, an.cumulative_error_bound(e, 40), 2.3).kappa_star
             for e in (0.0, 0.5, 1.0, 2.0)]
    assert stars == sorted(stars, reverse=True)
    assert stars[-1] < 15


def test_cumulative_error_bound():
    assert an.cumulative_error_bound(0.5, 40) == pytest.approx(10.0)


def test_temporal_decay_fit(chain6):
    maps = synthesize(chain6, chain6.topology.diameter)
    env = an.temporal_envelope(maps)
    assert env[0] >= env[1] >= env[2]
    fit = an.fit_temporal_decay(maps)
    assert fit.decaying and fit.r2 > 0.9


def test_spatial_gaps_vanish_at_full_kappa(chain6):
    diam = chain6.topology.diameter
    gaps = an.spatial_gaps(chain6, [0, 1, 2, diam])
    assert gaps[-1] == 0.0
    assert np.all(np.diff(gaps) <= 1e-9)
    fit, again = an.fit_spatial_decay(chain6, [0, 1, 2, diam])
    assert np.array_equal(gaps, again)
    assert fit.used.sum() == 3


def test_empirical_kappa_star_picks_the_smallest_tie():
    assert an.empirical_kappa_star([0, 1, 2, 3], [5.0, 2.0, 1.0, 1.0]) == 2
    assert an.empirical_kappa_star([0, 1, 2], [1.0, 2.0, 3.0]) == 0


def _sweep(normalized):
    normalized = np.asarray(normalized, dtype=float)[None]
    K = normalized.shape[1]
    return an.SweepResult(np.arange(K), np.array([1.0]), np.arange(normalized.shape[2]), normalized)


def test_interior_minimum_requires_a_significant_rise():
    base = np.array([3.0, 1.0, 2.0])
    noise = np.random.default_rng(0).normal(0, 0.01, size=(3, 20))
    interior, k_star, rise, se = an.interior_minimum(_sweep(base[:, None] + noise), 0)
    assert interior and k_star == 1 and rise > se
    flat = np.array([3.0, 1.0, 1.0])[:, None] + noise
    assert not an.interior_minimum(_sweep(flat), 0)[0]
    monotone = np.array([3.0, 2.0, 1.0])[:, None] + noise
    assert not an.interior_minimum(_sweep(monotone), 0)[0]


def test_kappa_sweep_and_codesign(chain6):
    sweep = an.kappa_sweep(chain6, [0, 1, 5], [0.0, 0.5], range(3))
    assert sweep.normalized.shape == (2, 3, 3)
    assert len(sweep.reports) == 6
    # exact predictions at full kappa reproduce the optimum
    assert np.abs(sweep.normalized[0, 2]).max() < 1e-9
    c = an.BoundConstants(C=2.0, rho=0.2, D=0.7, theta=0.2)
    rows = an.codesign(chain6, sweep, c, 2.3)
    assert [r["error_level"] for r in rows] == [0.0, 0.5]
    assert rows[0]["bound_kappa_star"] == 5 and rows[0]["empirical_kappa_star"] == 5
    assert rows[0]["agree"]


def test_truncated_sweep(chain6):
    sweep = an.kappa_sweep(chain6, [0, 1], [0.0], range(2), controller="ptc")
    assert sweep.reports[0].controller == "PTC(k=0)"
