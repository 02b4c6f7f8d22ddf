import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from predsls import model
from predsls.topology import chain, cycle


def test_chain_example_matrices(chain16):
    s = chain16
    assert (s.N, s.n, s.m, s.T) == (16, 16, 16, 40)
    assert np.all(np.diag(s.A) == 1.0)
    assert np.all(np.diag(s.A, 1) == 0.5) and np.all(np.diag(s.A, -1) == 0.5)
    assert np.array_equal(s.A, s.B)
    assert np.array_equal(s.Q, np.eye(16)) and np.array_equal(s.R, np.eye(16))


def test_chain_example_is_open_loop_unstable(chain16):
    report = model.validate(chain16)
    assert report.ok
    assert abs(report.open_loop_radius - (1 + np.cos(np.pi / 17))) < 1e-12
    assert report.closed_loop_radius < 1


def test_default_terminal_weight_is_dare_solution(chain16):
    from predsls.lqr import solve_dare

    P = solve_dare(chain16.A, chain16.B, chain16.Q, chain16.R).P
    assert np.abs(chain16.Q_T - P).max() < 1e-12


def test_arrays_are_read_only(chain16):
    with pytest.raises(ValueError):
        chain16.A[0, 0] = 3.0


def test_shape_and_symmetry_checks():
    topo = chain(3)
    I3 = np.eye(3)
    with pytest.raises(model.ModelError):
        model.NetworkedSystem(topo, np.eye(2), I3, I3, I3, 5)
    Q = I3.copy()
    Q[0, 1] = 0.3
    with pytest.raises(model.ModelError):
        model.NetworkedSystem(topo, I3, I3, Q, I3, 5)
    with pytest.raises(model.ModelError):
        model.NetworkedSystem(topo, I3, I3, I3, I3, 0)


def test_validate_reports_structural_violation():
    topo = chain(3)
    A = 0.5 * np.eye(3)
    A[0, 2] = 0.1  # nodes 1 and 3 are two hops apart
    s = model.NetworkedSystem(topo, A, np.eye(3), np.eye(3), np.eye(3), 4)
    rep = model.validate(s)
    assert not rep.structural_ok and not rep.ok
    assert "(1,3)" in rep.summary()


def test_validate_reports_unstabilizable():
    topo = chain(2)
    s = model.NetworkedSystem(topo, 2 * np.eye(2), np.zeros((2, 2)), np.eye(2), np.eye(2), 4,
                              Q_T=np.eye(2))
    rep = model.validate(s)
    assert not rep.stabilizable


def test_block_dimensions():
    topo = chain(3)
    n, m = 5, 3
    A = np.zeros((n, n))
    s = model.NetworkedSystem(topo, A, np.zeros((n, m)) + 0.0, np.eye(n), np.eye(m), 3, Q_T=np.eye(n),
                              state_dims=[2, 1, 2], action_dims=[1, 1, 1])
    assert s.state_slice(2) == slice(3, 5)
    assert np.array_equal(s.state_index([0, 2]), [0, 1, 3, 4])
    assert np.array_equal(s.state_owner(), [0, 0, 1, 2, 2])


def test_disturbances_are_deterministic(chain16):
    spec = model.DisturbanceSpec()
    a = model.generate_disturbances(chain16, spec, 7)
    b = model.generate_disturbances(chain16, spec, 7)
    c = model.generate_disturbances(chain16, spec, 8)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    assert not np.array_equal(a[0], c[0])


def test_default_bound_and_clipping(chain16):
    spec = model.DisturbanceSpec()
    assert abs(spec.W - (3 * np.sqrt(0.5) + 0.18)) < 1e-15
    for seed in range(20):
        w, w_hat = model.generate_disturbances(chain16, spec, seed)
        assert np.abs(w).max() <= spec.W
        assert np.array_equal(w, w_hat)


def test_bumps_are_added_at_fixed_times():
    s = model.build_chain_example(N=4, T=6)
    w, _ = model.generate_disturbances(s, model.DisturbanceSpec(kind="bumps"), 0)
    expected = np.zeros((6, 4))
    expected[2] = 0.08
    expected[4] = 0.18
    assert np.array_equal(w, expected)


def test_unclipped_draws_can_leave_the_box(chain16):
    spec = model.DisturbanceSpec(unclipped=True, bound=0.5)
    w, _ = model.generate_disturbances(chain16, spec, 0)
    assert np.abs(w).max() > 0.5


@settings(max_examples=30, deadline=None)
@given(st.floats(0.0, 2.0), st.integers(0, 1000))
def test_prediction_error_has_scheduled_norm(level, seed):
    s = model.build_chain_example(N=5, T=8)
    spec = model.DisturbanceSpec().with_errors(model.error_schedule(s.T, s.N, level, [0, 3]))
    w, w_hat = model.generate_disturbances(s, spec, seed)
    err = model.prediction_error(s, w, w_hat)
    assert abs(err[0] - s.T * level ** 2) < 1e-12 * max(1.0, s.T * level ** 2)
    assert abs(err[3] - s.T * level ** 2) < 1e-12 * max(1.0, s.T * level ** 2)
    assert err[1] == err[2] == err[4] == 0.0
    assert np.abs(w_hat).max() <= spec.W + 1e-12


def test_error_larger_than_box_is_rejected():
    s = model.build_chain_example(N=3, T=4)
    spec = model.DisturbanceSpec()
    too_big = model.error_schedule(s.T, s.N, 2 * spec.W + 0.1)
    with pytest.raises(model.ModelError):
        model.generate_disturbances(s, spec.with_errors(too_big), 0)


def test_disturbance_file(tmp_path):
    s = model.build_graph_system(cycle(3), T=2)
    path = tmp_path / "w.csv"
    path.write_text("0.1,0.2,0.3\n-0.1,0,0.5\n")
    w, _ = model.generate_disturbances(s, model.DisturbanceSpec(kind="file", path=str(path)), 0)
    assert np.allclose(w, [[0.1, 0.2, 0.3], [-0.1, 0, 0.5]])
    path.write_text("0.1,0.2\n")
    with pytest.raises(model.ModelError):
        model.generate_disturbances(s, model.DisturbanceSpec(kind="file", path=str(path)), 0)
