"""Model registry and weighted-flow simulation layer."""

import math

import numpy as np
import pytest

from mkolmo import _kernel_py
from mkolmo.kernels import KIND_CODES, kernel_name
from mkolmo.measure import ParticleMeasure, squared_norm
from mkolmo.models import make_model, MODEL_REGISTRY
from mkolmo.rng import WStream, substream
from mkolmo.sde import (NoisePath, ZakaiFlow, derivative_flow,
                        innovation_increments, ks_view, mass_law_terminal,
                        mass_moment_bounds, physical_observation, run_flow,
                        simulate_signal_observation, xi_path,
                        _normals_range)


def cloud(rng, n, spread=1.0):
    return ParticleMeasure(spread * rng.standard_normal((n, 1)),
                           np.full(n, 1.0 / n))


# -- models -----------------------------------------------------------------


def test_registry_and_unknown_name():
    assert set(MODEL_REGISTRY) == {"ou_bounded", "linear_gauss"}
    with pytest.raises(KeyError):
        make_model("heston")
    with pytest.raises(TypeError):
        make_model("ou_bounded", nonsense=1.0)
    with pytest.raises(ValueError):
        make_model("ou_bounded", sigma=0.0)


def test_ou_bounded_coefficient_bounds():
    m = make_model("ou_bounded", eps=0.4, h_scale=2.0, clip=3.0, sigma=0.7)
    xs = np.linspace(-50, 50, 11)[:, None]
    assert np.max(np.abs(m.f(xs))) == 3.0
    assert np.max(np.abs(m.h(xs))) <= 2.0
    assert m.f_sup == 3.0 and m.h_sup == 2.0
    assert m.sigma_sup == 0.7 and m.sigma_bar_sup == 0.4
    assert m.hypothesis_ok


def test_linear_gauss_generator_on_quadratic():
    # A psi = a x psi' + 1/2 b^2 psi'' for psi(x) = x^2
    m = make_model("linear_gauss", a=-0.5, b=1.3, c=2.0)
    xs = np.array([[0.0], [1.0], [-2.0]])
    got = m.apply_A(squared_norm(), xs)
    want = 2 * (-0.5) * xs[:, 0] ** 2 + 1.3 ** 2
    assert np.allclose(got, want, atol=1e-12)
    assert not m.hypothesis_ok          # unbounded coefficients
    assert np.allclose(m.apply_B(squared_norm(), xs), 0.0)


def test_diffusion_matrix_combines_both_noises():
    m = make_model("ou_bounded", eps=0.4, sigma=0.7)
    a = m.diffusion_matrix(np.zeros((1, 1)))
    assert a[0, 0, 0] == pytest.approx(0.7 ** 2 + 0.4 ** 2)
    got = m.apply_B(squared_norm(), np.array([[1.5]]))
    assert got[0, 0] == pytest.approx(0.4 * 2 * 1.5)


# -- noise paths and signal simulation ---------------------------------------


def test_reference_path_deterministic_and_scaled():
    p1 = NoisePath.reference(dt=1e-2, n_steps=50, obs_dim=1, seed=5)
    p2 = NoisePath.reference(dt=1e-2, n_steps=50, obs_dim=1, seed=5)
    p3 = NoisePath.reference(dt=1e-2, n_steps=50, obs_dim=1, seed=6)
    assert np.array_equal(p1.dy, p2.dy)
    assert not np.array_equal(p1.dy, p3.dy)
    assert p1.n_steps == 50 and p1.obs_dim == 1
    # increments scale like sqrt(dt)
    assert np.std(p1.dy) == pytest.approx(math.sqrt(1e-2), rel=0.4)


def test_physical_observation_shapes_and_repeatability():
    m = make_model("ou_bounded")
    dy, traj = physical_observation(m, np.zeros(1), 1e-2, 30,
                                    substream(3, 32))
    dy2, traj2 = physical_observation(m, np.zeros(1), 1e-2, 30,
                                      substream(3, 32))
    assert dy.shape == (30, 1) and traj.shape == (31, 1)
    assert np.array_equal(dy, dy2) and np.array_equal(traj, traj2)


def test_simulate_signal_observation_draws_from_law():
    m = make_model("ou_bounded")
    mu = ParticleMeasure(np.array([[4.0], [-4.0]]), np.array([0.5, 0.5]))
    path = NoisePath.reference(dt=1e-2, n_steps=10, obs_dim=1, seed=11)
    traj, dy = simulate_signal_observation(m, mu, path)
    assert traj.shape == (11, 1) and dy.shape == (10, 1)
    assert abs(traj[0, 0]) == 4.0        # started on an atom
    assert np.all(np.isfinite(traj))


# -- flow stepping ------------------------------------------------------------


def test_zakai_flow_mass_constant_without_observation_coupling():
    # h == 0 kills the weight update entirely
    m = make_model("ou_bounded", h_scale=0.0)
    rng = substream(17)
    mu = cloud(rng, 32)
    path = NoisePath.reference(dt=1e-2, n_steps=25, obs_dim=1, seed=17)
    flow = ZakaiFlow(m, mu, path).run()
    assert np.allclose(flow.mass_path, 1.0, atol=1e-14)
    assert np.all(flow.weights() > 0)


def test_run_flow_matches_stateful_flow():
    m = make_model("ou_bounded", eps=0.25, h_scale=1.5)
    rng = substream(23)
    mu = cloud(rng, 40)
    path = NoisePath.reference(dt=5e-3, n_steps=60, obs_dim=1, seed=23)
    flow = ZakaiFlow(m, mu, path, flow_id=0).run()
    fp = run_flow(m, mu.points, mu.weights, path.dy, path.dt,
                  path.w_stream(0), snapshot_steps=(60,),
                  test_fns=(squared_norm(),))
    assert np.allclose(fp.mass, flow.mass_path, rtol=1e-12, atol=0)
    assert np.allclose(fp.final_points[:, 0], flow.x[:, 0], atol=1e-12)
    want = float(np.sum(flow.weights() * flow.x[:, 0] ** 2))
    assert fp.snapshots[60][0] == pytest.approx(want, rel=1e-12)


def test_run_flow_rejects_bad_snapshot_step():
    m = make_model("ou_bounded")
    path = NoisePath.reference(dt=1e-2, n_steps=5, obs_dim=1, seed=1)
    with pytest.raises(ValueError):
        run_flow(m, np.zeros((4, 1)), np.full(4, 0.25), path.dy, path.dt,
                 path.w_stream(0), snapshot_steps=(6,))


def test_from_increments_reproduces_canonical_stream():
    m = make_model("ou_bounded", eps=0.3)
    rng = substream(31)
    mu = cloud(rng, 12)
    path = NoisePath.reference(dt=1e-2, n_steps=20, obs_dim=1, seed=31)
    xi = _normals_range(path.w_stream(0), 0, 20, (12, 1))
    a = ZakaiFlow(m, mu, path, flow_id=0).run()
    b = ZakaiFlow.from_increments(m, mu, path, xi)
    assert np.array_equal(a.x, b.x)
    assert np.array_equal(a.lw, b.lw)
    assert a.mass_path == b.mass_path


def test_from_increments_validates_shape():
    m = make_model("ou_bounded")
    mu = ParticleMeasure(np.zeros((3, 1)), np.full(3, 1 / 3))
    path = NoisePath.reference(dt=1e-2, n_steps=4, obs_dim=1, seed=2)
    with pytest.raises(ValueError):
        ZakaiFlow.from_increments(m, mu, path, np.zeros((4, 2, 1)))


def test_flow_step_bounds_and_replay():
    m = make_model("ou_bounded")
    rng = substream(41)
    mu = cloud(rng, 8)
    path = NoisePath.reference(dt=1e-2, n_steps=6, obs_dim=1, seed=41)
    flow = ZakaiFlow(m, mu, path)
    for _ in range(6):
        flow.step()
    with pytest.raises(ValueError):
        flow.step()                       # past the end of the path
    snap = flow.measure_at(3)
    assert snap.n_atoms == 8
    assert snap.total_mass() == pytest.approx(flow.mass_path[3])
    assert flow.measure().total_mass() == pytest.approx(flow.mass_path[6])


def test_derivative_flow_starts_at_point_mass():
    m = make_model("ou_bounded")
    path = NoisePath.reference(dt=1e-2, n_steps=8, obs_dim=1, seed=9)
    flow = derivative_flow(m, np.array([0.7]), path, n_particles=16)
    mu0 = flow.measure_at(0)
    assert np.all(mu0.points == 0.7)
    assert mu0.total_mass() == pytest.approx(1.0)
    flow.run()
    assert flow.mass() > 0


# -- kernel twins --------------------------------------------------------------


def test_compiled_and_python_kernels_agree():
    if kernel_name != "c":
        pytest.skip("compiled kernel not available")
    from mkolmo import _stepkernel
    rng = substream(55)
    n, steps = 64, 40
    for kind, params in ((KIND_CODES["ou_bounded"], (3.0, 0.8, 0.3, 1.2)),
                         (KIND_CODES["linear"], (-1.0, 1.0, 0.0, 1.0))):
        x0 = rng.standard_normal(n)
        w0 = rng.uniform(0.5, 1.5, n)
        xi = rng.standard_normal((steps, n))
        dy = 0.1 * rng.standard_normal(steps)
        args = []
        for mod in (_stepkernel, _kernel_py):
            x = x0.copy()
            lw = np.zeros(n)
            mass = np.zeros(steps)
            h = np.zeros(steps)
            mod.advance_chunk(kind, *params, x, lw, w0.copy(),
                              xi.copy(), dy.copy(), 1e-2, mass, h, 0)
            args.append((x, lw, mass, h))
        for a, b in zip(args[0], args[1]):
            assert np.allclose(a, b, rtol=1e-12, atol=1e-13)


def test_python_kernel_weight_identity():
    # one step by hand: lw = h dy - h^2 dt / 2, x drift-corrected
    x = np.array([0.5])
    lw = np.zeros(1)
    w0 = np.ones(1)
    xi = np.array([[0.3]])
    dy = np.array([0.02])
    mass = np.zeros(1)
    hrec = np.zeros(1)
    dt = 1e-2
    _kernel_py.advance_chunk(KIND_CODES["linear"], -1.0, 1.0, 0.2, 1.5,
                             x, lw, w0, xi, dy, dt, mass, hrec, 0)
    hx = 1.5 * 0.5
    assert lw[0] == pytest.approx(hx * 0.02 - 0.5 * hx ** 2 * dt)
    want_x = 0.5 + (-0.5 - 0.2 * hx) * dt + math.sqrt(dt) * 0.3 + 0.2 * 0.02
    assert x[0] == pytest.approx(want_x)
    assert mass[0] == 1.0 and hrec[0] == pytest.approx(hx)


# -- likelihood ratio and innovations ------------------------------------------


def test_xi_path_closed_form_for_constant_mean():
    dt = 1e-2
    dy = np.array([[0.1], [-0.05], [0.2]])
    mass = np.ones(4)
    h_int = 0.7 * np.ones(4)
    xi = xi_path(mass, h_int, dy, dt)
    y = np.concatenate([[0.0], np.cumsum(dy[:, 0])])
    want = np.exp(0.7 * y - 0.5 * 0.7 ** 2 * dt * np.arange(4))
    assert np.allclose(xi, want, atol=1e-14)
    innov = innovation_increments(mass, h_int, dy, dt)
    assert np.allclose(innov, dy[:, 0] - 0.7 * dt)


def test_ks_view_normalizes_and_tracks_xi():
    m = make_model("ou_bounded", h_scale=1.2)
    rng = substream(61)
    mu = cloud(rng, 24)
    path = NoisePath.reference(dt=1e-2, n_steps=15, obs_dim=1, seed=61)
    flow = ZakaiFlow(m, mu, path).run()
    ks = ks_view(flow)
    assert ks.xi[0] == 1.0
    assert ks.innovations.shape == (15, 1)
    pi = ks.pi_at(7)
    assert pi.total_mass() == pytest.approx(1.0)
    # xi is built from the same increments as xi_path
    direct = xi_path(np.asarray(flow.mass_path),
                     np.asarray(flow.h_path)[:, 0], path.dy, path.dt)
    assert np.allclose(ks.xi, direct, rtol=1e-12)


# -- vectorized mass-law runner -------------------------------------------------


def test_mass_law_unbiased_and_positive():
    m = make_model("ou_bounded", h_scale=0.5)
    masses = mass_law_terminal(m, n_particles=32, n_replicas=600,
                               dt=5e-3, n_steps=40, seed=71)
    assert masses.shape == (600,)
    assert np.all(masses > 0)
    se = masses.std(ddof=1) / math.sqrt(600)
    assert abs(masses.mean() - 1.0) < 4 * se


def test_mass_moment_report_bound():
    m = make_model("ou_bounded", h_scale=0.5)
    rep = mass_moment_bounds(m, n_particles=32, n_replicas=400,
                             dt=5e-3, n_steps=40, seed=73)
    T = 5e-3 * 40
    assert rep.analytic_bound == pytest.approx(2 * math.exp(2 * T * 0.25))
    assert rep.within_bound
    assert rep.min_pathwise_mass > 0
    assert rep.sup_mass_moment >= rep.terminal_mass_moment > 0
    assert rep.terminal_second_moment > 0


def test_w_stream_keying_separates_flows():
    path = NoisePath.reference(dt=1e-2, n_steps=4, obs_dim=1, seed=3)
    a = _normals_range(path.w_stream(0), 0, 4, (8,))
    b = _normals_range(path.w_stream(1), 0, 4, (8,))
    a2 = _normals_range(path.w_stream(0), 0, 4, (8,))
    assert np.array_equal(a, a2)
    assert not np.array_equal(a, b)
