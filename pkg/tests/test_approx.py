"""Approximation stages: plateau cutoff, empirical sampling, Bernstein."""

import numpy as np
import pytest

from mkolmo.approx import (
    BUMP_GRAD_SUP, BUMP_HESS_SUP, bump_grad, bump_hess, bump_test_function,
    bump_value, cutoff_stage, empirical_stage, polynomial_stage,
)
from mkolmo.functionals import (fd_flat, fd_lions, make_functional,
                                verify_flat_identity)
from mkolmo.measure import ParticleMeasure
from mkolmo.rng import substream


def atoms(points, weights):
    return ParticleMeasure(np.asarray(points, float).reshape(-1, 1),
                           np.asarray(weights, float))


# -- plateau bump -----------------------------------------------------------


def test_bump_plateau_and_support():
    xs = np.array([[0.0], [1.9], [-2.0], [2.4], [3.0], [-3.5], [5.0]])
    v = bump_value(xs, 2.0)
    assert np.all(v[:3] == 1.0)          # inside the radius-2 box
    assert 0.0 < v[3] < 1.0              # in the transition shell
    assert np.all(v[5:] == 0.0)          # outside radius 3
    assert v[4] == 0.0                   # exactly at the outer edge


def test_bump_derivative_bounds_and_fd():
    xs = np.linspace(-3.4, 3.4, 41)[:, None]
    g = bump_grad(xs, 2.0)
    h = bump_hess(xs, 2.0)
    assert np.max(np.abs(g)) <= BUMP_GRAD_SUP + 1e-12
    assert np.max(np.abs(h)) <= BUMP_HESS_SUP + 1e-12
    eps = 1e-6
    fd = (bump_value(xs + eps, 2.0) - bump_value(xs - eps, 2.0)) / (2 * eps)
    assert np.allclose(g[:, 0], fd, atol=1e-8)


def test_bump_smoothness_at_shell_edges():
    # C^2: gradient and hessian vanish where the plateau meets the shell
    for x in (2.0, 3.0, -2.0, -3.0):
        pt = np.array([[x]])
        assert abs(bump_grad(pt, 2.0)[0, 0]) < 1e-12
        assert abs(bump_hess(pt, 2.0)[0, 0, 0]) < 1e-12


def test_bump_test_function_object():
    tf = bump_test_function(1.5)
    xs = np.array([[0.3], [2.1]])
    assert np.allclose(tf(xs), bump_value(xs, 1.5))
    assert tf.sup == 1.0


# -- cutoff stage -----------------------------------------------------------


def test_cutoff_exact_inside_box():
    base = make_functional("tanh_of_second_moment")
    stage = cutoff_stage(base, 4.0)
    mu = atoms([-1.4, 0.2, 1.1], [0.3, 0.5, 0.4])   # support radius 1.4
    cut = stage.functional
    assert cut.value(mu) == base.value(mu)
    xs = np.array([[0.7], [-1.0]])
    assert np.allclose(cut.flat(mu, xs), base.flat(mu, xs))
    assert np.allclose(cut.lions(mu, xs), base.lions(mu, xs))


def test_cutoff_shrinks_outside_mass():
    base = make_functional("total_mass")
    cut = cutoff_stage(base, 1.0).functional
    mu = atoms([0.0, 5.0], [1.0, 1.0])
    assert cut.value(mu) == pytest.approx(1.0)     # far atom suppressed
    with pytest.raises(ValueError):
        cutoff_stage(base, 0.0)


def test_cutoff_keeps_derivative_calculus_consistent():
    base = make_functional("product_two_integrals")
    cut = cutoff_stage(base, 1.5).functional
    mu = atoms([-2.2, 0.4, 1.8], [0.4, 0.8, 0.5])  # straddles the shell
    nu = atoms([0.9, 2.6], [0.6, 0.3])
    assert verify_flat_identity(cut, mu, nu, n_nodes=24).gap < 1e-9
    x = np.array([[1.7]])                          # inside the shell
    assert cut.flat(mu, x)[0] == pytest.approx(fd_flat(cut, mu, x),
                                               abs=1e-7)
    assert np.allclose(cut.lions(mu, x)[0], fd_lions(cut, mu, x),
                       atol=1e-6)


# -- empirical stage --------------------------------------------------------


def test_empirical_deterministic_per_seed():
    base = make_functional("quadratic_of_linear")
    mu = atoms([-1.0, 0.0, 1.0], [0.2, 0.5, 0.3])
    a = empirical_stage(base, 64, seed=9).functional
    b = empirical_stage(base, 64, seed=9).functional
    c = empirical_stage(base, 64, seed=10).functional
    assert a.value(mu) == b.value(mu)
    assert a.value(mu) != c.value(mu)
    with pytest.raises(ValueError):
        empirical_stage(base, 1, seed=0)


def test_empirical_error_shrinks_with_sample_size():
    base = make_functional("tanh_of_second_moment")
    mu = atoms([-1.2, -0.4, 0.3, 1.0], [0.3, 0.6, 0.55, 0.35])
    exact = base.value(mu)
    mean_err = []
    for n in (8, 64, 512):
        errs = [abs(empirical_stage(base, n, seed=s).functional.value(mu)
                    - exact) for s in range(200)]
        mean_err.append(np.mean(errs))
    assert mean_err[0] > mean_err[1] > mean_err[2]


def test_empirical_flat_unbiased_for_linear_base():
    # for <mu, psi> the projected derivative averages back to psi(x)
    base = make_functional("linear")
    mu = atoms([-0.8, 0.1, 0.9], [0.5, 0.4, 0.6])
    x = np.array([[0.45]])
    want = float(np.tanh(0.45))
    vals = [empirical_stage(base, 32, seed=s).functional.flat(mu, x)[0]
            for s in range(400)]
    se = np.std(vals, ddof=1) / np.sqrt(len(vals))
    assert abs(np.mean(vals) - want) < 3 * se + 1e-3


def test_empirical_of_mass_functional_is_exact():
    base = make_functional("total_mass")
    mu = atoms([0.3, -0.7], [1.1, 0.4])
    emp = empirical_stage(base, 16, seed=3).functional
    assert emp.value(mu) == pytest.approx(mu.total_mass(), abs=1e-12)
    assert emp.flat(mu, np.array([[0.2]]))[0] == pytest.approx(1.0,
                                                               abs=1e-12)


# -- Bernstein stage --------------------------------------------------------


def test_polynomial_stage_exact_on_affine_kernel():
    # the Bernstein operator reproduces affine functions exactly
    stage = polynomial_stage(lambda p, z: 0.7 * p[..., 0] - 0.3, r=1,
                             degree=3, box_radius=2.0,
                             mass_range=(0.5, 2.0))
    mu = atoms([-1.5, 0.4, 1.2], [0.3, 0.4, 0.3])
    pi = mu.normalize()
    m1 = float(pi.weights @ pi.points[:, 0])
    assert stage.functional.value(mu) == pytest.approx(0.7 * m1 - 0.3,
                                                       abs=1e-12)


def test_polynomial_stage_first_order_decay_on_quadratic():
    # for phi(x) = x^2 the operator error decays like 1/degree
    mu = atoms([-1.5, 0.4, 1.2], [0.3, 0.4, 0.3])
    pi = mu.normalize()
    want = sum(w * x * x for x, w in zip(pi.points[:, 0], pi.weights))
    errs = []
    for k in (4, 8, 16):
        stage = polynomial_stage(lambda p, z: p[..., 0] ** 2, r=1,
                                 degree=k, box_radius=2.0)
        errs.append(abs(stage.functional.value(mu) - want))
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.2)
    assert errs[1] / errs[2] == pytest.approx(2.0, rel=0.2)


def test_polynomial_stage_two_body_kernel():
    # phi(x, y) = x * y factorizes: <pi, x>^2; compare against the exact
    # value on a few measures
    stage = polynomial_stage(lambda p, z: p[..., 0] * p[..., 1], r=2,
                             degree=3, box_radius=2.0)
    rng = substream(77)
    for _ in range(5):
        pts = rng.uniform(-1.8, 1.8, size=(4, 1))
        w = rng.uniform(0.2, 0.5, size=4)
        mu = ParticleMeasure(pts, w)
        pi = mu.normalize()
        m1 = float(pi.weights @ pi.points[:, 0])
        assert stage.functional.value(mu) == pytest.approx(m1 * m1,
                                                           abs=1e-9)


def test_polynomial_stage_converges_on_smooth_kernel():
    mu = atoms([-1.1, -0.2, 0.8], [0.5, 0.7, 0.6])
    pi = mu.normalize()
    want = sum(w * np.tanh(x) for x, w in zip(pi.points[:, 0], pi.weights))
    errs = []
    for k in (2, 6, 14):
        stage = polynomial_stage(lambda p, z: np.tanh(p[..., 0]), r=1,
                                 degree=k, box_radius=2.0)
        errs.append(abs(stage.functional.value(mu) - want))
    assert errs[2] < errs[0]
    assert errs[2] < 5e-3


def test_polynomial_stage_rejects_bad_arguments():
    with pytest.raises(ValueError):
        polynomial_stage(lambda p, z: p[..., 0], r=4, degree=2,
                         box_radius=1.0)
    with pytest.raises(ValueError):
        polynomial_stage(lambda p, z: p[..., 0], r=1, degree=0,
                         box_radius=1.0)
    with pytest.raises(ValueError):
        polynomial_stage(lambda p, z: p[..., 0], r=1, degree=2,
                         box_radius=1.0, mass_range=(2.0, 1.0))
