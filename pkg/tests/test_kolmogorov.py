"""Backward representation estimators and their independent references."""

import dataclasses
import math

import numpy as np
import pytest

from mkolmo.functionals import make_functional
from mkolmo.kolmogorov import (MCConfig, flat_derivative_u,
                               markov_consistency, pde_residual,
                               solve_ks_kolmogorov, solve_zakai_kolmogorov)
from mkolmo.measure import ParticleMeasure
from mkolmo.models import make_model
from mkolmo.oracle import Grid1D, backward_pde_solve


def atoms(points, weights):
    return ParticleMeasure(np.asarray(points, float).reshape(-1, 1),
                           np.asarray(weights, float))


MU = atoms([-0.9, 0.1, 0.8], [0.5, 0.9, 0.6])
PI = MU.normalize()


def test_mcconfig_step_accounting():
    mc = MCConfig(dt=1e-3, horizon=1.0)
    assert mc.steps_for(0.25) == 250
    assert mc.steps_for(0.0) == 0
    with pytest.raises(ValueError):
        mc.steps_for(0.2505)


def test_terminal_time_is_exact():
    model = make_model("ou_bounded")
    phi = make_functional("quadratic_of_linear")
    mc = MCConfig(replicas=6, particles=50, dt=1e-2, horizon=0.3, seed=1)
    est = solve_zakai_kolmogorov(model, phi, MU, 0.3, mc)
    assert est.value == phi.value(MU)
    assert est.se == 0.0
    est_ks = solve_ks_kolmogorov(model, phi, PI, 0.3, mc)
    assert est_ks.value == phi.value(PI)
    assert np.all(est_ks.replica_values == phi.value(PI))


def test_input_validation():
    model = make_model("ou_bounded")
    phi = make_functional("linear")
    mc = MCConfig(replicas=2, particles=10, dt=1e-2, horizon=0.1, seed=1)
    with pytest.raises(ValueError):
        solve_zakai_kolmogorov(model, phi, MU, 0.2, mc)   # s > horizon
    with pytest.raises(ValueError):
        solve_ks_kolmogorov(model, phi, MU, 0.0, mc)      # mass != 1
    with pytest.raises(ValueError):
        flat_derivative_u(model, phi, MU, 0.0, np.zeros((2, 3)), mc)


def test_change_of_measure_factor_is_centered():
    # Phi = total mass evaluates to 1 on the normalized flow, so the
    # estimate is exactly the mean of the exponential factor
    model = make_model("ou_bounded", h_scale=1.0)
    phi = make_functional("total_mass")
    mc = MCConfig(replicas=300, particles=32, dt=2e-3, horizon=0.1, seed=9)
    est = solve_ks_kolmogorov(model, phi, PI, 0.0, mc)
    assert abs(est.value - 1.0) <= 3 * est.se
    assert est.se < 0.05


def test_linear_value_matches_backward_grid_solution():
    # for Phi = <mu, tanh(x1)> the value function is the plain backward
    # expectation <mu, v(., s)> with the full signal diffusivity
    model = make_model("ou_bounded", eps=0.25, sigma=0.9)
    phi = make_functional("linear")
    mc = MCConfig(replicas=400, particles=200, dt=2e-3, horizon=0.25,
                  seed=11)
    est = solve_zakai_kolmogorov(model, phi, MU, 0.0, mc)
    grid = Grid1D.from_spec(L=8.0, dx=0.01)
    v0 = backward_pde_solve(model, grid, np.tanh(grid.xs), 0.25, dt=5e-4)
    want = sum(w * v0[np.argmin(np.abs(grid.xs - x))]
               for x, w in zip(MU.points[:, 0], MU.weights))
    assert abs(est.value - want) <= 3 * est.se + 2e-3
    assert est.se < 0.01


def test_flat_derivative_of_linear_value_is_measure_free():
    # linear Phi pairs the probe flow with a fixed test function, so the
    # derivative realization cannot depend on the starting measure at all
    model = make_model("ou_bounded", eps=0.25)
    phi = make_functional("linear")
    mc = MCConfig(replicas=40, particles=60, dt=2e-3, horizon=0.2, seed=13)
    xs = np.array([[-0.5], [0.4]])
    other = atoms([1.4, -1.2], [0.3, 2.0])
    d1 = flat_derivative_u(model, phi, MU, 0.0, xs, mc)
    d2 = flat_derivative_u(model, phi, other, 0.0, xs, mc)
    assert np.array_equal(d1.replica_derivatives, d2.replica_derivatives)
    # and it estimates v(x, s) from the backward equation
    grid = Grid1D.from_spec(L=8.0, dx=0.01)
    v0 = backward_pde_solve(model, grid, np.tanh(grid.xs), 0.2, dt=5e-4)
    for p in range(2):
        want = v0[np.argmin(np.abs(grid.xs - xs[p, 0]))]
        tol = 3 * d1.derivative_se[p] + 2e-3
        assert abs(d1.derivative[p] - want) <= tol


def test_flat_derivative_at_terminal_time_is_flat_phi():
    model = make_model("ou_bounded")
    phi = make_functional("quadratic_of_linear")
    mc = MCConfig(replicas=4, particles=20, dt=1e-2, horizon=0.3, seed=3)
    xs = np.array([[0.2], [-1.0]])
    est = flat_derivative_u(model, phi, MU, 0.3, xs, mc)
    assert np.allclose(est.derivative, phi.flat(MU, xs))
    assert np.all(est.derivative_se == 0.0)


def test_pde_residual_zero_within_mc_error():
    model = make_model("ou_bounded")
    phi = make_functional("tanh_of_first_moment")
    mc = MCConfig(replicas=60, particles=120, dt=2e-3, horizon=0.5,
                  seed=17)
    rep = pde_residual(model, phi, MU, 0.25, mc=mc)
    assert set(rep.terms) == {"drift_f", "trace_sigma", "trace_sigma_bar",
                              "hh_flat2", "cross_h_sigmabar",
                              "l2_sigma_bar"}
    assert rep.scale > 0.01            # the two halves are not degenerate
    assert abs(rep.residual) <= max(3 * rep.se, 0.05 * rep.scale)


def test_pde_residual_normalized_equation():
    model = make_model("ou_bounded")
    phi = make_functional("tanh_of_first_moment")
    mc = MCConfig(replicas=60, particles=120, dt=2e-3, horizon=0.5,
                  seed=19)
    rep = pde_residual(model, phi, PI, 0.25, mc=mc, equation="ks")
    assert len(rep.terms) == 9
    assert abs(rep.residual) <= max(3 * rep.se, 0.05 * rep.scale)


def test_pde_residual_validation():
    model = make_model("ou_bounded")
    phi = make_functional("tanh_of_first_moment")
    mc = MCConfig(replicas=2, particles=20, dt=2e-3, horizon=0.5, seed=1)
    with pytest.raises(ValueError):
        pde_residual(model, phi, MU, 0.25, mc=mc, equation="heat")
    with pytest.raises(ValueError):
        pde_residual(model, phi, MU, 0.49, fd_step=0.02, mc=mc)
    with pytest.raises(ValueError):
        pde_residual(model, phi, MU, 0.25, mc=mc, equation="ks")
    with pytest.raises(NotImplementedError):
        fake = dataclasses.replace(model, dim=2)
        pde_residual(fake, phi, MU, 0.25, mc=mc)


def test_replica_indices_shard_like_the_full_run():
    model = make_model("ou_bounded")
    phi = make_functional("quadratic_of_linear")
    mc = MCConfig(replicas=6, particles=40, dt=5e-3, horizon=0.1, seed=23)
    full = solve_zakai_kolmogorov(model, phi, MU, 0.0, mc)
    part = solve_zakai_kolmogorov(model, phi, MU, 0.0, mc,
                                  replica_indices=[2, 5])
    assert part.replica_values[0] == full.replica_values[2]
    assert part.replica_values[1] == full.replica_values[5]


def test_markov_tower_property():
    model = make_model("ou_bounded")
    phi = make_functional("quadratic_of_linear")
    mc = MCConfig(replicas=24, particles=64, dt=2.5e-3, horizon=0.1,
                  seed=29)
    rep = markov_consistency(model, phi, MU, 0.0, 0.05, mc,
                             inner_replicas=8)
    assert abs(rep.difference) <= rep.ci
    with pytest.raises(ValueError):
        markov_consistency(model, phi, MU, 0.0, 0.2, mc)
