"""Measure-space generators and pathwise balance accounting."""

import math

import numpy as np
import pytest

from mkolmo.functionals import (CylindricalFunctional, FUNCTIONAL_REGISTRY,
                                OuterFunction, make_functional)
from mkolmo.generator import (KS_TERM_NAMES, ZAKAI_TERM_NAMES, apply_L,
                              apply_L_cylindrical, apply_LKS,
                              apply_LKS_cylindrical, ito_residual_ks,
                              ito_residual_multi, ito_residual_sample,
                              ito_residual_time_dependent,
                              ito_residual_zakai)
from mkolmo.measure import ParticleMeasure, const_one
from mkolmo.models import make_model
from mkolmo.rng import substream
from mkolmo.sde import NoisePath, ZakaiFlow, ks_view

MODEL = make_model("ou_bounded", eps=0.3, h_scale=1.0)


def random_measure(seed, n=6, mass=None):
    rng = substream(seed)
    pts = rng.uniform(-1.5, 1.5, size=(n, 1))
    w = rng.uniform(0.2, 0.8, size=n)
    mu = ParticleMeasure(pts, w)
    return mu.normalize() if mass == 1 else mu


def small_flow(model=MODEL, n=20, steps=30, dt=2e-3, seed=99):
    rng = substream(seed)
    mu = ParticleMeasure(rng.standard_normal((n, 1)), np.full(n, 1.0 / n))
    path = NoisePath.reference(dt=dt, n_steps=steps, obs_dim=1, seed=seed)
    return ZakaiFlow(model, mu, path).run()


def test_term_name_inventory():
    assert len(ZAKAI_TERM_NAMES) == 7 and len(KS_TERM_NAMES) == 11
    assert ZAKAI_TERM_NAMES[-1] == "stoch_drive"
    assert set(ZAKAI_TERM_NAMES) < set(KS_TERM_NAMES)


@pytest.mark.parametrize("name", sorted(FUNCTIONAL_REGISTRY))
def test_derivative_and_factorized_routes_agree(name):
    u = make_functional(name)
    mu = random_measure(5)
    a = apply_L(MODEL, u, mu)
    b = apply_L_cylindrical(MODEL, u, mu)
    assert set(a.terms) == set(b.terms)
    for k in a.terms:
        assert a.terms[k] == pytest.approx(b.terms[k], abs=1e-10)
    assert a.value == pytest.approx(b.value, abs=1e-10)


@pytest.mark.parametrize("name", sorted(FUNCTIONAL_REGISTRY))
def test_normalized_routes_agree_at_probability(name):
    u = make_functional(name)
    pi = random_measure(7, mass=1)
    a = apply_LKS(MODEL, u, pi)
    b = apply_LKS_cylindrical(MODEL, u, pi)
    for k in a.terms:
        assert a.terms[k] == pytest.approx(b.terms[k], abs=1e-10)


def test_compact_quadratic_form_matches_expansion():
    mu = random_measure(11)
    pi = random_measure(13, mass=1)
    for name in ("quadratic_of_linear", "product_two_integrals"):
        u = make_functional(name)
        ev = apply_L(MODEL, u, mu)
        assert ev.compact_value == pytest.approx(ev.value, abs=1e-12)
        ev = apply_LKS(MODEL, u, pi)
        assert ev.compact_value == pytest.approx(ev.value, abs=1e-12)


def test_linear_functional_reduces_to_test_function_generator():
    # u(mu) = <mu, tanh(x1)> has no curvature in mu, so L u = mu(A tanh)
    u = make_functional("linear")
    mu = random_measure(17)
    ev = apply_L(MODEL, u, mu)
    psi = u.psis[0]
    want = float(np.sum(mu.weights * MODEL.apply_A(psi, mu.points)))
    assert ev.value == pytest.approx(want, abs=1e-12)
    for k in ("hh_flat2", "cross_h_sigmabar", "l2_sigma_bar"):
        assert ev.terms[k] == 0.0


def test_total_mass_is_harmonic_for_unnormalized_dynamics():
    ev = apply_L(MODEL, make_functional("total_mass"), random_measure(19))
    assert ev.value == 0.0
    assert all(v == 0.0 for v in ev.terms.values())


def test_observation_terms_vanish_without_observation():
    model0 = make_model("ou_bounded", eps=0.4, h_scale=0.0)
    u = make_functional("quadratic_of_linear")
    pi = random_measure(23, mass=1)
    ev = apply_LKS(model0, u, pi)
    for k in ("hh_flat2", "cross_h_sigmabar", "center_hh_flat2",
              "center_flat2_h", "center_cross_sigmabar"):
        assert ev.terms[k] == 0.0
    assert ev.terms["l2_sigma_bar"] != 0.0   # correlated noise survives


def test_apply_lks_rejects_unnormalized_input():
    mu = random_measure(29)                  # mass != 1
    with pytest.raises(ValueError):
        apply_LKS(MODEL, make_functional("linear"), mu)
    with pytest.raises(ValueError):
        apply_LKS_cylindrical(MODEL, make_functional("linear"), mu)


# -- pathwise balance ---------------------------------------------------------


def test_balance_reports_have_full_term_sets():
    flow = small_flow()
    u = make_functional("quadratic_of_linear")
    rep_z = ito_residual_zakai(MODEL, u, flow)
    rep_k = ito_residual_ks(MODEL, u, ks_view(flow))
    assert set(rep_z.terms) == set(ZAKAI_TERM_NAMES)
    assert set(rep_k.terms) == set(KS_TERM_NAMES)
    assert rep_z.lhs == pytest.approx(u.value(flow.measure()), rel=1e-12)
    assert rep_z.initial_value == pytest.approx(
        u.value(flow.measure_at(0)), rel=1e-12)
    assert rep_z.rhs == pytest.approx(
        rep_z.initial_value + math.fsum(rep_z.terms.values()))


def test_normalized_mass_balance_is_exact():
    # for u = total mass the two innovation addends cancel per step and
    # the normalized value never moves: the residual is exactly zero
    flow = small_flow(seed=101)
    rep = ito_residual_ks(MODEL, make_functional("total_mass"),
                          ks_view(flow))
    assert rep.lhs == rep.initial_value == 1.0
    assert abs(rep.residual) < 1e-13


def test_unnormalized_mass_balance_within_discretization_error():
    # lhs - init = mass drift; the only addend is the observation
    # integral; what remains is the exp-vs-Ito weight discretization gap
    flow = small_flow(seed=103)
    rep = ito_residual_zakai(MODEL, make_functional("total_mass"), flow)
    for k, v in rep.terms.items():
        if k != "stoch_drive":
            assert v == 0.0
    assert abs(rep.residual) < 0.02
    assert abs(rep.residual) < 0.05 * max(rep.term_abs["stoch_drive"], 1e-9)


def test_multi_matches_single_functional_routines():
    flow = small_flow(seed=107)
    us = [make_functional("quadratic_of_linear"),
          make_functional("tanh_of_second_moment")]
    out = ito_residual_multi(MODEL, us, flow)
    ks = ks_view(flow)
    for i, u in enumerate(us):
        single = ito_residual_zakai(MODEL, u, flow)
        multi = out["zakai"][i]
        assert multi.residual == pytest.approx(single.residual, abs=1e-14)
        for k in single.terms:
            assert multi.terms[k] == pytest.approx(single.terms[k],
                                                   abs=1e-14)
        single_k = ito_residual_ks(MODEL, u, ks)
        assert out["ks"][i].residual == pytest.approx(single_k.residual,
                                                      abs=1e-14)


def test_multi_validates_inputs():
    flow = small_flow(seed=109)
    with pytest.raises(ValueError):
        ito_residual_multi(MODEL, [make_functional("linear")], flow,
                           equations=("zakai", "rough"))
    bare = ZakaiFlow(MODEL, flow.measure_at(0), flow.path, record=False)
    with pytest.raises(ValueError):
        ito_residual_zakai(MODEL, make_functional("linear"), bare)


def test_time_dependent_balance_reduces_to_static():
    flow = small_flow(seed=113)
    u = make_functional("quadratic_of_linear")
    zero = CylindricalFunctional(
        (const_one(),),
        OuterFunction(1, lambda r: 0.0, lambda r: np.zeros(1),
                      lambda r: np.zeros((1, 1)), name="zero"),
        name="zero")
    rep_t = ito_residual_time_dependent(MODEL, lambda t: u,
                                        lambda t: zero, flow)
    rep = ito_residual_zakai(MODEL, u, flow)
    assert rep_t.terms["partial_t"] == 0.0
    assert rep_t.residual == pytest.approx(rep.residual, abs=1e-14)


def test_residual_shrinks_with_time_step():
    # mean |residual| scales like sqrt(dt) through the common observation
    # noise, so dt -> dt/4 should halve it.  The ensemble also carries a
    # dt-independent noise floor of order sqrt(T / n_particles); strong
    # observation coupling plus 400 particles keeps that floor an order
    # of magnitude below the dt part.
    model = make_model("ou_bounded", eps=0.3, h_scale=2.5, sigma=0.35)
    u = make_functional("tanh_of_second_moment")
    coarse = ito_residual_sample(model, u, n_particles=400, dt=4e-3,
                                 n_steps=25, seed=31, replicas=60)
    fine = ito_residual_sample(model, u, n_particles=400, dt=1e-3,
                               n_steps=100, seed=31, replicas=60)
    mc = np.mean([abs(r.residual) for r in coarse])
    mf = np.mean([abs(r.residual) for r in fine])
    assert mf < mc
    assert 1.4 < mc / mf < 2.9
    with pytest.raises(ValueError):
        ito_residual_sample(model, u, 8, 1e-3, 10, 1, 2, equation="bad")
