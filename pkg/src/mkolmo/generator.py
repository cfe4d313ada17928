"""Second-order generators on measure space and pathwise balance checks.

For a functional u of a positive measure, the generator associated with
the unnormalized conditional dynamics is

    L u(mu) = mu(A flat-grad u) + 1/2 mu x mu( (h + B).(h + B) flat2 u ),

reported as six named pieces: drift, two diffusion traces, and three
quadratic observation terms.  The normalized dynamics replace h by its
centered version h - pi(h), which expands into the same six pieces plus
three centering corrections; ``apply_LKS`` computes the compact quadratic
form first and the nine-term expansion second, so the two can be compared
exactly.

``ito_residual_zakai`` / ``ito_residual_ks`` replay a recorded flow and
accumulate every addend of the corresponding balance law with strict
left-point (Ito) discretization: seven terms for the unnormalized
equation (six time integrals plus one observation-driven stochastic
integral) and eleven for the normalized one (nine time integrals plus
two innovation-driven stochastic integrals).  The residual is the
telescoped increment of u minus the sum of all addends.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional

import numpy as np

from .functionals import CylindricalFunctional, MeasureFunctional
from .measure import ParticleMeasure
from .models import FilteringModel
from .rng import WStream, substream
from .sde import KSFlow, NoisePath, ZakaiFlow, ks_view

__all__ = [
    "GeneratorEvaluation",
    "apply_L",
    "apply_LKS",
    "apply_L_cylindrical",
    "apply_LKS_cylindrical",
    "ZAKAI_TERM_NAMES",
    "KS_TERM_NAMES",
    "ItoResidualReport",
    "ito_residual_zakai",
    "ito_residual_ks",
    "ito_residual_time_dependent",
    "ito_residual_multi",
    "ito_residual_sample",
]


ZAKAI_TIME_TERMS = ("drift_f", "trace_sigma", "trace_sigma_bar",
                    "hh_flat2", "cross_h_sigmabar", "l2_sigma_bar")
KS_TIME_TERMS = ZAKAI_TIME_TERMS + ("center_hh_flat2", "center_flat2_h",
                                    "center_cross_sigmabar")
# canonical balance-law addends: 6 + 1 and 9 + 2
ZAKAI_TERM_NAMES = ZAKAI_TIME_TERMS + ("stoch_drive",)
KS_TERM_NAMES = KS_TIME_TERMS + ("stoch_drive", "stoch_center")

MASS_TOL = 1e-9


@dataclass(frozen=True)
class GeneratorEvaluation:
    """Named additive breakdown of a generator value at one measure.

    ``value`` is exactly the sum of the breakdown terms;
    ``compact_value``, when present, is the same quantity assembled from
    the unexpanded quadratic form and serves as an internal consistency
    check of the expansion.
    """
    terms: Dict[str, float]
    mu: ParticleMeasure
    compact_value: Optional[float] = None

    @property
    def value(self) -> float:
        return math.fsum(self.terms.values())


def _model_fields(model: FilteringModel, x: np.ndarray):
    f = model.f(x)
    h = model.h(x)
    sb = model.sigma_bar(x)
    s = model.sigma(x)
    a_sig = np.einsum("nij,nkj->nik", s, s)
    a_sbar = np.einsum("nij,nkj->nik", sb, sb)
    return f, h, sb, a_sig, a_sbar


def _first_order_terms(u, model, mu):
    x, w = mu.points, mu.weights
    f, h, sb, a_sig, a_sbar = _model_fields(model, x)
    li = u.lions(mu, x)
    xl = u.x_lions(mu, x)
    return {
        "drift_f": float(np.einsum("n,nd,nd->", w, f, li)),
        "trace_sigma": 0.5 * float(
            np.einsum("n,nij,nji->", w, a_sig, xl)),
        "trace_sigma_bar": 0.5 * float(
            np.einsum("n,nij,nji->", w, a_sbar, xl)),
    }


def apply_L(model: FilteringModel, u: MeasureFunctional,
            mu: ParticleMeasure) -> GeneratorEvaluation:
    """Generator of the unnormalized dynamics via the derivative interface."""
    x, w = mu.points, mu.weights
    _, h, sb, _, _ = _model_fields(model, x)
    terms = _first_order_terms(u, model, mu)
    f2 = u.flat2(mu, x, x)                    # (n, n)
    xf2 = u.x_flat2(mu, x, x)                 # (n, n, d)
    l2 = u.lions2(mu, x, x)                   # (n, n, d, d)
    terms["hh_flat2"] = 0.5 * float(
        np.einsum("m,n,mk,nk,mn->", w, w, h, h, f2))
    terms["cross_h_sigmabar"] = float(
        np.einsum("m,n,mdk,nk,mnd->", w, w, sb, h, xf2))
    terms["l2_sigma_bar"] = 0.5 * float(
        np.einsum("m,n,mak,nbk,mnab->", w, w, sb, sb, l2))
    # compact route: mu(A du) + 1/2 mu x mu((h+B).(h+B) d2u)
    first = math.fsum(v for k, v in terms.items()
                      if k in ("drift_f", "trace_sigma", "trace_sigma_bar"))
    quad = _quadratic_form(w, h, sb, f2, xf2, l2, center=None)
    return GeneratorEvaluation(terms=terms, mu=mu,
                               compact_value=first + 0.5 * quad)


def _quadratic_form(w, h, sb, f2, xf2, l2, center):
    """mu x mu of (k(x).k(y) flat2-type kernel), k = (h - center) + B."""
    hc = h if center is None else h - center[None, :]
    val = float(np.einsum("m,n,mk,nk,mn->", w, w, hc, hc, f2))
    val += 2.0 * float(np.einsum("m,n,mdk,nk,mnd->", w, w, sb, hc, xf2))
    val += float(np.einsum("m,n,mak,nbk,mnab->", w, w, sb, sb, l2))
    return val


def apply_LKS(model: FilteringModel, u: MeasureFunctional,
              pi: ParticleMeasure) -> GeneratorEvaluation:
    """Generator of the normalized dynamics at a probability measure.

    Computes the compact form with the centered observation kernel and
    independently the nine-term expansion; the two agree to rounding.
    """
    mass = pi.total_mass()
    if abs(mass - 1.0) > MASS_TOL:
        raise ValueError(f"apply_LKS needs a probability measure, "
                         f"mass = {mass!r}")
    x, w = pi.points, pi.weights
    _, h, sb, _, _ = _model_fields(model, x)
    pibar = np.einsum("n,nk->k", w, h)
    terms = _first_order_terms(u, model, pi)
    f2 = u.flat2(pi, x, x)
    xf2 = u.x_flat2(pi, x, x)
    l2 = u.lions2(pi, x, x)
    terms["hh_flat2"] = 0.5 * float(
        np.einsum("m,n,mk,nk,mn->", w, w, h, h, f2))
    terms["cross_h_sigmabar"] = float(
        np.einsum("m,n,mdk,nk,mnd->", w, w, sb, h, xf2))
    terms["l2_sigma_bar"] = 0.5 * float(
        np.einsum("m,n,mak,nbk,mnab->", w, w, sb, sb, l2))
    terms["center_hh_flat2"] = 0.5 * float(pibar @ pibar) * float(
        np.einsum("m,n,mn->", w, w, f2))
    terms["center_flat2_h"] = -float(
        np.einsum("m,n,mn,nk,k->", w, w, f2, h, pibar))
    terms["center_cross_sigmabar"] = -float(
        np.einsum("m,n,mdk,k,mnd->", w, w, sb, pibar, xf2))
    first = math.fsum(v for k, v in terms.items()
                      if k in ("drift_f", "trace_sigma", "trace_sigma_bar"))
    quad = _quadratic_form(w, h, sb, f2, xf2, l2, center=pibar)
    return GeneratorEvaluation(terms=terms, mu=pi,
                               compact_value=first + 0.5 * quad)


# ---------------------------------------------------------------------------
# factorized route for cylindrical functionals
# ---------------------------------------------------------------------------


def _psi_integrals(u: CylindricalFunctional, x: np.ndarray, w: np.ndarray,
                   fields):
    """Per-psi integrals against precomputed model fields at x."""
    f, h, sb, a_sig_m, a_sbar_m = fields
    K = len(u.psis)
    k_obs = h.shape[1]
    m_vec = np.empty(K)
    a_f = np.empty(K)
    a_sig = np.empty(K)
    a_sbar = np.empty(K)
    b = np.empty((K, k_obs))
    c = np.empty((K, k_obs))
    for k, tf in enumerate(u.psis):
        vals = tf(x)
        g = tf.grad(x)
        hs = tf.hess(x)
        m_vec[k] = w @ vals
        a_f[k] = np.einsum("n,nd,nd->", w, f, g)
        a_sig[k] = 0.5 * np.einsum("n,nij,nji->", w, a_sig_m, hs)
        a_sbar[k] = 0.5 * np.einsum("n,nij,nji->", w, a_sbar_m, hs)
        b[k] = np.einsum("n,nk,n->k", w, h, vals)
        c[k] = np.einsum("n,ndk,nd->k", w, sb, g)
    return m_vec, a_f, a_sig, a_sbar, b, c


def _cyl_integrals(u: CylindricalFunctional, model: FilteringModel,
                   x: np.ndarray, w: np.ndarray):
    """Per-psi integrals needed by the factorized generator.

    Returns m_vec (K,), a_f, a_sig, a_sbar (K,), b = <mu, h psi> (K, k),
    c = <mu, B psi> (K, k), plus mass and <mu, h>.
    """
    fields = _model_fields(model, x)
    m_vec, a_f, a_sig, a_sbar, b, c = _psi_integrals(u, x, w, fields)
    mass = float(np.sum(w))
    h_int = np.einsum("n,nk->k", w, fields[1])
    return m_vec, a_f, a_sig, a_sbar, b, c, mass, h_int


def _zakai_terms_from_integrals(u, m_vec, a_f, a_sig, a_sbar, b, c):
    g1 = u.outer.grad(m_vec)
    g2 = u.outer.hess(m_vec)
    return {
        "drift_f": float(g1 @ a_f),
        "trace_sigma": float(g1 @ a_sig),
        "trace_sigma_bar": float(g1 @ a_sbar),
        "hh_flat2": 0.5 * float(np.einsum("kl,kj,lj->", g2, b, b)),
        "cross_h_sigmabar": float(np.einsum("kl,kj,lj->", g2, c, b)),
        "l2_sigma_bar": 0.5 * float(np.einsum("kl,kj,lj->", g2, c, c)),
    }


def _ks_center_terms(u, m_vec, b, c, pibar):
    g2 = u.outer.hess(m_vec)
    return {
        "center_hh_flat2": 0.5 * float(pibar @ pibar) * float(
            np.einsum("kl,k,l->", g2, m_vec, m_vec)),
        "center_flat2_h": -float(
            np.einsum("kl,k,lj,j->", g2, m_vec, b, pibar)),
        "center_cross_sigmabar": -float(
            np.einsum("kl,kj,l,j->", g2, c, m_vec, pibar)),
    }


def apply_L_cylindrical(model: FilteringModel, u: CylindricalFunctional,
                        mu: ParticleMeasure) -> GeneratorEvaluation:
    """Factorized generator: only outer partials and psi integrals.

    Independent of the flat/Lions derivative code paths, which makes it
    the second leg of the dual-route consistency test.
    """
    ints = _cyl_integrals(u, model, mu.points, mu.weights)
    m_vec, a_f, a_sig, a_sbar, b, c = ints[:6]
    return GeneratorEvaluation(terms=_zakai_terms_from_integrals(
        u, m_vec, a_f, a_sig, a_sbar, b, c), mu=mu)


def apply_LKS_cylindrical(model: FilteringModel, u: CylindricalFunctional,
                          pi: ParticleMeasure) -> GeneratorEvaluation:
    mass = pi.total_mass()
    if abs(mass - 1.0) > MASS_TOL:
        raise ValueError(f"apply_LKS needs a probability measure, "
                         f"mass = {mass!r}")
    m_vec, a_f, a_sig, a_sbar, b, c, _, h_int = _cyl_integrals(
        u, model, pi.points, pi.weights)
    terms = _zakai_terms_from_integrals(u, m_vec, a_f, a_sig, a_sbar, b, c)
    terms.update(_ks_center_terms(u, m_vec, b, c, h_int))
    return GeneratorEvaluation(terms=terms, mu=pi)


# ---------------------------------------------------------------------------
# pathwise balance (discrete Ito accounting)
# ---------------------------------------------------------------------------


@dataclass
class ItoResidualReport:
    """Balance accounting for u along one recorded flow.

    ``lhs`` is the terminal value u at the end of the flow; the
    reconstruction is ``initial_value`` plus every named addend in
    ``terms``; ``term_abs`` accumulates the absolute per-step increments
    of each addend for scale diagnostics.
    """
    equation: str
    lhs: float
    initial_value: float
    terms: Dict[str, float]
    term_abs: Dict[str, float]
    dt: float

    @property
    def rhs(self) -> float:
        return self.initial_value + math.fsum(self.terms.values())

    @property
    def residual(self) -> float:
        return self.lhs - self.rhs


def _walk_flow(u: CylindricalFunctional, model: FilteringModel,
               flow: ZakaiFlow, equation: str,
               innovations: Optional[np.ndarray] = None,
               u_of_t: Optional[Callable] = None,
               dudt_of_t: Optional[Callable] = None) -> ItoResidualReport:
    if flow.traj_x is None:
        raise ValueError("flow must be recorded (record=True)")
    ks = equation == "ks"
    dt = flow.path.dt
    n_steps = flow.step_index
    time_dep = u_of_t is not None
    names = list(KS_TERM_NAMES if ks else ZAKAI_TERM_NAMES)
    if time_dep:
        names.append("partial_t")
    acc = {name: 0.0 for name in names}
    mag = {name: 0.0 for name in names}

    def functional_at(m):
        return u_of_t(m * dt) if time_dep else u

    def u_value(fn, m_vec):
        return float(fn.outer.value(m_vec))

    initial_value = None
    for m in range(n_steps + 1):
        fn = functional_at(m)
        x = flow.traj_x[m]
        w = flow.w0 * np.exp(flow.traj_lw[m])
        m_vec, a_f, a_sig, a_sbar, b, c, mass, h_int = _cyl_integrals(
            fn, model, x, w)
        if ks:
            m_vec, a_f, a_sig, a_sbar = (v / mass for v in
                                         (m_vec, a_f, a_sig, a_sbar))
            b, c, h_int = b / mass, c / mass, h_int / mass
        if m == 0:
            initial_value = u_value(fn, m_vec)
        if m == n_steps:
            lhs = u_value(fn, m_vec)
            break
        incr = _zakai_terms_from_integrals(fn, m_vec, a_f, a_sig, a_sbar,
                                           b, c)
        g1 = fn.outer.grad(m_vec)
        if ks:
            pibar = h_int
            incr.update(_ks_center_terms(fn, m_vec, b, c, pibar))
            d_drive = innovations[m]
            incr = {k: v * dt for k, v in incr.items()}
            incr["stoch_drive"] = float(g1 @ ((b + c) @ d_drive))
            incr["stoch_center"] = -float((g1 @ m_vec) * (pibar @ d_drive))
        else:
            incr = {k: v * dt for k, v in incr.items()}
            incr["stoch_drive"] = float(g1 @ ((b + c) @ flow.path.dy[m]))
        if time_dep:
            dfn = dudt_of_t(m * dt)
            m_vec_d = np.array([w @ tf(x) for tf in dfn.psis])
            if ks:
                m_vec_d = m_vec_d / mass
            incr["partial_t"] = float(dfn.outer.value(m_vec_d)) * dt
        for name, val in incr.items():
            acc[name] += val
            mag[name] += abs(val)
    return ItoResidualReport(equation=equation, lhs=lhs,
                             initial_value=initial_value, terms=acc,
                             term_abs=mag, dt=dt)


def ito_residual_zakai(model: FilteringModel, u: CylindricalFunctional,
                       flow: ZakaiFlow) -> ItoResidualReport:
    """Seven-addend balance of the unnormalized equation on a recorded flow."""
    return _walk_flow(u, model, flow, "zakai")


def ito_residual_ks(model: FilteringModel, u: CylindricalFunctional,
                    ks: KSFlow) -> ItoResidualReport:
    """Eleven-addend balance of the normalized equation on a recorded flow."""
    return _walk_flow(u, model, ks.flow, "ks", innovations=ks.innovations)


def ito_residual_time_dependent(model: FilteringModel,
                                u_of_t: Callable,
                                dudt_of_t: Callable,
                                flow: ZakaiFlow) -> ItoResidualReport:
    """Balance with an explicit time derivative term.

    ``u_of_t(t)`` and ``dudt_of_t(t)`` must return cylindrical
    functionals (the latter being the pointwise time derivative); a
    constant-in-time u reduces to ``ito_residual_zakai`` plus a zero
    ``partial_t`` entry.
    """
    return _walk_flow(None, model, flow, "zakai", u_of_t=u_of_t,
                      dudt_of_t=dudt_of_t)


def ito_residual_multi(model: FilteringModel, us, flow: ZakaiFlow,
                       equations=("zakai", "ks")):
    """Balance reports for several functionals on one recorded flow.

    One pass over the trajectory shares the model-field and psi-integral
    evaluations across functionals and equations, which keeps wide
    refinement studies affordable.  Returns {equation: [report per u]},
    with each report identical to the single-functional routine.
    """
    if flow.traj_x is None:
        raise ValueError("flow must be recorded (record=True)")
    for eq in equations:
        if eq not in ("zakai", "ks"):
            raise ValueError(f"unknown equation {eq!r}")
    want_ks = "ks" in equations
    innovations = ks_view(flow).innovations if want_ks else None
    dt = flow.path.dt
    n_steps = flow.step_index
    names_z = list(ZAKAI_TERM_NAMES)
    names_k = list(KS_TERM_NAMES)
    acc = {("zakai", i): {n: 0.0 for n in names_z} for i in range(len(us))}
    acc.update({("ks", i): {n: 0.0 for n in names_k} for i in range(len(us))})
    mag = {key: {n: 0.0 for n in d} for key, d in acc.items()}
    lhs = {}
    init = {}
    for m in range(n_steps + 1):
        x = flow.traj_x[m]
        w = flow.w0 * np.exp(flow.traj_lw[m])
        fields = _model_fields(model, x)
        mass = float(np.sum(w))
        h_int = np.einsum("n,nk->k", w, fields[1])
        last = m == n_steps
        for i, u in enumerate(us):
            m_vec, a_f, a_sig, a_sbar, b, c = _psi_integrals(u, x, w, fields)
            for eq in equations:
                if eq == "ks":
                    mv, af, asg, asb = (v / mass for v in
                                        (m_vec, a_f, a_sig, a_sbar))
                    bb, cc, pibar = b / mass, c / mass, h_int / mass
                else:
                    mv, af, asg, asb, bb, cc = (m_vec, a_f, a_sig, a_sbar,
                                                b, c)
                if m == 0:
                    init[(eq, i)] = float(u.outer.value(mv))
                if last:
                    lhs[(eq, i)] = float(u.outer.value(mv))
                    continue
                incr = _zakai_terms_from_integrals(u, mv, af, asg, asb,
                                                   bb, cc)
                g1 = u.outer.grad(mv)
                if eq == "ks":
                    incr.update(_ks_center_terms(u, mv, bb, cc, pibar))
                    d_drive = innovations[m]
                    incr = {k: v * dt for k, v in incr.items()}
                    incr["stoch_drive"] = float(g1 @ ((bb + cc) @ d_drive))
                    incr["stoch_center"] = -float(
                        (g1 @ mv) * (pibar @ d_drive))
                else:
                    incr = {k: v * dt for k, v in incr.items()}
                    incr["stoch_drive"] = float(
                        g1 @ ((bb + cc) @ flow.path.dy[m]))
                a, g = acc[(eq, i)], mag[(eq, i)]
                for name, val in incr.items():
                    a[name] += val
                    g[name] += abs(val)
    out = {}
    for eq in equations:
        out[eq] = [ItoResidualReport(equation=eq, lhs=lhs[(eq, i)],
                                     initial_value=init[(eq, i)],
                                     terms=acc[(eq, i)],
                                     term_abs=mag[(eq, i)], dt=dt)
                   for i in range(len(us))]
    return out


def ito_residual_sample(model: FilteringModel, u: CylindricalFunctional,
                        n_particles: int, dt: float, n_steps: int,
                        seed: int, replicas: int, equation: str = "zakai",
                        x0_mean: float = 0.0, x0_std: float = 1.0):
    """Balance reports over independent replicas (fresh Y, W, x0)."""
    if equation not in ("zakai", "ks"):
        raise ValueError("equation must be 'zakai' or 'ks'")
    reports = []
    for r in range(replicas):
        rng = substream(seed, 11, r)
        x0 = rng.standard_normal((n_particles, model.dim)) * x0_std + x0_mean
        path = NoisePath(dt=dt,
                         dy=math.sqrt(dt) * rng.standard_normal(
                             (n_steps, model.obs_dim)),
                         seed=int(substream(seed, 13, r).integers(2 ** 62)))
        mu = ParticleMeasure(x0, np.full(n_particles, 1.0 / n_particles))
        flow = ZakaiFlow(model, mu, path, flow_id=0).run()
        if equation == "ks":
            reports.append(ito_residual_ks(model, u, ks_view(flow)))
        else:
            reports.append(ito_residual_zakai(model, u, flow))
    return reports
