"""Monte Carlo realization of the backward representation formulas.

The value function u(mu, s) = E[Phi(rho_T)] of the unnormalized flow
started at mu at time s (and its normalized counterpart, which weighs
Phi of the unit-mass flow with the exponential change-of-measure factor)
is estimated by independent replicas of the particle scheme.  The flat
derivative of u is realized pathwise: the flow started at delta_x is
co-simulated on the same observation path and paired with the derivative
of Phi at the terminal ensemble, so no resimulation per probe point is
needed.  Everything a backward-equation check needs — the time
derivative by common-random-number central differences, the generator
term-by-term from derivative estimates integrated exactly over the atoms
of the input measure — is assembled from one family of coupled flows per
replica.

All estimators are deterministic functions of (config seed, replica
index), so replicas can be sharded across workers and reduced in index
order without changing a single bit of the output.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Dict, Optional, Sequence

import numpy as np

from .functionals import MeasureFunctional
from .measure import ParticleMeasure
from .models import FilteringModel
from .rng import substream
from .sde import NoisePath, run_flow, xi_path

__all__ = [
    "MCConfig",
    "KolmogorovEstimate",
    "PDEResidualReport",
    "MarkovReport",
    "solve_zakai_kolmogorov",
    "solve_ks_kolmogorov",
    "flat_derivative_u",
    "pde_residual",
    "markov_consistency",
]

MASS_TOL = 1e-9


@dataclass(frozen=True)
class MCConfig:
    """Replica/ensemble/step budget for the representation estimators."""
    replicas: int = 400
    particles: int = 2000
    dt: float = 1e-3
    seed: int = 0
    horizon: float = 1.0

    def steps_for(self, duration: float) -> int:
        n = int(round(duration / self.dt))
        if abs(n * self.dt - duration) > 1e-9 * max(1.0, abs(duration)):
            raise ValueError(f"duration {duration} is not a multiple of "
                             f"dt={self.dt}")
        return n


@dataclass
class KolmogorovEstimate:
    """MC estimate of the value function at one (measure, time) point."""
    value: float
    se: float
    mu: ParticleMeasure
    s: float
    replicas: int
    particles: int
    dt: float
    replica_values: np.ndarray = field(repr=False)
    xs: Optional[np.ndarray] = None
    derivative: Optional[np.ndarray] = None
    derivative_se: Optional[np.ndarray] = None
    replica_derivatives: Optional[np.ndarray] = None   # (replicas, probes)


def _mean_se(values: np.ndarray):
    n = len(values)
    mean = math.fsum(values) / n
    if n > 1:
        var = math.fsum((v - mean) ** 2 for v in values) / (n - 1)
        se = math.sqrt(var / n)
    else:
        se = float("inf")
    return mean, se


def _replica_indices(mc: MCConfig, replica_indices) -> Sequence[int]:
    return range(mc.replicas) if replica_indices is None else replica_indices


def _path_seed(mc: MCConfig, r: int) -> int:
    return int(substream(mc.seed, 40, r).integers(2 ** 62))


def _atom_ensemble(mu: ParticleMeasure, particles: int) -> ParticleMeasure:
    """Coincident-particle representation of the same measure.

    Atom i receives n_i >= 1 particles proportional to its weight share,
    each carrying weight w_i / n_i, so the represented measure is exactly
    mu while every atom's flow is ensemble-refined.
    """
    w = mu.weights
    counts = np.maximum(
        1, np.rint(particles * w / math.fsum(w)).astype(int))
    pts = np.repeat(mu.points, counts, axis=0)
    wts = np.repeat(w / counts, counts)
    return ParticleMeasure(pts, wts)


def _atom_counts(n_atoms: int, particles: int, weights: np.ndarray):
    return np.maximum(
        1, np.rint(particles * weights / math.fsum(weights)).astype(int))


def _validate_s(s: float, T: float):
    if not 0.0 <= s <= T + 1e-12:
        raise ValueError(f"s={s} outside [0, {T}]")


def solve_zakai_kolmogorov(model: FilteringModel, Phi: MeasureFunctional,
                           mu: ParticleMeasure, s: float, mc: MCConfig,
                           replica_indices=None) -> KolmogorovEstimate:
    """u(mu, s) = E[Phi(rho_T)] for the unnormalized flow started at mu."""
    T = mc.horizon
    _validate_s(s, T)
    idx = _replica_indices(mc, replica_indices)
    n_steps = mc.steps_for(T - s)
    if n_steps == 0:
        vals = np.full(len(idx), float(Phi.value(mu)))
        return KolmogorovEstimate(value=float(Phi.value(mu)), se=0.0, mu=mu, s=s,
                                  replicas=len(idx), particles=mc.particles,
                                  dt=mc.dt, replica_values=vals)
    ens = _atom_ensemble(mu, mc.particles)
    vals = np.empty(len(idx))
    for j, r in enumerate(idx):
        path = NoisePath.reference(mc.dt, n_steps, model.obs_dim,
                                   _path_seed(mc, r))
        fp = run_flow(model, ens.points, ens.weights, path.dy, mc.dt,
                      path.w_stream(0))
        vals[j] = float(Phi.value(ParticleMeasure(
            fp.final_points, fp.final_weights)))
    mean, se = _mean_se(vals)
    return KolmogorovEstimate(value=mean, se=se, mu=mu, s=s,
                              replicas=len(idx), particles=mc.particles,
                              dt=mc.dt, replica_values=vals)


def solve_ks_kolmogorov(model: FilteringModel, Phi: MeasureFunctional,
                        pi: ParticleMeasure, s: float, mc: MCConfig,
                        replica_indices=None) -> KolmogorovEstimate:
    """Normalized value function via the weighted unnormalized flow.

    Estimates E[Phi(rho_T / rho_T(1)) * xi_T] where xi is the exponential
    factor built from the normalized observation intensity; requires a
    probability input.
    """
    mass = pi.total_mass()
    if abs(mass - 1.0) > MASS_TOL:
        raise ValueError(f"solve_ks_kolmogorov needs a probability "
                         f"measure, mass = {mass!r}")
    T = mc.horizon
    _validate_s(s, T)
    idx = _replica_indices(mc, replica_indices)
    n_steps = mc.steps_for(T - s)
    if n_steps == 0:
        vals = np.full(len(idx), float(Phi.value(pi)))
        return KolmogorovEstimate(value=float(Phi.value(pi)), se=0.0, mu=pi, s=s,
                                  replicas=len(idx), particles=mc.particles,
                                  dt=mc.dt, replica_values=vals)
    ens = _atom_ensemble(pi, mc.particles)
    vals = np.empty(len(idx))
    for j, r in enumerate(idx):
        path = NoisePath.reference(mc.dt, n_steps, model.obs_dim,
                                   _path_seed(mc, r))
        fp = run_flow(model, ens.points, ens.weights, path.dy, mc.dt,
                      path.w_stream(0))
        xi = xi_path(fp.mass, fp.h_int, path.dy, mc.dt)
        terminal = ParticleMeasure(fp.final_points, fp.final_weights)
        vals[j] = float(Phi.value(terminal.normalize())) * xi[-1]
    mean, se = _mean_se(vals)
    return KolmogorovEstimate(value=mean, se=se, mu=pi, s=s,
                              replicas=len(idx), particles=mc.particles,
                              dt=mc.dt, replica_values=vals)


def flat_derivative_u(model: FilteringModel, Phi: MeasureFunctional,
                      mu: ParticleMeasure, s: float, xs, mc: MCConfig,
                      replica_indices=None) -> KolmogorovEstimate:
    """Pathwise flat derivative of the value function at points xs.

    Per replica, the main flow from mu and one unit-mass flow from each
    delta_x are driven by the same observation path; the derivative
    realization pairs the probe flow with the derivative of Phi at the
    terminal main ensemble.
    """
    T = mc.horizon
    _validate_s(s, T)
    xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
    if xs.shape[1] != model.dim:
        raise ValueError(f"probe points must have dimension {model.dim}")
    idx = _replica_indices(mc, replica_indices)
    n_steps = mc.steps_for(T - s)
    n_probe = xs.shape[0]
    if n_steps == 0:
        der = np.stack([Phi.flat(mu, xs)] * max(len(idx), 1))
        vals = np.full(len(idx), float(Phi.value(mu)))
        return KolmogorovEstimate(
            value=float(Phi.value(mu)), se=0.0, mu=mu, s=s, replicas=len(idx),
            particles=mc.particles, dt=mc.dt, replica_values=vals, xs=xs,
            derivative=der[0].copy(), derivative_se=np.zeros(n_probe),
            replica_derivatives=der)
    ens = _atom_ensemble(mu, mc.particles)
    n_z = max(1, mc.particles // max(1, n_probe))
    vals = np.empty(len(idx))
    der = np.empty((len(idx), n_probe))
    for j, r in enumerate(idx):
        path = NoisePath.reference(mc.dt, n_steps, model.obs_dim,
                                   _path_seed(mc, r))
        fp = run_flow(model, ens.points, ens.weights, path.dy, mc.dt,
                      path.w_stream(0))
        rho_T = ParticleMeasure(fp.final_points, fp.final_weights)
        vals[j] = float(Phi.value(rho_T))
        for p in range(n_probe):
            zp = run_flow(model, np.tile(xs[p], (n_z, 1)),
                          np.full(n_z, 1.0 / n_z), path.dy, mc.dt,
                          path.w_stream(1 + p))
            fv = Phi.flat(rho_T, zp.final_points)
            der[j, p] = float(zp.final_weights @ fv)
    mean, se = _mean_se(vals)
    d_mean = np.array([math.fsum(der[:, p]) / len(idx)
                       for p in range(n_probe)])
    if len(idx) > 1:
        d_se = der.std(axis=0, ddof=1) / math.sqrt(len(idx))
    else:
        d_se = np.full(n_probe, np.inf)
    return KolmogorovEstimate(value=mean, se=se, mu=mu, s=s,
                              replicas=len(idx), particles=mc.particles,
                              dt=mc.dt, replica_values=vals, xs=xs,
                              derivative=d_mean, derivative_se=d_se,
                              replica_derivatives=der)


# ---------------------------------------------------------------------------
# backward-equation residual
# ---------------------------------------------------------------------------

ZAKAI_L_TERMS = ("drift_f", "trace_sigma", "trace_sigma_bar",
                 "hh_flat2", "cross_h_sigmabar", "l2_sigma_bar")
KS_L_TERMS = ZAKAI_L_TERMS + ("center_hh_flat2", "center_flat2_h",
                              "center_cross_sigmabar")


@dataclass
class PDEResidualReport:
    """Per-replica accounting of d_s u + L u at one (measure, s) point."""
    equation: str
    s: float
    fd_step: float
    residual: float
    se: float
    ds_mean: float
    l_mean: float
    terms: Dict[str, float]
    replica_residuals: np.ndarray = field(repr=False)
    replica_ds: np.ndarray = field(repr=False)
    replica_l: np.ndarray = field(repr=False)
    replicas: int = 0
    particles: int = 0
    dt: float = 0.0

    @property
    def ci(self) -> float:
        return 3.0 * self.se

    @property
    def scale(self) -> float:
        return abs(self.ds_mean) + abs(self.l_mean)


def _window_testfns(model, Phi):
    """psi_k, (h psi_k) and (sigma_bar . grad psi_k) for every component.

    Snapshotting these three blocks along the finite-difference window
    gives, per step, the integrals that drive both the value and its
    observation-martingale coefficient.
    """
    def h_psi(p):
        return lambda x: model.h(x)[:, 0] * p.fn(x)

    def b_psi(p):
        return lambda x: np.einsum("ndk,nd->nk", model.sigma_bar(x),
                                   p.grad(x))[:, 0]

    psis = list(Phi.psis)
    return psis + [h_psi(p) for p in psis] + [b_psi(p) for p in psis]


def _stencil_flows(model, mu, counts, path, window, test_fns, stencil):
    """Run the 3-point spatial stencil of unit-mass flows at every atom.

    Flows of one atom share the W substream (and particle count), so the
    three stencil columns are driven by identical noise; atoms get
    independent substreams; everything shares the observation path.
    Returns S[i, o, t, :] (test-integral vectors at the window steps),
    plus per-flow mass and h-integral paths for the change-of-measure
    assembly.
    """
    A = mu.n_atoms
    F = len(test_fns)
    n_total = path.n_steps
    offsets = (-stencil, 0.0, stencil)
    S = np.empty((A, 3, len(window), F))
    mass_paths = np.empty((A, 3, n_total + 1))
    h_paths = np.empty((A, 3, n_total + 1))
    for i in range(A):
        n_i = int(counts[i])
        w_i = np.full(n_i, 1.0 / n_i)
        for o, off in enumerate(offsets):
            start = np.tile(mu.points[i], (n_i, 1)).astype(np.float64)
            start[:, 0] += off
            fp = run_flow(model, start, w_i, path.dy, path.dt,
                          path.w_stream(1 + i), snapshot_steps=window,
                          test_fns=test_fns)
            for t, step in enumerate(window):
                S[i, o, t] = fp.snapshots[step]
            mass_paths[i, o] = fp.mass
            h_paths[i, o] = fp.h_int
    return S, mass_paths, h_paths


def _model_scalars(model, points):
    """Pointwise 1-d model coefficients at the atom locations."""
    f = model.f(points)[:, 0]
    h = model.h(points)[:, 0]
    sig = model.sigma(points)[:, 0, 0]
    sbar = model.sigma_bar(points)[:, 0, 0]
    return f, h, sig, sbar


def pde_residual(model: FilteringModel, Phi, mu_or_pi: ParticleMeasure,
                 s: float, fd_step: Optional[float] = None,
                 mc: MCConfig = MCConfig(), equation: str = "zakai",
                 stencil: float = 0.05, eps_fd: float = 1e-3,
                 replica_indices=None) -> PDEResidualReport:
    """MC estimate of d_s u + L u, which the representation makes zero.

    The time derivative is a central difference in s realized on a common
    observation path (shorter horizons are prefixes of the longest one);
    the generator is assembled term by term from pathwise derivative
    realizations — exact flow pairings for the unnormalized equation, a
    measure-space finite difference of the 0-homogeneous extension for
    the normalized one — integrated over the atoms of the input measure
    by exact summation.  Requires a 1-d model and a cylindrical Phi.
    """
    if model.dim != 1 or model.obs_dim != 1:
        raise NotImplementedError("residual assembly implemented for "
                                  "1-d state and observation")
    if equation not in ("zakai", "ks"):
        raise ValueError("equation must be 'zakai' or 'ks'")
    mu = mu_or_pi
    if equation == "ks" and abs(mu.total_mass() - 1.0) > MASS_TOL:
        raise ValueError("normalized-equation residual needs a "
                         "probability measure")
    T = mc.horizon
    if fd_step is None:
        fd_step = 0.05 * T
    if not (0.0 < s - fd_step and s + fd_step < T + 1e-12):
        raise ValueError(f"s={s} with fd_step={fd_step} leaves [0, {T}]")
    n = mc.steps_for(T - s)
    dn = max(1, int(round(fd_step / mc.dt)))
    if n - dn < 1:
        raise ValueError("fd_step must leave at least one step before T")
    fd_step = dn * mc.dt
    n_total = n + dn
    window = tuple(range(n - dn, n + dn + 1))

    idx = _replica_indices(mc, replica_indices)
    A = mu.n_atoms
    w = mu.weights
    counts = _atom_counts(A, mc.particles, w)
    f_a, h_a, sig_a, sbar_a = _model_scalars(model, mu.points)
    pi_h = float(w @ h_a)  # used by the centered (normalized) terms
    tfns = _window_testfns(model, Phi)

    term_names = KS_L_TERMS if equation == "ks" else ZAKAI_L_TERMS
    R = len(idx)
    rep_terms = {name: np.empty(R) for name in term_names}
    rep_ds = np.empty(R)

    for j, r in enumerate(idx):
        path = NoisePath.reference(mc.dt, n_total, model.obs_dim,
                                   _path_seed(mc, r))
        S, mass_p, h_p = _stencil_flows(model, mu, counts, path, window,
                                        tfns, stencil)
        if equation == "zakai":
            _zakai_replica(Phi, w, S, dn, path, fd_step, stencil, f_a,
                           h_a, sig_a, sbar_a, rep_terms, rep_ds, j)
        else:
            _ks_replica(Phi, w, S, mass_p, h_p, path, n, dn, fd_step,
                        stencil, eps_fd, f_a, h_a, sig_a, sbar_a, pi_h,
                        rep_terms, rep_ds, j)

    rep_l = np.sum([rep_terms[name] for name in term_names], axis=0)
    rep_res = rep_ds + rep_l
    res_mean, res_se = _mean_se(rep_res)
    ds_mean, _ = _mean_se(rep_ds)
    l_mean, _ = _mean_se(rep_l)
    return PDEResidualReport(
        equation=equation, s=s, fd_step=fd_step, residual=res_mean,
        se=res_se, ds_mean=ds_mean, l_mean=l_mean,
        terms={name: float(np.mean(rep_terms[name])) for name in term_names},
        replica_residuals=rep_res, replica_ds=rep_ds, replica_l=rep_l,
        replicas=R, particles=mc.particles, dt=mc.dt)


def _zakai_replica(Phi, w, S, dn, path, fd_step, stencil, f_a, h_a, sig_a,
                   sbar_a, rep_terms, rep_ds, j):
    """One replica of the unnormalized-equation residual.

    All derivative realizations are exact pairings of the probe flows
    with the derivatives of Phi at the terminal composite ensemble,
    using linearity of the flow: rho_T = sum_i w_i Z_T(x_i).  The time
    difference is de-noised by subtracting the realized observation
    martingale over the window (left-point coefficient times dY, exact
    zero mean under the reference measure).
    """
    K = len(Phi.psis)
    g = Phi.outer
    P = np.einsum("i,itq->tq", w, S[:, 1])      # combined paths (2dn+1, 3K)
    vec = P[:, :K]
    bc = P[:, K:2 * K] + P[:, 2 * K:]
    raw = (g.value(vec[0]) - g.value(vec[2 * dn])) / (2.0 * fd_step)
    n_lo = path.n_steps - 2 * dn                 # window start step
    dy_win = path.dy[n_lo:n_lo + 2 * dn, 0]
    coeff = np.array([g.grad(vec[t]) @ bc[t] for t in range(2 * dn)])
    rep_ds[j] = raw + float(coeff @ dy_win) / (2.0 * fd_step)

    m_mid = vec[dn]
    g1 = g.grad(m_mid)
    g2 = g.hess(m_mid)
    vec0 = S[:, 1, dn, :K]                  # (A, K) center flows
    d1 = (S[:, 2, dn, :K] - S[:, 0, dn, :K]) / (2.0 * stencil)
    d2 = (S[:, 2, dn, :K] - 2.0 * vec0 + S[:, 0, dn, :K]) / stencil ** 2
    flat_d1 = d1 @ g1                       # lions realization per atom
    flat_d2 = d2 @ g1
    q00 = vec0 @ g2 @ vec0.T                # flat2(x_i, x_j)
    q10 = d1 @ g2 @ vec0.T                  # d/dx_i flat2
    q11 = d1 @ g2 @ d1.T                    # d2/dx_i dx_j flat2
    rep_terms["drift_f"][j] = float(np.einsum("i,i,i->", w, f_a, flat_d1))
    rep_terms["trace_sigma"][j] = 0.5 * float(
        np.einsum("i,i,i->", w, sig_a ** 2, flat_d2))
    rep_terms["trace_sigma_bar"][j] = 0.5 * float(
        np.einsum("i,i,i->", w, sbar_a ** 2, flat_d2))
    rep_terms["hh_flat2"][j] = 0.5 * float(
        np.einsum("i,j,i,j,ij->", w, w, h_a, h_a, q00))
    rep_terms["cross_h_sigmabar"][j] = float(
        np.einsum("i,j,i,j,ij->", w, w, sbar_a, h_a, q10))
    rep_terms["l2_sigma_bar"][j] = 0.5 * float(
        np.einsum("i,j,i,j,ij->", w, w, sbar_a, sbar_a, q11))


def _ks_values(Phi, coef, V_at, mass_p, h_p, dy, dt, horizon):
    """Value of the homogeneous extension at a coefficient combination.

    coef has shape (..., A, 3): weights on the stencil flows.  The
    combined flow is the same linear combination of per-flow readings at
    every time, so its mass path, observation intensity, and terminal
    psi-integrals are all contractions of the stored per-flow paths.
    """
    mass = np.einsum("...io,iom->...m", coef, mass_p[..., :horizon + 1])
    h_int = np.einsum("...io,iom->...m", coef, h_p[..., :horizon + 1])
    pibar = h_int[..., :horizon] / mass[..., :horizon]
    logxi = np.einsum("...m,m->...", pibar, dy[:horizon, 0]) \
        - 0.5 * np.einsum("...m,...m->...", pibar, pibar) * dt
    vec = np.einsum("...io,iok->...k", coef, V_at)
    g_args = vec / mass[..., horizon, None]
    vals = np.apply_along_axis(Phi.outer.value, -1, g_args)
    return vals * np.exp(logxi)


def _ks_replica(Phi, w, S, mass_p, h_p, path, n, dn, fd_step, stencil,
                eps_fd, f_a, h_a, sig_a, sbar_a, pi_h, rep_terms, rep_ds, j):
    """One replica of the normalized-equation residual.

    Flat derivatives of the (0-homogeneous) extension are measure-space
    finite differences: adding eps of a probe flow to the base
    combination perturbs every stored path linearly, so each perturbed
    value costs one contraction, not one simulation.  The time
    difference subtracts the realized observation martingale of the
    weighted normalized value (left-point coefficient times dY).
    """
    A = len(w)
    K = len(Phi.psis)
    g = Phi.outer
    dy, dt = path.dy, path.dt
    dy1 = dy[:, 0]
    base = np.zeros((A, 3))
    base[:, 1] = w

    # base (= input measure) per-step readings over the whole run
    base_mass = np.einsum("i,im->m", w, mass_p[:, 1])
    base_h = np.einsum("i,im->m", w, h_p[:, 1])
    pibar = base_h[:-1] / base_mass[:-1]
    logxi = np.concatenate(
        [[0.0], np.cumsum(pibar * dy1 - 0.5 * pibar * pibar * dt)])
    P = np.einsum("i,itq->tq", w, S[:, 1])       # (2dn+1, 3K) window paths
    vecP = P[:, :K]
    bP = P[:, K:2 * K]
    cP = P[:, 2 * K:]

    def v_at(t):                                 # horizon step n - dn + t
        m = n - dn + t
        return g.value(vecP[t] / base_mass[m]) * math.exp(logxi[m])

    raw = (v_at(0) - v_at(2 * dn)) / (2.0 * fd_step)
    coeff = np.empty(2 * dn)
    for t in range(2 * dn):
        m = n - dn + t
        th = vecP[t] / base_mass[m]
        coeff[t] = math.exp(logxi[m]) * (
            g.grad(th) @ ((bP[t] + cP[t]) / base_mass[m] - th * pibar[m])
            + g.value(th) * pibar[m])
    cv = float(coeff @ dy1[n - dn:n + dn])
    rep_ds[j] = raw + cv / (2.0 * fd_step)

    V_mid = S[:, :, dn, :K]
    v0 = float(_ks_values(Phi, base, V_mid, mass_p, h_p, dy, dt, n))

    # single perturbations: coef[i, o] = base + eps at flow (i, o)
    singles = np.tile(base, (A, 3, 1, 1))
    for i in range(A):
        for o in range(3):
            singles[i, o, i, o] += eps_fd
    v1 = _ks_values(Phi, singles, V_mid, mass_p, h_p, dy, dt, n)
    flat = (v1 - v0) / eps_fd                    # (A, 3)

    # pair perturbations for the second flat derivative at (i,o),(k,q)
    pairs = np.tile(base, (A, 3, A, 3, 1, 1))
    for i in range(A):
        for o in range(3):
            pairs[i, o, :, :, i, o] += eps_fd
            for k in range(A):
                for q in range(3):
                    pairs[i, o, k, q, k, q] += eps_fd
    v2 = _ks_values(Phi, pairs, V_mid, mass_p, h_p, dy, dt, n)
    flat2 = (v2 - v1[:, :, None, None] - v1[None, None, :, :] + v0) \
        / eps_fd ** 2                            # (A, 3, A, 3)

    d1 = (flat[:, 2] - flat[:, 0]) / (2.0 * stencil)
    d2 = (flat[:, 2] - 2.0 * flat[:, 1] + flat[:, 0]) / stencil ** 2
    q00 = flat2[:, 1, :, 1]
    q10 = (flat2[:, 2, :, 1] - flat2[:, 0, :, 1]) / (2.0 * stencil)
    q11 = (flat2[:, 2, :, 2] - flat2[:, 2, :, 0]
           - flat2[:, 0, :, 2] + flat2[:, 0, :, 0]) / (4.0 * stencil ** 2)

    rep_terms["drift_f"][j] = float(np.einsum("i,i,i->", w, f_a, d1))
    rep_terms["trace_sigma"][j] = 0.5 * float(
        np.einsum("i,i,i->", w, sig_a ** 2, d2))
    rep_terms["trace_sigma_bar"][j] = 0.5 * float(
        np.einsum("i,i,i->", w, sbar_a ** 2, d2))
    rep_terms["hh_flat2"][j] = 0.5 * float(
        np.einsum("i,j,i,j,ij->", w, w, h_a, h_a, q00))
    rep_terms["cross_h_sigmabar"][j] = float(
        np.einsum("i,j,i,j,ij->", w, w, sbar_a, h_a, q10))
    rep_terms["l2_sigma_bar"][j] = 0.5 * float(
        np.einsum("i,j,i,j,ij->", w, w, sbar_a, sbar_a, q11))
    rep_terms["center_hh_flat2"][j] = 0.5 * pi_h ** 2 * float(
        np.einsum("i,j,ij->", w, w, q00))
    rep_terms["center_flat2_h"][j] = -pi_h * float(
        np.einsum("i,j,j,ij->", w, w, h_a, q00))
    rep_terms["center_cross_sigmabar"][j] = -pi_h * float(
        np.einsum("i,j,i,ij->", w, w, sbar_a, q10))


# ---------------------------------------------------------------------------
# Markov / tower-property consistency
# ---------------------------------------------------------------------------


@dataclass
class MarkovReport:
    direct: float
    direct_se: float
    nested: float
    nested_se: float
    s: float
    h_step: float

    @property
    def difference(self) -> float:
        return self.nested - self.direct

    @property
    def ci(self) -> float:
        return 3.0 * math.hypot(self.direct_se, self.nested_se)


def markov_consistency(model: FilteringModel, Phi: MeasureFunctional,
                       mu: ParticleMeasure, s: float, h_step: float,
                       mc: MCConfig, inner_replicas: int = 16
                       ) -> MarkovReport:
    """Tower-property check: advance to s + h, then estimate from there.

    Outer replicas simulate the flow over [s, s+h]; each frozen ensemble
    seeds an independent inner estimate of the value function at
    s + h.  The nested average must agree with the direct estimate at
    (mu, s) up to MC noise.
    """
    T = mc.horizon
    _validate_s(s, T)
    if s + h_step > T + 1e-12:
        raise ValueError(f"s + h_step = {s + h_step} exceeds horizon {T}")
    direct = solve_zakai_kolmogorov(model, Phi, mu, s, mc)
    n_h = mc.steps_for(h_step)
    ens = _atom_ensemble(mu, mc.particles)
    outer_vals = np.empty(mc.replicas)
    for r in range(mc.replicas):
        rng = substream(mc.seed, 41, r)
        if n_h == 0:
            frozen = mu
        else:
            path = NoisePath.reference(mc.dt, n_h, model.obs_dim,
                                       int(rng.integers(2 ** 62)))
            fp = run_flow(model, ens.points, ens.weights, path.dy, mc.dt,
                          path.w_stream(0))
            frozen = ParticleMeasure(fp.final_points, fp.final_weights)
        inner_mc = replace(mc, replicas=inner_replicas,
                           seed=int(rng.integers(2 ** 62)))
        inner = solve_zakai_kolmogorov(model, Phi, frozen, s + h_step,
                                       inner_mc)
        outer_vals[r] = inner.value
    nested, nested_se = _mean_se(outer_vals)
    return MarkovReport(direct=direct.value, direct_se=direct.se,
                        nested=nested, nested_se=nested_se, s=s,
                        h_step=h_step)
