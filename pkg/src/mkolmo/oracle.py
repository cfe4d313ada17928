"""Independent reference solvers: grid PDEs, Kalman-Bucy, quadrature.

Nothing in this module touches the particle code paths; it exists so the
ensemble results can be checked against a different discretization of
the same dynamics.

The conditional-density grid solver advances one observation step by
splitting:

  1. multiply by the likelihood factor exp(h dY - 1/2 h^2 dt),
  2. shift by the common observation-noise displacement sigma_bar dY
     (cubic semi-Lagrangian; the shift is spatially constant for the
     supported models, so interpolation conserves mass away from the
     boundary),
  3. advect/diffuse with velocity f - sigma_bar h and diffusivity
     1/2 sigma^2 in conservative flux form, substepped to satisfy the
     explicit stability bound.

Step 3 deliberately uses sigma^2 only: the sigma_bar^2 part of the
diffusion is carried by the random shift in step 2, and adding it again
would double count.  The unconditional forward solver
``fokker_planck_solve`` uses the full diffusivity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import solve_banded

from .models import FilteringModel

__all__ = [
    "Grid1D",
    "mollify_atoms",
    "zakai_grid_solve",
    "fokker_planck_solve",
    "backward_pde_solve",
    "kalman_bucy",
    "kalman_variance_closed_form",
    "dense_quadrature",
    "central_difference",
]

DIFFUSION_CFL = 0.45
ADVECTION_CFL = 0.5


@dataclass(frozen=True)
class Grid1D:
    """Uniform cell-centered grid on [-L, L]."""
    L: float
    dx: float
    xs: np.ndarray

    @classmethod
    def from_spec(cls, L: float = 8.0, dx: float = 0.01) -> "Grid1D":
        n = int(round(2 * L / dx))
        xs = -L + (np.arange(n) + 0.5) * dx
        return cls(L=L, dx=2 * L / n, xs=xs)

    @property
    def n(self) -> int:
        return self.xs.shape[0]

    def integrate(self, vals: np.ndarray,
                  fn: Optional[Callable] = None) -> float:
        if fn is None:
            return float(np.sum(vals) * self.dx)
        return float(np.sum(vals * fn(self.xs)) * self.dx)

    def mean_and_var(self, vals: np.ndarray):
        mass = self.integrate(vals)
        mean = self.integrate(vals, lambda x: x) / mass
        var = self.integrate(vals, lambda x: x * x) / mass - mean ** 2
        return mean, var


def mollify_atoms(grid: Grid1D, points: np.ndarray, weights: np.ndarray,
                  bandwidth: Optional[float] = None) -> np.ndarray:
    """Gaussian-mollified density of a weighted atom cloud.

    Each kernel column is renormalized on the grid so the discrete mass
    sum(vals) * dx equals the atom mass exactly.
    """
    if bandwidth is None:
        bandwidth = 3.0 * grid.dx
    pts = np.asarray(points, dtype=np.float64).reshape(-1)
    out = np.zeros(grid.n)
    for xi, wi in zip(pts, np.asarray(weights, dtype=np.float64)):
        col = np.exp(-0.5 * ((grid.xs - xi) / bandwidth) ** 2)
        s = col.sum() * grid.dx
        if s > 0:
            out += wi * col / s
    return out


def _lagrange4_shift(vals: np.ndarray, shift_cells: float) -> np.ndarray:
    """Sample vals at x - shift via cubic Lagrange; zero outside the grid."""
    n = vals.shape[0]
    k = math.floor(shift_cells)
    t = shift_cells - k
    w = np.array([t * (t + 1.0) * (t + 2.0) / 6.0,
                  (1.0 - t) * (t + 1.0) * (t + 2.0) / 2.0,
                  -t * (1.0 - t) * (t + 2.0) / 2.0,
                  t * (1.0 - t * t) / 6.0])
    out = np.zeros_like(vals)
    base = np.arange(n) - k
    for off, wt in zip((-1, 0, 1, 2), w):
        idx = base + off
        ok = (idx >= 0) & (idx < n)
        out[ok] += wt * vals[idx[ok]]
    return out


def _flux_substeps(vals: np.ndarray, vel: np.ndarray, diffusivity: float,
                   dt: float, dx: float) -> np.ndarray:
    """Conservative explicit advection-diffusion over one macro step.

    Central flux for advection, centered difference for diffusion,
    zero-flux boundaries.  Substepping keeps both explicit CFL numbers
    in range; mass is conserved to rounding because the update
    telescopes interface fluxes.
    """
    vmax = float(np.max(np.abs(vel))) if vel.size else 0.0
    n_sub = max(1, math.ceil(diffusivity * dt / (DIFFUSION_CFL * dx * dx)),
                math.ceil(vmax * dt / (ADVECTION_CFL * dx)))
    dts = dt / n_sub
    v_face = 0.5 * (vel[:-1] + vel[1:])
    rho = vals.copy()
    for _ in range(n_sub):
        adv = v_face * 0.5 * (rho[:-1] + rho[1:])
        dif = -diffusivity * (rho[1:] - rho[:-1]) / dx
        flux = adv + dif                       # interior interfaces
        rho[:-1] -= dts * flux / dx
        rho[1:] += dts * flux / dx
    return rho


def zakai_grid_solve(model: FilteringModel, grid: Grid1D,
                     rho0_vals: np.ndarray, dy: np.ndarray, dt: float,
                     snapshot_steps=()) -> dict:
    """Unnormalized conditional density along one observation path.

    Returns {"final": vals, "snapshots": {step: vals}, "mass": path}.
    ``mass[m]`` is the density mass before step m, matching the
    particle-side record convention.
    """
    if model.dim != 1 or model.obs_dim != 1:
        raise ValueError("grid solver supports 1-d models only")
    xs2 = grid.xs[:, None]
    h_vals = model.h(xs2)[:, 0]
    f_vals = model.f(xs2)[:, 0]
    sb = model.sigma_bar(xs2)[:, 0, 0]
    sig2 = model.sigma(xs2)[:, 0, 0] ** 2
    if np.ptp(sb) > 1e-12:
        raise ValueError("grid solver assumes spatially constant sigma_bar")
    sbar = float(sb[0])
    diffusivity = 0.5 * float(np.max(sig2))
    if np.ptp(sig2) > 1e-12:
        raise ValueError("grid solver assumes constant sigma")
    vel = f_vals - sbar * h_vals
    n_steps = dy.shape[0]
    dy1 = dy[:, 0] if dy.ndim == 2 else dy
    rho = np.array(rho0_vals, dtype=np.float64)
    snaps = {}
    snap_set = set(int(s) for s in snapshot_steps)
    mass = np.empty(n_steps + 1)
    if 0 in snap_set:
        snaps[0] = rho.copy()
    for m in range(n_steps):
        mass[m] = grid.integrate(rho)
        rho = rho * np.exp(h_vals * dy1[m] - 0.5 * h_vals ** 2 * dt)
        if sbar != 0.0:
            rho = _lagrange4_shift(rho, sbar * dy1[m] / grid.dx)
        rho = _flux_substeps(rho, vel, diffusivity, dt, grid.dx)
        if (m + 1) in snap_set:
            snaps[m + 1] = rho.copy()
    mass[n_steps] = grid.integrate(rho)
    return {"final": rho, "snapshots": snaps, "mass": mass}


def fokker_planck_solve(model: FilteringModel, grid: Grid1D,
                        rho0_vals: np.ndarray, T: float,
                        dt: float = 1e-3) -> np.ndarray:
    """Forward density evolution with the full diffusivity (no observation)."""
    xs2 = grid.xs[:, None]
    f_vals = model.f(xs2)[:, 0]
    sig2 = model.sigma(xs2)[:, 0, 0] ** 2
    sb2 = model.sigma_bar(xs2)[:, 0, 0] ** 2
    diffusivity = 0.5 * float(np.max(sig2 + sb2))
    if np.ptp(sig2 + sb2) > 1e-12:
        raise ValueError("grid solver assumes constant diffusion")
    n_steps = max(1, int(round(T / dt)))
    rho = np.array(rho0_vals, dtype=np.float64)
    for _ in range(n_steps):
        rho = _flux_substeps(rho, f_vals, diffusivity, T / n_steps, grid.dx)
    return rho


def backward_pde_solve(model: FilteringModel, grid: Grid1D,
                       terminal_vals: np.ndarray, T: float,
                       dt: float = 1e-3) -> np.ndarray:
    """Solve v_t + f v_x + 1/2 (sigma^2 + sigma_bar^2) v_xx = 0 back to 0.

    Crank-Nicolson in time, centered space, zero-gradient boundaries.
    Returns v(., 0); then E[psi(X_T) | X_0 = x] = v(x, 0).
    """
    xs2 = grid.xs[:, None]
    f_vals = model.f(xs2)[:, 0]
    sig2 = model.sigma(xs2)[:, 0, 0] ** 2
    sb2 = model.sigma_bar(xs2)[:, 0, 0] ** 2
    D = 0.5 * (sig2 + sb2)
    n = grid.n
    dx = grid.dx
    n_steps = max(1, int(round(T / dt)))
    tau = T / n_steps

    # spatial operator rows: A v = f v_x + D v_xx
    lower = D / dx ** 2 - f_vals / (2 * dx)
    diag = -2.0 * D / dx ** 2
    upper = D / dx ** 2 + f_vals / (2 * dx)
    # zero-gradient ghosts fold the off-domain neighbor into the diagonal
    diag_bc = diag.copy()
    diag_bc[0] += lower[0]
    diag_bc[-1] += upper[-1]

    ab = np.zeros((3, n))
    ab[0, 1:] = -0.5 * tau * upper[:-1]
    ab[1, :] = 1.0 - 0.5 * tau * diag_bc
    ab[2, :-1] = -0.5 * tau * lower[1:]

    v = np.array(terminal_vals, dtype=np.float64)
    for _ in range(n_steps):
        Av = np.empty(n)
        Av[1:-1] = lower[1:-1] * v[:-2] + diag[1:-1] * v[1:-1] \
            + upper[1:-1] * v[2:]
        Av[0] = diag_bc[0] * v[0] + upper[0] * v[1]
        Av[-1] = lower[-1] * v[-2] + diag_bc[-1] * v[-1]
        rhs = v + 0.5 * tau * Av
        v = solve_banded((1, 1), ab, rhs)
    return v


# ---------------------------------------------------------------------------
# Kalman-Bucy reference for the linear-Gaussian model
# ---------------------------------------------------------------------------


def kalman_bucy(a: float, b: float, c: float, m0: float, P0: float,
                dy: np.ndarray, dt: float):
    """Conditional mean/variance paths for dX = aX dt + b dW, dY = cX dt + dB.

    The variance Riccati equation dP = (2aP + b^2 - c^2 P^2) dt is
    deterministic and integrated with RK4; the mean uses the observation
    increments on their own grid.
    """
    dy1 = dy[:, 0] if np.ndim(dy) == 2 else np.asarray(dy)
    n = dy1.shape[0]
    m = np.empty(n + 1)
    P = np.empty(n + 1)
    m[0], P[0] = m0, P0

    def ric(p):
        return 2.0 * a * p + b * b - c * c * p * p

    for k in range(n):
        p = P[k]
        k1 = ric(p)
        k2 = ric(p + 0.5 * dt * k1)
        k3 = ric(p + 0.5 * dt * k2)
        k4 = ric(p + dt * k3)
        P[k + 1] = p + dt * (k1 + 2 * k2 + 2 * k3 + k4) / 6.0
        gain = P[k] * c
        m[k + 1] = m[k] + a * m[k] * dt + gain * (dy1[k] - c * m[k] * dt)
    return m, P


def kalman_variance_closed_form(P0: float, t: float) -> float:
    """P(t) for the degenerate case a = 0, b = 0, c = 1: P0 / (1 + P0 t)."""
    return P0 / (1.0 + P0 * t)


# ---------------------------------------------------------------------------
# quadrature and finite differences
# ---------------------------------------------------------------------------


def dense_quadrature(fn: Callable, lo: float, hi: float,
                     n: int = 20001) -> float:
    xs = np.linspace(lo, hi, n)
    return float(np.trapezoid(fn(xs), xs))


def central_difference(fn: Callable, x: float, eps: float = 1e-5,
                       richardson: bool = True) -> float:
    d1 = (fn(x + eps) - fn(x - eps)) / (2 * eps)
    if not richardson:
        return d1
    d2 = (fn(x + 0.5 * eps) - fn(x - 0.5 * eps)) / eps
    return (4.0 * d2 - d1) / 3.0
