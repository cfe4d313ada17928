"""Approximation stages: cutoff, sampled empirical projection, Bernstein.

The pipeline reduces a functional of measures to something finite
dimensional in three steps, each of which returns an object with the same
evaluation/derivative interface as the input:

* ``cutoff_stage``   -- compose with multiplication by a C^2 plateau bump
  that is 1 on the centered box of radius N and 0 outside radius N + 1.
  Exact for measures supported in the inner box.
* ``empirical_stage``-- replace mu by a mass-rescaled empirical measure of
  n i.i.d. draws from mu normalized.  The object is a single seeded
  realization; averaging over seeds recovers the deterministic stage.
* ``polynomial_stage`` -- symmetric tensor-Bernstein approximation of a
  kernel phi(x_1..x_r, z) on box^r x [z_lo, z_hi], returning an exactly
  differentiable cylindrical functional of mu (d = 1, r <= 3).
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .functionals import CylindricalFunctional, MeasureFunctional, OuterFunction
from .measure import ParticleMeasure, TestFunction, const_one
from .rng import substream

__all__ = [
    "BUMP_GRAD_SUP",
    "BUMP_HESS_SUP",
    "bump_value",
    "bump_grad",
    "bump_hess",
    "bump_test_function",
    "CutoffFunctional",
    "EmpiricalFunctional",
    "ApproximationStage",
    "cutoff_stage",
    "empirical_stage",
    "polynomial_stage",
]

# Exact extrema of the quintic plateau profile per coordinate:
# max |q'| = 15/8 at the shell midpoint, max |q''| = 10/sqrt(3).
BUMP_GRAD_SUP = 15.0 / 8.0
BUMP_HESS_SUP = 10.0 / math.sqrt(3.0)


def _smoothstep(s):
    """C^2 quintic 0 -> 1 ramp on [0, 1]."""
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def _smoothstep_d1(s):
    inside = (s > 0.0) & (s < 1.0)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 30.0 * s ** 2 * (s - 1.0) ** 2, 0.0)


def _smoothstep_d2(s):
    inside = (s > 0.0) & (s < 1.0)
    s = np.clip(s, 0.0, 1.0)
    return np.where(inside, 60.0 * s * (2.0 * s - 1.0) * (s - 1.0), 0.0)


def _coord_profile(x, N):
    """Per-coordinate plateau q(|x|) and its first two derivatives in x."""
    a = np.abs(x)
    s = a - N
    q = 1.0 - _smoothstep(s)
    sgn = np.sign(x)
    dq = -_smoothstep_d1(s) * sgn
    d2q = -_smoothstep_d2(s)          # sign^2 = 1 on the shell
    return q, dq, d2q


def bump_value(x: np.ndarray, N: float) -> np.ndarray:
    x = np.atleast_2d(x)
    q, _, _ = _coord_profile(x, N)
    return np.prod(q, axis=1)


def bump_grad(x: np.ndarray, N: float) -> np.ndarray:
    x = np.atleast_2d(x)
    q, dq, _ = _coord_profile(x, N)
    total = np.prod(q, axis=1)
    out = np.zeros_like(x)
    for j in range(x.shape[1]):
        rest = np.where(q[:, j] != 0.0, total / np.where(q[:, j] == 0, 1, q[:, j]),
                        np.prod(np.delete(q, j, axis=1), axis=1))
        out[:, j] = dq[:, j] * rest
    return out


def bump_hess(x: np.ndarray, N: float) -> np.ndarray:
    x = np.atleast_2d(x)
    n, d = x.shape
    q, dq, d2q = _coord_profile(x, N)
    out = np.zeros((n, d, d))
    for i in range(d):
        rest_i = np.prod(np.delete(q, i, axis=1), axis=1) if d > 1 else np.ones(n)
        out[:, i, i] = d2q[:, i] * rest_i
        for j in range(i + 1, d):
            if d > 1:
                keep = [k for k in range(d) if k not in (i, j)]
                rest_ij = np.prod(q[:, keep], axis=1) if keep else np.ones(n)
                out[:, i, j] = out[:, j, i] = dq[:, i] * dq[:, j] * rest_ij
    return out


def bump_test_function(N: float) -> TestFunction:
    return TestFunction(name=f"bump[{N:g}]",
                        fn=lambda x: bump_value(x, N),
                        grad=lambda x: bump_grad(x, N),
                        hess=lambda x: bump_hess(x, N),
                        sup=1.0, grad_sup=BUMP_GRAD_SUP,
                        hess_sup=BUMP_HESS_SUP)


# ---------------------------------------------------------------------------
# cutoff stage
# ---------------------------------------------------------------------------


def _pts(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


class CutoffFunctional(MeasureFunctional):
    """u(rho_N * mu) with all derivatives propagated through the bump."""

    def __init__(self, base: MeasureFunctional, N: float):
        if N <= 0:
            raise ValueError("cutoff radius must be positive")
        self.base = base
        self.N = float(N)
        self.name = f"cutoff[{N:g}]({base.name})"
        self.value_sup = base.value_sup
        self.flat_sup = base.flat_sup       # |rho_N(x) flat_u| <= |flat_u|

    def _cut(self, mu: ParticleMeasure) -> ParticleMeasure:
        return mu.multiply_density(lambda x: bump_value(x, self.N))

    def value(self, mu):
        return self.base.value(self._cut(mu))

    def flat(self, mu, xs):
        xs = _pts(xs)
        return bump_value(xs, self.N) * self.base.flat(self._cut(mu), xs)

    def flat2(self, mu, xs, ys):
        xs, ys = _pts(xs), _pts(ys)
        bx = bump_value(xs, self.N)
        by = bump_value(ys, self.N)
        return bx[:, None] * by[None, :] * self.base.flat2(self._cut(mu), xs, ys)

    def lions(self, mu, xs):
        xs = _pts(xs)
        cut = self._cut(mu)
        return (bump_grad(xs, self.N) * self.base.flat(cut, xs)[:, None]
                + bump_value(xs, self.N)[:, None] * self.base.lions(cut, xs))

    def x_lions(self, mu, xs):
        xs = _pts(xs)
        cut = self._cut(mu)
        b = bump_value(xs, self.N)
        gb = bump_grad(xs, self.N)
        hb = bump_hess(xs, self.N)
        fl = self.base.flat(cut, xs)
        li = self.base.lions(cut, xs)
        cross = gb[:, :, None] * li[:, None, :]
        return (hb * fl[:, None, None] + cross + np.swapaxes(cross, 1, 2)
                + b[:, None, None] * self.base.x_lions(cut, xs))

    def x_flat2(self, mu, xs, ys):
        xs, ys = _pts(xs), _pts(ys)
        cut = self._cut(mu)
        bx = bump_value(xs, self.N)
        by = bump_value(ys, self.N)
        gbx = bump_grad(xs, self.N)
        f2 = self.base.flat2(cut, xs, ys)
        return (gbx[:, None, :] * (by[None, :] * f2)[:, :, None]
                + (bx[:, None] * by[None, :])[:, :, None]
                * self.base.x_flat2(cut, xs, ys))

    def lions2(self, mu, xs, ys):
        xs, ys = _pts(xs), _pts(ys)
        cut = self._cut(mu)
        bx, by = bump_value(xs, self.N), bump_value(ys, self.N)
        gbx, gby = bump_grad(xs, self.N), bump_grad(ys, self.N)
        f2 = self.base.flat2(cut, xs, ys)                     # (m, k)
        dxf2 = self.base.x_flat2(cut, xs, ys)                 # (m, k, d)
        dyf2 = np.swapaxes(self.base.x_flat2(cut, ys, xs), 0, 1)  # (m, k, d)
        out = np.einsum("ma,kb,mk->mkab", gbx, gby, f2)
        out += np.einsum("ma,mkb,k->mkab", gbx, dyf2, by)
        out += np.einsum("mka,kb,m->mkab", dxf2, gby, bx)
        out += np.einsum("mk,mkab->mkab", bx[:, None] * by[None, :],
                         self.base.lions2(cut, xs, ys))
        return out


# ---------------------------------------------------------------------------
# empirical stage (seeded realization)
# ---------------------------------------------------------------------------


class EmpiricalFunctional(MeasureFunctional):
    """Mass-rescaled empirical projection of u onto n-atom measures.

    For a fixed seed the object is deterministic: draws are keyed by
    (seed, content hash of mu), so repeated evaluations at the same mu see
    the same sample.  Averaging value/flat/lions over seeds estimates the
    deterministic stage; second derivatives are not provided here.
    """

    def __init__(self, base: MeasureFunctional, n: int, seed: int):
        if n < 2:
            raise ValueError("empirical stage needs n >= 2 draws")
        self.base = base
        self.n = int(n)
        self.seed = int(seed)
        self.name = f"empirical[n={n},seed={seed}]({base.name})"

    def _draws(self, mu: ParticleMeasure) -> np.ndarray:
        mass = mu.total_mass()
        if mass <= 0.0:
            raise ValueError("empirical stage needs positive total mass")
        key = int(mu.content_hash()[:12], 16)
        rng = substream(self.seed, 101, key)
        idx = rng.choice(mu.n_atoms, size=self.n, p=mu.weights / mass)
        return mu.points[idx]

    def value(self, mu):
        mass = mu.total_mass()
        draws = self._draws(mu)
        hat = ParticleMeasure(draws, np.full(self.n, mass / self.n))
        return self.base.value(hat)

    def flat(self, mu, xs):
        xs = _pts(xs)
        mass = mu.total_mass()
        draws = self._draws(mu)
        w = mass / self.n
        hat = ParticleMeasure(draws, np.full(self.n, w))
        base_val = self.base.value(hat)
        # resampling term: replace the last draw by the probe atom
        out = np.empty(xs.shape[0])
        for i, x in enumerate(xs):
            repl = ParticleMeasure(np.vstack([draws[:-1], x[None, :]]),
                                   np.full(self.n, w))
            out[i] = (self.n / mass) * (self.base.value(repl) - base_val)
        # mass term: (1/n) sum_j flat_u(hat, X_j)
        out += np.mean(self.base.flat(hat, draws))
        return out

    def lions(self, mu, xs):
        xs = _pts(xs)
        mass = mu.total_mass()
        draws = self._draws(mu)
        w = mass / self.n
        out = np.empty((xs.shape[0], xs.shape[1]))
        for i, x in enumerate(xs):
            repl = ParticleMeasure(np.vstack([draws[:-1], x[None, :]]),
                                   np.full(self.n, w))
            out[i] = self.base.lions(repl, x[None, :])[0]
        return out


# ---------------------------------------------------------------------------
# Bernstein polynomial stage (d = 1, r <= 3)
# ---------------------------------------------------------------------------


def _bernstein_1d(j: int, k: int, t: np.ndarray) -> np.ndarray:
    return math.comb(k, j) * t ** j * (1.0 - t) ** (k - j)


def _bernstein_basis_testfn(j: int, k: int, N: float) -> TestFunction:
    """b_{j,k} composed with the affine chart t = (x + N) / (2N), d = 1."""
    scale = 1.0 / (2.0 * N)

    def tval(x):
        return (x[:, 0] + N) * scale

    def fn(x):
        return _bernstein_1d(j, k, tval(x))

    def d1(t):
        out = np.zeros_like(t)
        if k >= 1:
            if j >= 1:
                out += _bernstein_1d(j - 1, k - 1, t)
            if j <= k - 1:
                out -= _bernstein_1d(j, k - 1, t)
        return k * out

    def d2(t):
        out = np.zeros_like(t)
        if k >= 2:
            if j >= 2:
                out += _bernstein_1d(j - 2, k - 2, t)
            if 1 <= j <= k - 1:
                out -= 2.0 * _bernstein_1d(j - 1, k - 2, t)
            if j <= k - 2:
                out += _bernstein_1d(j, k - 2, t)
        return k * (k - 1) * out

    def grad(x):
        return (d1(tval(x)) * scale)[:, None]

    def hess(x):
        return (d2(tval(x)) * scale ** 2)[:, None, None]

    return TestFunction(name=f"b[{j}/{k}]", fn=fn, grad=grad, hess=hess)


class _BernsteinOuter(OuterFunction):
    """Outer function g(m0, m1..m_{k+1}) for the Bernstein stage.

    g(m) = m0^{-r} * sum_J C_J(m0) * prod_i m[1 + J_i], where C_J(z) is the
    Bernstein expansion of the kernel in the mass variable.  Gradient and
    Hessian are assembled term by term; r <= 3 keeps the bookkeeping flat.
    """

    def __init__(self, tuples: np.ndarray, coeff: np.ndarray, r: int,
                 k: int, q: int, z_lo: float, z_hi: float):
        self.tuples = tuples            # (n_t, r) indices into m[1:]
        self.coeff = coeff              # (n_t, q + 1) mass-node coefficients
        self.r = r
        self.k = k
        self.q = q
        self.z_lo = z_lo
        self.z_hi = z_hi
        n_args = k + 2
        super().__init__(n_args=n_args, value=self._value, grad=self._grad,
                         hess=self._hess, name=f"bernstein[k={k}]")

    # mass-basis values and derivatives at z
    def _mass_basis(self, z: float, order: int):
        s = (z - self.z_lo) / (self.z_hi - self.z_lo)
        sc = 1.0 / (self.z_hi - self.z_lo)
        t = np.array([s])
        b = np.array([_bernstein_1d(m, self.q, t)[0] for m in range(self.q + 1)])
        if order == 0:
            return (b,)
        db = np.zeros(self.q + 1)
        for m in range(self.q + 1):
            acc = 0.0
            if self.q >= 1:
                if m >= 1:
                    acc += _bernstein_1d(m - 1, self.q - 1, t)[0]
                if m <= self.q - 1:
                    acc -= _bernstein_1d(m, self.q - 1, t)[0]
            db[m] = self.q * acc * sc
        if order == 1:
            return b, db
        d2b = np.zeros(self.q + 1)
        for m in range(self.q + 1):
            acc = 0.0
            if self.q >= 2:
                if m >= 2:
                    acc += _bernstein_1d(m - 2, self.q - 2, t)[0]
                if 1 <= m <= self.q - 1:
                    acc -= 2.0 * _bernstein_1d(m - 1, self.q - 2, t)[0]
                if m <= self.q - 2:
                    acc += _bernstein_1d(m, self.q - 2, t)[0]
            d2b[m] = self.q * (self.q - 1) * acc * sc * sc
        return b, db, d2b

    def _tuple_products(self, P: np.ndarray):
        """T (n_t,), partial products per slot (n_t, r), pair products."""
        J = self.tuples
        vals = P[J]                                              # (n_t, r)
        if self.r == 1:
            T = vals[:, 0]
            part = np.ones_like(vals)
            pair = None
        elif self.r == 2:
            T = vals[:, 0] * vals[:, 1]
            part = vals[:, ::-1].copy()
            pair = np.ones((J.shape[0], 1))                      # slots (0,1)
        else:
            T = vals[:, 0] * vals[:, 1] * vals[:, 2]
            part = np.stack([vals[:, 1] * vals[:, 2],
                             vals[:, 0] * vals[:, 2],
                             vals[:, 0] * vals[:, 1]], axis=1)
            pair = np.stack([vals[:, 2], vals[:, 1], vals[:, 0]], axis=1)
            # pair[:, p] multiplies slot pairs (0,1), (0,2), (1,2)
        return T, part, pair

    def _value(self, m: np.ndarray) -> float:
        z = float(m[0])
        (b,) = self._mass_basis(z, 0)
        C = self.coeff @ b
        T, _, _ = self._tuple_products(np.asarray(m[1:], dtype=float))
        return float(np.dot(C, T)) / z ** self.r

    def _grad(self, m: np.ndarray) -> np.ndarray:
        z = float(m[0])
        b, db = self._mass_basis(z, 1)
        C = self.coeff @ b
        dC = self.coeff @ db
        P = np.asarray(m[1:], dtype=float)
        T, part, _ = self._tuple_products(P)
        zr = z ** self.r
        out = np.zeros(self.n_args)
        S = float(np.dot(C, T))
        out[0] = float(np.dot(dC, T)) / zr - self.r * S / (zr * z)
        for slot in range(self.r):
            np.add.at(out, 1 + self.tuples[:, slot], C * part[:, slot] / zr)
        return out

    def _hess(self, m: np.ndarray) -> np.ndarray:
        z = float(m[0])
        b, db, d2b = self._mass_basis(z, 2)
        C = self.coeff @ b
        dC = self.coeff @ db
        d2C = self.coeff @ d2b
        P = np.asarray(m[1:], dtype=float)
        T, part, pair = self._tuple_products(P)
        r, zr = self.r, z ** self.r
        n = self.n_args
        out = np.zeros((n, n))
        S = float(np.dot(C, T))
        dS = float(np.dot(dC, T))
        d2S = float(np.dot(d2C, T))
        # zz corner
        out[0, 0] = (d2S / zr - 2.0 * r * dS / (zr * z)
                     + r * (r + 1) * S / (zr * z * z))
        # z-m cross terms
        zm = np.zeros(n - 1)
        for slot in range(r):
            np.add.at(zm, self.tuples[:, slot],
                      dC * part[:, slot] / zr - r * C * part[:, slot] / (zr * z))
        out[0, 1:] = zm
        out[1:, 0] = zm
        # m-m block
        mm = np.zeros((n - 1, n - 1))
        if r >= 2:
            pair_slots = list(itertools.combinations(range(r), 2))
            for p, (i, j) in enumerate(pair_slots):
                contrib = C * pair[:, p] / zr
                a_idx = self.tuples[:, i]
                b_idx = self.tuples[:, j]
                np.add.at(mm, (a_idx, b_idx), contrib)
                np.add.at(mm, (b_idx, a_idx), contrib)
        out[1:, 1:] = mm
        return out


def polynomial_stage_functional(phi: Callable, r: int, degree: int,
                                box_radius: float,
                                mass_range: tuple = (0.5, 2.0),
                                degree_mass: Optional[int] = None,
                                name: str = "phi") -> CylindricalFunctional:
    """Symmetric Bernstein approximation of <pi^r, phi(., mass)>, d = 1.

    ``phi(points, z)`` must accept an (..., r) array of coordinates and a
    broadcastable mass argument.  The kernel is symmetrized over its point
    arguments before fitting, so the output does not depend on argument
    order.  Returns a cylindrical functional whose inner functions are the
    1-d Bernstein basis on [-box_radius, box_radius] plus the constant 1
    (which carries the total-mass dependence).
    """
    if r not in (1, 2, 3):
        raise ValueError("polynomial stage supports r in {1, 2, 3}")
    if degree < 1:
        raise ValueError("degree must be >= 1")
    k = int(degree)
    q = int(degree_mass) if degree_mass is not None else k
    N = float(box_radius)
    z_lo, z_hi = map(float, mass_range)
    if not 0.0 < z_lo < z_hi:
        raise ValueError("mass range must satisfy 0 < lo < hi")

    xs_nodes = -N + 2.0 * N * np.arange(k + 1) / k
    z_nodes = z_lo + (z_hi - z_lo) * np.arange(q + 1) / max(q, 1)
    tuples = np.array(list(itertools.product(range(k + 1), repeat=r)),
                      dtype=np.int64)
    # symmetrized kernel values at all node tuples x mass nodes
    pts = xs_nodes[tuples]                                   # (n_t, r)
    coeff = np.zeros((tuples.shape[0], q + 1))
    perms = list(itertools.permutations(range(r)))
    for mi, z in enumerate(z_nodes):
        acc = np.zeros(tuples.shape[0])
        for perm in perms:
            acc += np.asarray(phi(pts[:, list(perm)], z), dtype=float)
        coeff[:, mi] = acc / len(perms)

    psis = [const_one()] + [_bernstein_basis_testfn(j, k, N)
                            for j in range(k + 1)]
    outer = _BernsteinOuter(tuples, coeff, r, k, q, z_lo, z_hi)
    return CylindricalFunctional(psis, outer,
                                 name=f"bernstein[k={k},r={r}]({name})")


# ---------------------------------------------------------------------------
# stage wrapper
# ---------------------------------------------------------------------------


@dataclass
class ApproximationStage:
    tag: str
    params: dict
    functional: MeasureFunctional


def cutoff_stage(base: MeasureFunctional, N: float) -> ApproximationStage:
    return ApproximationStage("cutoff", {"N": float(N)},
                              CutoffFunctional(base, N))


def empirical_stage(base: MeasureFunctional, n: int, seed: int) -> ApproximationStage:
    return ApproximationStage("empirical", {"n": int(n), "seed": int(seed)},
                              EmpiricalFunctional(base, n, seed))


def polynomial_stage(phi: Callable, r: int, degree: int, box_radius: float,
                     mass_range: tuple = (0.5, 2.0),
                     degree_mass: Optional[int] = None,
                     name: str = "phi") -> ApproximationStage:
    fn = polynomial_stage_functional(phi, r, degree, box_radius, mass_range,
                                     degree_mass, name)
    return ApproximationStage("bernstein",
                              {"r": r, "degree": degree, "box_radius": box_radius,
                               "mass_range": tuple(mass_range)}, fn)
