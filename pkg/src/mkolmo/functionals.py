"""Functionals of measures and their derivative calculus.

The workhorse class is CylindricalFunctional: u(mu) = g(<mu, psi_1>, ...,
<mu, psi_n>) for an outer C^2 function g and C^2 test functions psi_k.
For this family every derivative used in the package has a closed form:

    flat   (mu, x)    = sum_k  dg_k  psi_k(x)             (linear functional derivative)
    flat2  (mu, x, y) = sum_kl d2g_kl psi_k(x) psi_l(y)
    lions  (mu, x)    = grad_x flat                        (L-derivative)
    lions2 (mu, x, y) = grad_x grad_y^T flat2
    x_lions(mu, x)    = grad_x lions       (d x d)
    x_flat2(mu, x, y) = grad_x flat2       (d,)

Derivatives are stored uncentered: no "integrates to zero" convention is
imposed, so flat(mu, .) of u(mu) = <mu, psi> is psi itself.

The module also provides finite-difference probes of each derivative
(central differences along measure segments and in space), the quadrature
check of the defining first-order expansion, algebraic rule helpers
(chain, product, composition with measure maps), and the named functional
registry used by the CLI.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Sequence

import numpy as np

from .measure import (
    ParticleMeasure,
    TestFunction,
    const_one,
    coordinate,
    gaussian_bump,
    squared_norm,
    tanh_coordinate,
)

__all__ = [
    "OuterFunction",
    "MeasureFunctional",
    "CylindricalFunctional",
    "identity_outer",
    "square_outer",
    "tanh_outer",
    "product_outer",
    "compose_scalar",
    "product_functional",
    "MeasureMap",
    "density_multiply_map",
    "push_forward_map",
    "compose_with_map",
    "FlatIdentityReport",
    "verify_flat_identity",
    "fd_flat",
    "fd_flat2",
    "fd_lions",
    "fd_x_lions",
    "sampled_c2l_distance",
    "FUNCTIONAL_REGISTRY",
    "make_functional",
]


# ---------------------------------------------------------------------------
# outer functions g: R^n -> R
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OuterFunction:
    """C^2 function of the integral vector, with gradient and Hessian."""

    n_args: int
    value: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    name: str = "g"
    sup: float = np.inf
    grad_sup: float = np.inf


def identity_outer() -> OuterFunction:
    return OuterFunction(1, lambda r: float(r[0]),
                         lambda r: np.ones(1),
                         lambda r: np.zeros((1, 1)),
                         name="id", grad_sup=1.0)


def square_outer() -> OuterFunction:
    return OuterFunction(1, lambda r: float(r[0]) ** 2,
                         lambda r: np.array([2.0 * r[0]]),
                         lambda r: np.array([[2.0]]),
                         name="square")


def tanh_outer() -> OuterFunction:
    return OuterFunction(1, lambda r: math.tanh(r[0]),
                         lambda r: np.array([1.0 / math.cosh(r[0]) ** 2]),
                         lambda r: np.array(
                             [[-2.0 * math.tanh(r[0]) / math.cosh(r[0]) ** 2]]),
                         name="tanh", sup=1.0, grad_sup=1.0)


def product_outer() -> OuterFunction:
    return OuterFunction(2, lambda r: float(r[0] * r[1]),
                         lambda r: np.array([r[1], r[0]]),
                         lambda r: np.array([[0.0, 1.0], [1.0, 0.0]]),
                         name="product")


def _composed_outer(h: OuterFunction, g: OuterFunction) -> OuterFunction:
    """h(g(r)) for scalar h (chain rule at the outer level)."""
    if h.n_args != 1:
        raise ValueError("outer composition needs a scalar outer function")

    def value(r):
        return h.value(np.array([g.value(r)]))

    def grad(r):
        s = np.array([g.value(r)])
        return float(h.grad(s)[0]) * g.grad(r)

    def hess(r):
        s = np.array([g.value(r)])
        gg = g.grad(r)
        return (float(h.hess(s)[0, 0]) * np.outer(gg, gg)
                + float(h.grad(s)[0]) * g.hess(r))

    return OuterFunction(g.n_args, value, grad, hess,
                         name=f"{h.name}({g.name})", sup=h.sup)


def _product_outer_pair(g: OuterFunction, f: OuterFunction) -> OuterFunction:
    """(r, s) |-> g(r) * f(s) on the concatenated argument vector."""
    n, m = g.n_args, f.n_args

    def value(r):
        return g.value(r[:n]) * f.value(r[n:])

    def grad(r):
        gv, fv = g.value(r[:n]), f.value(r[n:])
        return np.concatenate([fv * g.grad(r[:n]), gv * f.grad(r[n:])])

    def hess(r):
        gv, fv = g.value(r[:n]), f.value(r[n:])
        gg, ff = g.grad(r[:n]), f.grad(r[n:])
        out = np.zeros((n + m, n + m))
        out[:n, :n] = fv * g.hess(r[:n])
        out[n:, n:] = gv * f.hess(r[n:])
        out[:n, n:] = np.outer(gg, ff)
        out[n:, :n] = np.outer(ff, gg)
        return out

    return OuterFunction(n + m, value, grad, hess, name=f"{g.name}*{f.name}")


# ---------------------------------------------------------------------------
# functional interface
# ---------------------------------------------------------------------------


def _pts(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


class MeasureFunctional:
    """Interface: value plus the six derivative evaluators on point grids."""

    name = "functional"
    value_sup = np.inf
    flat_sup = np.inf

    def value(self, mu: ParticleMeasure) -> float:
        raise NotImplementedError

    def flat(self, mu, xs) -> np.ndarray:             # (m,)
        raise NotImplementedError

    def flat2(self, mu, xs, ys) -> np.ndarray:        # (m, k)
        raise NotImplementedError

    def lions(self, mu, xs) -> np.ndarray:            # (m, d)
        raise NotImplementedError

    def lions2(self, mu, xs, ys) -> np.ndarray:       # (m, k, d, d)
        raise NotImplementedError

    def x_lions(self, mu, xs) -> np.ndarray:          # (m, d, d)
        raise NotImplementedError

    def x_flat2(self, mu, xs, ys) -> np.ndarray:      # (m, k, d)
        raise NotImplementedError


class CylindricalFunctional(MeasureFunctional):
    def __init__(self, psis: Sequence[TestFunction], outer: OuterFunction,
                 name: str | None = None):
        psis = tuple(psis)
        if outer.n_args != len(psis):
            raise ValueError(
                f"outer takes {outer.n_args} arguments, got {len(psis)} "
                "test functions")
        self.psis = psis
        self.outer = outer
        self.name = name or f"{outer.name}({', '.join(p.name for p in psis)})"
        self.value_sup = outer.sup
        if math.isfinite(outer.grad_sup):
            psi_sup = max(p.sup for p in psis)
            self.flat_sup = outer.grad_sup * len(psis) * psi_sup
        else:
            self.flat_sup = np.inf

    # -- integral vector and outer-derivative coefficients ---------------

    def integral_vector(self, mu: ParticleMeasure) -> np.ndarray:
        return np.array([mu.integrate(p) for p in self.psis])

    def _coeffs(self, mu):
        m = self.integral_vector(mu)
        return self.outer.grad(m), self.outer.hess(m)

    def value(self, mu) -> float:
        return float(self.outer.value(self.integral_vector(mu)))

    # -- derivatives ------------------------------------------------------

    def flat(self, mu, xs):
        xs = _pts(xs)
        g1, _ = self._coeffs(mu)
        vals = np.stack([p.fn(xs) for p in self.psis])          # (n, m)
        return np.einsum("k,km->m", g1, vals)

    def flat2(self, mu, xs, ys):
        xs, ys = _pts(xs), _pts(ys)
        _, g2 = self._coeffs(mu)
        px = np.stack([p.fn(xs) for p in self.psis])            # (n, m)
        py = np.stack([p.fn(ys) for p in self.psis])            # (n, k)
        return np.einsum("kl,km,ln->mn", g2, px, py)

    def lions(self, mu, xs):
        xs = _pts(xs)
        g1, _ = self._coeffs(mu)
        grads = np.stack([p.grad(xs) for p in self.psis])       # (n, m, d)
        return np.einsum("k,kmd->md", g1, grads)

    def lions2(self, mu, xs, ys):
        xs, ys = _pts(xs), _pts(ys)
        _, g2 = self._coeffs(mu)
        gx = np.stack([p.grad(xs) for p in self.psis])          # (n, m, d)
        gy = np.stack([p.grad(ys) for p in self.psis])          # (n, k, d)
        return np.einsum("kl,kma,lnb->mnab", g2, gx, gy)

    def x_lions(self, mu, xs):
        xs = _pts(xs)
        g1, _ = self._coeffs(mu)
        hs = np.stack([p.hess(xs) for p in self.psis])          # (n, m, d, d)
        return np.einsum("k,kmab->mab", g1, hs)

    def x_flat2(self, mu, xs, ys):
        xs, ys = _pts(xs), _pts(ys)
        _, g2 = self._coeffs(mu)
        gx = np.stack([p.grad(xs) for p in self.psis])          # (n, m, d)
        py = np.stack([p.fn(ys) for p in self.psis])            # (n, k)
        return np.einsum("kl,kma,ln->mna", g2, gx, py)


# ---------------------------------------------------------------------------
# algebraic constructions
# ---------------------------------------------------------------------------


def compose_scalar(h: OuterFunction, u: CylindricalFunctional) -> CylindricalFunctional:
    """h(u(mu)); the flat derivative is h'(u(mu)) * flat_u by the chain rule."""
    return CylindricalFunctional(u.psis, _composed_outer(h, u.outer),
                                 name=f"{h.name}({u.name})")


def product_functional(u: CylindricalFunctional,
                       v: CylindricalFunctional) -> CylindricalFunctional:
    """u(mu) * v(mu); flat derivative is u flat_v + v flat_u."""
    return CylindricalFunctional(u.psis + v.psis,
                                 _product_outer_pair(u.outer, v.outer),
                                 name=f"({u.name})*({v.name})")


def _tf_times_density(psi: TestFunction, rho: TestFunction) -> TestFunction:
    def fn(x):
        return psi.fn(x) * rho.fn(x)

    def grad(x):
        return psi.grad(x) * rho.fn(x)[:, None] + rho.grad(x) * psi.fn(x)[:, None]

    def hess(x):
        pg, rg = psi.grad(x), rho.grad(x)
        cross = pg[:, :, None] * rg[:, None, :]
        return (psi.hess(x) * rho.fn(x)[:, None, None]
                + rho.hess(x) * psi.fn(x)[:, None, None]
                + cross + np.swapaxes(cross, 1, 2))

    return TestFunction(name=f"{psi.name}*{rho.name}", fn=fn, grad=grad, hess=hess)


@dataclass(frozen=True)
class MeasureMap:
    """A map m: measures -> measures with a single-atom derivative kernel.

    ``kernel_atoms(xs)`` returns (points, weights): the derivative of m at
    mu in the direction delta_x is weights[i] * delta_{points[i]} for each
    probe x = xs[i].  Both built-in maps (reweighting by a density and
    push-forward under a smooth map) are linear in mu, so the kernel does
    not depend on mu and the second kernel derivative vanishes.
    """

    name: str
    apply: Callable[[ParticleMeasure], ParticleMeasure]
    kernel_atoms: Callable[[np.ndarray], tuple]


def density_multiply_map(rho: TestFunction) -> MeasureMap:
    def kernel(xs):
        xs = _pts(xs)
        return xs.copy(), rho.fn(xs)

    return MeasureMap(name=f"density[{rho.name}]",
                      apply=lambda mu: mu.multiply_density(rho),
                      kernel_atoms=kernel)


def push_forward_map(f, name: str = "f") -> MeasureMap:
    def kernel(xs):
        xs = _pts(xs)
        return _pts(f(xs)), np.ones(xs.shape[0])

    return MeasureMap(name=f"push[{name}]",
                      apply=lambda mu: mu.map_points(f),
                      kernel_atoms=kernel)


def compose_with_map(u: CylindricalFunctional, mmap: MeasureMap,
                     rho: TestFunction | None = None,
                     push=None) -> CylindricalFunctional:
    """u(m(mu)) as a cylindrical functional (exact, for the built-in maps).

    For a density map pass ``rho``; for a push-forward pass ``push`` as a
    triple (f, jac, hess) with f:(n,d)->(n,d), jac:(n,d,d), hess:(n,d,d,d).
    """
    if (rho is None) == (push is None):
        raise ValueError("pass exactly one of rho / push")
    if rho is not None:
        new_psis = [_tf_times_density(p, rho) for p in u.psis]
    else:
        f, jac, hess_f = push

        def make(psi):
            def fn(x):
                return psi.fn(_pts(f(x)))

            def grad(x):
                J = jac(x)                                     # (n, d, d)
                return np.einsum("nij,ni->nj", J, psi.grad(_pts(f(x))))

            def hess(x):
                fx = _pts(f(x))
                J = jac(x)
                H = hess_f(x)                                  # (n, i, a, b)
                # J[n, i, a] = d f_i / d x_a
                term1 = np.einsum("nia,nij,njb->nab", J, psi.hess(fx), J)
                term2 = np.einsum("ni,niab->nab", psi.grad(fx), H)
                return term1 + term2

            return TestFunction(name=f"{psi.name}∘{mmap.name}", fn=fn,
                                grad=grad, hess=hess)

        new_psis = [make(p) for p in u.psis]
    return CylindricalFunctional(new_psis, u.outer,
                                 name=f"{u.name}∘{mmap.name}")


# ---------------------------------------------------------------------------
# first-order expansion check (Gauss-Legendre on the segment)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlatIdentityReport:
    lhs: float
    rhs: float
    n_nodes: int

    @property
    def gap(self) -> float:
        return abs(self.lhs - self.rhs)


def verify_flat_identity(u: MeasureFunctional, mu: ParticleMeasure,
                         nu: ParticleMeasure, n_nodes: int = 16) -> FlatIdentityReport:
    """Check u(nu) - u(mu) = int_0^1 <flat(t nu + (1-t) mu, .), nu - mu> dt."""
    nodes, weights = np.polynomial.legendre.leggauss(n_nodes)
    ts = 0.5 * (nodes + 1.0)
    ws = 0.5 * weights
    probe = np.vstack([nu.points, mu.points])
    signed_w = np.concatenate([nu.weights, -mu.weights])
    terms = []
    for t, w in zip(ts, ws):
        mid = mu.convex_combine(nu, float(t))
        vals = u.flat(mid, probe)
        terms.append(w * float(np.dot(signed_w, vals)))
    rhs = math.fsum(terms)
    lhs = u.value(nu) - u.value(mu)
    return FlatIdentityReport(lhs=lhs, rhs=rhs, n_nodes=n_nodes)


# ---------------------------------------------------------------------------
# finite-difference probes (central everywhere)
# ---------------------------------------------------------------------------


def _with_atom(mu: ParticleMeasure, x, eps: float) -> ParticleMeasure:
    x = _pts(x)
    return ParticleMeasure(np.vstack([mu.points, x]),
                           np.concatenate([mu.weights, [eps]]), signed=True)


def fd_flat(u, mu, x, eps: float = 1e-4) -> float:
    """(u(mu + eps delta_x) - u(mu - eps delta_x)) / (2 eps)."""
    return (u.value(_with_atom(mu, x, eps))
            - u.value(_with_atom(mu, x, -eps))) / (2.0 * eps)


def fd_flat2(u, mu, x, y, eps: float = 1e-4) -> float:
    """Centered second difference along delta_x and delta_y directions."""
    pp = u.value(_with_atom(_with_atom(mu, x, eps), y, eps))
    pm = u.value(_with_atom(_with_atom(mu, x, eps), y, -eps))
    mp = u.value(_with_atom(_with_atom(mu, x, -eps), y, eps))
    mm = u.value(_with_atom(_with_atom(mu, x, -eps), y, -eps))
    return (pp - pm - mp + mm) / (4.0 * eps * eps)


def _space_steps(x: np.ndarray, scale: float = 1e-4) -> np.ndarray:
    return scale * (1.0 + np.abs(x))


def fd_lions(u, mu, x) -> np.ndarray:
    """Central space-gradient of the flat derivative at x; (d,)."""
    x = _pts(x)[0]
    h = _space_steps(x)
    out = np.zeros(x.size)
    for i in range(x.size):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        out[i] = (u.flat(mu, xp[None, :])[0]
                  - u.flat(mu, xm[None, :])[0]) / (2.0 * h[i])
    return out


def fd_x_lions(u, mu, x) -> np.ndarray:
    """Central space-Hessian of the flat derivative at x; (d, d)."""
    x = _pts(x)[0]
    d = x.size
    h = _space_steps(x)
    out = np.zeros((d, d))
    f0 = u.flat(mu, x[None, :])[0]
    for i in range(d):
        xp, xm = x.copy(), x.copy()
        xp[i] += h[i]
        xm[i] -= h[i]
        out[i, i] = (u.flat(mu, xp[None, :])[0] - 2.0 * f0
                     + u.flat(mu, xm[None, :])[0]) / h[i] ** 2
        for j in range(i + 1, d):
            vals = []
            for si in (1.0, -1.0):
                for sj in (1.0, -1.0):
                    z = x.copy()
                    z[i] += si * h[i]
                    z[j] += sj * h[j]
                    vals.append(si * sj * u.flat(mu, z[None, :])[0])
            out[i, j] = out[j, i] = math.fsum(vals) / (4.0 * h[i] * h[j])
    return out


def sampled_c2l_distance(u: MeasureFunctional, v: MeasureFunctional,
                         measures: Sequence[ParticleMeasure],
                         xs: np.ndarray) -> float:
    """Sampled sup of |u - v| + |flat_u - flat_v| + |flat2_u - flat2_v|.

    A practical stand-in for the C^2-norm distance: the supremum is taken
    over the probe measures and probe points supplied by the caller.
    """
    xs = _pts(xs)
    worst = 0.0
    for mu in measures:
        gap0 = abs(u.value(mu) - v.value(mu))
        gap1 = float(np.max(np.abs(u.flat(mu, xs) - v.flat(mu, xs))))
        gap2 = float(np.max(np.abs(u.flat2(mu, xs, xs) - v.flat2(mu, xs, xs))))
        worst = max(worst, gap0 + gap1 + gap2)
    return worst


# ---------------------------------------------------------------------------
# named registry (CLI-facing)
# ---------------------------------------------------------------------------


FUNCTIONAL_REGISTRY: Dict[str, Callable[[], CylindricalFunctional]] = {
    # <mu, tanh(x_1)>
    "linear": lambda: CylindricalFunctional(
        (tanh_coordinate(0),), identity_outer(), name="linear"),
    # <mu, tanh(x_1)>^2
    "quadratic_of_linear": lambda: CylindricalFunctional(
        (tanh_coordinate(0),), square_outer(), name="quadratic_of_linear"),
    # tanh(<mu, x_1>)
    "tanh_of_first_moment": lambda: CylindricalFunctional(
        (coordinate(0),), tanh_outer(), name="tanh_of_first_moment"),
    # tanh(<mu, |x|^2>)
    "tanh_of_second_moment": lambda: CylindricalFunctional(
        (squared_norm(),), tanh_outer(), name="tanh_of_second_moment"),
    # <mu, 1> (total mass; the identity on the exponential of ks flows)
    "total_mass": lambda: CylindricalFunctional(
        (const_one(),), identity_outer(), name="total_mass"),
    # <mu, tanh(x_1)> * <mu, exp(-|x|^2)>
    "product_two_integrals": lambda: CylindricalFunctional(
        (tanh_coordinate(0), gaussian_bump()), product_outer(),
        name="product_two_integrals"),
}


def make_functional(name: str) -> CylindricalFunctional:
    try:
        factory = FUNCTIONAL_REGISTRY[name]
    except KeyError:
        known = ", ".join(sorted(FUNCTIONAL_REGISTRY))
        raise KeyError(f"unknown functional {name!r}; known: {known}") from None
    return factory()
