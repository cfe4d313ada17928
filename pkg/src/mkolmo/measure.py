"""Atomic (weighted-particle) measures on R^d and smooth test functions.

A ParticleMeasure is a finite nonnegative combination of point masses,
sum_i w_i delta_{x_i}.  It is the single measure representation used
everywhere: initial conditions, filter snapshots, derivative-flow states.
Instances are immutable; all operations return new objects.

Mass-critical reductions (total mass, moments, pairings) go through
math.fsum so they do not depend on summation order or accumulate rounding.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "TestFunction",
    "ParticleMeasure",
    "product_integrate",
    "wasserstein",
    "const_one",
    "coordinate",
    "squared_norm",
    "tanh_coordinate",
    "gaussian_bump",
]

MAX_LP_ATOMS = 512


# ---------------------------------------------------------------------------
# test functions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TestFunction:
    """A C^2 scalar function with gradient, Hessian and sup-norm bounds.

    ``fn`` maps (n, d) -> (n,), ``grad`` maps (n, d) -> (n, d) and ``hess``
    maps (n, d) -> (n, d, d).  The bounds may be ``inf`` for unbounded
    functions (e.g. the coordinate map); where finite they must dominate
    every sampled evaluation.
    """

    name: str
    fn: Callable[[np.ndarray], np.ndarray]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    sup: float = np.inf
    grad_sup: float = np.inf
    hess_sup: float = np.inf

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.fn(np.atleast_2d(x))


def _as_points(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x


def const_one() -> TestFunction:
    return TestFunction(
        name="one",
        fn=lambda x: np.ones(x.shape[0]),
        grad=lambda x: np.zeros_like(x),
        hess=lambda x: np.zeros((x.shape[0], x.shape[1], x.shape[1])),
        sup=1.0, grad_sup=0.0, hess_sup=0.0,
    )


def coordinate(i: int = 0) -> TestFunction:
    def fn(x):
        return x[:, i].copy()

    def grad(x):
        g = np.zeros_like(x)
        g[:, i] = 1.0
        return g

    def hess(x):
        return np.zeros((x.shape[0], x.shape[1], x.shape[1]))

    return TestFunction(name=f"x_{i + 1}", fn=fn, grad=grad, hess=hess,
                        sup=np.inf, grad_sup=1.0, hess_sup=0.0)


def squared_norm() -> TestFunction:
    def fn(x):
        return np.sum(x * x, axis=1)

    def grad(x):
        return 2.0 * x

    def hess(x):
        d = x.shape[1]
        return np.broadcast_to(2.0 * np.eye(d), (x.shape[0], d, d)).copy()

    return TestFunction(name="|x|^2", fn=fn, grad=grad, hess=hess,
                        sup=np.inf, grad_sup=np.inf, hess_sup=2.0)


def tanh_coordinate(i: int = 0, scale: float = 1.0) -> TestFunction:
    """tanh(scale * x_i): bounded with bounded derivatives."""

    def fn(x):
        return np.tanh(scale * x[:, i])

    def grad(x):
        g = np.zeros_like(x)
        g[:, i] = scale / np.cosh(scale * x[:, i]) ** 2
        return g

    def hess(x):
        d = x.shape[1]
        out = np.zeros((x.shape[0], d, d))
        t = np.tanh(scale * x[:, i])
        out[:, i, i] = -2.0 * scale ** 2 * t * (1.0 - t * t)
        return out

    # max |d^2/dt^2 tanh| = 4/(3*sqrt(3)) at tanh(t) = 1/sqrt(3)
    return TestFunction(name=f"tanh({scale:g}*x_{i + 1})", fn=fn, grad=grad,
                        hess=hess, sup=1.0, grad_sup=abs(scale),
                        hess_sup=scale ** 2 * 4.0 / (3.0 * math.sqrt(3.0)))


def gaussian_bump() -> TestFunction:
    """exp(-|x|^2)."""

    def fn(x):
        return np.exp(-np.sum(x * x, axis=1))

    def grad(x):
        return -2.0 * x * fn(x)[:, None]

    def hess(x):
        d = x.shape[1]
        v = fn(x)
        eye = np.eye(d)
        outer = 4.0 * x[:, :, None] * x[:, None, :]
        return (outer - 2.0 * eye[None, :, :]) * v[:, None, None]

    return TestFunction(name="exp(-|x|^2)", fn=fn, grad=grad, hess=hess,
                        sup=1.0, grad_sup=math.sqrt(2.0 / math.e),
                        hess_sup=2.0)


# ---------------------------------------------------------------------------
# particle measures
# ---------------------------------------------------------------------------


class ParticleMeasure:
    """Immutable atomic measure sum_i w_i delta_{x_i} with w_i >= 0."""

    __slots__ = ("points", "weights", "signed")

    def __init__(self, points, weights, *, signed: bool = False):
        pts = _as_points(np.array(points, dtype=np.float64, copy=True))
        w = np.array(weights, dtype=np.float64, copy=True).reshape(-1)
        if pts.shape[0] != w.shape[0]:
            raise ValueError(
                f"{pts.shape[0]} atoms but {w.shape[0]} weights")
        if not signed and w.size and float(np.min(w)) < 0.0:
            raise ValueError("negative atom weight in an unsigned measure")
        if not np.all(np.isfinite(pts)) or not np.all(np.isfinite(w)):
            raise ValueError("non-finite atom data")
        pts.setflags(write=False)
        w.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "signed", bool(signed))

    def __setattr__(self, *a):  # immutability
        raise AttributeError("ParticleMeasure is immutable")

    # -- basic queries ------------------------------------------------

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def n_atoms(self) -> int:
        return self.points.shape[0]

    def total_mass(self) -> float:
        return math.fsum(self.weights.tolist())

    def integrate(self, fn) -> float:
        """<mu, fn> for a TestFunction or any vectorized callable."""
        f = fn.fn if isinstance(fn, TestFunction) else fn
        vals = np.asarray(f(self.points), dtype=np.float64).reshape(-1)
        return math.fsum((self.weights * vals).tolist())

    def integrate_vector(self, fn) -> np.ndarray:
        """<mu, fn> componentwise for an (n, d)->(n, k) callable."""
        vals = np.asarray(fn(self.points), dtype=np.float64)
        if vals.ndim == 1:
            vals = vals[:, None]
        return np.array([math.fsum((self.weights * vals[:, j]).tolist())
                         for j in range(vals.shape[1])])

    def mean_vector(self) -> np.ndarray:
        m = self.total_mass()
        if m <= 0.0:
            raise ValueError("mean of a measure without positive mass")
        return self.integrate_vector(lambda x: x) / m

    def second_moment(self) -> float:
        return self.integrate(lambda x: np.sum(x * x, axis=1))

    def support_radius(self) -> float:
        """max-norm radius of the atom support (0 for the empty measure)."""
        if self.n_atoms == 0:
            return 0.0
        return float(np.max(np.abs(self.points)))

    # -- constructions -------------------------------------------------

    def normalize(self) -> "ParticleMeasure":
        m = self.total_mass()
        if not m > 0.0:
            raise ValueError(f"cannot normalize measure with mass {m}")
        return ParticleMeasure(self.points, self.weights / m)

    def scaled(self, c: float) -> "ParticleMeasure":
        if c < 0.0:
            raise ValueError("scaling a positive measure by a negative factor")
        return ParticleMeasure(self.points, self.weights * c)

    def convex_combine(self, other: "ParticleMeasure", t: float) -> "ParticleMeasure":
        """(1 - t) * self + t * other on the concatenated atom list."""
        if not 0.0 <= t <= 1.0:
            raise ValueError("t must lie in [0, 1]")
        if other.dim != self.dim:
            raise ValueError("dimension mismatch")
        pts = np.vstack([self.points, other.points])
        w = np.concatenate([(1.0 - t) * self.weights, t * other.weights])
        return ParticleMeasure(pts, w, signed=self.signed or other.signed)

    def map_points(self, f) -> "ParticleMeasure":
        """Push-forward f_# mu (weights unchanged)."""
        return ParticleMeasure(_as_points(f(self.points)), self.weights,
                               signed=self.signed)

    def multiply_density(self, rho) -> "ParticleMeasure":
        """Reweight atoms by a nonnegative density rho(x)."""
        r = rho.fn(self.points) if isinstance(rho, TestFunction) else rho(self.points)
        return ParticleMeasure(self.points, self.weights * np.asarray(r),
                               signed=self.signed)

    # -- serialization -------------------------------------------------

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["atom_index", "weight"]
                            + [f"x_{j + 1}" for j in range(self.dim)])
            for i in range(self.n_atoms):
                writer.writerow([i, repr(float(self.weights[i]))]
                                + [repr(float(v)) for v in self.points[i]])

    @classmethod
    def from_csv(cls, path) -> "ParticleMeasure":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][:2] != ["atom_index", "weight"]:
            raise ValueError(f"{path}: not a measure CSV")
        d = len(rows[0]) - 2
        pts = np.array([[float(v) for v in row[2:2 + d]] for row in rows[1:]])
        w = np.array([float(row[1]) for row in rows[1:]])
        return cls(pts.reshape(-1, d), w)

    def content_hash(self) -> str:
        hsh = hashlib.sha256()
        hsh.update(str(self.points.shape).encode())
        hsh.update(self.points.tobytes())
        hsh.update(self.weights.tobytes())
        return hsh.hexdigest()

    def __repr__(self):
        return (f"ParticleMeasure(n_atoms={self.n_atoms}, dim={self.dim}, "
                f"mass={self.total_mass():.6g})")


def product_integrate(mu: ParticleMeasure, nu: ParticleMeasure, fn2) -> float:
    """<mu (x) nu, fn2> where fn2 maps broadcast (m,1,d),(1,k,d) -> (m,k)."""
    vals = np.asarray(fn2(mu.points[:, None, :], nu.points[None, :, :]),
                      dtype=np.float64)
    ww = mu.weights[:, None] * nu.weights[None, :]
    return math.fsum((ww * vals).ravel().tolist())


# ---------------------------------------------------------------------------
# Wasserstein distance (exact, atomic inputs)
# ---------------------------------------------------------------------------


def _wasserstein_1d(mu: ParticleMeasure, nu: ParticleMeasure, p: float) -> float:
    # quantile-coupling form: integrate |F^-1 - G^-1|^p over (0, 1)
    def sorted_atoms(m):
        order = np.argsort(m.points[:, 0], kind="stable")
        w = m.weights[order]
        mass = m.total_mass()
        return m.points[order, 0], w / mass

    xs, ws = sorted_atoms(mu)
    ys, vs = sorted_atoms(nu)
    cw = np.concatenate([[0.0], np.cumsum(ws)])
    cv = np.concatenate([[0.0], np.cumsum(vs)])
    cuts = np.unique(np.concatenate([cw, cv, [1.0]]))
    cuts = cuts[(cuts >= 0.0) & (cuts <= 1.0)]
    total = 0.0
    terms = []
    for lo, hi in zip(cuts[:-1], cuts[1:]):
        seg = hi - lo
        if seg <= 0.0:
            continue
        midpoint = 0.5 * (lo + hi)
        i = min(np.searchsorted(cw, midpoint, side="right") - 1, len(xs) - 1)
        j = min(np.searchsorted(cv, midpoint, side="right") - 1, len(ys) - 1)
        terms.append(seg * abs(xs[i] - ys[j]) ** p)
    total = math.fsum(terms)
    return total ** (1.0 / p)


def _wasserstein_lp(mu: ParticleMeasure, nu: ParticleMeasure, p: float) -> float:
    from scipy.optimize import linprog

    m, k = mu.n_atoms, nu.n_atoms
    if m > MAX_LP_ATOMS or k > MAX_LP_ATOMS:
        raise ValueError(
            f"exact transport LP limited to {MAX_LP_ATOMS} atoms per side")
    a = mu.weights / mu.total_mass()
    b = nu.weights / nu.total_mass()
    diff = mu.points[:, None, :] - nu.points[None, :, :]
    cost = np.sqrt(np.sum(diff * diff, axis=2)) ** p
    # row-sum and column-sum equality constraints on the coupling
    from scipy.sparse import lil_matrix

    A = lil_matrix((m + k, m * k))
    for i in range(m):
        A[i, i * k:(i + 1) * k] = 1.0
    for j in range(k):
        A[m + j, j::k] = 1.0
    rhs = np.concatenate([a, b])
    res = linprog(cost.ravel(), A_eq=A.tocsr(), b_eq=rhs,
                  bounds=(0, None), method="highs")
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return float(res.fun) ** (1.0 / p)


def wasserstein(mu: ParticleMeasure, nu: ParticleMeasure, p: float = 2.0) -> float:
    """Exact W_p between the normalized versions of two atomic measures.

    d = 1 uses the sorted quantile coupling; d > 1 solves the transport
    LP exactly (HiGHS) and is capped at 512 atoms per side.
    """
    if mu.dim != nu.dim:
        raise ValueError("dimension mismatch")
    if p < 1.0:
        raise ValueError("p must be >= 1")
    if mu.total_mass() <= 0.0 or nu.total_mass() <= 0.0:
        raise ValueError("Wasserstein distance needs positive total mass")
    if mu.dim == 1:
        return _wasserstein_1d(mu, nu, p)
    return _wasserstein_lp(mu, nu, p)
