"""Signal/observation model definitions.

A model bundles the coefficient functions of the partially observed
diffusion

    dX_t = f(X_t) dt + sigma(X_t) dW_t + sigma_bar(X_t) dB_t,
    dY_t = h(X_t) dt + dB_t,

together with derivative callables for the generator

    A psi = f . grad psi + 1/2 tr[(sigma sigma^T + sigma_bar sigma_bar^T) hess psi]

and the observation-gradient operator (B_k psi) = (sigma_bar^T grad psi)_k.

``kernel_spec`` identifies models whose single-step update the compiled
kernel can run; generic callables always work through the numpy path.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

__all__ = ["FilteringModel", "ou_bounded", "linear_gauss", "MODEL_REGISTRY",
           "make_model"]


@dataclass(frozen=True)
class FilteringModel:
    name: str
    dim: int                      # signal dimension d
    obs_dim: int                  # observation dimension k
    f: Callable                   # (n, d) -> (n, d)
    sigma: Callable               # (n, d) -> (n, d, d)
    sigma_bar: Callable           # (n, d) -> (n, d, k)
    h: Callable                   # (n, d) -> (n, k)
    f_sup: float = np.inf
    h_sup: float = np.inf
    sigma_sup: float = np.inf
    sigma_bar_sup: float = np.inf
    # True when the coefficients are bounded with bounded derivatives and
    # sigma sigma^T is uniformly elliptic; models violating this are still
    # runnable but are flagged in reports.
    hypothesis_ok: bool = True
    kernel_spec: Optional[tuple] = None   # (kind, c0, c1, c2, c3) or None

    def diffusion_matrix(self, x: np.ndarray) -> np.ndarray:
        """a(x) = sigma sigma^T + sigma_bar sigma_bar^T, shape (n, d, d)."""
        s = self.sigma(x)
        sb = self.sigma_bar(x)
        return np.einsum("nij,nkj->nik", s, s) + np.einsum("nij,nkj->nik", sb, sb)

    def apply_A(self, tf, x: np.ndarray) -> np.ndarray:
        """(A psi)(x) for a TestFunction-like object with grad/hess."""
        x = np.atleast_2d(x)
        drift = np.einsum("nd,nd->n", self.f(x), tf.grad(x))
        diff = 0.5 * np.einsum("ndd->n",
                               np.einsum("nij,njk->nik",
                                         self.diffusion_matrix(x), tf.hess(x)))
        return drift + diff

    def apply_B(self, tf, x: np.ndarray) -> np.ndarray:
        """(B psi)(x) = sigma_bar(x)^T grad psi(x), shape (n, k)."""
        x = np.atleast_2d(x)
        return np.einsum("ndk,nd->nk", self.sigma_bar(x), tf.grad(x))


def _const_mat(val: np.ndarray) -> Callable:
    val = np.asarray(val, dtype=np.float64)

    def fn(x):
        x = np.atleast_2d(x)
        return np.broadcast_to(val, (x.shape[0],) + val.shape).copy()

    return fn


def ou_bounded(eps: float = 0.3, h_scale: float = 1.0,
               clip: float = 10.0, sigma: float = 1.0) -> FilteringModel:
    """Mean-reverting signal with clipped drift and saturating observation.

    d = k = 1.  f(x) = -clip(x), sigma constant, sigma_bar = eps,
    h(x) = h_scale * tanh(x).  All coefficients are bounded with bounded
    derivatives and the signal noise is uniformly elliptic.
    """
    eps = float(eps)
    h_scale = float(h_scale)
    clip = float(clip)
    sigma = float(sigma)
    if sigma <= 0.0:
        raise ValueError("sigma must be positive (uniform ellipticity)")

    def f(x):
        x = np.atleast_2d(x)
        return -np.clip(x, -clip, clip)

    def h(x):
        x = np.atleast_2d(x)
        return h_scale * np.tanh(x)

    return FilteringModel(
        name="ou_bounded", dim=1, obs_dim=1,
        f=f, sigma=_const_mat(sigma * np.eye(1)),
        sigma_bar=_const_mat(eps * np.ones((1, 1))), h=h,
        f_sup=clip, h_sup=abs(h_scale), sigma_sup=sigma,
        sigma_bar_sup=abs(eps),
        hypothesis_ok=True,
        kernel_spec=("ou_bounded", clip, sigma, eps, h_scale),
    )


def linear_gauss(a: float = -1.0, b: float = 1.0, c: float = 1.0) -> FilteringModel:
    """Linear-Gaussian model: f = a x, sigma = b, sigma_bar = 0, h = c x.

    The conditional law is Gaussian and solved exactly by the
    Kalman-Bucy equations, which makes this the reference model for
    posterior-moment cross-checks.  Coefficients are unbounded, so the
    model is flagged as outside the bounded-coefficient hypotheses.
    """
    a, b, c = float(a), float(b), float(c)

    def f(x):
        x = np.atleast_2d(x)
        return a * x

    def h(x):
        x = np.atleast_2d(x)
        return c * x

    return FilteringModel(
        name="linear_gauss", dim=1, obs_dim=1,
        f=f, sigma=_const_mat(b * np.eye(1)),
        sigma_bar=_const_mat(np.zeros((1, 1))), h=h,
        f_sup=np.inf, h_sup=np.inf, sigma_sup=abs(b), sigma_bar_sup=0.0,
        hypothesis_ok=False,
        kernel_spec=("linear", a, b, 0.0, c),
    )


MODEL_REGISTRY = {
    "ou_bounded": ou_bounded,
    "linear_gauss": linear_gauss,
}


def make_model(name: str, **params) -> FilteringModel:
    try:
        factory = MODEL_REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown model {name!r}; known: "
                       f"{sorted(MODEL_REGISTRY)}") from None
    return factory(**params)
