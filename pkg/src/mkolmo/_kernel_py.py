"""Numpy implementation of the single-flow step kernel.

Same contract as the compiled extension ``_stepkernel``: advance one
weighted flow through a block of steps for the 1-d parametric model
families, recording the left-point mass and h-integral per step.  Kept
intentionally line-for-line parallel with the .pyx source so the two can
be compared in tests and benchmarks.
"""

import math

import numpy as np


def advance_chunk(kind, c0, c1, c2, c3, x, lw, w0, xi, dy, dt,
                  rec_mass, rec_h, rec_off):
    """Advance the flow through len(dy) steps, in place.

    kind 0: f = -clip(x, +-c0), sigma = c1, sigma_bar = c2, h = c3 tanh(x)
    kind 1: f = c0 x,           sigma = c1, sigma_bar = c2, h = c3 x

    x, lw, w0: (n,) position / log-weight / base-weight arrays.
    xi: (m, n) standard normals, dy: (m,) observation increments.
    rec_mass[rec_off + s], rec_h[rec_off + s] receive the pre-step
    <rho, 1> and <rho, h>.
    """
    sqdt = math.sqrt(dt)
    for m in range(dy.shape[0]):
        if kind == 0:
            hx = c3 * np.tanh(x)
            fx = -np.clip(x, -c0, c0)
        else:
            hx = c3 * x
            fx = c0 * x
        w = w0 * np.exp(lw)
        rec_mass[rec_off + m] = w.sum()
        rec_h[rec_off + m] = (w * hx).sum()
        lw += hx * dy[m] - 0.5 * hx * hx * dt
        x += (fx - c2 * hx) * dt + c1 * sqdt * xi[m] + c2 * dy[m]
