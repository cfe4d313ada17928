# cython: language_level=3
"""Compiled single-flow step kernel for 1-d parametric models.

Mirrors _kernel_py.advance_chunk; see that module for the contract.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, sqrt, tanh

cnp.import_array()


def advance_chunk(int kind, double c0, double c1, double c2, double c3,
                  double[::1] x, double[::1] lw, double[::1] w0,
                  double[:, ::1] xi, double[::1] dy, double dt,
                  double[::1] rec_mass, double[::1] rec_h, Py_ssize_t rec_off):
    cdef Py_ssize_t n_steps = dy.shape[0]
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t m, i
    cdef double sqdt = sqrt(dt)
    cdef double hx, fx, w, mass_acc, h_acc, dym, xv
    for m in range(n_steps):
        dym = dy[m]
        mass_acc = 0.0
        h_acc = 0.0
        for i in range(n):
            xv = x[i]
            if kind == 0:
                hx = c3 * tanh(xv)
                if xv > c0:
                    fx = -c0
                elif xv < -c0:
                    fx = c0
                else:
                    fx = -xv
            else:
                hx = c3 * xv
                fx = c0 * xv
            w = w0[i] * exp(lw[i])
            mass_acc += w
            h_acc += w * hx
            lw[i] = lw[i] + hx * dym - 0.5 * hx * hx * dt
            x[i] = xv + (fx - c2 * hx) * dt + c1 * sqdt * xi[m, i] + c2 * dym
        rec_mass[rec_off + m] = mass_acc
        rec_h[rec_off + m] = h_acc
