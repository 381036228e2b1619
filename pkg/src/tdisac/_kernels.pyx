# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: MUSIC grid evaluation and the channel-error Monte Carlo."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, sin, cos, M_PI

cnp.import_array()


def music_denominator(points, elements, centers, double wavelength, signal, bint far_field=False):
    cdef double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef double[:, :, ::1] E = np.ascontiguousarray(elements, dtype=np.float64)
    cdef double[:, ::1] C = np.ascontiguousarray(centers, dtype=np.float64)
    cdef double complex[:, ::1] U = np.ascontiguousarray(signal, dtype=np.complex128)
    cdef Py_ssize_t G = P.shape[0], M = E.shape[0], N = E.shape[1], R = U.shape[1]
    cdef Py_ssize_t g, m, n, r, row
    cdef double k0 = 2.0 * M_PI / wavelength
    cdef double px, py, dx, dy, d, d0, ux, uy, ph, acc_re, acc_im, total
    cdef double[::1] cre = np.empty(M * N)
    cdef double[::1] cim = np.empty(M * N)
    cdef double[::1] sre = np.empty(R)
    cdef double[::1] sim = np.empty(R)
    out = np.empty(G)
    cdef double[::1] O = out
    for g in range(G):
        px = P[g, 0]
        py = P[g, 1]
        for m in range(M):
            dx = px - C[m, 0]
            dy = py - C[m, 1]
            d0 = sqrt(dx * dx + dy * dy)
            if d0 > 0:
                ux = dx / d0
                uy = dy / d0
            else:
                ux = 0.0
                uy = 0.0
            for n in range(N):
                if far_field:
                    ph = k0 * (ux * (E[m, n, 0] - C[m, 0]) + uy * (E[m, n, 1] - C[m, 1]))
                else:
                    dx = px - E[m, n, 0]
                    dy = py - E[m, n, 1]
                    d = sqrt(dx * dx + dy * dy)
                    ph = -k0 * (d - d0)
                row = m * N + n
                cre[row] = cos(ph)
                cim[row] = sin(ph)
        total = 0.0
        for r in range(R):
            acc_re = 0.0
            acc_im = 0.0
            for row in range(M * N):
                # conj(v) * U
                acc_re += cre[row] * U[row, r].real + cim[row] * U[row, r].imag
                acc_im += cre[row] * U[row, r].imag - cim[row] * U[row, r].real
            total += acc_re * acc_re + acc_im * acc_im
        O[g] = M * N - total
    return out


def mean_channel_error(elements, center, user, double radius, angles, double wavelength):
    cdef double[:, ::1] E = np.ascontiguousarray(elements, dtype=np.float64)
    cdef double[::1] A = np.ascontiguousarray(angles, dtype=np.float64)
    cdef double cx = center[0], cy = center[1], ux0 = user[0], uy0 = user[1]
    cdef Py_ssize_t N = E.shape[0], S = A.shape[0], s, n
    cdef double k0 = 2.0 * M_PI / wavelength
    cdef double amp = sqrt(wavelength / (4.0 * M_PI))
    cdef double[::1] h0re = np.empty(N)
    cdef double[::1] h0im = np.empty(N)
    cdef double dx, dy, d, r0, px, py, re, im, acc, total = 0.0
    dx = ux0 - cx
    dy = uy0 - cy
    r0 = sqrt(dx * dx + dy * dy)
    for n in range(N):
        dx = ux0 - E[n, 0]
        dy = uy0 - E[n, 1]
        d = sqrt(dx * dx + dy * dy)
        h0re[n] = amp * cos(k0 * d) / r0
        h0im[n] = -amp * sin(k0 * d) / r0
    for s in range(S):
        px = ux0 + radius * cos(A[s])
        py = uy0 + radius * sin(A[s])
        dx = px - cx
        dy = py - cy
        r0 = sqrt(dx * dx + dy * dy)
        acc = 0.0
        for n in range(N):
            dx = px - E[n, 0]
            dy = py - E[n, 1]
            d = sqrt(dx * dx + dy * dy)
            re = amp * cos(k0 * d) / r0 - h0re[n]
            im = -amp * sin(k0 * d) / r0 - h0im[n]
            acc += re * re + im * im
        total += sqrt(acc)
    return total / S if S > 0 else 0.0
