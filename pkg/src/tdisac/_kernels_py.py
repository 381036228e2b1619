"""Pure-numpy versions of the compiled kernels (same signatures and results)."""

from __future__ import annotations

import numpy as np


def music_denominator(points, elements, centers, wavelength, signal, far_field=False):
    """Projection of the stacked array response onto the noise subspace.

    Parameters
    ----------
    points : (G, 2) float
        Candidate positions.
    elements : (M, N, 2) float
        Element coordinates of every AP.
    centers : (M, 2) float
        Reference (center element) coordinates.
    wavelength : float
    signal : (M N, r) complex
        Orthonormal basis of the signal subspace.
    far_field : bool
        Use the planar-wave response (phase linear in the element offset).

    Returns
    -------
    (G,) float
        ``||v||^2 - ||U_s^H v||^2 = v^H U_n U_n^H v`` for each point.
    """
    points = np.ascontiguousarray(points, dtype=float)
    M, N, _ = elements.shape
    k0 = 2.0 * np.pi / wavelength
    out = np.empty(points.shape[0])
    chunk = 4096
    for start in range(0, points.shape[0], chunk):
        p = points[start:start + chunk]
        phases = np.empty((p.shape[0], M * N))
        for m in range(M):
            if far_field:
                diff = p - centers[m]
                norm = np.linalg.norm(diff, axis=1, keepdims=True)
                u = np.divide(diff, norm, out=np.zeros_like(diff), where=norm > 0)
                phases[:, m * N:(m + 1) * N] = k0 * (u @ (elements[m] - centers[m]).T)
            else:
                d = np.linalg.norm(p[:, None, :] - elements[m][None], axis=2)
                d0 = np.linalg.norm(p - centers[m], axis=1)
                phases[:, m * N:(m + 1) * N] = -k0 * (d - d0[:, None])
        v = np.exp(1j * phases)
        proj = v.conj() @ signal
        out[start:start + chunk] = M * N - np.sum(np.abs(proj) ** 2, axis=1)
    return out


def mean_channel_error(elements, center, user, radius, angles, wavelength):
    """Average ||h(user + radius u(angle)) - h(user)|| over the given angles.

    ``h = beta a`` with ``beta = sqrt(lambda / (4 pi r0^2)) exp(-j 2 pi r0 / lambda)``
    and the center-referenced steering vector ``a``; this equals
    ``sqrt(lambda / 4 pi) || exp(-j k r_n(c)) / r0(c) - exp(-j k r_n(c0)) / r0(c0) ||``.
    """
    k0 = 2.0 * np.pi / wavelength
    amp = np.sqrt(wavelength / (4.0 * np.pi))

    def response(pos):
        d = np.linalg.norm(pos[:, None, :] - elements[None], axis=2)
        r0 = np.linalg.norm(pos - center, axis=1)
        return amp * np.exp(-1j * k0 * d) / r0[:, None]

    user = np.asarray(user, dtype=float)
    h0 = response(user[None])[0]
    total = 0.0
    chunk = 8192
    angles = np.asarray(angles, dtype=float)
    for start in range(0, angles.size, chunk):
        a = angles[start:start + chunk]
        pos = user + radius * np.column_stack([np.cos(a), np.sin(a)])
        total += np.linalg.norm(response(pos) - h0, axis=1).sum()
    return total / angles.size
