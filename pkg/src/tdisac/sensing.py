"""Sensing covariance design: minimize the position CRLB under per-AP power.

The problem

    min Tr(U^-1)  s.t.  [[J_pp - U, J_pa], [J_pa^T, J_aa]] >= 0,
                        Tr(Psi_m) <= P_s,  Psi_m >= 0

is solved as an SDP with the epigraph ``[[V, I], [I, U]] >= 0`` and
objective ``Tr(V)``. Two exact reductions keep it small:

* ``J`` only sees ``Psi_m`` through its compression onto
  ``span{a_km, da_km/dx, da_km/dy}_k``, so each block is searched as
  ``Psi_m = P_s B_m X_m B_m^H`` with an orthonormal basis ``B_m``;
* ``J_aa`` is block diagonal over AP pairs, so the big LMI splits into
  one ``(2K + 2K)`` LMI per pair plus ``J_pp - U - sum Y_ij >= 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import cvxpy as cp
import numpy as np
from scipy.linalg import block_diag

from . import conic
from .array_channel import ChannelSet
from .errors import SolverError
from .fim_crlb import CrlbResult, crlb, mean_derivatives
from .matrix_io import parse_matrices, read_matrices, write_matrices, format_matrices
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SensingCovariance:
    """Per-AP transmit covariance blocks ``Psi_m`` (watts), shape (M, N_t, N_t)."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.array(self.blocks, dtype=complex)
        if b.ndim != 3 or b.shape[1] != b.shape[2]:
            raise ValueError(f"blocks must have shape (M, N, N), got {b.shape}")
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    @property
    def n_aps(self) -> int:
        return self.blocks.shape[0]

    @property
    def full(self) -> np.ndarray:
        return block_diag(*self.blocks)

    @property
    def powers(self) -> np.ndarray:
        return np.einsum("mii->m", self.blocks).real

    def scaled(self, factor: float) -> "SensingCovariance":
        return SensingCovariance(self.blocks * factor)

    def cleaned(self, clip: float = 1e-8) -> "SensingCovariance":
        """Hermitian symmetrization and clipping of eigenvalues below ``clip * ||Psi_m||``."""
        out = []
        for b in self.blocks:
            b = (b + b.conj().T) / 2
            w, V = np.linalg.eigh(b)
            top = max(abs(w).max(initial=0.0), 1e-300)
            w = np.where(w < clip * top, 0.0, w)
            out.append((V * w) @ V.conj().T)
        return SensingCovariance(np.array(out))

    def check(self, power_budget: float | None = None, tol: float = 1e-8) -> None:
        for m, b in enumerate(self.blocks):
            if np.abs(b - b.conj().T).max(initial=0.0) > 1e-10 * max(np.abs(b).max(), 1e-300):
                raise ValueError(f"Psi_{m} is not Hermitian")
            w = np.linalg.eigvalsh((b + b.conj().T) / 2)
            if w.min() < -tol * max(abs(w).max(), 1e-300):
                raise ValueError(f"Psi_{m} is not PSD (min eigenvalue {w.min():.3e})")
            if power_budget is not None and w.sum() > power_budget * (1 + 1e-6):
                raise ValueError(f"Psi_{m} exceeds the power budget")

    @classmethod
    def uniform(cls, config: ScenarioConfig) -> "SensingCovariance":
        N = config.n_elements
        eye = np.eye(N) * config.sensing_power_budget / N
        return cls(np.repeat(eye[None], config.n_aps, axis=0))

    # -- text export ----------------------------------------------------------
    def to_text(self) -> str:
        return format_matrices((f"psi[{m}]", b) for m, b in enumerate(self.blocks))

    @classmethod
    def from_text(cls, text: str) -> "SensingCovariance":
        return cls._from_dict(parse_matrices(text))

    def save(self, path) -> None:
        write_matrices(path, ((f"psi[{m}]", b) for m, b in enumerate(self.blocks)))

    @classmethod
    def load(cls, path) -> "SensingCovariance":
        return cls._from_dict(read_matrices(path))

    @classmethod
    def _from_dict(cls, mats) -> "SensingCovariance":
        keys = sorted((k for k in mats if k.startswith("psi[")), key=lambda k: int(k[4:-1]))
        if not keys:
            raise ValueError("no psi[m] matrices found")
        return cls(np.array([mats[k] for k in keys]))


def sensing_bases(channels: ChannelSet, rtol: float = 1e-10) -> list[np.ndarray]:
    """Orthonormal basis of span{a_km, da_km/dx, da_km/dy} for each AP m."""
    bases = []
    for m in range(channels.n_aps):
        vecs = np.concatenate([channels.steering[:, m], channels.derivatives[:, m, 0],
                               channels.derivatives[:, m, 1]]).T
        U, s, _ = np.linalg.svd(vecs, full_matrices=False)
        bases.append(U[:, s > rtol * s[0]])
    return bases


def _coefficients(D, bases):
    """C[p, q, j] = B_j^H (sum_i D_p[i,j]^H D_q[i,j]) B_j, as a list over j of (P, P, r, r)."""
    out = []
    for j, B in enumerate(bases):
        E = np.einsum("pinm,mr->pinr", D[:, :, j], B)
        out.append(np.einsum("pina,qinb->pqab", E.conj(), E))
    return out


def _realified_rows(C):
    """Rows mapping vec_F(Z) to Re Tr(X C) = 1/2 Tr(Z realify(C)) for each (p, q)."""
    re, im = C.real, C.imag
    R = np.concatenate([np.concatenate([re, -im], axis=-1),
                        np.concatenate([im, re], axis=-1)], axis=-2)
    return 0.5 * R.reshape(R.shape[:-2] + (-1,))


def optimize_sensing_covariance(channels: ChannelSet, config: ScenarioConfig,
                                tol: float = conic.FEAS_TOL) -> tuple[SensingCovariance, CrlbResult]:
    """Minimize the normalized CRLB over block-diagonal Psi with per-AP power P_s."""
    P_s = config.sensing_power_budget
    if not P_s > 0:
        raise ValueError("sensing power budget must be positive")
    K, M = channels.n_users, channels.n_aps
    D = mean_derivatives(channels, config)
    bases = sensing_bases(channels)
    coeffs = _coefficients(D, bases)

    # Parameter scaling from the FIM of the uniform-in-subspace covariance so that
    # position and gain entries are of comparable size.
    diag = np.zeros(D.shape[0])
    for C in coeffs:
        diag += np.einsum("ppaa->p", C).real / C.shape[-1]
    t = 1.0 / np.sqrt(np.where(diag > 0, diag, 1.0))
    scale = np.outer(t, t)
    coeffs = [C * scale[:, :, None, None] for C in coeffs]

    sol, X, wnorm = _sensing_sdp(coeffs, t, bases, K, M, tol, whiten=False)
    if not sol.optimal:
        log.info("sensing SDP: retrying with whitened position coordinates")
        sol, X, wnorm = _sensing_sdp(coeffs, t, bases, K, M, tol, whiten=True)
    if not sol.optimal:
        raise SolverError(f"sensing covariance SDP ended with status {sol.status} "
                          f"({sol.solver_status})")
    blocks = []
    for B, x in zip(bases, X):
        Xv = x.value
        # a slightly infeasible trace from the solver is pulled back to the budget
        tr = np.trace(Xv).real
        if tr > 1.0:
            Xv = Xv / tr
        blocks.append(P_s * B @ Xv @ B.conj().T)
    psi = SensingCovariance(np.array(blocks)).cleaned()
    result = crlb(psi, None, channels, config, derivatives=D)
    log.info("sensing SDP: crlb_bar %.4e (solver objective %.4e, %s iterations)",
             result.crlb_bar, sol.objective * wnorm * config.noise_power / (2 * P_s),
             sol.iterations)
    return psi, result


def _sensing_sdp(coeffs, t, bases, K, M, tol, whiten=False):
    """Build and solve the CRLB SDP on scaled coefficients; returns (solution, X vars, scale)."""
    npos = 2 * K
    T = np.eye(coeffs[0].shape[0])
    if whiten:
        # Whiten the positions with the effective FIM of the reference
        # covariance. Far users leave that matrix badly conditioned (range is
        # weakly observable) and the solver can stall without this.
        J0 = sum(np.einsum("pqaa->pq", C).real / C.shape[-1] for C in coeffs)
        E0 = J0[:npos, :npos] - J0[:npos, npos:] @ np.linalg.pinv(J0[npos:, npos:]) @ J0[npos:, :npos]
        w, Q = np.linalg.eigh((E0 + E0.T) / 2)
        T[:npos, :npos] = Q / np.sqrt(np.maximum(w, 1e-12 * w.max()))
        coeffs = [np.einsum("pr,qs,pqab->rsab", T, T, C) for C in coeffs]

    prob = conic.ConicProblem("sensing-covariance")
    X = [prob.variable(f"X{j}", B.shape[1], cone="hermitian_psd") for j, B in enumerate(bases)]
    z = [cp.vec(x.Z, order="F") for x in X]

    def entries(rows_idx, cols_idx, js):
        expr = 0
        for j in js:
            rows = _realified_rows(coeffs[j][np.ix_(rows_idx, cols_idx)])
            L = rows.reshape(len(rows_idx) * len(cols_idx), -1)
            expr = expr + L @ z[j]
        return cp.reshape(expr, (len(rows_idx), len(cols_idx)), order="C")

    pos = np.arange(npos)
    U = prob.variable("U", npos, cone="symmetric")
    V = prob.variable("V", npos, cone="symmetric")
    Jpp = entries(pos, pos, range(M))
    slack_sum = 0
    n_alpha = K * M * M
    for i in range(M):
        for j in range(M):
            re = np.array([(k * M + i) * M + j for k in range(K)])
            idx = npos + np.concatenate([re, re + n_alpha])
            B = entries(pos, idx, [j])
            Dij = entries(idx, idx, [j])
            Y = prob.variable(f"Y{i}{j}", npos, cone="symmetric")
            slack_sum = slack_sum + Y
            prob.add_psd(cp.bmat([[Y, B], [B.T, Dij]]), f"pair ({i},{j})")
    prob.add_psd(Jpp - U - slack_sum, "position block")
    prob.add_psd(cp.bmat([[V, np.eye(npos)], [np.eye(npos), U]]), "epigraph")
    for j, x in enumerate(X):
        prob.add(x.trace <= 1.0, f"power AP {j}")
    if whiten:
        # Tr(EFIM^-1) in the original coordinates is Tr(G V)
        Tp = T[:npos, :npos]
        G = Tp.T @ np.diag(t[:npos] ** 2) @ Tp
        G = (G + G.T) / 2
        wnorm = np.trace(G) / npos
        prob.minimize(cp.trace((G / wnorm) @ V))
    else:
        weights = t[:npos] ** 2
        wnorm = weights.mean()
        prob.minimize(cp.sum(cp.multiply(weights / wnorm, cp.diag(V))))
    return conic.solve(prob, tol=tol), X, wnorm
