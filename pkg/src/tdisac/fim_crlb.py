"""Fisher information of the multi-static echo model and the position CRLB.

Parameters are ordered ``(c^x_1..K, c^y_1..K, Re alpha, Im alpha)`` with the
path gains ``alpha[k, i, j]`` (receive AP ``i``, transmit AP ``j``) flattened
in C order. All blocks are the normalized ones, ``J_bar = sigma^2 / (2 tau) J``,
so they depend neither on the noise power nor on the number of snapshots:

    J_bar[p, q] = Re Tr(Psi D_p^H D_q)

where ``D_p`` is the derivative of the composite sensing channel
``sum_k H_k`` with respect to parameter ``p``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .array_channel import ChannelSet, _axis_index
from .errors import UnidentifiableGeometryError
from .scenario import ScenarioConfig

# Above this condition number the position information is declared unidentifiable.
SINGULAR_CONDITION = 1e10


def path_gains(channels: ChannelSet, config: ScenarioConfig) -> np.ndarray:
    """alpha[k, i, j] = rho[k, i, j] beta[k, i] beta[k, j]."""
    beta = channels.gains
    return config.rcs * beta[:, :, None] * beta[:, None, :]


def _psi_blocks(psi) -> np.ndarray:
    return np.asarray(getattr(psi, "blocks", psi))


def channel_derivative_matrix(user: int, axis, channels: ChannelSet,
                              config: ScenarioConfig, alpha=None) -> np.ndarray:
    """dH_k / dc^q_k as a dense (M N_t, M N_t) matrix.

    Block (i, j) is ``alpha_kij (da_ki a_kj^H + a_ki da_kj^H)``.
    """
    q = _axis_index(axis)
    if alpha is None:
        alpha = path_gains(channels, config)[user]
    a = channels.steering[user]
    da = channels.derivatives[user, :, q]
    blocks = alpha[:, :, None, None] * (
        np.einsum("in,jm->ijnm", da, a.conj()) + np.einsum("in,jm->ijnm", a, da.conj()))
    M, N = a.shape
    return blocks.transpose(0, 2, 1, 3).reshape(M * N, M * N)


def composite_channel(channels: ChannelSet, config: ScenarioConfig, user: int | None = None,
                      alpha=None) -> np.ndarray:
    """Sensing channel H_k (or sum over users) as a dense (M N_t, M N_t) matrix."""
    if alpha is None:
        alpha = path_gains(channels, config)
    users = range(channels.n_users) if user is None else [user]
    M, N = channels.n_aps, channels.n_elements
    H = np.zeros((M * N, M * N), complex)
    for k in users:
        a = channels.steering[k]
        blocks = alpha[k][:, :, None, None] * np.einsum("in,jm->ijnm", a, a.conj())
        H += blocks.transpose(0, 2, 1, 3).reshape(M * N, M * N)
    return H


def parameter_labels(n_users: int, n_aps: int) -> list[str]:
    labels = [f"x{k}" for k in range(n_users)] + [f"y{k}" for k in range(n_users)]
    for part in ("re", "im"):
        labels += [f"alpha_{part}[{k},{i},{j}]" for k in range(n_users)
                   for i in range(n_aps) for j in range(n_aps)]
    return labels


def mean_derivatives(channels: ChannelSet, config: ScenarioConfig) -> np.ndarray:
    """Blocks of d(sum_k H_k)/d theta_p, shape (P, M, M, N_t, N_t)."""
    K, M, N = channels.n_users, channels.n_aps, channels.n_elements
    alpha = path_gains(channels, config)
    P = 2 * K + 2 * K * M * M
    D = np.zeros((P, M, M, N, N), complex)
    a = channels.steering
    outer = np.einsum("kin,kjm->kijnm", a, a.conj())
    for q in range(2):
        da = channels.derivatives[:, :, q]
        dpos = (np.einsum("kin,kjm->kijnm", da, a.conj())
                + np.einsum("kin,kjm->kijnm", a, da.conj()))
        D[q * K:(q + 1) * K] = alpha[:, :, :, None, None] * dpos
    base = 2 * K
    for k in range(K):
        for i in range(M):
            for j in range(M):
                idx = base + (k * M + i) * M + j
                D[idx, i, j] = outer[k, i, j]
                D[idx + K * M * M, i, j] = 1j * outer[k, i, j]
    return D


@dataclass(frozen=True)
class FimBlocks:
    """Normalized Fisher blocks for positions (p) and path gains (alpha)."""

    jpp: np.ndarray
    jpa: np.ndarray
    jaa: np.ndarray
    n_users: int
    n_aps: int

    @property
    def full(self) -> np.ndarray:
        return np.block([[self.jpp, self.jpa], [self.jpa.T, self.jaa]])

    def pair_indices(self, i: int, j: int) -> np.ndarray:
        """Gain-parameter columns belonging to AP pair (i, j), real then imaginary."""
        K, M = self.n_users, self.n_aps
        re = np.array([(k * M + i) * M + j for k in range(K)])
        return np.concatenate([re, re + K * M * M])


def _fim_from_factors(D: np.ndarray, factors: list[np.ndarray]) -> np.ndarray:
    J = np.zeros((D.shape[0], D.shape[0]))
    for j, F in enumerate(factors):
        if F.shape[1] == 0:
            continue
        E = np.einsum("pinm,mr->pinr", D[:, :, j], F)
        E = E.reshape(E.shape[0], -1)
        J += (E.conj() @ E.T).real
    return J


def psd_factor(block: np.ndarray, rel_tol: float = 1e-14) -> np.ndarray:
    """F with F F^H = block (Hermitian PSD), dropping numerically zero modes."""
    w, V = np.linalg.eigh((block + block.conj().T) / 2)
    keep = w > rel_tol * max(w.max(initial=0.0), 1e-300)
    return V[:, keep] * np.sqrt(w[keep])


def assemble_fim(psi, channels: ChannelSet, config: ScenarioConfig,
                 derivatives: np.ndarray | None = None) -> FimBlocks:
    """All normalized Fisher blocks for a block-diagonal sensing covariance."""
    blocks = _psi_blocks(psi)
    M, N = channels.n_aps, channels.n_elements
    if blocks.shape != (M, N, N):
        raise ValueError(f"sensing covariance must have shape {(M, N, N)}, got {blocks.shape}")
    D = mean_derivatives(channels, config) if derivatives is None else derivatives
    J = _fim_from_factors(D, [psd_factor(b) for b in blocks])
    J = (J + J.T) / 2
    P = 2 * channels.n_users
    return FimBlocks(jpp=J[:P, :P], jpa=J[:P, P:], jaa=J[P:, P:],
                     n_users=channels.n_users, n_aps=M)


def _solve_pd(A, B, label, allow_singular):
    w = np.linalg.eigvalsh(A)
    top = max(abs(w).max(initial=0.0), 1e-300)
    cond = top / w.min() if w.min() > 0 else np.inf
    if cond >= SINGULAR_CONDITION:
        if not allow_singular:
            raise UnidentifiableGeometryError(f"{label} is singular", cond)
        return np.linalg.pinv(A, rcond=1e-10, hermitian=True) @ B, cond, True
    return np.linalg.solve(A, B), cond, False


@dataclass(frozen=True)
class CrlbResult:
    """Normalized CRLB and its value at a time allocation.

    ``crlb_bar = sigma^2 / 2 * Tr(EFIM^-1)``; the CRLB after sensing for a
    fraction ``1 - eta`` of the block is ``crlb_bar * tau_s / ((1 - eta) T)``.
    """

    crlb_bar: float
    effective_fim: np.ndarray
    condition: float
    sensing_slot: float
    block_duration: float
    eta: float | None = None
    flags: tuple = field(default=())

    def at(self, eta: float) -> float:
        return crlb_at(self.crlb_bar, eta, self.sensing_slot, self.block_duration)

    @property
    def crlb(self) -> float | None:
        return None if self.eta is None else self.at(self.eta)

    @property
    def per_user(self) -> np.ndarray:
        """Position variance bound (x plus y) per user, normalized."""
        cov = np.linalg.inv(self.effective_fim)
        K = cov.shape[0] // 2
        d = np.diag(cov)
        scale = self.crlb_bar / np.trace(cov)
        return (d[:K] + d[K:]) * scale


def crlb_at(crlb_bar: float, eta: float, sensing_slot: float, block_duration: float) -> float:
    if not 0.0 <= eta < 1.0:
        raise ValueError(f"eta must lie in [0, 1), got {eta}")
    return crlb_bar * sensing_slot / ((1.0 - eta) * block_duration)


def effective_fim(fim: FimBlocks):
    """Schur complement J_pp - J_pa J_aa^+ J_pa^T using the per-AP-pair structure.

    Gains of different AP pairs are decoupled, so J_aa is block diagonal over
    pairs (each block 2K x 2K, coupling users of the same pair). A singular
    pair block (e.g. two users on the same array axis share a steering
    vector, so only the sum of their gains is identifiable) does not make
    the positions unidentifiable: the pseudo-inverse gives the projection
    onto the identifiable nuisance directions and is flagged.
    Returns (efim, worst condition number of the inverted blocks, pinv flag).
    """
    efim = fim.jpp.copy()
    worst, used_pinv = 1.0, False
    for i in range(fim.n_aps):
        for j in range(fim.n_aps):
            idx = fim.pair_indices(i, j)
            B = fim.jpa[:, idx]
            X, cond, flag = _solve_pd(fim.jaa[np.ix_(idx, idx)], B.T, f"gain block ({i},{j})",
                                      allow_singular=True)
            efim -= B @ X
            worst, used_pinv = max(worst, cond), used_pinv or flag
    return (efim + efim.T) / 2, worst, used_pinv


def crlb(psi, eta, channels: ChannelSet, config: ScenarioConfig,
         allow_singular: bool = False, derivatives=None) -> CrlbResult:
    """Position CRLB for sensing covariance ``psi``; ``eta`` may be None.

    Raises :class:`UnidentifiableGeometryError` when the effective FIM is
    singular, unless ``allow_singular`` (then a pseudo-inverse is used and
    flagged).
    """
    fim = assemble_fim(psi, channels, config, derivatives=derivatives)
    efim, cond_a, flag_a = effective_fim(fim)
    if eta is not None and not 0.0 < eta < 1.0:
        raise ValueError(f"eta must lie in (0, 1), got {eta}")
    inv, cond, flag = _solve_pd(efim, np.eye(len(efim)), "effective FIM", allow_singular)
    flags = []
    if flag_a:
        flags.append("gain-block-pinv")
    if flag:
        flags.append("effective-fim-pinv")
    value = config.noise_power / 2.0 * float(np.trace(inv))
    return CrlbResult(crlb_bar=value, effective_fim=efim, condition=cond,
                      sensing_slot=config.sensing_slot, block_duration=config.block_duration,
                      eta=eta, flags=tuple(flags))
