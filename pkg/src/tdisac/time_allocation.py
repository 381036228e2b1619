"""Choice of the sensing/communication split eta.

For fixed beams and multipliers the robust constraint of user ``k`` holds at
``eta`` iff ``M_k(eta) + Lam_k >= 0`` and the Schur complement

    A_k(eta) = h^H M h - sigma^2 - lam^T eps(eta)^2 - h^H M (M + Lam)^-1 M h

is nonnegative, where ``M_k(eta)`` uses the SINR target ``2^(R / (eta T)) - 1``
of the current rate and ``eps(eta)`` the error radii implied by the CRLB at
``eta``. The split is updated by a grid search on ``min_k A_k``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .array_channel import ChannelSet, uncertainty_bounds
from .errors import SensingInfeasibleError
from .fim_crlb import crlb_at
from .robust import BeamformerSet, gamma_from_rate
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)

GRID_STEP = 0.01
REGULARIZATION = 1e-10

INITIAL = "initial"
MARGIN_MAXIMIZED = "margin-maximized"
CRLB_PROJECTED = "crlb-projected"


@dataclass(frozen=True)
class TimeAllocation:
    eta: float
    provenance: str = INITIAL

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.provenance not in (INITIAL, MARGIN_MAXIMIZED, CRLB_PROJECTED):
            raise ValueError(f"unknown provenance {self.provenance!r}")


def eta_bar(crlb_bar: float, config: ScenarioConfig) -> float:
    """Largest eta meeting the CRLB threshold: 1 - crlb_bar tau_s / (T CRLB_th)."""
    if not crlb_bar > 0:
        raise ValueError("crlb_bar must be positive")
    value = 1.0 - crlb_bar * config.sensing_slot / (config.block_duration * config.crlb_threshold)
    if value <= 0.0:
        raise SensingInfeasibleError(
            f"even full-block sensing cannot meet the CRLB threshold "
            f"(crlb_bar {crlb_bar:.3e}, threshold {config.crlb_threshold:.3e}, eta_bar {value:.3e})",
            eta_bar=value)
    return value


def project_eta(eta_last: float, eta_max: float) -> TimeAllocation:
    if eta_max <= eta_last:
        return TimeAllocation(eta_max, CRLB_PROJECTED)
    return TimeAllocation(eta_last, MARGIN_MAXIMIZED)


def user_margins(gamma: float, beams: BeamformerSet, lam: np.ndarray, eps: np.ndarray,
                 channels: ChannelSet, config: ScenarioConfig) -> np.ndarray:
    """A_k for every user at SINR target ``gamma`` and error radii ``eps`` (K, M).

    ``-inf`` marks users whose ``M_k + Lam_k`` is not PSD (the LMI fails
    regardless of the corner entry).
    """
    W = beams.covariances
    total = W.sum(axis=0)
    N = channels.n_elements
    out = np.empty(channels.n_users)
    for k in range(channels.n_users):
        h = channels.stacked[k]
        M = W[k] / gamma - (total - W[k])
        M = (M + M.conj().T) / 2
        Mh = M @ h
        A = M + np.diag(np.repeat(lam[k], N))
        scale = max(np.abs(A).max(), 1e-300)
        w, V = np.linalg.eigh(A)
        if w[0] < -1e-9 * scale:
            out[k] = -np.inf
            continue
        w = np.maximum(w, 0.0) + REGULARIZATION * scale
        c = V.conj().T @ Mh
        schur = float(np.sum(np.abs(c) ** 2 / w))
        corner = (h.conj() @ Mh).real - config.noise_power - lam[k] @ eps[k] ** 2
        out[k] = corner - schur
    return out


def margin(eta: float, rate: float, beams: BeamformerSet, lam: np.ndarray, crlb_bar: float,
           channels: ChannelSet, config: ScenarioConfig, variant: str = "main") -> float:
    """min_k A_k(eta) at fixed rate, beams and multipliers (watts).

    ``variant`` only labels the beam family: MRT beams enter through their
    covariances ``A_k P_k A_k^H``, which is all the margin needs.
    """
    if variant not in ("main", "mrt"):
        raise ValueError(f"unknown variant {variant!r}")
    if not 0.0 < eta < 1.0:
        raise ValueError("eta must lie in (0, 1)")
    gamma = float(gamma_from_rate(rate, eta, config.block_duration))
    if gamma <= 0:
        gamma = np.finfo(float).tiny
    bounds = uncertainty_bounds(crlb_at(crlb_bar, eta, config.sensing_slot, config.block_duration),
                                channels, config)
    return float(user_margins(gamma, beams, lam, bounds.eps, channels, config).min())


def eta_grid(step: float = GRID_STEP) -> np.ndarray:
    n = int(round(1.0 / step))
    return np.arange(1, n) * step


def maximize_margin(rate: float, beams: BeamformerSet, lam: np.ndarray, crlb_bar: float,
                    channels: ChannelSet, config: ScenarioConfig, variant: str = "main",
                    step: float = GRID_STEP, previous: float | None = None, margin_fn=None):
    """Grid argmax of the margin; ties go to the larger eta.

    Returns ``(eta, values)`` with the margin at every grid point. If every
    point is ``-inf`` the previous eta is kept (``previous`` must then be
    given).
    """
    grid = eta_grid(step)
    if margin_fn is None:
        def margin_fn(e):
            return margin(e, rate, beams, lam, crlb_bar, channels, config, variant)
    values = np.array([margin_fn(float(e)) for e in grid])
    if not np.isfinite(values).any() and np.all(values < 0):
        if previous is None:
            raise ValueError("every grid point has an infinite negative margin and no previous eta")
        log.warning("margin search: all grid points infeasible, keeping eta = %.4f", previous)
        return float(previous), values
    best = values.max()
    # ties within round-off go to the larger eta
    tie = np.flatnonzero(values >= best - 1e-12 * max(abs(best), 1e-300))
    return float(grid[tie[-1]]), values


def golden_section_max(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    """Maximizer of a unimodal function on [lo, hi]."""
    ratio = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    c, d = b - ratio * (b - a), a + ratio * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - ratio * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + ratio * (b - a)
            fd = f(d)
    return (a + b) / 2
