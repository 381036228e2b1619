"""Near-field ULA responses, LOS channels and the sensing-coupled error bound.

Element ``n`` (``n = -N..N``) of AP ``m`` sits at ``center_m + n * offset_m``.
Steering vectors are referenced to the center element so that entry ``n = 0``
is exactly one; the common phase ``exp(-j 2 pi r0 / lambda)`` lives in the
complex gain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import GeometryError
from .scenario import ScenarioConfig

_AXES = {"x": 0, "y": 1, 0: 0, 1: 1}


def _axis_index(axis) -> int:
    try:
        return _AXES[axis]
    except KeyError:
        raise ValueError(f"axis must be 'x' or 'y', got {axis!r}") from None


def element_offsets(config: ScenarioConfig) -> np.ndarray:
    """Integer element indices -N..N."""
    n = config.n_half
    return np.arange(-n, n + 1, dtype=float)


def element_positions(ap: int, config: ScenarioConfig) -> np.ndarray:
    """(N_t, 2) element coordinates of AP ``ap``."""
    center = config.ap_centers_array[ap]
    step = config.ap_orientations_array[ap]
    return center + element_offsets(config)[:, None] * step


def element_distances(ap: int, targets, config: ScenarioConfig) -> np.ndarray:
    """Distances from every element of ``ap`` to ``targets`` (..., 2) -> (..., N_t)."""
    targets = np.asarray(targets, dtype=float)
    pos = element_positions(ap, config)
    diff = targets[..., None, :] - pos
    dist = np.hypot(diff[..., 0], diff[..., 1])
    if np.any(dist == 0.0):
        raise GeometryError(f"target coincides with an element of AP {ap}")
    return dist


def steering_vector(ap: int, target, config: ScenarioConfig) -> np.ndarray:
    """Spherical-wavefront array response toward ``target``."""
    return steering_vectors(ap, np.asarray(target, dtype=float), config)


def steering_vectors(ap: int, targets, config: ScenarioConfig) -> np.ndarray:
    """Batched :func:`steering_vector` over targets of shape (..., 2)."""
    r = element_distances(ap, targets, config)
    n = config.n_half
    delta = r - r[..., n:n + 1]
    a = np.exp(-2j * np.pi / config.carrier_wavelength * delta)
    a[..., n] = 1.0
    return a


def aod(ap: int, target, config: ScenarioConfig) -> np.ndarray:
    """Angle of departure from broadside, positive toward the ``n < 0`` end.

    With this sign convention the far-field response below is the
    first-order expansion of the near-field one.
    """
    target = np.asarray(target, dtype=float)
    center = config.ap_centers_array[ap]
    step = config.ap_orientations_array[ap]
    diff = target - center
    u = diff / np.linalg.norm(diff, axis=-1, keepdims=True)
    return np.arcsin(np.clip(-(u @ step) / config.element_spacing, -1.0, 1.0))


def far_field_steering(ap: int, angle, config: ScenarioConfig) -> np.ndarray:
    """Planar-wave response exp(-j 2 pi / lambda * n d sin(angle)).

    ``ap`` is accepted for interface symmetry; the response only depends on
    the common element spacing.
    """
    angle = np.asarray(angle, dtype=float)
    n = element_offsets(config)
    phase = -2.0 * np.pi / config.carrier_wavelength * config.element_spacing
    return np.exp(1j * phase * np.sin(angle)[..., None] * n)


def channel_gain(ap: int, target, config: ScenarioConfig) -> complex:
    """beta = sqrt(lambda / (4 pi r0^2)) exp(-j 2 pi r0 / lambda)."""
    lam = config.carrier_wavelength
    r0 = element_distances(ap, target, config)[..., config.n_half]
    return np.sqrt(lam / (4.0 * np.pi * r0**2)) * np.exp(-2j * np.pi * r0 / lam)


def channel(ap: int, user: int, config: ScenarioConfig, target=None) -> np.ndarray:
    """LOS channel h = beta * a from AP ``ap`` to ``user`` (or to ``target``)."""
    if target is None:
        target = config.user_positions_array[user]
    return channel_gain(ap, target, config) * steering_vector(ap, target, config)


def steering_derivative(ap: int, user: int, axis, config: ScenarioConfig,
                        target=None, exact: bool = True) -> np.ndarray:
    """Derivative of the steering vector w.r.t. the user's x or y coordinate.

    With ``exact=True`` this is the derivative of the center-referenced
    vector, ``-j 2pi/lambda (dr_n/dc - dr_0/dc) a_n``. With ``exact=False``
    the reference term is dropped, ``-j 2pi/lambda dr_n/dc a_n``, which is the
    form whose extra component is absorbed by the free complex path gain; the
    effective Fisher information is the same either way.
    """
    q = _axis_index(axis)
    if target is None:
        target = config.user_positions_array[user]
    target = np.asarray(target, dtype=float)
    pos = element_positions(ap, config)
    r = element_distances(ap, target, config)
    dr = (target[..., None, q] - pos[:, q]) / r
    if exact:
        dr = dr - dr[..., config.n_half:config.n_half + 1]
    a = steering_vectors(ap, target, config)
    return -2j * np.pi / config.carrier_wavelength * dr * a


@dataclass(frozen=True)
class ChannelSet:
    """Per (user, AP) responses at a set of user positions.

    Arrays are indexed ``[k, m, ...]``; ``derivatives[k, m, q]`` is the exact
    steering derivative w.r.t. coordinate ``q`` of user ``k``.
    """

    positions: np.ndarray
    steering: np.ndarray
    gains: np.ndarray
    derivatives: np.ndarray

    @property
    def n_users(self) -> int:
        return self.steering.shape[0]

    @property
    def n_aps(self) -> int:
        return self.steering.shape[1]

    @property
    def n_elements(self) -> int:
        return self.steering.shape[2]

    @property
    def channels(self) -> np.ndarray:
        """h[k, m] = beta[k, m] * a[k, m]."""
        return self.gains[..., None] * self.steering

    @property
    def stacked(self) -> np.ndarray:
        """(K, M * N_t) stacked channels, AP order 1..M."""
        return self.channels.reshape(self.n_users, -1)

    @property
    def norms(self) -> np.ndarray:
        """||h[k, m]|| = |beta| sqrt(N_t)."""
        return np.abs(self.gains) * np.sqrt(self.n_elements)


def channel_set(config: ScenarioConfig, positions=None) -> ChannelSet:
    """Evaluate steering vectors, gains and derivatives for every (user, AP)."""
    pos = config.user_positions_array if positions is None else np.asarray(positions, float).reshape(-1, 2)
    K, M, N = len(pos), config.n_aps, config.n_elements
    steering = np.empty((K, M, N), complex)
    gains = np.empty((K, M), complex)
    derivs = np.empty((K, M, 2, N), complex)
    for m in range(M):
        steering[:, m] = steering_vectors(m, pos, config)
        gains[:, m] = channel_gain(m, pos, config)
        for q in range(2):
            derivs[:, m, q] = steering_derivative(m, None, q, config, target=pos)
    for arr in (pos, steering, gains, derivs):
        arr.setflags(write=False)
    return ChannelSet(positions=pos, steering=steering, gains=gains, derivatives=derivs)


@dataclass(frozen=True)
class UncertaintyBounds:
    """Per (user, AP) channel-error radii and the CRLB they came from."""

    eps: np.ndarray
    crlb_total: float

    def scaled(self, factor: float) -> "UncertaintyBounds":
        return UncertaintyBounds(self.eps * factor, self.crlb_total * factor**2)


def uncertainty_bounds(crlb_total: float, channels: ChannelSet,
                       config: ScenarioConfig) -> UncertaintyBounds:
    """eps[k, m] = alpha_e * sqrt(total CRLB) * ||h[k, m]||."""
    if crlb_total < 0:
        raise ValueError("crlb_total must be nonnegative")
    eps = config.error_coefficient * np.sqrt(crlb_total) * channels.norms
    return UncertaintyBounds(eps=eps, crlb_total=float(crlb_total))
