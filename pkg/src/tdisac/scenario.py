"""Simulation scenario: geometry, power budgets, timing and error-model constants.

Scenario files are YAML documents. Lengths are in meters, powers in dBm,
times in milliseconds. Internally everything is SI (watts, seconds).

Example document (the default deployment)::

    aps:
      - center: [30, 70]
      - center: [10, 20]
        offset: [0.0265, 0.0]     # optional inter-element step (dx, dy)
      - center: [60, 30]
    users: [[20, 30], [25, 40], [40, 30], [35, 60]]
    n_elements: 21
    element_spacing_m: 0.0265
    carrier_frequency_ghz: 28
    noise_power_dbm: -70
    block_duration_ms: 100
    sensing_slot_ms: 1
    comm_power_dbm: 30
    sensing_power_dbm: 40
    crlb_threshold_m2: 1.0e-11
    error_coefficient: 373
    rcs_seed: 0
    rcs_variance: 1.0           # E|rho|^2 of the radar cross sections

Only ``aps`` and ``users`` are required; every other key falls back to the
default deployment value. ``wavelength_m`` may replace
``carrier_frequency_ghz``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import math
import os
import warnings
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import yaml

from .errors import FarFieldWarning, ScenarioError

SPEED_OF_LIGHT = 299_792_458.0

_DEFAULT_AP_CENTERS = ((30.0, 70.0), (10.0, 20.0), (60.0, 30.0))
_DEFAULT_USERS = ((20.0, 30.0), (25.0, 40.0), (40.0, 30.0), (35.0, 60.0))
_DEFAULT_APERTURE = 0.53
_DEFAULT_N_ELEMENTS = 21


def dbm_to_watt(p_dbm):
    if np.ndim(p_dbm):
        return 10.0 ** ((np.asarray(p_dbm, dtype=float) - 30.0) / 10.0)
    return 10.0 ** ((float(p_dbm) - 30.0) / 10.0)


def watt_to_dbm(p_w):
    return 10.0 * math.log10(float(p_w)) + 30.0


def _pairs(value, name):
    try:
        arr = np.asarray(value, dtype=float)
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"{name} must be a list of 2D positions") from exc
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ScenarioError(f"{name} must be a list of 2D positions, got shape {arr.shape}")
    return tuple((float(x), float(y)) for x, y in arr)


@dataclass(frozen=True)
class ScenarioConfig:
    """Immutable system description (SI units).

    Positions are stored as tuples so the config is hashable; use the
    ``*_array`` properties for numpy views.
    """

    ap_centers: tuple
    user_positions: tuple
    ap_orientations: tuple = None
    n_elements: int = _DEFAULT_N_ELEMENTS
    element_spacing: float = _DEFAULT_APERTURE / (_DEFAULT_N_ELEMENTS - 1)
    carrier_wavelength: float = SPEED_OF_LIGHT / 28e9
    noise_power: float = 1e-10
    block_duration: float = 0.1
    sensing_slot: float = 1e-3
    comm_power_budget: float = 1.0
    sensing_power_budget: float = 10.0
    crlb_threshold: float = 1e-11
    error_coefficient: float = 373.0
    rcs_seed: int = 0
    rcs_variance: float = 1.0
    _rcs: Any = field(default=None, init=False, repr=False, compare=False, hash=False)

    def __post_init__(self):
        set_ = object.__setattr__
        set_(self, "ap_centers", _pairs(self.ap_centers, "ap_centers"))
        set_(self, "user_positions", _pairs(self.user_positions, "user_positions"))
        if self.ap_orientations is None:
            set_(self, "ap_orientations", tuple((float(self.element_spacing), 0.0) for _ in self.ap_centers))
        else:
            set_(self, "ap_orientations", _pairs(self.ap_orientations, "ap_orientations"))
        set_(self, "n_elements", int(self.n_elements))
        set_(self, "rcs_seed", int(self.rcs_seed))
        for name in ("element_spacing", "carrier_wavelength", "noise_power", "block_duration",
                     "sensing_slot", "comm_power_budget", "sensing_power_budget",
                     "crlb_threshold", "error_coefficient", "rcs_variance"):
            set_(self, name, float(getattr(self, name)))
        self._validate()
        set_(self, "_rcs", None)

    def _validate(self):
        if len(self.ap_centers) < 1:
            raise ScenarioError("at least one AP is required")
        if len(self.ap_orientations) != len(self.ap_centers):
            raise ScenarioError("ap_orientations must have one entry per AP")
        n = self.n_elements
        if n % 2 == 0:
            raise ScenarioError(f"n_elements must be odd (got {n})")
        if n < 3:
            raise ScenarioError(f"n_elements must be >= 3 (got {n})")
        positive = ("element_spacing", "carrier_wavelength", "noise_power", "block_duration",
                    "sensing_slot", "comm_power_budget", "sensing_power_budget", "crlb_threshold",
                    "rcs_variance")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ScenarioError(f"{name} must be strictly positive")
        if self.error_coefficient < 0:
            raise ScenarioError("error_coefficient must be nonnegative")
        if self.sensing_slot > self.block_duration:
            raise ScenarioError("sensing_slot must not exceed block_duration")
        d = self.element_spacing
        for m, (dx, dy) in enumerate(self.ap_orientations):
            if abs(math.hypot(dx, dy) - d) > 1e-9 * d:
                raise ScenarioError(
                    f"AP {m} element offset ({dx}, {dy}) must have norm element_spacing={d}")
        limit = rayleigh_distance(self)
        for m, c in enumerate(self.ap_centers):
            for k, u in enumerate(self.user_positions):
                dist = math.dist(c, u)
                if dist >= limit:
                    warnings.warn(
                        f"user {k} is {dist:.2f} m from AP {m}, beyond the Rayleigh "
                        f"distance {limit:.2f} m (far field)", FarFieldWarning, stacklevel=3)

    # -- derived quantities -------------------------------------------------
    @property
    def n_aps(self) -> int:
        return len(self.ap_centers)

    @property
    def n_users(self) -> int:
        return len(self.user_positions)

    @property
    def n_half(self) -> int:
        return (self.n_elements - 1) // 2

    @property
    def aperture(self) -> float:
        return (self.n_elements - 1) * self.element_spacing

    @property
    def ap_centers_array(self) -> np.ndarray:
        return np.array(self.ap_centers, dtype=float)

    @property
    def ap_orientations_array(self) -> np.ndarray:
        return np.array(self.ap_orientations, dtype=float)

    @property
    def user_positions_array(self) -> np.ndarray:
        return np.array(self.user_positions, dtype=float).reshape(-1, 2)

    @property
    def rcs(self) -> np.ndarray:
        """Radar cross sections rho[k, l, m] (user, receive AP, transmit AP)."""
        if self._rcs is None:
            rho = draw_rcs(self.rcs_seed, (self.n_users, self.n_aps, self.n_aps))
            rho *= math.sqrt(self.rcs_variance)
            rho.setflags(write=False)
            object.__setattr__(self, "_rcs", rho)
        return self._rcs

    def replace(self, **changes) -> "ScenarioConfig":
        """Copy with fields replaced (re-validated)."""
        if "element_spacing" in changes and "ap_orientations" not in changes:
            scale = changes["element_spacing"] / self.element_spacing
            changes["ap_orientations"] = tuple((dx * scale, dy * scale) for dx, dy in self.ap_orientations)
        return dataclasses.replace(self, **changes)

    def digest(self) -> str:
        """Short content hash used to tag experiment outputs."""
        return hashlib.sha256(dump_scenario(self).encode()).hexdigest()[:12]


def draw_rcs(seed: int, shape) -> np.ndarray:
    """Standard circular complex Gaussian draws CN(0, 1)."""
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(tuple(shape) + (2,))
    return (z[..., 0] + 1j * z[..., 1]) / math.sqrt(2.0)


def rayleigh_distance(config: ScenarioConfig) -> float:
    """Near-field boundary 2 D^2 / lambda with aperture D = (N_t - 1) d."""
    aperture = (config.n_elements - 1) * config.element_spacing
    return 2.0 * aperture**2 / config.carrier_wavelength


# RCS variance that places the default deployment's optimized CRLB in the
# regime where a 1e-11 m^2 threshold is met with eta around 0.8 at 40 dBm.
# With unit-variance RCS the echo SNR of the deployment is far too low for
# such thresholds (see README, "Operating regime").
CALIBRATED_RCS_VARIANCE = 1e8


def calibrated_scenario(**changes) -> ScenarioConfig:
    """Default deployment with :data:`CALIBRATED_RCS_VARIANCE`."""
    changes.setdefault("rcs_variance", CALIBRATED_RCS_VARIANCE)
    return default_scenario(**changes)


def default_scenario(**changes) -> ScenarioConfig:
    """The reference deployment: 3 APs, 4 users, 21-element ULAs at 28 GHz."""
    base = dict(ap_centers=_DEFAULT_AP_CENTERS, user_positions=_DEFAULT_USERS)
    base.update(changes)
    return ScenarioConfig(**base)


_OPTIONAL_KEYS = {
    "n_elements", "element_spacing_m", "carrier_frequency_ghz", "wavelength_m",
    "noise_power_dbm", "block_duration_ms", "sensing_slot_ms", "comm_power_dbm",
    "sensing_power_dbm", "crlb_threshold_m2", "error_coefficient", "rcs_seed", "rcs_variance",
}


def load_scenario(source) -> ScenarioConfig:
    """Build a validated config from a YAML path, YAML text or a mapping."""
    if isinstance(source, Mapping):
        doc = dict(source)
    else:
        text = source
        if isinstance(source, os.PathLike) or (isinstance(source, str) and "\n" not in source
                                               and os.path.exists(source)):
            with open(source, encoding="utf-8") as fh:
                text = fh.read()
        try:
            doc = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ScenarioError(f"malformed scenario document: {exc}") from exc
    if not isinstance(doc, Mapping):
        raise ScenarioError("scenario document must be a mapping")
    for key in ("aps", "users"):
        if key not in doc:
            raise ScenarioError(f"missing required key '{key}'")
    unknown = set(doc) - _OPTIONAL_KEYS - {"aps", "users"}
    if unknown:
        raise ScenarioError(f"unknown keys: {sorted(unknown)}")

    aps = doc["aps"]
    if not isinstance(aps, list) or not aps:
        raise ScenarioError("'aps' must be a nonempty list")
    n_elements = int(doc.get("n_elements", _DEFAULT_N_ELEMENTS))
    if "element_spacing_m" in doc:
        spacing = float(doc["element_spacing_m"])
    else:
        spacing = _DEFAULT_APERTURE / (_DEFAULT_N_ELEMENTS - 1)
    centers, offsets = [], []
    for i, ap in enumerate(aps):
        if isinstance(ap, Mapping):
            if "center" not in ap:
                raise ScenarioError(f"AP {i} is missing 'center'")
            centers.append(ap["center"])
            offsets.append(ap.get("offset", (spacing, 0.0)))
        else:
            centers.append(ap)
            offsets.append((spacing, 0.0))

    if "wavelength_m" in doc:
        wavelength = float(doc["wavelength_m"])
    else:
        wavelength = SPEED_OF_LIGHT / (float(doc.get("carrier_frequency_ghz", 28.0)) * 1e9)

    kwargs = dict(
        ap_centers=centers,
        user_positions=doc["users"],
        ap_orientations=offsets,
        n_elements=n_elements,
        element_spacing=spacing,
        carrier_wavelength=wavelength,
        noise_power=dbm_to_watt(doc.get("noise_power_dbm", -70.0)),
        block_duration=float(doc.get("block_duration_ms", 100.0)) / 1e3,
        sensing_slot=float(doc.get("sensing_slot_ms", 1.0)) / 1e3,
        comm_power_budget=dbm_to_watt(doc.get("comm_power_dbm", 30.0)),
        sensing_power_budget=dbm_to_watt(doc.get("sensing_power_dbm", 40.0)),
        crlb_threshold=float(doc.get("crlb_threshold_m2", 1e-11)),
        error_coefficient=float(doc.get("error_coefficient", 373.0)),
        rcs_seed=int(doc.get("rcs_seed", 0)),
        rcs_variance=float(doc.get("rcs_variance", 1.0)),
    )
    return ScenarioConfig(**kwargs)


def scenario_document(config: ScenarioConfig) -> dict:
    """The file-boundary representation (meters, dBm, milliseconds)."""
    return {
        "aps": [{"center": list(c), "offset": list(o)}
                for c, o in zip(config.ap_centers, config.ap_orientations)],
        "users": [list(u) for u in config.user_positions],
        "n_elements": config.n_elements,
        "element_spacing_m": config.element_spacing,
        "wavelength_m": config.carrier_wavelength,
        "noise_power_dbm": watt_to_dbm(config.noise_power),
        "block_duration_ms": config.block_duration * 1e3,
        "sensing_slot_ms": config.sensing_slot * 1e3,
        "comm_power_dbm": watt_to_dbm(config.comm_power_budget),
        "sensing_power_dbm": watt_to_dbm(config.sensing_power_budget),
        "crlb_threshold_m2": config.crlb_threshold,
        "error_coefficient": config.error_coefficient,
        "rcs_seed": config.rcs_seed,
        "rcs_variance": config.rcs_variance,
    }


def dump_scenario(config: ScenarioConfig) -> str:
    return yaml.safe_dump(scenario_document(config), sort_keys=False)
