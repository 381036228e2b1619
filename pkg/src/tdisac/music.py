"""Echo simulation and 2-D MUSIC localization of the users.

The echo received by all APs during one sensing snapshot is

    y[t] = sum_k H_k s[t] + n[t],   s[t] ~ CN(0, Psi),   n[t] ~ CN(0, sigma^2 I),

and ``H_k`` has column space ``span{e_m (x) a_km}_m``, so the signal subspace
of the echo covariance has dimension ``K M``. A candidate position ``c`` is
scored by how far the stacked response ``[a_1(c); ...; a_M(c)]`` is from the
noise subspace.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.optimize import minimize

from . import kernels
from .array_channel import ChannelSet, aod, element_positions, far_field_steering, steering_vector
from .errors import InsufficientSnapshotsError
from .fim_crlb import composite_channel
from .scenario import ScenarioConfig

log = logging.getLogger(__name__)

NEAR_FIELD = "near-field"
FAR_FIELD = "far-field"
REGULARIZATION = 1e-12
BANDS = ((0.0, "red"), (-5.0, "green"), (-7.0, "cyan"))


def snapshot_count(eta: float, config: ScenarioConfig) -> int:
    """floor((1 - eta) T / tau_s), guarded against round-off just below an integer."""
    ratio = (1.0 - eta) * config.block_duration / config.sensing_slot
    return int(math.floor(ratio + 1e-9))


@dataclass(frozen=True)
class EchoBatch:
    """Echo snapshots Y (M N_t, tau) with the draw that produced them."""

    Y: np.ndarray
    eta: float
    rcs: np.ndarray
    noise_seed: int
    n_users: int

    @property
    def tau(self) -> int:
        return self.Y.shape[1]

    @property
    def covariance(self) -> np.ndarray:
        return self.Y @ self.Y.conj().T / self.tau


def _psd_factor(block: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh((block + block.conj().T) / 2)
    return V * np.sqrt(np.clip(w, 0.0, None))


def simulate_echoes(psi, eta: float, channels: ChannelSet, config: ScenarioConfig,
                    noise_seed: int = 0, signal_dim: int | None = None) -> EchoBatch:
    """Draw ``tau`` echo snapshots for the sensing covariance ``psi``.

    ``signal_dim`` (default ``K M``) is the subspace dimension MUSIC will
    use; at least ``signal_dim + 1`` snapshots are required.
    """
    blocks = np.asarray(getattr(psi, "blocks", psi))
    K, M, N = channels.n_users, channels.n_aps, channels.n_elements
    tau = snapshot_count(eta, config)
    need = (K * M if signal_dim is None else signal_dim) + 1
    if tau < need:
        raise InsufficientSnapshotsError(
            f"{tau} snapshots for eta={eta:.3f}; at least {need} are needed")
    rng = np.random.default_rng(noise_seed)
    F = np.zeros((M * N, M * N), complex)
    for m, b in enumerate(blocks):
        F[m * N:(m + 1) * N, m * N:(m + 1) * N] = _psd_factor(b)
    z = (rng.standard_normal((M * N, tau)) + 1j * rng.standard_normal((M * N, tau))) / np.sqrt(2)
    S = F @ z
    H = composite_channel(channels, config)
    noise = (rng.standard_normal((M * N, tau)) + 1j * rng.standard_normal((M * N, tau)))
    Y = H @ S + np.sqrt(config.noise_power / 2) * noise
    return EchoBatch(Y=Y, eta=eta, rcs=config.rcs.copy(), noise_seed=noise_seed, n_users=K)


@dataclass(frozen=True)
class SearchGrid:
    x_min: float = 0.0
    x_max: float = 70.0
    y_min: float = 0.0
    y_max: float = 70.0
    step: float = 0.25

    def __post_init__(self):
        if not (self.step > 0 and self.x_max >= self.x_min and self.y_max >= self.y_min):
            raise ValueError("grid must have a positive step and nonempty extents")

    @property
    def xs(self) -> np.ndarray:
        n = int(round((self.x_max - self.x_min) / self.step)) + 1
        return self.x_min + self.step * np.arange(n)

    @property
    def ys(self) -> np.ndarray:
        n = int(round((self.y_max - self.y_min) / self.step)) + 1
        return self.y_min + self.step * np.arange(n)

    def contains(self, p) -> bool:
        return self.x_min <= p[0] <= self.x_max and self.y_min <= p[1] <= self.y_max


@dataclass
class Peak:
    position: np.ndarray
    value: float
    grid_position: np.ndarray
    refined: bool = False
    iterations: int = 0

    def to_dict(self) -> dict:
        return {"x": float(self.position[0]), "y": float(self.position[1]), "value": self.value,
                "grid_x": float(self.grid_position[0]), "grid_y": float(self.grid_position[1]),
                "refined": self.refined, "iterations": self.iterations}


@dataclass
class MusicSpectrum:
    """Pseudo-spectrum on a grid, ``values[iy, ix]``, and the selected peaks."""

    grid: SearchGrid
    values: np.ndarray
    response: str
    peaks: list = field(default_factory=list)
    candidates: list = field(default_factory=list)

    @property
    def peak_positions(self) -> np.ndarray:
        return np.array([p.position for p in self.peaks])


class MusicEstimator:
    """Noise-subspace projector of one echo batch with a response model."""

    def __init__(self, batch: EchoBatch, config: ScenarioConfig, response: str = NEAR_FIELD,
                 signal_dim: int | None = None):
        if response not in (NEAR_FIELD, FAR_FIELD):
            raise ValueError(f"unknown response model {response!r}")
        self.config = config
        self.response = response
        M = config.n_aps
        self.elements = np.array([element_positions(m, config) for m in range(M)])
        self.centers = config.ap_centers_array
        dim = batch.n_users * M if signal_dim is None else signal_dim
        R = batch.covariance
        try:
            w, V = np.linalg.eigh((R + R.conj().T) / 2)
        except np.linalg.LinAlgError as exc:
            raise ArithmeticError(f"eigendecomposition of the echo covariance failed: {exc}") from exc
        self.eigenvalues = w[::-1]
        self.signal = np.ascontiguousarray(V[:, ::-1][:, :dim])
        self.size = V.shape[0]

    def denominator(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        den = kernels.music_denominator(points, self.elements, self.centers,
                                        self.config.carrier_wavelength, self.signal,
                                        self.response == FAR_FIELD)
        return np.maximum(den, 0.0)

    def __call__(self, points) -> np.ndarray:
        return 1.0 / (self.denominator(points) + REGULARIZATION * self.size)


def response_vector(point, config: ScenarioConfig, response: str = NEAR_FIELD) -> np.ndarray:
    """Stacked response ``[a_1(c); ...; a_M(c)]`` built from the array module."""
    parts = []
    for m in range(config.n_aps):
        if response == NEAR_FIELD:
            parts.append(steering_vector(m, point, config))
        else:
            parts.append(far_field_steering(m, aod(m, point, config), config))
    return np.concatenate(parts)


def _local_maxima(values: np.ndarray) -> np.ndarray:
    filt = maximum_filter(values, size=3, mode="nearest")
    iy, ix = np.nonzero(values >= filt)
    return np.column_stack([iy, ix])


def music_spectrum(batch: EchoBatch, config: ScenarioConfig, response: str = NEAR_FIELD,
                   grid: SearchGrid | None = None, n_peaks: int | None = None,
                   suppression: float = 2.0, refine: bool = True, refine_tol: float = 0.01,
                   signal_dim: int | None = None) -> MusicSpectrum:
    """Evaluate the pseudo-spectrum and pick the ``n_peaks`` (default K) largest peaks.

    Peaks are local maxima taken in decreasing order, skipping any within
    ``suppression`` meters of an accepted one, then refined by Nelder-Mead
    to ``refine_tol`` meters. ``candidates`` keeps every suppressed-list
    peak (unrefined) in rank order.
    """
    grid = SearchGrid() if grid is None else grid
    xs, ys = grid.xs, grid.ys
    if xs.size == 0 or ys.size == 0:
        raise ValueError("empty search grid")
    est = MusicEstimator(batch, config, response, signal_dim)
    X, Yg = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Yg.ravel()])
    values = est(pts).reshape(X.shape)
    if not np.all(np.isfinite(values)):
        raise ArithmeticError("non-finite pseudo-spectrum values")
    n_peaks = batch.n_users if n_peaks is None else n_peaks

    idx = _local_maxima(values)
    order = np.argsort(-values[idx[:, 0], idx[:, 1]], kind="stable")
    accepted = []
    for iy, ix in idx[order]:
        p = np.array([xs[ix], ys[iy]])
        if all(np.hypot(*(p - q.grid_position)) >= suppression for q in accepted):
            accepted.append(Peak(position=p, value=float(values[iy, ix]), grid_position=p))
    candidates = [Peak(q.position.copy(), q.value, q.grid_position.copy()) for q in accepted]
    peaks = accepted[:n_peaks]
    if refine:
        for pk in peaks:
            _refine(pk, est, grid, refine_tol)
    return MusicSpectrum(grid=grid, values=values, response=response, peaks=peaks,
                         candidates=candidates)


def _refine(peak: Peak, est: MusicEstimator, grid: SearchGrid, tol: float) -> None:
    def objective(p):
        if not grid.contains(p):
            return np.inf
        return float(est.denominator(p[None])[0])

    step = grid.step
    simplex = peak.grid_position + np.array([[0.0, 0.0], [step / 2, 0.0], [0.0, step / 2]])
    out = minimize(objective, peak.grid_position, method="Nelder-Mead",
                   options={"initial_simplex": simplex, "xatol": tol, "fatol": 0.0,
                            "maxiter": 500})
    if np.isfinite(out.fun) and np.hypot(*(out.x - peak.grid_position)) <= 2 * step:
        peak.position = np.asarray(out.x, dtype=float)
        peak.value = float(est(out.x[None])[0])
        peak.refined = True
    peak.iterations = int(out.nit)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------
def match_peaks(peaks: np.ndarray, truths: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Greedy nearest matching of estimated to true positions.

    Returns ``(assignment, errors)`` with ``assignment[k]`` the peak index
    matched to user ``k`` (-1 when peaks run out).
    """
    peaks = np.atleast_2d(peaks)
    truths = np.atleast_2d(truths)
    D = np.linalg.norm(truths[:, None] - peaks[None], axis=2) if len(peaks) else np.zeros((len(truths), 0))
    assign = -np.ones(len(truths), int)
    errors = np.full(len(truths), np.inf)
    used = set()
    for flat in np.argsort(D, axis=None):
        k, j = np.unravel_index(flat, D.shape)
        if assign[k] >= 0 or j in used:
            continue
        assign[k], errors[k] = j, D[k, j]
        used.add(j)
    return assign, errors


def spurious_peaks(spectrum: MusicSpectrum, truths, radius: float = 2.0) -> list:
    """Ranked peaks farther than ``radius`` from every user that outrank some user.

    A user's own level is the largest spectrum value within ``radius`` of it.
    """
    truths = np.atleast_2d(truths)
    xs, ys = spectrum.grid.xs, spectrum.grid.ys
    X, Y = np.meshgrid(xs, ys)
    levels = []
    for t in truths:
        near = np.hypot(X - t[0], Y - t[1]) <= radius
        levels.append(spectrum.values[near].max() if near.any() else 0.0)
    weakest = min(levels)
    out = []
    for rank, pk in enumerate(spectrum.candidates):
        far = np.all(np.linalg.norm(truths - pk.grid_position, axis=1) > radius)
        if far and pk.value > weakest:
            out.append((rank, pk))
    return out


def intensity_bands(values: np.ndarray, reference: float) -> np.ndarray:
    """Band tags of ``10 log10(values / reference)``: red >= 0, green >= -5, cyan >= -7 dB, else blue."""
    db = 10.0 * np.log10(np.asarray(values) / reference)
    out = np.full(db.shape, "blue", dtype=object)
    for threshold, name in reversed(BANDS):
        out[db >= threshold] = name
    return out


def band_reference(spectrum: MusicSpectrum, positions) -> float:
    """Minimum over the given (user) positions of the grid spectrum at the nearest grid point."""
    xs, ys = spectrum.grid.xs, spectrum.grid.ys
    vals = []
    for p in np.atleast_2d(positions):
        ix = int(np.clip(np.round((p[0] - xs[0]) / spectrum.grid.step), 0, xs.size - 1))
        iy = int(np.clip(np.round((p[1] - ys[0]) / spectrum.grid.step), 0, ys.size - 1))
        vals.append(spectrum.values[iy, ix])
    return float(min(vals))


def export_spectrum_csv(spectrum: MusicSpectrum, path, reference: float | None = None) -> None:
    """Rows ``x, y, value, band`` in grid order (y outer, x inner)."""
    if reference is None:
        reference = band_reference(spectrum, spectrum.peak_positions)
    bands = intensity_bands(spectrum.values, reference)
    xs, ys = spectrum.grid.xs, spectrum.grid.ys
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "value", "band"])
        for iy, y in enumerate(ys):
            for ix, x in enumerate(xs):
                w.writerow([f"{x:.4f}", f"{y:.4f}", f"{spectrum.values[iy, ix]:.10e}", bands[iy, ix]])


def export_peaks_json(spectrum: MusicSpectrum, path) -> None:
    doc = {"response": spectrum.response, "peaks": [p.to_dict() for p in spectrum.peaks]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)
