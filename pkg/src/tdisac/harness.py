"""Batch experiments writing CSV/JSON tables.

Every CSV starts with a header row and every data row carries the scenario
digest, the seed, the scheme (or ``-``) and the package version, so tables
from different runs can be concatenated safely. Files are written to a
temporary name and renamed, so a cell is either complete or absent.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__, kernels
from .array_channel import channel_set
from .errors import SensingInfeasibleError
from .music import (FAR_FIELD, NEAR_FIELD, band_reference, export_peaks_json, export_spectrum_csv,
                    match_peaks, music_spectrum, simulate_echoes, spurious_peaks)
from .scenario import ScenarioConfig, dbm_to_watt, default_scenario, watt_to_dbm
from .schemes import SCHEMES, Tolerances, design_sensing, run_scheme
from .sensing import optimize_sensing_covariance

log = logging.getLogger(__name__)

EXPERIMENTS = ("error-model", "crlb-sweep", "music", "optimize", "convergence", "eta-sweep")


@dataclass
class ExperimentSpec:
    """What to run and where to write it.

    Power axes are in dBm, thresholds in m^2. Empty axes fall back to the
    scenario's own value, except ``seeds`` which must be nonempty.
    """

    experiment: str
    scenario: ScenarioConfig = field(default_factory=default_scenario)
    out_dir: str = "results"
    comm_powers_dbm: tuple = ()
    sensing_powers_dbm: tuple = ()
    crlb_thresholds: tuple = ()
    seeds: tuple = (0,)
    schemes: tuple = SCHEMES
    eta0: float = 0.5
    tolerances: Tolerances = field(default_factory=Tolerances)
    workers: int = 1
    # error model
    n_samples: int = 100_000
    radii: tuple = tuple(np.round(np.linspace(0.0, 0.05, 11), 6))
    antenna_counts: tuple = (21, 41, 61)
    distance: float = 25.0
    location_angles_deg: tuple = (30.0, 60.0, 90.0)

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}; expected one of {EXPERIMENTS}")
        if not self.seeds:
            raise ValueError("at least one seed is required")
        for name in ("radii", "antenna_counts", "location_angles_deg", "schemes"):
            if not getattr(self, name):
                raise ValueError(f"{name} must be nonempty")
        unknown = set(self.schemes) - set(SCHEMES)
        if unknown:
            raise ValueError(f"unknown schemes {sorted(unknown)}")

    def axis(self, name, fallback):
        values = getattr(self, name)
        return tuple(values) if values else (fallback,)


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------
def _fmt(v):
    if isinstance(v, float):
        return repr(float(v)) if math.isfinite(v) else str(v)
    if isinstance(v, (np.floating,)):
        return _fmt(float(v))
    return str(v)


def write_csv(path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write(path, buf.getvalue())


def _atomic_write(path, text) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _tags(config, seed, scheme="-"):
    return [config.digest(), seed, scheme, __version__]


TAG_COLUMNS = ["scenario", "seed", "scheme", "version"]


# ---------------------------------------------------------------------------
# error model
# ---------------------------------------------------------------------------
def linear_fit_through_origin(x, y):
    """Slope of the zero-intercept least-squares line and its R^2.

    R^2 is the uncentered form ``1 - SS_res / sum(y^2)`` that goes with a
    fit forced through the origin.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    slope = float(x @ y / (x @ x))
    resid = y - slope * x
    ss_tot = float(y @ y)
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return slope, r2


def error_model_curve(n_elements: int, angle_deg: float, radii, config: ScenarioConfig,
                      distance: float = 25.0, n_samples: int = 100_000, seed: int = 0):
    """Mean ||h(c + dr) - h(c)|| over uniform error directions for each |dr|.

    A single horizontal ULA centered at the origin with ``n_elements``
    elements at the scenario spacing; the user sits at ``distance`` meters
    in direction ``angle_deg``.
    """
    d = config.element_spacing
    n = (n_elements - 1) // 2
    elements = np.column_stack([np.arange(-n, n + 1) * d, np.zeros(n_elements)])
    center = np.zeros(2)
    th = math.radians(angle_deg)
    user = np.array([distance * math.cos(th), distance * math.sin(th)])
    rng = np.random.default_rng(seed)
    angles = rng.uniform(0.0, 2.0 * np.pi, n_samples)
    return np.array([kernels.mean_channel_error(elements, center, user, float(r), angles,
                                                config.carrier_wavelength) for r in radii])


def _odd(n: int) -> int:
    return n if n % 2 else n + 1


def run_error_model(spec: ExperimentSpec) -> dict:
    cfg = spec.scenario
    seed = spec.seeds[0]
    radii = np.asarray(spec.radii, dtype=float)
    rows, fits = [], []
    cases = [(_odd(cfg.n_elements), a) for a in spec.location_angles_deg]
    cases += [(_odd(n), spec.location_angles_deg[0]) for n in spec.antenna_counts]
    seen = set()
    for n_el, angle in cases:
        if (n_el, angle) in seen:
            continue
        seen.add((n_el, angle))
        curve = error_model_curve(n_el, angle, radii, cfg, spec.distance, spec.n_samples, seed)
        slope, r2 = linear_fit_through_origin(radii, curve)
        tag = f"N{n_el}@{angle:g}deg"
        fits.append({"tag": tag, "n_elements": n_el, "angle_deg": angle, "slope": slope, "r2": r2,
                     "intercept_value": float(curve[0])})
        for r, v in zip(radii, curve):
            rows.append([r, float(v), tag, n_el, angle] + _tags(cfg, seed))
    write_csv(os.path.join(spec.out_dir, "error_model.csv"),
              ["delta_r_m", "mean_delta_h", "tag", "n_elements", "angle_deg"] + TAG_COLUMNS, rows)
    write_csv(os.path.join(spec.out_dir, "error_model_fit.csv"),
              ["tag", "n_elements", "angle_deg", "slope", "r2"] + TAG_COLUMNS,
              [[f["tag"], f["n_elements"], f["angle_deg"], f["slope"], f["r2"]] + _tags(cfg, seed)
               for f in fits])
    return {"rows": rows, "fits": fits}


# ---------------------------------------------------------------------------
# CRLB sweep
# ---------------------------------------------------------------------------
# (number of APs, antennas per AP, sensing power multiplier): equal total
# antenna count and equal total sensing power across the three layouts
FAIRNESS = ((1, 63, 3.0), (2, 31, 1.5), (3, 21, 1.0))


def layout(config: ScenarioConfig, n_aps: int, n_elements: int, power_factor: float,
           sensing_power_dbm: float) -> ScenarioConfig:
    """The first ``n_aps`` APs of ``config`` with the given array size and power."""
    return config.replace(ap_centers=config.ap_centers[:n_aps],
                          ap_orientations=config.ap_orientations[:n_aps],
                          n_elements=n_elements,
                          sensing_power_budget=power_factor * dbm_to_watt(sensing_power_dbm))


def run_crlb_sweep(spec: ExperimentSpec) -> dict:
    cfg = spec.scenario
    seed = spec.seeds[0]
    powers = spec.sensing_powers_dbm or (30.0, 35.0, 40.0, 45.0, 50.0)
    rows = []
    table = {}
    for n_aps, n_el, factor in FAIRNESS:
        for p in powers:
            sub = layout(cfg, n_aps, n_el, factor, p).replace(rcs_seed=seed)
            ch = channel_set(sub)
            _, res = optimize_sensing_covariance(ch, sub)
            value = math.sqrt(res.crlb_bar)
            table[(n_aps, p)] = value
            rows.append([p, value, n_aps, n_el] + _tags(sub, seed))
    write_csv(os.path.join(spec.out_dir, "crlb_sweep.csv"),
              ["sensing_power_dbm", "sqrt_crlb_bar", "n_aps", "n_elements"] + TAG_COLUMNS, rows)
    return {"rows": rows, "table": table}


# ---------------------------------------------------------------------------
# MUSIC
# ---------------------------------------------------------------------------
def run_music(spec: ExperimentSpec, eta: float = 0.5) -> dict:
    cfg = spec.scenario
    seed = spec.seeds[0]
    ch = channel_set(cfg)
    design = design_sensing(cfg, ch)
    batch = simulate_echoes(design.psi, eta, ch, cfg, noise_seed=seed)
    truths = cfg.user_positions_array
    out = {}
    rows = []
    for response in (NEAR_FIELD, FAR_FIELD):
        spec_ = music_spectrum(batch, cfg, response)
        _, errors = match_peaks(spec_.peak_positions, truths)
        ghosts = spurious_peaks(spec_, truths)
        stem = response.replace("-", "_")
        export_spectrum_csv(spec_, os.path.join(spec.out_dir, f"music_{stem}.csv"),
                            reference=band_reference(spec_, truths))
        export_peaks_json(spec_, os.path.join(spec.out_dir, f"music_{stem}_peaks.json"))
        out[response] = {"spectrum": spec_, "errors": errors, "spurious": ghosts}
        for k, e in enumerate(errors):
            rows.append([response, k, float(e), len(ghosts)] + _tags(cfg, seed))
    write_csv(os.path.join(spec.out_dir, "music_summary.csv"),
              ["response", "user", "position_error_m", "spurious_peaks"] + TAG_COLUMNS, rows)
    return out


# ---------------------------------------------------------------------------
# scheme optimization
# ---------------------------------------------------------------------------
def _cell(args):
    cfg, scheme, eta0, tol = args
    try:
        res = run_scheme(scheme, cfg, eta0, tol)
    except SensingInfeasibleError as exc:
        return {"status": "sensing-infeasible", "error": str(exc)}
    except Exception as exc:  # a failed cell does not stop the sweep
        log.exception("cell failed")
        return {"status": "error", "error": f"{type(exc).__name__}: {exc}"}
    return {"status": "ok", "result": res}


def _grid(spec: ExperimentSpec):
    cfg = spec.scenario
    cells = []
    for seed in spec.seeds:
        for pc in spec.axis("comm_powers_dbm", watt_to_dbm(cfg.comm_power_budget)):
            for ps in spec.axis("sensing_powers_dbm", watt_to_dbm(cfg.sensing_power_budget)):
                for th in spec.axis("crlb_thresholds", cfg.crlb_threshold):
                    sub = cfg.replace(comm_power_budget=dbm_to_watt(pc),
                                      sensing_power_budget=dbm_to_watt(ps),
                                      crlb_threshold=float(th), rcs_seed=int(seed))
                    for scheme in spec.schemes:
                        cells.append(((seed, pc, ps, th, scheme), sub))
    return cells


def run_optimize(spec: ExperimentSpec, name: str = "optimize") -> dict:
    cells = _grid(spec)
    jobs = [(sub, key[4], spec.eta0, spec.tolerances) for key, sub in cells]
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            outcomes = list(pool.map(_cell, jobs))
    else:
        outcomes = [_cell(j) for j in jobs]
    rows, results = [], {}
    os.makedirs(spec.out_dir, exist_ok=True)
    for (key, sub), out in zip(cells, outcomes):
        seed, pc, ps, th, scheme = key
        if out["status"] == "ok":
            r = out["result"]
            results[key] = r
            rows.append([pc, ps, th, r.rate, r.eta, r.eta_bar, r.iterations, "ok"]
                        + _tags(sub, seed, scheme))
            fname = f"{name}_{scheme}_s{seed}_pc{pc:g}_ps{ps:g}_th{th:g}.json"
            _atomic_write(os.path.join(spec.out_dir, fname), r.to_json())
        else:
            results[key] = out
            rows.append([pc, ps, th, "nan", "nan", "nan", 0, out["status"]]
                        + _tags(sub, seed, scheme))
    write_csv(os.path.join(spec.out_dir, f"{name}.csv"),
              ["comm_power_dbm", "sensing_power_dbm", "crlb_threshold", "rate_bits", "eta",
               "eta_bar", "ao_iterations", "status"] + TAG_COLUMNS, rows)
    return {"rows": rows, "results": results}


def run_eta_sweep(spec: ExperimentSpec) -> dict:
    """eta versus sensing power for every scheme."""
    if not spec.sensing_powers_dbm:
        spec = _with(spec, sensing_powers_dbm=(35.0, 40.0, 45.0))
    return run_optimize(spec, name="eta_sweep")


def run_convergence(spec: ExperimentSpec) -> dict:
    cfg = spec.scenario
    seed = spec.seeds[0]
    rows = []
    results = {}
    for scheme in [s for s in spec.schemes if s != "ei"] or ["main"]:
        res = run_scheme(scheme, cfg.replace(rcs_seed=seed), spec.eta0, spec.tolerances)
        results[scheme] = res
        for it, (eta, rate) in enumerate(zip(res.eta_trace, res.rate_trace), start=1):
            rows.append([it, eta, rate, spec.eta0] + _tags(cfg, seed, scheme))
    write_csv(os.path.join(spec.out_dir, f"convergence_eta{spec.eta0:g}.csv"),
              ["iteration", "eta", "relaxed_rate_bits", "eta0"] + TAG_COLUMNS, rows)
    return results


def _with(spec, **changes):
    return replace(spec, **changes)


RUNNERS = {
    "error-model": run_error_model,
    "crlb-sweep": run_crlb_sweep,
    "music": run_music,
    "optimize": run_optimize,
    "convergence": run_convergence,
    "eta-sweep": run_eta_sweep,
}


def run(spec: ExperimentSpec):
    return RUNNERS[spec.experiment](spec)


def summary_json(obj) -> str:
    """Compact JSON of plain values (used by the CLI for console output)."""
    return json.dumps(obj, indent=1, sort_keys=True, default=str)
