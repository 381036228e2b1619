"""End-to-end drivers: robust design (main), error-ignorant (ei) and MRT (mrt).

Every driver designs the sensing covariance, chooses eta, designs the
communication beams and reports the worst-case common rate certified for the
final vector beams at the true error radii.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import __version__
from .array_channel import ChannelSet, UncertaintyBounds, channel_set, uncertainty_bounds
from .fim_crlb import CrlbResult, crlb_at
from .robust import (RANK_DEFECT_FLAG, BeamformerSet, bi_rbo, certify_worst_case_rate,
                     ei_bisection, extract_mrt, extract_rank_one, nominal_rate)
from .scenario import ScenarioConfig
from .sensing import SensingCovariance, optimize_sensing_covariance
from .time_allocation import eta_bar, maximize_margin, margin, project_eta

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
SCHEMES = ("main", "ei", "mrt")


@dataclass(frozen=True)
class Tolerances:
    ao: float = 1e-3
    max_ao_iterations: int = 20
    bisection: float = 1e-3
    eta_step: float = 0.01
    solver: float = 1e-8


@dataclass
class SensingDesign:
    psi: SensingCovariance
    crlb: CrlbResult

    @property
    def crlb_bar(self) -> float:
        return self.crlb.crlb_bar


def design_sensing(config: ScenarioConfig, channels: ChannelSet | None = None) -> SensingDesign:
    channels = channel_set(config) if channels is None else channels
    psi, res = optimize_sensing_covariance(channels, config)
    return SensingDesign(psi, res)


@dataclass
class SchemeResult:
    """Outcome of one scheme on one scenario.

    ``rate`` is the certified worst-case common rate (bits per block) of
    ``beams``; ``rate_trace`` holds the relaxed rate of each AO iteration and
    ``eta_trace`` the split it was computed at (the last entry is the final
    split, after projection).
    """

    scheme: str
    eta: float
    eta_bar: float
    rate: float
    gamma: float
    beams: BeamformerSet
    psi: SensingCovariance
    crlb_bar: float
    eta_trace: list = field(default_factory=list)
    rate_trace: list = field(default_factory=list)
    iterations: int = 0
    relaxed_rate: float | None = None
    nominal_rate: float | None = None
    powers: np.ndarray | None = None
    multipliers: np.ndarray | None = None
    flags: dict = field(default_factory=dict)
    scenario_digest: str = ""

    def bounds(self, channels: ChannelSet, config: ScenarioConfig) -> UncertaintyBounds:
        total = crlb_at(self.crlb_bar, self.eta, config.sensing_slot, config.block_duration)
        return uncertainty_bounds(total, channels, config)

    def recertify(self, config: ScenarioConfig, tol_b: float = 1e-3):
        channels = channel_set(config)
        return certify_worst_case_rate(self.beams, self.eta, self.bounds(channels, config),
                                       channels, config, tol_b=tol_b)

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict:
        def cplx(a):
            a = np.asarray(a)
            return {"re": a.real.tolist(), "im": a.imag.tolist()}

        return {
            "schema_version": SCHEMA_VERSION,
            "package_version": __version__,
            "scheme": self.scheme,
            "scenario_digest": self.scenario_digest,
            "eta": self.eta,
            "eta_bar": self.eta_bar,
            "rate": self.rate,
            "gamma": self.gamma,
            "relaxed_rate": self.relaxed_rate,
            "nominal_rate": self.nominal_rate,
            "crlb_bar": self.crlb_bar,
            "iterations": self.iterations,
            "eta_trace": list(map(float, self.eta_trace)),
            "rate_trace": list(map(float, self.rate_trace)),
            "flags": _jsonable(self.flags),
            "n_aps": self.beams.n_aps,
            "beams": cplx(self.beams.vectors),
            "psi": cplx(self.psi.blocks),
            "powers": None if self.powers is None else cplx(self.powers),
            "multipliers": None if self.multipliers is None else np.asarray(self.multipliers).tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "SchemeResult":
        if doc.get("schema_version") != SCHEMA_VERSION:
            raise ValueError(f"unsupported schema version {doc.get('schema_version')!r}")

        def arr(d):
            return None if d is None else np.asarray(d["re"]) + 1j * np.asarray(d["im"])

        return cls(scheme=doc["scheme"], eta=doc["eta"], eta_bar=doc["eta_bar"], rate=doc["rate"],
                   gamma=doc["gamma"],
                   beams=BeamformerSet(doc["n_aps"], vectors=arr(doc["beams"])),
                   psi=SensingCovariance(arr(doc["psi"])), crlb_bar=doc["crlb_bar"],
                   eta_trace=doc["eta_trace"], rate_trace=doc["rate_trace"],
                   iterations=doc["iterations"], relaxed_rate=doc["relaxed_rate"],
                   nominal_rate=doc["nominal_rate"], powers=arr(doc["powers"]),
                   multipliers=None if doc["multipliers"] is None else np.asarray(doc["multipliers"]),
                   flags=doc["flags"], scenario_digest=doc["scenario_digest"])

    @classmethod
    def from_json(cls, text: str) -> "SchemeResult":
        return cls.from_dict(json.loads(text))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


# ---------------------------------------------------------------------------
# drivers
# ---------------------------------------------------------------------------
def _prepare(config, sensing):
    channels = channel_set(config)
    if sensing is None:
        sensing = design_sensing(config, channels)
    eta_max = eta_bar(sensing.crlb_bar, config)
    return channels, sensing, eta_max


def _alternate(config, channels, sensing, eta0, tol: Tolerances, variant):
    """Shared AO skeleton of the main and MRT schemes."""
    if not 0.0 < eta0 < 1.0:
        raise ValueError("eta0 must lie in (0, 1)")
    cb = sensing.crlb_bar
    eta_max = eta_bar(cb, config)
    eta = float(eta0)
    eta_trace, rate_trace = [], []
    previous = None  # (beams, cert) of the last iteration
    iterations = 0
    for iterations in range(1, tol.max_ao_iterations + 1):
        seed = rate_trace[-1] if rate_trace else 0.0
        try:
            beams, cert, _ = bi_rbo(eta, cb, channels, config, tol_b=tol.bisection, R_lower=seed,
                                    solver_tol=tol.solver, variant=variant)
        except Exception:
            log.error("%s: AO iteration %d failed at eta %.4f", variant, iterations, eta)
            raise
        if previous is not None and cert.rate < previous[1].rate:
            # the previous point stays feasible at the new eta (its margin did
            # not decrease), so a lower bisection result is solver noise
            prev_margin = margin(eta, previous[1].rate, previous[0], previous[1].multipliers, cb,
                                 channels, config, variant)
            if prev_margin >= 0:
                beams, cert = previous[0], replace(previous[1], eta=eta)
        eta_trace.append(eta)
        rate_trace.append(cert.rate)
        previous = (beams, cert)
        if cert.rate <= 0:
            break
        new_eta, _ = maximize_margin(cert.rate, beams, cert.multipliers, cb, channels, config,
                                     variant=variant, step=tol.eta_step, previous=eta)
        change = abs(new_eta - eta) / eta
        eta = new_eta
        if change <= tol.ao:
            break
    alloc = project_eta(eta, eta_max)
    beams, cert = previous
    if alloc.eta != eta_trace[-1]:
        beams, cert, _ = bi_rbo(alloc.eta, cb, channels, config, tol_b=tol.bisection,
                                solver_tol=tol.solver, variant=variant)
    eta_trace.append(alloc.eta)
    return alloc, beams, cert, eta_trace, rate_trace, iterations


def run_main(config: ScenarioConfig, eta0: float = 0.5, tolerances: Tolerances | None = None,
             sensing: SensingDesign | None = None) -> SchemeResult:
    tol = tolerances or Tolerances()
    channels, sensing, eta_max = _prepare(config, sensing)
    alloc, relaxed, cert, eta_trace, rate_trace, iters = _alternate(
        config, channels, sensing, eta0, tol, "main")
    beams, defects, rho = extract_rank_one(relaxed, config)
    bounds = _bounds(sensing, alloc.eta, channels, config)
    final = certify_worst_case_rate(beams, alloc.eta, bounds, channels, config,
                                    tol_b=tol.bisection, solver_tol=tol.solver)
    flags = {"projected": alloc.provenance == "crlb-projected", "rank_defects": defects,
             "rank_defect_flag": bool(defects.max() > RANK_DEFECT_FLAG), "rho": rho,
             "extraction_gap": cert.rate - final.rate, "notes": final.diagnostics.get("notes", [])}
    if flags["rank_defect_flag"]:
        log.warning("main: rank-one defect %.3f above %.2f", defects.max(), RANK_DEFECT_FLAG)
    return SchemeResult("main", alloc.eta, eta_max, final.rate, final.gamma, beams, sensing.psi,
                        sensing.crlb_bar, eta_trace, rate_trace, iters, relaxed_rate=cert.rate,
                        nominal_rate=nominal_rate(beams, alloc.eta, channels, config),
                        multipliers=final.multipliers, flags=flags,
                        scenario_digest=config.digest())


def run_mrt(config: ScenarioConfig, eta0: float = 0.5, tolerances: Tolerances | None = None,
            sensing: SensingDesign | None = None) -> SchemeResult:
    tol = tolerances or Tolerances()
    channels, sensing, eta_max = _prepare(config, sensing)
    alloc, relaxed, cert, eta_trace, rate_trace, iters = _alternate(
        config, channels, sensing, eta0, tol, "mrt")
    K, M = channels.n_users, channels.n_aps
    if "mrt_powers" in cert.diagnostics:
        P = np.array(cert.diagnostics["mrt_powers"]) * config.comm_power_budget
    else:
        P = np.zeros((K, M, M), complex)
    beams, p, defects, rho = extract_mrt(P, channels, config)
    bounds = _bounds(sensing, alloc.eta, channels, config)
    final = certify_worst_case_rate(beams, alloc.eta, bounds, channels, config,
                                    tol_b=tol.bisection, solver_tol=tol.solver)
    flags = {"projected": alloc.provenance == "crlb-projected", "rank_defects": defects,
             "rank_defect_flag": bool(defects.max() > RANK_DEFECT_FLAG), "rho": rho,
             "extraction_gap": cert.rate - final.rate, "notes": final.diagnostics.get("notes", [])}
    return SchemeResult("mrt", alloc.eta, eta_max, final.rate, final.gamma, beams, sensing.psi,
                        sensing.crlb_bar, eta_trace, rate_trace, iters, relaxed_rate=cert.rate,
                        nominal_rate=nominal_rate(beams, alloc.eta, channels, config), powers=p,
                        multipliers=final.multipliers, flags=flags,
                        scenario_digest=config.digest())


def run_ei(config: ScenarioConfig, tolerances: Tolerances | None = None,
           sensing: SensingDesign | None = None) -> SchemeResult:
    tol = tolerances or Tolerances()
    channels, sensing, eta_max = _prepare(config, sensing)
    eta = eta_max
    beams, nominal, _ = ei_bisection(eta, channels, config, tol_b=tol.bisection,
                                     solver_tol=tol.solver)
    bounds = _bounds(sensing, eta, channels, config)
    final = certify_worst_case_rate(beams, eta, bounds, channels, config, tol_b=tol.bisection,
                                    solver_tol=tol.solver)
    flags = {"projected": True, "notes": final.diagnostics.get("notes", [])}
    return SchemeResult("ei", eta, eta_max, final.rate, final.gamma, beams, sensing.psi,
                        sensing.crlb_bar, [eta], [nominal], 1, relaxed_rate=nominal,
                        nominal_rate=nominal, multipliers=final.multipliers, flags=flags,
                        scenario_digest=config.digest())


def _bounds(sensing, eta, channels, config):
    total = crlb_at(sensing.crlb_bar, eta, config.sensing_slot, config.block_duration)
    return uncertainty_bounds(total, channels, config)


def run_scheme(name: str, config: ScenarioConfig, eta0: float = 0.5,
               tolerances: Tolerances | None = None, sensing: SensingDesign | None = None):
    if name == "main":
        return run_main(config, eta0, tolerances, sensing)
    if name == "mrt":
        return run_mrt(config, eta0, tolerances, sensing)
    if name == "ei":
        return run_ei(config, tolerances, sensing)
    raise ValueError(f"unknown scheme {name!r}; expected one of {SCHEMES}")


__all__ = ["SCHEMA_VERSION", "SCHEMES", "SchemeResult", "SensingDesign", "Tolerances",
           "design_sensing", "run_ei", "run_main", "run_mrt", "run_scheme"]
