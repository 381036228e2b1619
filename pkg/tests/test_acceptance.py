"""Acceptance criteria 1-10 at their stated tolerances.

Every criterion is evaluated on the default deployment (3 APs, 4 users,
40 dBm sensing power, CRLB threshold 1e-11 m^2) and prints one PASS/FAIL
line. On that deployment the CRLB threshold cannot be met at any time
split, so the scheme-level criteria (8, 9) fail there; the same checks on
the calibrated deployment (larger RCS variance) are reported as separate
``supplement`` tests. Criterion 6 needs certified solutions, which only
exist on the calibrated deployment.

The report is repeated in the terminal summary under "acceptance criteria".
"""

import math
import time

import numpy as np

from oracles import (brute_force_fim, collinear_single_user_snr, rank_one_grid_search,
                     robust_single_user_snr, steering_fd)
from tdisac.array_channel import UncertaintyBounds, channel_set, steering_derivative
from tdisac.errors import SensingInfeasibleError
from tdisac.fim_crlb import assemble_fim, crlb, mean_derivatives, path_gains
from tdisac.harness import ExperimentSpec, error_model_curve, linear_fit_through_origin, run_crlb_sweep
from tdisac.music import FAR_FIELD, NEAR_FIELD, match_peaks, music_spectrum, simulate_echoes, spurious_peaks
from tdisac.robust import (adversarial_oracle, bi_rbo, certify_worst_case_rate, extract_rank_one,
                          rate_from_gamma)
from tdisac.scenario import ScenarioConfig, calibrated_scenario, dbm_to_watt, default_scenario
from tdisac.sensing import SensingCovariance, optimize_sensing_covariance, sensing_bases

LITERAL = default_scenario()
CALIBRATED = calibrated_scenario()


def record(report, label, ok, detail, elapsed=None, limit=None):
    if limit is not None and elapsed is not None and elapsed > limit:
        ok = False
        detail += f"; runtime {elapsed:.0f} s over the {limit:.0f} s limit"
    t = "" if elapsed is None else f" [{elapsed:.1f} s]"
    line = f"{label}: {'PASS' if ok else 'FAIL'}{t}  {detail}"
    print(line)
    report.append(line)
    return ok


def info(report, label, detail):
    line = f"{label}: INFO  {detail}"
    print(line)
    report.append(line)


# --------------------------------------------------------------------------- 1
def test_criterion_01_fim_correctness(acceptance_report):
    t0 = time.perf_counter()
    lam = 0.0107
    cfg = ScenarioConfig(ap_centers=((0.0, 0.0), (6.0, 1.0)), user_positions=((2.0, 4.0),),
                         n_elements=3, element_spacing=lam / 2, carrier_wavelength=lam)
    rng = np.random.default_rng(7)
    tau, M, N = 50, 2, 3
    Q, _ = np.linalg.qr(rng.standard_normal((tau, tau)) + 1j * rng.standard_normal((tau, tau)))
    rows = Q.T.conj()[:M * N]
    S = np.zeros((M * N, tau), complex)
    for m in range(M):
        A = rng.standard_normal((N, N)) + 1j * rng.standard_normal((N, N))
        S[m * N:(m + 1) * N] = A @ rows[m * N:(m + 1) * N]
    psi = np.array([S[m * N:(m + 1) * N] @ S[m * N:(m + 1) * N].conj().T / tau for m in range(M)])
    ch = channel_set(cfg)
    ref = brute_force_fim(cfg, path_gains(ch, cfg), S)
    fim_err = np.linalg.norm(assemble_fim(psi, ch, cfg).full - ref) / np.linalg.norm(ref)

    # the center-referenced response is stationary for a user on the array axis, so the
    # relative error is taken against the largest derivative magnitude, 2 pi sqrt(N) / lambda
    der_err = 0.0
    for cfg_ in (cfg, LITERAL):
        scale = 2 * np.pi * math.sqrt(cfg_.n_elements) / cfg_.carrier_wavelength
        for m in range(cfg_.n_aps):
            for k in range(cfg_.n_users):
                p = cfg_.user_positions_array[k]
                for q in (0, 1):
                    fd = steering_fd(cfg_.ap_centers[m], cfg_.ap_orientations[m], cfg_.n_elements, p,
                                     cfg_.carrier_wavelength, q)
                    an = steering_derivative(m, k, q, cfg_)
                    der_err = max(der_err, np.linalg.norm(an - fd) / max(np.linalg.norm(fd), 1e-3 * scale))
    ok = fim_err <= 1e-4 and der_err <= 1e-6
    ok = record(acceptance_report, "criterion 1 (FIM correctness)", ok,
                f"FIM rel. Frobenius error {fim_err:.2e} (<= 1e-4); steering derivative rel. "
                f"error {der_err:.2e} (<= 1e-6)", time.perf_counter() - t0, 10)
    assert ok


# --------------------------------------------------------------------------- 2
def test_criterion_02_crlb_structure(acceptance_report):
    t0 = time.perf_counter()
    cfg = LITERAL
    ch = channel_set(cfg)
    psi = SensingCovariance.uniform(cfg)
    r = crlb(psi, 0.5, ch, cfg)
    etas = np.linspace(0.05, 0.95, 19)
    scal = max(abs(r.at(e) * (1 - e) / (r.at(0.5) * 0.5) - 1) for e in etas)
    half = crlb(psi.scaled(2.0), None, ch, cfg).crlb_bar / r.crlb_bar
    worst = 0.0
    for drop in range(cfg.n_aps):
        keep = [m for m in range(cfg.n_aps) if m != drop]
        sub = cfg.replace(ap_centers=tuple(cfg.ap_centers[m] for m in keep),
                          ap_orientations=tuple(cfg.ap_orientations[m] for m in keep))
        object.__setattr__(sub, "_rcs", cfg.rcs[:, keep][:, :, keep])
        part = crlb(SensingCovariance.uniform(sub), None, channel_set(sub), sub).crlb_bar
        worst = max(worst, r.crlb_bar / part)
    ok = scal <= 1e-12 and abs(half - 0.5) <= 1e-10 and worst <= 1 + 1e-9
    ok = record(acceptance_report, "criterion 2 (CRLB structure)", ok,
                f"max |crlb(eta)(1-eta)/const - 1| = {scal:.1e}; crlb_bar(2 Psi)/crlb_bar(Psi) = "
                f"{half:.12f}; worst full/subset ratio {worst:.4f} (<= 1)",
                time.perf_counter() - t0, 60)
    assert ok


# --------------------------------------------------------------------------- 3
def test_criterion_03_sensing_sdp(acceptance_report):
    t0 = time.perf_counter()
    cfg = LITERAL
    ch = channel_set(cfg)
    _, res = optimize_sensing_covariance(ch, cfg)
    uniform = crlb(SensingCovariance.uniform(cfg), None, ch, cfg).crlb_bar

    micro = ScenarioConfig(ap_centers=((0.0, 0.0),), user_positions=((0.3, 1.2),), n_elements=5,
                           element_spacing=0.0265, carrier_wavelength=0.0107,
                           sensing_power_budget=1.0)
    mch = channel_set(micro)
    D = mean_derivatives(mch, micro)
    _, mres = optimize_sensing_covariance(mch, micro)

    def value(v):
        v = v / np.linalg.norm(v) * math.sqrt(micro.sensing_power_budget)
        return crlb(np.outer(v, v.conj())[None], None, mch, micro, derivatives=D,
                    allow_singular=True).crlb_bar

    best, _ = rank_one_grid_search(value, sensing_bases(mch)[0], n=10)
    gap = abs(best - mres.crlb_bar) / mres.crlb_bar
    ok = res.crlb_bar < uniform and gap <= 0.02 and mres.crlb_bar <= best * (1 + 1e-6)
    ok = record(acceptance_report, "criterion 3 (sensing SDP)", ok,
                f"default deployment crlb_bar optimized {res.crlb_bar:.4e} < uniform {uniform:.4e}; "
                f"micro-instance 10^4-point rank-one grid best within {100 * gap:.2f}% (<= 2%)",
                time.perf_counter() - t0, 300)
    assert ok


# --------------------------------------------------------------------------- 4
def test_criterion_04_fairness_trend(acceptance_report, tmp_path):
    t0 = time.perf_counter()
    out = run_crlb_sweep(ExperimentSpec("crlb-sweep", scenario=LITERAL, out_dir=str(tmp_path)))
    table = out["table"]
    powers = (30.0, 35.0, 40.0, 45.0, 50.0)
    curves = {M: [table[(M, p)] for p in powers] for M in (1, 2, 3)}
    mono = all(np.all(np.diff(c) < 0) for c in curves.values())
    below = all(a < b for a, b in zip(curves[3], curves[1]))
    ok = mono and below
    ok = record(acceptance_report, "criterion 4 (CRLB fairness trend)", ok,
                f"sqrt crlb_bar [m] M=1 {np.round(curves[1], 4).tolist()}, "
                f"M=3 {np.round(curves[3], 4).tolist()}; monotone {mono}; M=3 below M=1 {below}",
                time.perf_counter() - t0, 300)
    info(acceptance_report, "criterion 4 (M=2 curve)", f"{np.round(curves[2], 4).tolist()}")
    assert ok


# --------------------------------------------------------------------------- 5
def _music_outcome(cfg, psi, seed=0, eta=0.5):
    ch = channel_set(cfg)
    batch = simulate_echoes(psi, eta, ch, cfg, noise_seed=seed)
    truths = cfg.user_positions_array
    near = music_spectrum(batch, cfg, NEAR_FIELD)
    _, err = match_peaks(near.peak_positions, truths)
    far = music_spectrum(batch, cfg, FAR_FIELD, refine=False)
    ghosts = spurious_peaks(far, truths)
    return err, ghosts


def test_criterion_05_music(acceptance_report):
    t0 = time.perf_counter()
    psi, _ = optimize_sensing_covariance(channel_set(LITERAL), LITERAL)
    err, ghosts = _music_outcome(LITERAL, psi)
    near_ok = bool(np.all(err <= 0.5))
    ok = near_ok and len(ghosts) >= 1
    ok = record(acceptance_report, "criterion 5 (MUSIC)", ok,
                f"near-field position errors [m] {np.round(err, 3).tolist()} (all <= 0.5 needed); "
                f"far-field spurious peaks outranking a user: {len(ghosts)} (>= 1 needed)",
                time.perf_counter() - t0, 600)
    assert ok


def test_supplement_05_music_calibrated(acceptance_report):
    t0 = time.perf_counter()
    psi, _ = optimize_sensing_covariance(channel_set(CALIBRATED), CALIBRATED)
    err_opt, ghosts_opt = _music_outcome(CALIBRATED, psi)
    err_uni, ghosts_uni = _music_outcome(CALIBRATED, SensingCovariance.uniform(CALIBRATED))
    info(acceptance_report, "supplement 5 (MUSIC, calibrated, optimized Psi)",
         f"errors {np.round(err_opt, 3).tolist()}, far-field spurious {len(ghosts_opt)}")
    ok = bool(np.all(err_uni <= 0.5)) and len(ghosts_uni) >= 1
    ok = record(acceptance_report, "supplement 5 (MUSIC, calibrated, uniform Psi)", ok,
                f"errors {np.round(err_uni, 3).tolist()}, far-field spurious {len(ghosts_uni)}",
                time.perf_counter() - t0, 600)
    assert ok


# --------------------------------------------------------------------------- 6
def test_criterion_06_s_procedure_soundness(acceptance_report, scheme_runs):
    try:
        scheme_runs.get("ei", LITERAL)
        literal_note = "default deployment produced solutions"
    except SensingInfeasibleError:
        literal_note = "default deployment has no certified solution (sensing-infeasible)"
    ch = channel_set(CALIBRATED)
    worst, parts, ok = np.inf, [], True
    for scheme in ("main", "ei", "mrt"):
        r = scheme_runs.get(scheme, CALIBRATED)
        t0 = time.perf_counter()
        min_q, _ = adversarial_oracle(r.beams, r.gamma, r.bounds(ch, CALIBRATED), ch, CALIBRATED,
                                      n_samples=10_000)
        el = time.perf_counter() - t0
        v = float(min_q.min() / CALIBRATED.noise_power)
        worst = min(worst, v)
        ok &= v >= -1e-6 and el < 300
        parts.append(f"{scheme} min q/sigma^2 {v:.3e} ({el:.1f} s)")
    ok = record(acceptance_report, "criterion 6 (S-procedure soundness, calibrated)", ok,
                "; ".join(parts) + f"; {literal_note}")
    assert ok


# --------------------------------------------------------------------------- 7
def test_criterion_07_single_user(acceptance_report):
    t0 = time.perf_counter()
    eta = 0.5
    parts, ok = [], True
    for position, frac in (((25.0, 40.0), 0.0), ((40.0, 30.0), 0.3)):
        cfg = default_scenario(user_positions=(position,))
        ch = channel_set(cfg)
        eps = frac * ch.norms
        b = UncertaintyBounds(eps=eps, crlb_total=float(frac > 0))
        beams, _, trace = bi_rbo(eta, 1.0, ch, cfg, bounds=b)
        vecs, _, _ = extract_rank_one(beams, cfg)
        cert = certify_worst_case_rate(vecs, eta, b, ch, cfg)
        snr = (collinear_single_user_snr(ch.channels[0], cfg.comm_power_budget, cfg.noise_power)
               if frac == 0 else
               robust_single_user_snr(ch.channels[0], eps[0], cfg.comm_power_budget, cfg.noise_power))
        target = float(rate_from_gamma(snr, eta, cfg.block_duration))
        gap = abs(cert.rate - target) / target
        w = np.array(trace.widths)
        halves = bool(np.allclose(w[1:] / w[:-1], 0.5, rtol=1e-9))
        ok &= gap <= 0.02 and halves
        parts.append(f"user {position}, eps = {frac} ||h||: certified {cert.rate:.5f} vs oracle "
                     f"{target:.5f} ({100 * gap:.3f}%), interval halves each step {halves}")
    ok = record(acceptance_report, "criterion 7 (Bi-RBO K=1)", ok, "; ".join(parts),
                time.perf_counter() - t0)
    assert ok


# --------------------------------------------------------------------------- 8
def _ao_check(runs):
    etas = [r.eta for r in runs]
    rates = [r.rate for r in runs]
    eta_spread = (max(etas) - min(etas)) / max(etas)
    rate_spread = (max(rates) - min(rates)) / max(rates) if max(rates) > 0 else np.inf
    monotone = all(np.all(np.diff(r.rate_trace) >= -1e-9) for r in runs)
    iters = [r.iterations for r in runs]
    ok = eta_spread <= 0.01 and rate_spread <= 0.01 and monotone and max(iters) <= 5
    detail = (f"final eta {np.round(etas, 4).tolist()}, certified rate {np.round(rates, 5).tolist()}, "
              f"spreads {100 * eta_spread:.2f}% / {100 * rate_spread:.2f}% (<= 1%), "
              f"traces non-decreasing {monotone}, AO iterations {iters} (<= 5)")
    return ok, detail


def test_criterion_08_ao_behavior(acceptance_report, scheme_runs):
    t0 = time.perf_counter()
    try:
        runs = [scheme_runs.get("main", LITERAL, e) for e in (0.1, 0.5, 0.9)]
        ok, detail = _ao_check(runs)
    except SensingInfeasibleError as exc:
        ok, detail = False, f"default deployment is sensing-infeasible: eta_bar = {exc.eta_bar:.3e}"
    ok = record(acceptance_report, "criterion 8 (AO behavior)", ok, detail,
                time.perf_counter() - t0, 1800)
    assert ok


def test_supplement_08_ao_behavior_calibrated(acceptance_report, scheme_runs):
    t0 = time.perf_counter()
    runs = [scheme_runs.get("main", CALIBRATED, e) for e in (0.1, 0.5, 0.9)]
    ok, detail = _ao_check(runs)
    ok = record(acceptance_report, "supplement 8 (AO behavior, calibrated)", ok, detail,
                time.perf_counter() - t0, 1800)
    assert ok


# --------------------------------------------------------------------------- 9
def _ordering_check(cfg, scheme_runs):
    base = {s: scheme_runs.get(s, cfg) for s in ("main", "ei", "mrt")}
    parts = []
    order = base["main"].rate >= base["ei"].rate - 1e-6 and base["main"].rate >= base["mrt"].rate - 1e-6
    parts.append("rates main {main:.5f} / ei {ei:.5f} / mrt {mrt:.5f}".format(
        **{s: r.rate for s, r in base.items()}))
    ei_eta = base["ei"].eta == base["ei"].eta_bar
    relaxed_cfg = cfg.replace(crlb_threshold=2 * cfg.crlb_threshold)
    relaxed = {s: scheme_runs.get(s, relaxed_cfg) for s in ("main", "ei", "mrt")}
    delta = {s: relaxed[s].rate - base[s].rate for s in base}
    threshold = delta["ei"] < 0 and abs(delta["main"]) < abs(delta["ei"]) and abs(delta["mrt"]) < abs(delta["ei"])
    parts.append("CRLB_th x2 rate change main {main:+.5f} / ei {ei:+.5f} / mrt {mrt:+.5f}".format(**delta))
    etas_ok = True
    for s in ("main", "mrt"):
        etas = []
        for p in (35.0, 40.0, 45.0):
            c = cfg.replace(sensing_power_budget=dbm_to_watt(p))
            etas.append(scheme_runs.get(s, c).eta)
        etas_ok &= bool(np.all(np.diff(etas) > 0))
        parts.append(f"{s} eta at 35/40/45 dBm {np.round(etas, 4).tolist()}")
    ok = order and ei_eta and threshold and etas_ok
    parts.insert(1, f"ordering {order}, EI eta = eta_bar {ei_eta}, threshold trend {threshold}, "
                    f"eta rising {etas_ok}")
    return ok, "; ".join(parts)


def test_criterion_09_scheme_trends(acceptance_report, scheme_runs):
    t0 = time.perf_counter()
    try:
        ok, detail = _ordering_check(LITERAL, scheme_runs)
    except SensingInfeasibleError as exc:
        ok, detail = False, f"default deployment is sensing-infeasible: eta_bar = {exc.eta_bar:.3e}"
    ok = record(acceptance_report, "criterion 9 (scheme ordering and trends)", ok, detail,
                time.perf_counter() - t0, 2700)
    assert ok


def test_supplement_09_scheme_trends_calibrated(acceptance_report, scheme_runs):
    t0 = time.perf_counter()
    ok, detail = _ordering_check(CALIBRATED, scheme_runs)
    ok = record(acceptance_report, "supplement 9 (scheme ordering and trends, calibrated)", ok,
                detail, time.perf_counter() - t0, 2700)
    assert ok


# --------------------------------------------------------------------------- 10
def test_criterion_10_error_model(acceptance_report):
    t0 = time.perf_counter()
    radii = np.linspace(0.0, 0.05, 11)
    fits, zero = {}, True
    for n in (21, 41, 61):
        curve = error_model_curve(n, 30.0, radii, LITERAL, distance=25.0, n_samples=100_000)
        zero &= curve[0] == 0.0
        fits[n] = linear_fit_through_origin(radii, curve)
    r2 = {n: f[1] for n, f in fits.items()}
    slopes = [fits[n][0] for n in (21, 41, 61)]
    increasing = bool(np.all(np.diff(slopes) > 0))
    ok = zero and min(r2.values()) >= 0.98 and increasing
    ok = record(acceptance_report, "criterion 10 (error model)", ok,
                f"zero intercept {zero}; R^2 {[round(v, 4) for v in r2.values()]} (>= 0.98); slopes "
                f"{np.round(slopes, 4).tolist()} increasing {increasing}",
                time.perf_counter() - t0, 300)
    assert ok
