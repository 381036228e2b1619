import numpy as np
import pytest

from oracles import collinear_single_user_snr, robust_single_user_snr
from tdisac.array_channel import UncertaintyBounds, channel_set
from tdisac.robust import (BeamformerSet, BisectionTrace, _bisect, adversarial_oracle, bi_rbo,
                           build_robust_lmi, certify_worst_case_rate, ei_socp_feasibility,
                           extract_mrt, extract_rank_one, gamma_from_rate, mrt_beams_from_powers,
                           mrt_directions, mrt_power_feasibility, nominal_rate, rate_from_gamma,
                           robust_quadratic, sinr)
from tdisac.scenario import calibrated_scenario, default_scenario

ETA = 0.5


def single_user(position=(25.0, 40.0)):
    cfg = default_scenario(user_positions=(position,))
    return cfg, channel_set(cfg)


def zero_bounds(ch):
    return UncertaintyBounds(eps=np.zeros((ch.n_users, ch.n_aps)), crlb_total=0.0)


def rand_beams(ch, seed=0, scale=1.0):
    rng = np.random.default_rng(seed)
    n = ch.n_aps * ch.n_elements
    w = rng.standard_normal((ch.n_users, n)) + 1j * rng.standard_normal((ch.n_users, n))
    return BeamformerSet(ch.n_aps, vectors=scale * w / np.linalg.norm(w, axis=1, keepdims=True))


# --------------------------------------------------------------------------- rates
def test_rate_gamma_round_trip():
    g = np.array([0.0, 0.5, 3.0, 100.0])
    r = rate_from_gamma(g, 0.4, 0.1)
    np.testing.assert_allclose(gamma_from_rate(r, 0.4, 0.1), g, atol=1e-12)
    assert rate_from_gamma(1.0, 0.5, 0.1) == pytest.approx(0.05)


# --------------------------------------------------------------------------- beam container
def test_beamformer_set_validation_and_io():
    with pytest.raises(ValueError):
        BeamformerSet(2)
    with pytest.raises(ValueError):
        BeamformerSet(2, matrices=np.zeros((1, 4, 4)), vectors=np.zeros((1, 4)))
    w = np.arange(8, dtype=complex).reshape(2, 4) * (1 + 0.5j)
    b = BeamformerSet(2, vectors=w)
    np.testing.assert_allclose(b.per_ap_power(), [np.sum(np.abs(w[:, :2]) ** 2),
                                                   np.sum(np.abs(w[:, 2:]) ** 2)])
    back = BeamformerSet.from_text(b.to_text())
    np.testing.assert_allclose(back.vectors, w)
    relaxed = BeamformerSet(2, matrices=b.covariances)
    back = BeamformerSet.from_text(relaxed.to_text())
    np.testing.assert_allclose(back.matrices, relaxed.matrices)
    np.testing.assert_allclose(relaxed.per_ap_power(), b.per_ap_power())


# --------------------------------------------------------------------------- LMI
def test_lmi_quadratic_form_identity():
    cfg = calibrated_scenario()
    ch = channel_set(cfg)
    beams = rand_beams(ch, scale=0.1)
    eps = 0.2 * ch.norms
    bounds = UncertaintyBounds(eps=eps, crlb_total=1.0)
    lam = np.array([0.3, 1.0, 2.0]) * 1e-3
    rng = np.random.default_rng(1)
    n = ch.n_aps * ch.n_elements
    for k in range(ch.n_users):
        L = build_robust_lmi(k, 0.7, beams, ch, bounds, lam, cfg)
        assert L.shape == (n + 1, n + 1)
        np.testing.assert_allclose(L, L.conj().T)
        x = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * 1e-4
        lhs = (np.concatenate([x, [1.0]]).conj() @ L @ np.concatenate([x, [1.0]])).real
        blocks = np.linalg.norm(x.reshape(ch.n_aps, -1), axis=1) ** 2
        rhs = robust_quadratic(k, 0.7, beams, ch, x, cfg)[0] + lam @ (blocks - eps[k] ** 2)
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-20)


def test_lmi_zero_beams_corner():
    cfg = default_scenario()
    ch = channel_set(cfg)
    n = ch.n_aps * ch.n_elements
    beams = BeamformerSet(ch.n_aps, matrices=np.zeros((ch.n_users, n, n), complex))
    L = build_robust_lmi(0, 1.0, beams, ch, zero_bounds(ch), np.zeros(3), cfg)
    assert L[-1, -1].real == pytest.approx(-cfg.noise_power)
    assert np.count_nonzero(L[:-1]) == 0


def test_lmi_rejects_bad_input():
    cfg = default_scenario()
    ch = channel_set(cfg)
    beams = rand_beams(ch)
    b = zero_bounds(ch)
    with pytest.raises(ValueError):
        build_robust_lmi(0, 0.0, beams, ch, b, np.zeros(3), cfg)
    with pytest.raises(ValueError):
        build_robust_lmi(0, 1.0, beams, ch, b, np.array([0.0, -1.0, 0.0]), cfg)
    with pytest.raises(ValueError):
        build_robust_lmi(0, 1.0, beams, ch, b, np.zeros(2), cfg)
    short = BeamformerSet(3, vectors=np.ones((4, 6), complex))
    with pytest.raises(ValueError):
        build_robust_lmi(0, 1.0, short, ch, b, np.zeros(3), cfg)


# --------------------------------------------------------------------------- bisection
def test_bisect_halves_and_brackets():
    trace = BisectionTrace()
    lo, best = _bisect(lambda r: r <= 3.3, 0.0, 16.0, 1e-4, trace)
    w = trace.widths
    np.testing.assert_allclose(np.array(w[1:]) / np.array(w[:-1]), 0.5)
    assert w[0] == pytest.approx(8.0)
    assert lo <= 3.3 < trace.upper[-1]
    assert trace.upper[-1] - lo <= 1e-4 * trace.upper[-1]


# --------------------------------------------------------------------------- K = 1 oracles
def test_single_user_no_error_matches_collinear_optimum():
    cfg, ch = single_user()
    beams, cert, trace = bi_rbo(ETA, 1.0, ch, cfg, bounds=zero_bounds(ch))
    snr = collinear_single_user_snr(ch.channels[0], cfg.comm_power_budget, cfg.noise_power)
    expect = rate_from_gamma(snr, ETA, cfg.block_duration)
    assert cert.rate == pytest.approx(expect, rel=0.02)
    assert cert.rate <= expect * (1 + 1e-6)
    np.testing.assert_allclose(np.array(trace.widths[1:]) / np.array(trace.widths[:-1]), 0.5)
    vecs, defects, rho = extract_rank_one(beams, cfg)
    assert defects[0] < 1e-3
    c2 = certify_worst_case_rate(vecs, ETA, zero_bounds(ch), ch, cfg)
    assert c2.rate == pytest.approx(expect, rel=0.02)


def test_single_user_robust_matches_oracle():
    cfg, ch = single_user((40.0, 30.0))
    eps = 0.3 * ch.norms
    bounds = UncertaintyBounds(eps=eps, crlb_total=1.0)
    beams, cert, _ = bi_rbo(ETA, 1.0, ch, cfg, bounds=bounds)
    snr = robust_single_user_snr(ch.channels[0], eps[0], cfg.comm_power_budget, cfg.noise_power)
    expect = rate_from_gamma(snr, ETA, cfg.block_duration)
    assert cert.rate == pytest.approx(expect, rel=0.02)
    vecs, _, _ = extract_rank_one(beams, cfg)
    c2 = certify_worst_case_rate(vecs, ETA, bounds, ch, cfg)
    assert c2.rate == pytest.approx(expect, rel=0.02)
    # the certificate is sound: nothing in the balls beats it
    min_q, _ = adversarial_oracle(vecs, c2.gamma, bounds, ch, cfg, n_samples=2000, n_steps=50)
    assert min_q.min() >= -1e-6 * cfg.noise_power


# --------------------------------------------------------------------------- multi-user soundness
@pytest.fixture(scope="module")
def two_user():
    cfg = calibrated_scenario(user_positions=((25.0, 40.0), (35.0, 60.0)))
    ch = channel_set(cfg)
    bounds = UncertaintyBounds(eps=0.02 * ch.norms, crlb_total=1.0)
    beams, cert, trace = bi_rbo(ETA, 1.0, ch, cfg, bounds=bounds, tol_b=1e-3)
    return cfg, ch, bounds, beams, cert, trace


def test_relaxed_solution_respects_power_and_lmi(two_user):
    cfg, ch, bounds, beams, cert, _ = two_user
    assert cert.rate > 0
    assert np.all(beams.per_ap_power() <= cfg.comm_power_budget * (1 + 1e-6))
    assert np.all(cert.multipliers >= 0)
    assert np.all(cert.min_eigenvalues >= -1e-6)


def test_certified_rank_one_beams_are_sound(two_user):
    cfg, ch, bounds, beams, cert, trace = two_user
    vecs, defects, rho = extract_rank_one(beams, cfg)
    assert 0 < rho <= 1
    assert np.all(vecs.per_ap_power() <= cfg.comm_power_budget * (1 + 1e-9))
    c = certify_worst_case_rate(vecs, ETA, bounds, ch, cfg)
    # the relaxation brackets the optimum; rank-one beams cannot beat its upper end
    assert 0 < c.rate <= trace.upper[-1] * (1 + 1e-6)
    assert c.rate <= nominal_rate(vecs, ETA, ch, cfg) * (1 + 1e-9)
    assert np.all(c.min_eigenvalues >= 0)
    min_q, min_sinr = adversarial_oracle(vecs, c.gamma, bounds, ch, cfg, n_samples=10_000)
    assert min_q.min() >= -1e-6 * cfg.noise_power
    assert min_sinr.min() >= c.gamma * (1 - 1e-6)


# --------------------------------------------------------------------------- extraction
def test_extract_rank_one_trivial_cases():
    cfg = default_scenario()
    ch = channel_set(cfg)
    n = ch.n_aps * ch.n_elements
    w = rand_beams(ch, seed=3, scale=0.01)
    vecs, defects, rho = extract_rank_one(BeamformerSet(3, matrices=w.covariances), cfg)
    np.testing.assert_allclose(defects, 0.0, atol=1e-12)
    assert rho == 1.0
    np.testing.assert_allclose(vecs.covariances, w.covariances, atol=1e-14)
    # identity: defect 1 - 1/(MN)
    eye = np.broadcast_to(np.eye(n) * 1e-3, (ch.n_users, n, n)).copy()
    _, defects, _ = extract_rank_one(BeamformerSet(3, matrices=eye), cfg)
    np.testing.assert_allclose(defects, 1 - 1 / n, rtol=1e-9)
    # over budget is scaled back uniformly
    big = rand_beams(ch, seed=4, scale=10.0)
    vecs, _, rho = extract_rank_one(BeamformerSet(3, matrices=big.covariances), cfg)
    assert rho < 1
    assert vecs.per_ap_power().max() == pytest.approx(cfg.comm_power_budget)


# --------------------------------------------------------------------------- EI and MRT
def test_ei_feasibility_meets_nominal_sinr():
    cfg = default_scenario()
    ch = channel_set(cfg)
    zero = ei_socp_feasibility(0.0, ch, cfg)
    assert not np.any(zero.vectors)
    b = ei_socp_feasibility(2.0, ch, cfg)
    assert b is not None
    sig, intf = sinr(b, ch.stacked)
    assert np.all(sig / (intf + cfg.noise_power) >= 2.0 * (1 - 1e-5))
    assert np.all(b.per_ap_power() <= cfg.comm_power_budget * (1 + 1e-6))
    assert ei_socp_feasibility(1e12, ch, cfg) is None


def test_mrt_directions_and_powers():
    cfg = default_scenario()
    ch = channel_set(cfg)
    A = mrt_directions(ch)
    np.testing.assert_allclose(np.linalg.norm(A, axis=1), 1.0)
    P = np.zeros((ch.n_users, 3, 3), complex)
    P[:, np.arange(3), np.arange(3)] = 0.1
    W = mrt_beams_from_powers(P, ch)
    np.testing.assert_allclose(W.per_ap_power(), 0.1 * ch.n_users)
    vecs, p, defects, rho = extract_mrt(P, ch, cfg)
    assert rho == 1.0
    np.testing.assert_allclose(defects, 2 / 3)
    # user k's beam on AP m is parallel to h_km
    for k in range(ch.n_users):
        for m in range(3):
            v = vecs.slice(k, m)
            h = ch.channels[k, m]
            assert abs(np.vdot(h, v)) == pytest.approx(np.linalg.norm(h) * np.linalg.norm(v))


def test_mrt_power_feasibility_zero_and_small():
    cfg = calibrated_scenario()
    ch = channel_set(cfg)
    b = UncertaintyBounds(eps=0.01 * ch.norms, crlb_total=1.0)
    P, lam = mrt_power_feasibility(0.0, ETA, b, ch, cfg)
    assert not P.any() and not lam.any()
    out = mrt_power_feasibility(0.05, ETA, b, ch, cfg)
    assert out is not None
    P, lam = out
    assert np.all(np.linalg.eigvalsh(P) >= -1e-9 * cfg.comm_power_budget)
    assert mrt_power_feasibility(1e9, ETA, b, ch, cfg) is None
