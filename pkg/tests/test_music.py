import csv
import json

import numpy as np
import pytest

from tdisac.array_channel import channel_set
from tdisac.errors import InsufficientSnapshotsError
from tdisac.fim_crlb import composite_channel
from tdisac.music import (FAR_FIELD, NEAR_FIELD, EchoBatch, MusicEstimator, SearchGrid,
                          export_peaks_json, export_spectrum_csv, intensity_bands, match_peaks,
                          music_spectrum, response_vector, simulate_echoes, snapshot_count)
from tdisac.scenario import calibrated_scenario, default_scenario
from tdisac.sensing import SensingCovariance


def test_snapshot_count():
    cfg = default_scenario()
    assert snapshot_count(0.5, cfg) == 50
    assert snapshot_count(0.9, cfg) == 10
    assert snapshot_count(0.0, cfg) == 100
    assert snapshot_count(0.995, cfg) == 0


def test_too_few_snapshots():
    cfg = default_scenario()
    ch = channel_set(cfg)
    psi = SensingCovariance.uniform(cfg)
    with pytest.raises(InsufficientSnapshotsError):
        simulate_echoes(psi, 0.9, ch, cfg)  # 10 < K M + 1 = 13
    assert simulate_echoes(psi, 0.87, ch, cfg).tau == 13


def test_echo_covariance_monte_carlo():
    cfg = default_scenario()
    ch = channel_set(cfg)
    psi = SensingCovariance.uniform(cfg)
    H = composite_channel(ch, cfg)
    expect = H @ psi.full @ H.conj().T + cfg.noise_power * np.eye(H.shape[0])
    acc = np.zeros_like(expect)
    n = 200
    for seed in range(n):
        acc += simulate_echoes(psi, 0.01, ch, cfg, noise_seed=seed).covariance
    rel = np.linalg.norm(acc / n - expect) / np.linalg.norm(expect)
    assert rel < 0.03


def test_echo_reproducible():
    cfg = default_scenario()
    ch = channel_set(cfg)
    psi = SensingCovariance.uniform(cfg)
    a = simulate_echoes(psi, 0.5, ch, cfg, noise_seed=7)
    b = simulate_echoes(psi, 0.5, ch, cfg, noise_seed=7)
    np.testing.assert_array_equal(a.Y, b.Y)


@pytest.mark.parametrize("response", [NEAR_FIELD, FAR_FIELD])
def test_kernel_matches_response_vector(response):
    cfg = default_scenario()
    ch = channel_set(cfg)
    batch = simulate_echoes(SensingCovariance.uniform(cfg), 0.5, ch, cfg)
    est = MusicEstimator(batch, cfg, response)
    pts = np.array([[12.3, 44.4], [50.0, 10.1], [33.3, 33.3]])
    den = est.denominator(pts)
    for p, d in zip(pts, den):
        v = response_vector(p, cfg, response)
        expect = v.size - np.linalg.norm(est.signal.conj().T @ v) ** 2
        assert d == pytest.approx(expect, rel=1e-9, abs=1e-9)


def test_single_user_peak_at_truth():
    cfg = calibrated_scenario(user_positions=((25.0, 40.0),))
    ch = channel_set(cfg)
    batch = simulate_echoes(SensingCovariance.uniform(cfg), 0.5, ch, cfg)
    grid = SearchGrid(20.1, 30.1, 35.1, 45.1, 0.25)
    spec = music_spectrum(batch, cfg, NEAR_FIELD, grid=grid)
    assert len(spec.peaks) == 1
    assert np.hypot(*(spec.peaks[0].position - [25.0, 40.0])) < 0.05
    assert spec.peaks[0].refined


def test_spectrum_invariant_to_echo_scaling():
    cfg = calibrated_scenario()
    ch = channel_set(cfg)
    batch = simulate_echoes(SensingCovariance.uniform(cfg), 0.5, ch, cfg)
    scaled = EchoBatch(Y=batch.Y * 1e3 * np.exp(0.4j), eta=batch.eta, rcs=batch.rcs,
                       noise_seed=batch.noise_seed, n_users=batch.n_users)
    grid = SearchGrid(10.1, 40.1, 25.1, 45.1, 1.0)
    a = music_spectrum(batch, cfg, grid=grid, refine=False)
    b = music_spectrum(scaled, cfg, grid=grid, refine=False)
    np.testing.assert_allclose(a.values, b.values, rtol=1e-6)


def test_estimator_rejects_unknown_response():
    cfg = default_scenario()
    ch = channel_set(cfg)
    batch = simulate_echoes(SensingCovariance.uniform(cfg), 0.5, ch, cfg)
    with pytest.raises(ValueError):
        MusicEstimator(batch, cfg, "mid-field")


def test_grid_validation():
    with pytest.raises(ValueError):
        SearchGrid(step=0.0)
    g = SearchGrid(0, 1, 0, 2, 0.5)
    assert g.xs.tolist() == [0, 0.5, 1.0] and len(g.ys) == 5
    assert g.contains((1.0, 2.0)) and not g.contains((1.1, 0.0))


def test_intensity_bands():
    vals = np.array([2.0, 1.0, 10 ** -0.3, 10 ** -0.6, 0.1])
    assert intensity_bands(vals, 1.0).tolist() == ["red", "red", "green", "cyan", "blue"]


def test_match_peaks_greedy():
    truths = np.array([[0.0, 0.0], [10.0, 0.0]])
    peaks = np.array([[9.0, 0.0], [0.5, 0.0], [30.0, 0.0]])
    assign, err = match_peaks(peaks, truths)
    assert assign.tolist() == [1, 0]
    np.testing.assert_allclose(err, [0.5, 1.0])
    assign, err = match_peaks(np.zeros((0, 2)), truths)
    assert assign.tolist() == [-1, -1] and np.all(np.isinf(err))


def test_exports(tmp_path):
    cfg = calibrated_scenario()
    ch = channel_set(cfg)
    batch = simulate_echoes(SensingCovariance.uniform(cfg), 0.5, ch, cfg)
    spec = music_spectrum(batch, cfg, grid=SearchGrid(20.1, 30.1, 35.1, 45.1, 0.5), n_peaks=2)
    export_spectrum_csv(spec, tmp_path / "s.csv")
    export_peaks_json(spec, tmp_path / "p.json")
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["x", "y", "value", "band"]
    assert len(rows) - 1 == spec.values.size
    doc = json.load(open(tmp_path / "p.json"))
    assert doc["response"] == NEAR_FIELD and len(doc["peaks"]) == 2
