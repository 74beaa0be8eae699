import logging

import numpy as np
import pytest

from vipsim.calib import (
    CalibrationSet,
    EnergyCalibration,
    calibrate,
    calibrate_events,
    fit_line_centroid,
    line_window,
    read_calibration,
    write_calibration,
)
from vipsim.detsim import simulate_event_energies, simulate_frame
from vipsim.eventsel import AcceptedEvent, select_frame
from vipsim.exceptions import (
    InsufficientStatisticsError,
    SingularFitError,
    ValidationError,
    VipsimError,
)
from vipsim.model import CalibrationSettings, DetectorGeometry, RunConfig
from vipsim.pipeline import run_setup
from vipsim.utils import make_rng


def calibration_events(cfg, seed):
    """Accepted events of a daily calibration run, from the event-level simulator."""
    plan, mix, _ = run_setup(cfg, "calibration")
    rng = np.random.default_rng(seed)
    energies = simulate_event_energies(cfg, mix, plan, rng)
    adu = np.rint(cfg.response.eV_to_adu(energies)).astype(int)
    ccds = rng.integers(cfg.geometry.active_ccds, size=adu.size)
    return [AcceptedEvent(int(c), 0, int(a), 1) for c, a in zip(ccds, adu)]


def test_centroid_of_a_gaussian():
    rng = np.random.default_rng(0)
    adu = rng.normal(1000.0, 23.0, size=10_000)
    mu, err, area = fit_line_centroid(adu, (930.0, 1070.0))
    assert abs(mu - 1000.0) < 3 * err
    # About sigma / sqrt(N).
    assert err == pytest.approx(23.0 / np.sqrt(10_000), rel=0.3)
    assert area == pytest.approx(10_000 * 0.9977, rel=0.05)


def test_centroid_of_a_mirrored_sample():
    rng = np.random.default_rng(1)
    half = rng.normal(500.0, 20.0, size=2000)
    adu = np.concatenate([half, 2 * 512.5 - half])
    mu, _, _ = fit_line_centroid(adu, (432.5, 592.5))
    assert mu == pytest.approx(512.5, abs=1e-3)


def test_centroid_accepts_events():
    rng = np.random.default_rng(2)
    events = [AcceptedEvent(0, 0, int(a), 1) for a in np.rint(rng.normal(1000.0, 23.0, size=2000))]
    mu, err, _ = fit_line_centroid(events, (930.0, 1070.0))
    assert abs(mu - 1000.0) < 4 * err


def test_too_few_events():
    with pytest.raises(InsufficientStatisticsError):
        fit_line_centroid(np.full(10, 1000.0), (900.0, 1100.0))


def test_window_must_be_ordered():
    with pytest.raises(ValueError):
        fit_line_centroid(np.full(100, 1000.0), (1100.0, 900.0))


def test_two_point_calibration():
    cal = calibrate([(1000.0, 5899.0), (1100.0, 6490.0)])
    assert cal.gain_eV_per_adu == pytest.approx(5.91)
    assert cal.offset_eV == pytest.approx(-11.0)


@pytest.mark.parametrize("seed", range(10))
def test_two_point_calibration_is_the_closed_form(seed):
    rng = np.random.default_rng(seed)
    a0, a1 = rng.uniform(100, 3000, size=2)
    e0 = rng.uniform(1000, 10000)
    e1 = e0 + rng.uniform(0.5, 10) * (a1 - a0)
    cal = calibrate([(a0, e0), (a1, e1)])
    gain = (e1 - e0) / (a1 - a0)
    assert cal.gain_eV_per_adu == gain
    assert cal.offset_eV == e0 - gain * a0
    assert cal.residual_at_6keV_eV == pytest.approx(0.0, abs=1e-9)


def test_identity_calibration():
    cal = calibrate([(100.0, 100.0), (200.0, 200.0), (300.0, 300.0)], labels=["a", "b", "c"])
    assert cal.gain_eV_per_adu == pytest.approx(1.0)
    assert cal.offset_eV == pytest.approx(0.0, abs=1e-9)
    assert [label for label, _, _ in cal.fit_lines] == ["a", "b", "c"]


@pytest.mark.parametrize("points", [[(1000.0, 5899.0)], [(1000.0, 5899.0), (1000.0, 6490.0)]])
def test_degenerate_calibration(points):
    with pytest.raises(SingularFitError):
        calibrate(points)


@pytest.mark.parametrize("k", [0.5, 2.0, 7.3])
def test_affine_equivariance(k):
    points = [(1000.0, 5899.0, 0.2), (1100.0, 6490.0, 0.5), (1363.0, 8040.0, 0.4)]
    cal = calibrate(points)
    scaled = calibrate([(k * a, e, k * s) for a, e, s in points])
    assert scaled.gain_eV_per_adu == pytest.approx(cal.gain_eV_per_adu / k, rel=1e-10)
    for a, _, _ in points:
        assert scaled.apply(k * a) == pytest.approx(cal.apply(a), rel=1e-10)


def test_calibration_reproduces_the_known_energies():
    rng = np.random.default_rng(4)
    energies = np.array([5898.75, 6490.45, 8040.0, 8905.29])
    errors = np.array([0.2, 0.5, 0.3, 0.6])
    adu = energies / 5.9 + errors * rng.standard_normal(4)
    cal = calibrate(list(zip(adu, energies, errors)))
    for a, e, s in zip(adu, energies, errors):
        tolerance = 4 * np.hypot(cal.energy_error(a), cal.gain_eV_per_adu * s)
        assert abs(cal.apply(a) - e) < tolerance
    assert cal.inverse(cal.apply(1234.0)) == pytest.approx(1234.0)


def test_calibration_invariants():
    with pytest.raises(ValidationError) as excinfo:
        EnergyCalibration(-1.0, 0.0, 0.0, (("a", 1.0, 1.0), ("b", 2.0, 2.0)))
    assert excinfo.value.invariant == "positive_gain"
    with pytest.raises(ValidationError) as excinfo:
        EnergyCalibration(1.0, 0.0, 0.0, (("a", 1.0, 1.0),))
    assert excinfo.value.invariant == "min_fit_lines"


def test_calibration_round_trip(tmp_path):
    cal = calibrate([(1000.0, 5899.0, 0.2), (1100.0, 6490.0, 0.5)], labels=["Mn_Ka", "Mn_Kb"])
    other = calibrate([(1000.0, 5900.0), (1100.0, 6500.0)], labels=["Mn_Ka", "Mn_Kb"])
    cal_set = CalibrationSet(cal, {3: other})
    write_calibration(cal_set, tmp_path / "calib.json")
    back = read_calibration(tmp_path / "calib.json")
    assert back == cal_set
    assert back.for_ccd(3) == other
    assert back.for_ccd(0) == cal
    data = cal.to_dict()
    assert set(data) >= {"gain", "offset", "residual_at_6keV_eV", "fit_lines"}
    assert data["fit_lines"][0] == {"label": "Mn_Ka", "adu": 1000.0, "energy_eV": 5899.0}


def test_line_window():
    cfg = RunConfig()
    sigma_ka = cfg.response.sigma_eV(5898.75, cfg.constants)
    sigma_kb = cfg.response.sigma_eV(6490.45, cfg.constants)
    lo, hi = line_window("Mn_Ka", cfg)
    # The upper edge keeps clear of the Mn K-beta line.
    assert lo == pytest.approx((5898.75 - 2 * sigma_ka) / 5.9)
    assert hi == pytest.approx((6490.45 - 3 * sigma_kb) / 5.9)
    lo, hi = line_window("Mn_Kb", cfg)
    assert lo == pytest.approx((5898.75 + 3 * sigma_ka) / 5.9)
    assert hi == pytest.approx((6490.45 + 2 * sigma_kb) / 5.9)
    # Without neighbours the window is symmetric.
    lo, hi = line_window("Mn_Kb", cfg, ["Mn_Kb"])
    assert (lo + hi) / 2 == pytest.approx(6490.45 / 5.9)


def test_line_window_keeps_the_line():
    cfg = RunConfig()
    sigma = cfg.response.sigma_eV(8040.0, cfg.constants)
    lo, hi = line_window("Cu_Ka", cfg, ["Cu_anomalous", "Cu_Ka"])
    assert lo == pytest.approx((8040.0 - sigma) / 5.9)
    assert hi > 8040.0 / 5.9


def test_daily_calibration():
    cfg = RunConfig()
    cal = calibrate_events(calibration_events(cfg, 0), cfg).global_
    assert cal.gain_eV_per_adu == pytest.approx(5.9, rel=0.02)
    assert cal.apply(cfg.response.eV_to_adu(5898.75)) == pytest.approx(5898.75, abs=5.0)
    assert cal.residual_at_6keV_eV < 2.0
    assert [label for label, _, _ in cal.fit_lines] == ["Mn_Ka", "Mn_Kb"]


@pytest.mark.timeout(300)
def test_calibration_systematic_over_seeds():
    cfg = RunConfig()
    passed = 0
    for seed in range(100):
        try:
            cal = calibrate_events(calibration_events(cfg, seed), cfg).global_
        except VipsimError:
            continue
        passed += cal.residual_at_6keV_eV < 2.0
    assert passed >= 90


def test_per_ccd_calibration(caplog):
    cfg = RunConfig(calibration=CalibrationSettings(per_ccd=True))
    events = calibration_events(cfg, 1) + [AcceptedEvent(15, 0, 1000, 1)] * 5
    with caplog.at_level(logging.WARNING, logger="vipsim.calib"):
        cal_set = calibrate_events(events, cfg)
    assert sorted(cal_set.per_ccd) == list(range(cfg.geometry.active_ccds))
    assert cal_set.for_ccd(15) is cal_set.global_
    assert "ccd 15 uses the global calibration" in caplog.text
    for cal in cal_set.per_ccd.values():
        assert cal.gain_eV_per_adu == pytest.approx(5.9, rel=0.08)


def test_calibration_from_frames():
    cfg = RunConfig(geometry=DetectorGeometry(pixel_rows=200, pixel_cols=200))
    plan, mix, _ = run_setup(cfg, "calibration")
    events = []
    for i in range(30):
        frame = simulate_frame(cfg, mix, make_rng(9, i), frame_index=i, plan=plan)
        events += select_frame(frame, cfg)
    cal = calibrate_events(events, cfg).global_
    assert cal.gain_eV_per_adu == pytest.approx(5.9, rel=0.04)
    assert cal.apply(cfg.response.eV_to_adu(5898.75)) == pytest.approx(5898.75, abs=10.0)
