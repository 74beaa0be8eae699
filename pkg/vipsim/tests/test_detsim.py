import os

import numpy as np
import pytest

from vipsim.detsim import (
    anomalous_rate,
    frame_rng,
    simulate_event_energies,
    simulate_frame,
    simulate_frame_with_truth,
    simulate_run,
    write_run,
)
from vipsim.eventsel import acceptance_report, select_frame
from vipsim.exceptions import ValidationError
from vipsim.io import read_frame
from vipsim.model import (
    DetectorGeometry,
    PhysicsConstants,
    ResponseModel,
    RunConfig,
    RunPlan,
    SourceMix,
)
from vipsim.runner import SequentialExecutor
from vipsim.utils import make_rng

QUIET = SourceMix(
    continuum_rate_per_frame=0.0,
    cu_kalpha_rate_per_frame=0.0,
    cu_kbeta_rate_per_frame=0.0,
    cosmic_track_rate_per_frame=0.0,
)


def small_config(rows=32, cols=32, **run):
    geometry = DetectorGeometry(pixel_rows=rows, pixel_cols=cols)
    return RunConfig(geometry=geometry, run=RunPlan(**run))


def test_no_violation_no_signal():
    cfg = RunConfig()
    assert anomalous_rate(0.0, cfg.run, cfg.geometry, cfg.constants, 0.01) == 0


def test_unit_case():
    consts = PhysicsConstants(capture_factor=1.0)
    # One electron per frame, one scattering along the conductor.
    plan = RunPlan(current_A=consts.electron_charge_C / 60, duration_min=1.0, frame_exposure_min=1.0)
    geom = DetectorGeometry(conductor_length_mm=consts.electron_mfp_copper_m * 1e3)
    assert anomalous_rate(1.0, plan, geom, consts, 1.0) == pytest.approx(1.0, rel=1e-12)


def test_frascati_rate():
    cfg = RunConfig()
    rate = anomalous_rate(1e-25, cfg.run, cfg.geometry, cfg.constants, 0.01)
    assert rate == pytest.approx(33.8, rel=1e-3)
    assert anomalous_rate(2e-25, cfg.run, cfg.geometry, cfg.constants, 0.01) == pytest.approx(2 * rate)
    off = cfg.run.replace(mode="current_off")
    assert anomalous_rate(1e-25, off, cfg.geometry, cfg.constants, 0.01) == 0


@pytest.mark.parametrize("active_ccds", [1, 4, 14])
def test_anomalous_rate_is_shared_by_the_active_ccds(active_ccds):
    cfg = RunConfig(geometry=DetectorGeometry(active_ccds=active_ccds))
    rate = anomalous_rate(1e-25, cfg.run, cfg.geometry, cfg.constants, cfg.limits.efficiency)
    mix = QUIET.replace(injected_beta2_over_2=1e-25)
    energies = simulate_event_energies(cfg, mix, rng=np.random.default_rng(active_ccds))
    expected = rate * cfg.run.n_frames
    assert abs(len(energies) - expected) < 5 * np.sqrt(expected)


@pytest.mark.parametrize("efficiency", [0.0, -0.1, 1.5])
def test_efficiency_range(efficiency):
    cfg = RunConfig()
    with pytest.raises(ValidationError) as excinfo:
        anomalous_rate(1e-27, cfg.run, cfg.geometry, cfg.constants, efficiency)
    assert excinfo.value.invariant == "efficiency_range"


def test_empty_frame():
    cfg = RunConfig(
        geometry=DetectorGeometry(pixel_rows=16, pixel_cols=16),
        response=ResponseModel(readout_noise_adu=0.0),
    )
    frame = simulate_frame(cfg, QUIET, np.random.default_rng(0))
    assert frame.shape == (16, 16)
    assert not frame.pixels.any()


def test_frames_are_deterministic():
    cfg = small_config()
    plan = cfg.run
    a = simulate_frame(cfg, cfg.sources, frame_rng(plan, 2, 5), ccd_id=2, frame_index=5)
    b = simulate_frame(cfg, cfg.sources, frame_rng(plan, 2, 5), ccd_id=2, frame_index=5)
    c = simulate_frame(cfg, cfg.sources, frame_rng(plan, 3, 5), ccd_id=3, frame_index=5)
    assert a == b
    assert not np.array_equal(a.pixels, c.pixels)


def test_modes_use_different_streams():
    cfg = small_config()
    on = frame_rng(cfg.run, 0, 0).random()
    off = frame_rng(cfg.run.replace(mode="current_off"), 0, 0).random()
    calibration = frame_rng(cfg.run, 0, 0, stream="calibration").random()
    assert len({on, off, calibration}) == 3


def test_deposits():
    cfg = small_config(64, 64)
    mix = cfg.sources.replace(continuum_rate_per_frame=5.0, cosmic_track_rate_per_frame=2.0)
    frame, deposits = simulate_frame_with_truth(cfg, mix, np.random.default_rng(3))
    assert deposits
    for dep in deposits:
        assert all(0 <= r < 64 and 0 <= c < 64 for r, c in dep.pixels)
        if dep.is_xray:
            assert len(dep.pixels) in (1, 2)
            if len(dep.pixels) == 2:
                (r0, c0), (r1, c1) = dep.pixels
                assert abs(r0 - r1) + abs(c0 - c1) == 1
            assert 2000 <= dep.energy_eV <= 12000 or dep.source != "continuum"
        else:
            assert len(dep.pixels) <= 50
            lo, hi = cfg.response.eV_to_adu((15000.0, 30000.0))
            assert all(lo <= a <= hi for a in dep.adu)


def test_tracks_are_edge_connected():
    cfg = small_config(256, 256)
    mix = QUIET.replace(cosmic_track_rate_per_frame=20.0)
    _, deposits = simulate_frame_with_truth(cfg, mix, np.random.default_rng(7))
    for dep in deposits:
        for (r0, c0), (r1, c1) in zip(dep.pixels, dep.pixels[1:]):
            assert abs(r0 - r1) + abs(c0 - c1) == 1


def test_pixels_are_clamped():
    cfg = small_config(8, 8)
    mix = QUIET.replace(cosmic_track_rate_per_frame=400.0)
    frame = simulate_frame(cfg, mix, np.random.default_rng(0))
    assert frame.pixels.max() == 65535


@pytest.mark.parametrize(
    "duration, n_frames",
    [(100.0, 140), (0.0, 0)],
)
def test_simulate_run_frame_count(duration, n_frames):
    cfg = small_config(duration_min=duration)
    frames = list(simulate_run(cfg, cfg.sources))
    assert len(frames) == n_frames
    if frames:
        assert [(f.ccd_id, f.frame_index) for f in frames[9:11]] == [(0, 9), (1, 0)]


def test_serial_and_parallel_runs_agree():
    cfg = small_config(duration_min=30.0)
    serial = list(simulate_run(cfg, cfg.sources))
    parallel = list(simulate_run(cfg, cfg.sources, executor=SequentialExecutor()))
    assert serial == parallel


def test_runs_depend_on_the_seed():
    cfg = small_config(duration_min=10.0)
    a = list(simulate_run(cfg, cfg.sources))
    b = list(simulate_run(cfg, cfg.sources, cfg.run.replace(rng_seed=1)))
    assert a != b


def test_write_run(tmp_path):
    cfg = small_config(duration_min=20.0)
    names = write_run(cfg, cfg.sources, cfg.run, tmp_path, executor=SequentialExecutor())
    assert len(names) == 28
    assert sorted(os.listdir(tmp_path)) == sorted(names)
    first = list(simulate_run(cfg, cfg.sources))[0]
    assert read_frame(tmp_path / names[0]) == first


def test_current_off_has_no_anomalous_line():
    cfg = small_config(64, 64)
    mix = cfg.sources.replace(injected_beta2_over_2=1e-25)
    on, off = cfg.run, cfg.run.replace(mode="current_off")
    n_on = n_off = 0
    for i in range(20):
        _, deps = simulate_frame_with_truth(cfg, mix, make_rng(0, i), plan=on)
        n_on += sum(d.source == "Cu_anomalous" for d in deps)
        _, deps = simulate_frame_with_truth(cfg, mix, make_rng(0, i), plan=off)
        n_off += sum(d.source == "Cu_anomalous" for d in deps)
    assert n_on > 0
    assert n_off == 0


def test_cu_kalpha_energy_is_reconstructed():
    cfg = small_config(128, 128)
    mix = QUIET.replace(cu_kalpha_rate_per_frame=20.0)
    adu = []
    for i in range(20):
        frame = simulate_frame(cfg, mix, make_rng(1, i))
        adu += [ev.adu for ev in select_frame(frame, cfg)]
    energies = cfg.response.adu_to_eV(adu)
    sigma = cfg.response.sigma_eV(8040.0, cfg.constants)
    assert len(energies) > 300
    assert abs(energies.mean() - 8040.0) < 3 * sigma / np.sqrt(len(energies))


def test_poisson_consistency():
    cfg = small_config(64, 64)
    mix = QUIET.replace(continuum_rate_per_frame=1.0, cu_kalpha_rate_per_frame=0.5)
    n_frames = 1000
    frames = (simulate_frame_with_truth(cfg, mix, make_rng(2, i)) for i in range(n_frames))
    report = acceptance_report(frames, cfg)
    for source, rate in (("continuum", 1.0), ("Cu_Ka", 0.5)):
        expected = rate * n_frames
        assert abs(report.n_accepted[source] - expected) < 4 * np.sqrt(expected)


def test_event_level_counts():
    cfg = RunConfig()
    mix = cfg.sources.replace(injected_beta2_over_2=1e-27)
    n_ccd_frames = cfg.geometry.active_ccds * cfg.run.n_frames
    energies, sources = simulate_event_energies(
        cfg, mix, rng=np.random.default_rng(5), with_sources=True
    )
    lo, hi = cfg.selection.band_eV
    assert energies.min() >= lo and energies.max() <= hi
    expected = mix.cu_kalpha_rate_per_frame * n_ccd_frames
    assert abs(np.sum(sources == "Cu_Ka") - expected) < 4 * np.sqrt(expected)
    expected = anomalous_rate(1e-27, cfg.run, cfg.geometry, cfg.constants, 0.01) * cfg.run.n_frames
    assert abs(np.sum(sources == "Cu_anomalous") - expected) < 4 * np.sqrt(expected)


def test_signal_scales_linearly():
    cfg = RunConfig()
    counts = {}
    for beta in (1e-27, 2e-27):
        mix = cfg.sources.replace(injected_beta2_over_2=beta)
        total = 0
        for seed in range(20):
            _, sources = simulate_event_energies(
                cfg, mix, rng=np.random.default_rng(seed), with_sources=True
            )
            total += np.sum(sources == "Cu_anomalous")
        counts[beta] = total
    ratio = counts[2e-27] / counts[1e-27]
    # About 9800 signal events at the lower rate.
    assert ratio == pytest.approx(2.0, abs=0.1)


def test_event_level_current_off_has_no_signal():
    cfg = RunConfig()
    mix = cfg.sources.replace(injected_beta2_over_2=1e-25)
    _, sources = simulate_event_energies(
        cfg, mix, cfg.run.replace(mode="current_off"), np.random.default_rng(0), with_sources=True
    )
    assert not np.any(sources == "Cu_anomalous")
