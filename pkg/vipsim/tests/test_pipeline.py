import glob
import json
import os

import pytest

import vipsim
from vipsim.config import load_config
from vipsim.exceptions import PipelineError, VipsimError
from vipsim.limits import read_limit
from vipsim.model import (
    CalibrationSettings,
    DetectorGeometry,
    RunConfig,
    RunPlan,
    SimulationSettings,
    SourceMix,
)
from vipsim.pipeline import run_config, run_experiment, run_setup, verify_manifest
from vipsim.runner import SequentialExecutor

VALIDATION_DIR = os.path.join(os.path.dirname(vipsim.__file__), "data", "validation")
CORPUS = sorted(glob.glob(os.path.join(VALIDATION_DIR, "*.yaml")))

STAGES = [
    "config",
    "simulate_current_on",
    "simulate_current_off",
    "simulate_calibration",
    "select_current_on",
    "select_current_off",
    "select_calibration",
    "calibrate",
    "spectra_current_on",
    "spectra_current_off",
    "subtract",
    "roistats",
    "limit",
    "plotdata",
]


def small_config(seed=0, **sources):
    return RunConfig(
        geometry=DetectorGeometry(n_ccds=2, active_ccds=2, pixel_rows=128, pixel_cols=128),
        run=RunPlan(rng_seed=seed),
        sources=SourceMix(**{"calibration_rate_per_frame": 40.0, **sources}),
        calibration=CalibrationSettings(frames_per_ccd=20),
        simulation=SimulationSettings(thinning=100, workers=1),
    )


def read(path):
    with open(path, "rb") as f:
        return f.read()


def test_run_setup():
    cfg = small_config()
    plan, mix, scale = run_setup(cfg, "current_on")
    assert plan.n_frames == 15
    assert scale == pytest.approx(14510 / 150)
    assert mix == cfg.sources
    plan, mix, scale = run_setup(cfg, "calibration")
    assert (plan.mode, plan.n_frames, scale) == ("current_off", 20, 1.0)
    assert mix.calibration_source_active
    with pytest.raises(ValueError):
        run_setup(cfg, "calibrate")


def test_run_config(tmp_path):
    manifest, result = run_config(small_config(), tmp_path, executor=SequentialExecutor())
    assert manifest["status"] == "ok"
    assert [s["name"] for s in manifest["stages"]] == STAGES
    assert verify_manifest(manifest, tmp_path) == []
    assert read_limit(tmp_path / "limit.json") == result
    assert result.roi.exposure_scale == pytest.approx(14510 / 150)
    for name in ("config.yaml", "calib.json", "roistats.json", "subtracted.csv", "manifest.timing.json"):
        assert (tmp_path / name).exists()
    assert len(os.listdir(tmp_path / "frames" / "current_on")) == 2 * 15
    assert sorted(os.listdir(tmp_path / "plotdata")) == ["current_off.csv", "current_on.csv", "subtracted.csv"]
    # The written config reloads to the one that was run.
    assert load_config(tmp_path / "config.yaml") == small_config()


def test_run_is_deterministic(tmp_path):
    run_config(small_config(seed=3), tmp_path / "a", executor=SequentialExecutor())
    run_config(small_config(seed=3), tmp_path / "b", executor=SequentialExecutor())
    for name in ("manifest.json", "limit.json", "calib.json", os.path.join("events", "current_on.csv")):
        assert read(tmp_path / "a" / name) == read(tmp_path / "b" / name)


def test_seed_changes_the_data(tmp_path):
    run_config(small_config(seed=1), tmp_path / "a", executor=SequentialExecutor())
    run_config(small_config(seed=2), tmp_path / "b", executor=SequentialExecutor())
    assert read(tmp_path / "a" / "roistats.json") != read(tmp_path / "b" / "roistats.json")


def test_manifest_detects_tampering(tmp_path):
    manifest, _ = run_config(small_config(), tmp_path, executor=SequentialExecutor())
    with open(tmp_path / "roistats.json", "a") as f:
        f.write(" ")
    problems = verify_manifest(manifest, tmp_path)
    assert problems == ["roistats: output roistats.json changed on disk"]

    broken = json.loads(json.dumps(manifest))
    broken["stages"][1]["inputs"][0]["digest"] = "0" * 64
    assert any("does not match" in p for p in verify_manifest(broken))


def test_injected_signal_is_significant(tmp_path):
    _, result = run_config(small_config(injected_beta2_over_2=1e-25), tmp_path, executor=SequentialExecutor())
    assert result.roi.z_score > 3
    assert result.roi.delta > 0


def test_failed_stage_is_recorded(tmp_path):
    cfg = small_config(calibration_rate_per_frame=0.0)
    with pytest.raises(PipelineError) as e:
        run_config(cfg, tmp_path, executor=SequentialExecutor())
    assert e.value.stage == "calibrate"
    assert isinstance(e.value.__cause__, VipsimError)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["status"] == "failed"
    assert manifest["failed_stage"] == "calibrate"
    assert manifest["stages"][-1]["status"] == "failed"
    assert not (tmp_path / "limit.json").exists()


def test_run_experiment_with_bad_config(tmp_path):
    path = tmp_path / "bad.yaml"
    path.write_text("geometry:\n  n_ccds: 4\n  active_ccds: 5\n")
    with pytest.raises(PipelineError) as e:
        run_experiment(path, tmp_path / "out")
    assert e.value.stage == "load_config"
    manifest = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert manifest["failed_stage"] == "load_config"
    assert "active_ccds" in manifest["stages"][0]["error"]


def test_corpus_is_present():
    names = [os.path.basename(p) for p in CORPUS]
    assert "frascati.yaml" in names
    assert sum(n.startswith("invalid_") for n in names) >= 20
    assert sum(n.startswith("desk_") for n in names) >= 5


@pytest.mark.parametrize("path", CORPUS, ids=os.path.basename)
def test_corpus_loads_or_fails_cleanly(path):
    if os.path.basename(path).startswith("invalid_"):
        with pytest.raises(VipsimError):
            load_config(path)
    else:
        assert isinstance(load_config(path), RunConfig)


def test_frascati_config():
    cfg = load_config(os.path.join(VALIDATION_DIR, "frascati.yaml"))
    assert cfg == RunConfig()
    plan, _, scale = run_setup(cfg, "current_on")
    assert plan.n_frames == 15
    assert plan.duration_min * scale == 14510


@pytest.mark.slow
@pytest.mark.timeout(600)
@pytest.mark.parametrize(
    "path",
    [p for p in CORPUS if os.path.basename(p).startswith("desk_")],
    ids=os.path.basename,
)
def test_corpus_runs_without_crashing(path, tmp_path):
    try:
        manifest, result = run_experiment(path, tmp_path, executor=SequentialExecutor())
    except PipelineError as e:
        manifest = json.loads((tmp_path / "manifest.json").read_text())
        assert manifest["failed_stage"] == e.stage
        assert "starved" in os.path.basename(path)
    else:
        assert verify_manifest(manifest, tmp_path) == []
        assert result.beta2_over_2_bound > 0


@pytest.mark.slow
@pytest.mark.timeout(600)
def test_default_desk_experiment(tmp_path):
    manifest, result = run_experiment(os.path.join(VALIDATION_DIR, "frascati.yaml"), tmp_path)
    assert verify_manifest(manifest, tmp_path) == []
    assert 4.5e-28 / 3 < result.beta2_over_2_bound < 3 * 4.5e-28
