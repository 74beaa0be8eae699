"""End-to-end orchestration of one simulated experiment.

Every stage writes its outputs to disk and records the digests of what it
read and wrote in ``manifest.json``; wall-clock times go to
``manifest.timing.json`` so that the manifest itself is reproducible.

Output layout::

    config.yaml
    frames/{current_on,current_off,calibration}/ccdNN_frameNNNNNN.vipf
    frames/{current_on,current_off,calibration}.json
    events/{current_on,current_off,calibration}.csv
    calib.json
    spectra/{current_on,current_off}.csv (+ .json)
    subtracted.csv (+ .json)
    roistats.json
    limit.json
    plotdata/{current_on,current_off,subtracted}.csv
"""

import contextlib
import logging
import os
import time
from datetime import datetime, timezone

from vipsim import analysis, calib, detsim, eventsel, limits
from vipsim.config import config_digest, config_to_dict, dump_config, load_config
from vipsim.exceptions import PipelineError
from vipsim.io import read_spectrum, write_spectrum
from vipsim.runner import executor_for
from vipsim.utils import load_json, save_json, sha256_path

logger = logging.getLogger(__name__)

MODES = ("current_on", "current_off")
SIM_MODES = MODES + ("calibration",)


def run_setup(cfg, mode):
    """``(plan, mix, exposure_scale)`` of the simulated run for ``mode``.

    Physics runs are thinned by ``simulation.thinning``; ``exposure_scale``
    brings them back to the configured duration. The calibration run is a
    short current-off run with the source in place.
    """
    if mode == "calibration":
        base = cfg.plan_for("current_off")
        plan = base.replace(duration_min=cfg.calibration.frames_per_ccd * base.frame_exposure_min)
        mix = cfg.sources.replace(calibration_source_active=True, injected_beta2_over_2=0.0)
        return plan, mix, 1.0
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    plan, scale = cfg.desk_plan(cfg.plan_for(mode))
    return plan, cfg.sources, scale


def simulate_stage(cfg, mode, out_dir, *, executor=None):
    """Write the frames of ``mode`` to ``out_dir/<mode>/`` plus a run record.

    Returns ``(frame_dir, record_path)``.
    """
    plan, mix, scale = run_setup(cfg, mode)
    frame_dir = os.path.join(out_dir, mode)
    for stale in eventsel.frame_files(frame_dir):
        os.remove(stale)
    stream = "calibration" if mode == "calibration" else None
    names = detsim.write_run(cfg, mix, plan, frame_dir, executor=executor, stream=stream)
    record = os.path.join(out_dir, f"{mode}.json")
    save_json(
        record,
        {
            "mode": mode,
            "seed": plan.rng_seed,
            "n_frames": len(names),
            "frames_per_ccd": plan.n_frames,
            "duration_min": plan.duration_min,
            "exposure_scale": scale,
            "config_digest": config_digest(cfg),
            "config": config_to_dict(cfg),
        },
    )
    return frame_dir, record


def select_stage(cfg, frame_dir, out_path, *, executor=None):
    events = eventsel.select_directory(frame_dir, cfg, executor=executor)
    eventsel.write_events(events, out_path)
    return events


def calibrate_stage(cfg, events_path, out_path, labels=None):
    calibration = calib.calibrate_events(eventsel.read_events(events_path), cfg, labels)
    calib.write_calibration(calibration, out_path)
    return calibration


def spectra_stage(cfg, events_path, calib_path, mode, out_path):
    plan, _, _ = run_setup(cfg, mode)
    spectrum = analysis.build_spectrum(
        eventsel.read_events(events_path),
        calib.read_calibration(calib_path),
        cfg.analysis.binning,
        exposure_min=plan.duration_min,
        mode=mode,
    )
    write_spectrum(spectrum, out_path)
    return spectrum


def subtract_stage(cfg, on_path, off_path, out_path):
    a = cfg.analysis
    sub = analysis.subtract(
        read_spectrum(on_path),
        read_spectrum(off_path),
        normalization=a.normalization,
        sidebands=a.sidebands_eV,
        roi=a.roi_eV,
    )
    analysis.write_subtracted(sub, out_path)
    return sub


def roistats_stage(sub_path, out_path):
    stats = analysis.roi_stats(analysis.read_subtracted(sub_path))
    analysis.write_roi_stats(stats, out_path)
    return stats


def limit_stage(cfg, roistats_path, out_path):
    """Scale the measured ROI statistics to the configured exposure and set the bound."""
    roi = analysis.read_roi_stats(roistats_path)
    _, _, scale = run_setup(cfg, "current_on")
    if scale != 1 and roi.exposure_scale == 1:
        roi = roi.extrapolate(scale)
    result = limits.bound_from_config(roi, cfg)
    locality = limits.locality_from_config(result, cfg)
    limits.write_limit(
        result,
        out_path,
        config_digest=config_digest(cfg),
        locality=locality,
        projection=limits.project_scenario(cfg),
    )
    return result


def read_any_spectrum(path):
    """A spectrum or a subtracted spectrum, told apart by the sidecar."""
    meta = load_json(os.path.splitext(path)[0] + ".json")
    if "exposure_ratio" in meta:
        return analysis.read_subtracted(path)
    return read_spectrum(path)


def plotdata_stage(inputs, out_dir):
    """``inputs`` maps output names to spectrum or subtracted-spectrum CSVs."""
    outputs = []
    for name, path in inputs.items():
        spectrum = read_any_spectrum(path)
        out = os.path.join(out_dir, f"{name}.csv")
        analysis.write_plot_data(spectrum, out)
        outputs.append(out)
    return outputs


# --- Manifest


class _Recorder:
    def __init__(self, out_dir, cfg_digest, seed):
        self.out_dir = out_dir
        self.manifest = {
            "config_digest": cfg_digest,
            "master_seed": seed,
            "stages": [],
            "status": "running",
        }
        self.timing = {"started_utc": _now(), "stages": {}}

    def _entry(self, path):
        return {
            "path": os.path.relpath(path, self.out_dir).replace(os.sep, "/"),
            "digest": sha256_path(path),
        }

    def save(self):
        save_json(os.path.join(self.out_dir, "manifest.json"), self.manifest)
        save_json(os.path.join(self.out_dir, "manifest.timing.json"), self.timing)

    @contextlib.contextmanager
    def stage(self, name, inputs=()):
        entry = {
            "name": name,
            "inputs": [self._entry(p) for p in inputs],
            "outputs": [],
            "status": "running",
        }
        self.manifest["stages"].append(entry)
        started, t0 = _now(), time.perf_counter()
        outputs = []
        logger.info("stage %s", name)
        try:
            yield outputs
            entry["outputs"] = [self._entry(p) for p in outputs]
        except Exception as e:
            entry["status"] = "failed"
            entry["error"] = f"{type(e).__name__}: {e}"
            self.manifest["status"] = "failed"
            self.manifest["failed_stage"] = name
            self._time(name, started, t0)
            self.save()
            logger.error("stage %s failed: %s", name, e)
            raise PipelineError(str(e), stage=name) from e
        entry["status"] = "ok"
        self._time(name, started, t0)

    def _time(self, name, started, t0):
        self.timing["stages"][name] = {
            "started_utc": started,
            "wall_s": time.perf_counter() - t0,
        }


def _now():
    return datetime.now(timezone.utc).isoformat()


def verify_manifest(manifest, out_dir=None):
    """Problems with the digest chain of ``manifest``; empty when it is valid.

    Every stage input must have been produced, with the same digest, by an
    earlier stage. With ``out_dir`` the recorded outputs are also checked
    against the files on disk.
    """
    problems = []
    produced = {}
    for stage in manifest.get("stages", []):
        for item in stage.get("inputs", []):
            digest = produced.get(item["path"])
            if digest is None:
                problems.append(f"{stage['name']}: input {item['path']} was not produced earlier")
            elif digest != item["digest"]:
                problems.append(f"{stage['name']}: input {item['path']} digest does not match its producer")
        for item in stage.get("outputs", []):
            produced[item["path"]] = item["digest"]
            if out_dir is not None:
                path = os.path.join(out_dir, item["path"])
                if not os.path.exists(path):
                    problems.append(f"{stage['name']}: output {item['path']} is missing")
                elif sha256_path(path) != item["digest"]:
                    problems.append(f"{stage['name']}: output {item['path']} changed on disk")
        if stage.get("status") != "ok":
            problems.append(f"{stage['name']}: status {stage.get('status')}")
    return problems


def run_config(cfg, out_dir, *, executor=None):
    """Run every stage for ``cfg`` into ``out_dir``.

    Returns
    -------
    manifest : dict
    result : `~vipsim.limits.LimitResult`
    """
    out_dir = os.fspath(out_dir)
    os.makedirs(out_dir, exist_ok=True)
    rec = _Recorder(out_dir, config_digest(cfg), cfg.run.rng_seed)
    own_executor = executor is None
    executor = executor or executor_for(cfg.simulation.workers)

    def p(*parts):
        return os.path.join(out_dir, *parts)

    try:
        with rec.stage("config") as out:
            dump_config(cfg, p("config.yaml"))
            out.append(p("config.yaml"))

        frame_dirs = {}
        for mode in SIM_MODES:
            with rec.stage(f"simulate_{mode}", [p("config.yaml")]) as out:
                frame_dirs[mode], record = simulate_stage(cfg, mode, p("frames"), executor=executor)
                out += [frame_dirs[mode], record]

        for mode in SIM_MODES:
            with rec.stage(f"select_{mode}", [frame_dirs[mode]]) as out:
                select_stage(cfg, frame_dirs[mode], p("events", f"{mode}.csv"), executor=executor)
                out.append(p("events", f"{mode}.csv"))

        with rec.stage("calibrate", [p("events", "calibration.csv")]) as out:
            calibrate_stage(cfg, p("events", "calibration.csv"), p("calib.json"))
            out.append(p("calib.json"))

        for mode in MODES:
            with rec.stage(f"spectra_{mode}", [p("events", f"{mode}.csv"), p("calib.json")]) as out:
                spectra_stage(cfg, p("events", f"{mode}.csv"), p("calib.json"), mode, p("spectra", f"{mode}.csv"))
                out += [p("spectra", f"{mode}.csv"), p("spectra", f"{mode}.json")]

        spectra = [p("spectra", f"{m}.csv") for m in MODES] + [p("spectra", f"{m}.json") for m in MODES]
        with rec.stage("subtract", spectra) as out:
            subtract_stage(cfg, p("spectra", "current_on.csv"), p("spectra", "current_off.csv"), p("subtracted.csv"))
            out += [p("subtracted.csv"), p("subtracted.json")]

        with rec.stage("roistats", [p("subtracted.csv"), p("subtracted.json")]) as out:
            roistats_stage(p("subtracted.csv"), p("roistats.json"))
            out.append(p("roistats.json"))

        with rec.stage("limit", [p("roistats.json")]) as out:
            result = limit_stage(cfg, p("roistats.json"), p("limit.json"))
            out.append(p("limit.json"))

        plot_inputs = {
            "current_on": p("spectra", "current_on.csv"),
            "current_off": p("spectra", "current_off.csv"),
            "subtracted": p("subtracted.csv"),
        }
        with rec.stage("plotdata", spectra + [p("subtracted.csv"), p("subtracted.json")]) as out:
            out += plotdata_stage(plot_inputs, p("plotdata"))
    finally:
        if own_executor:
            executor.shutdown(wait=True)

    rec.manifest["status"] = "ok"
    rec.timing["finished_utc"] = _now()
    rec.save()
    logger.info("experiment done: beta2/2 < %.3g", result.beta2_over_2_bound)
    return rec.manifest, result


def run_experiment(config_path, out_dir, *, executor=None):
    """Load ``config_path`` and run the whole experiment into ``out_dir``."""
    try:
        cfg = load_config(config_path)
    except Exception as e:
        os.makedirs(out_dir, exist_ok=True)
        rec = _Recorder(os.fspath(out_dir), None, None)
        rec.manifest["stages"].append(
            {"name": "load_config", "inputs": [], "outputs": [], "status": "failed", "error": f"{type(e).__name__}: {e}"}
        )
        rec.manifest["status"] = "failed"
        rec.manifest["failed_stage"] = "load_config"
        rec.save()
        raise PipelineError(str(e), stage="load_config") from e
    return run_config(cfg, out_dir, executor=executor)
