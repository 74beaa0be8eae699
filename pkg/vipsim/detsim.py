"""Monte Carlo generation of CCD frames.

Every frame draws from its own random stream, derived from the run seed,
the run mode, the CCD and the frame index, so frames can be produced in
any order and on any number of workers with identical results.
"""

import logging
import math
import os
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from vipsim.exceptions import ValidationError
from vipsim.io import frame_filename, write_frame
from vipsim.model import ADU_MAX, Frame
from vipsim.runner import run_to_completion
from vipsim.learner import SequenceLearner
from vipsim.utils import make_rng

logger = logging.getLogger(__name__)

# Per-pixel energy of a minimum-ionising track segment, well above the X-ray band.
TRACK_PIXEL_EV = (15000.0, 30000.0)
TRACK_LENGTH_PX = (5, 50)
# Fraction of the charge that goes to the neighbour of a shared deposit.
SHARE_SPLIT = (0.2, 0.8)

_STREAMS = {"current_on": 0, "current_off": 1, "calibration": 2}
_NEIGHBOURS = ((-1, 0), (1, 0), (0, -1), (0, 1))


@dataclass(frozen=True)
class Deposit:
    """Truth record of one simulated deposit.

    ``energy_eV`` is the true line (or continuum) energy, ``measured_eV``
    the energy after detector smearing. ``adu`` holds the charge per pixel
    before readout noise.
    """

    source: str
    energy_eV: float
    measured_eV: float
    pixels: Tuple[Tuple[int, int], ...]
    adu: Tuple[float, ...]

    @property
    def is_xray(self):
        return self.source != "track"


def anomalous_rate(beta2_over_2, plan, geom, consts, efficiency):
    """Mean number of detected anomalous X-rays per detector frame.

    A detector frame is one readout of all active CCDs; the rate of a single
    CCD frame is this divided by ``geom.active_ccds``, which is how the frame
    simulators share it out.

    ``(beta2/2) * (I * dt / e) * (D / mu) * f_capt * eps`` with ``dt`` the
    frame exposure. Zero for current-off runs.
    """
    if not 0 < efficiency <= 1:
        raise ValidationError(
            f"efficiency must lie in (0, 1], got {efficiency}",
            invariant="efficiency_range",
            field="efficiency",
        )
    if beta2_over_2 < 0:
        raise ValidationError(
            "beta2_over_2 must be >= 0", invariant="probability_range", field="beta2_over_2"
        )
    electrons = plan.effective_current_A * plan.frame_exposure_min * 60 / consts.electron_charge_C
    return (
        beta2_over_2
        * electrons
        * consts.scattering_count(geom)
        * consts.capture_factor
        * efficiency
    )


def _line_sources(cfg, mix, plan):
    """``[(label, energy or None, mean per CCD frame)]``; ``None`` means continuum."""
    lines = cfg.lines
    sources = [
        ("continuum", None, mix.continuum_rate_per_frame),
        ("Cu_Ka", lines.energy("Cu_Ka"), mix.cu_kalpha_rate_per_frame),
        ("Cu_Kb", lines.energy("Cu_Kb"), mix.cu_kbeta_rate_per_frame),
    ]
    if mix.injected_beta2_over_2 > 0 and plan.mode == "current_on":
        rate = anomalous_rate(
            mix.injected_beta2_over_2, plan, cfg.geometry, cfg.constants, cfg.limits.efficiency
        )
        sources.append(("Cu_anomalous", lines.energy("Cu_anomalous"), rate / cfg.geometry.active_ccds))
    if mix.calibration_source_active:
        labels = cfg.calibration.lines
        weights = np.array([lines[label].relative_intensity for label in labels])
        weights = weights / weights.sum()
        for label, w in zip(labels, weights):
            sources.append((label, lines.energy(label), mix.calibration_rate_per_frame * w))
    return sources


def _draw_energies(cfg, mix, source, energy, n, rng):
    if energy is None:
        lo, hi = mix.continuum_range_eV
        return rng.uniform(lo, hi, size=n)
    return np.full(n, float(energy))


def _smear(cfg, energies, rng):
    if energies.size == 0:
        return energies
    sigma = cfg.response.sigma_eV(energies, cfg.constants)
    return np.clip(energies + sigma * rng.standard_normal(energies.size), 0, None)


def _track_pixels(shape, rng):
    """Pixels of a straight, 4-connected segment of uniform length and orientation."""
    rows, cols = shape
    length = int(rng.integers(TRACK_LENGTH_PX[0], TRACK_LENGTH_PX[1] + 1))
    theta = rng.uniform(0, 2 * math.pi)
    r0 = rng.uniform(0, rows)
    c0 = rng.uniform(0, cols)
    dr, dc = math.sin(theta), math.cos(theta)
    path = [(int(r0), int(c0))]
    t = 0.0
    while len(path) < length:
        t += 0.25
        r, c = int(math.floor(r0 + t * dr)), int(math.floor(c0 + t * dc))
        pr, pc = path[-1]
        if (r, c) == (pr, pc):
            continue
        if r != pr and c != pc:
            # Keep the segment edge-connected.
            path.append((r, pc))
            if len(path) == length:
                break
        path.append((r, c))
    return [(r, c) for r, c in path if 0 <= r < rows and 0 <= c < cols]


def _xray_pixels(shape, adu, sharing, rng):
    rows, cols = shape
    r = int(rng.integers(rows))
    c = int(rng.integers(cols))
    if rng.random() >= sharing:
        return ((r, c),), (adu,)
    candidates = [
        (r + dr, c + dc) for dr, dc in _NEIGHBOURS if 0 <= r + dr < rows and 0 <= c + dc < cols
    ]
    neighbour = candidates[int(rng.integers(len(candidates)))]
    split = rng.uniform(*SHARE_SPLIT)
    return ((r, c), neighbour), (adu * (1 - split), adu * split)


def simulate_frame_with_truth(cfg, mix, rng, *, ccd_id=0, frame_index=0, plan=None):
    """Simulate one CCD frame and return it with its list of `Deposit`\\s.

    Parameters
    ----------
    cfg : `~vipsim.model.RunConfig`
    mix : `~vipsim.model.SourceMix`
    rng : `numpy.random.Generator`
        The frame's own random stream.
    ccd_id, frame_index : int
    plan : `~vipsim.model.RunPlan`, optional
        Run the frame belongs to; sets the exposure and, through the
        current, the anomalous-line rate. Defaults to ``cfg.run``.

    Returns
    -------
    frame : `~vipsim.model.Frame`
    deposits : list of `Deposit`
    """
    plan = plan or cfg.run
    response = cfg.response
    shape = cfg.geometry.shape
    image = np.zeros(shape, dtype=float)
    deposits = []

    for source, energy, mean in _line_sources(cfg, mix, plan):
        n = int(rng.poisson(mean)) if mean > 0 else 0
        if n == 0:
            continue
        true = _draw_energies(cfg, mix, source, energy, n, rng)
        measured = _smear(cfg, true, rng)
        adus = response.eV_to_adu(measured)
        for e_true, e_meas, adu in zip(true, measured, np.atleast_1d(adus)):
            pixels, split = _xray_pixels(shape, max(float(adu), 0.0), response.charge_sharing_fraction, rng)
            for (r, c), a in zip(pixels, split):
                image[r, c] += a
            deposits.append(Deposit(source, float(e_true), float(e_meas), pixels, split))

    n_tracks = int(rng.poisson(mix.cosmic_track_rate_per_frame)) if mix.cosmic_track_rate_per_frame > 0 else 0
    adu_lo, adu_hi = response.eV_to_adu(TRACK_PIXEL_EV)
    for _ in range(n_tracks):
        pixels = _track_pixels(shape, rng)
        if not pixels:
            continue
        adu = rng.uniform(adu_lo, adu_hi, size=len(pixels))
        for (r, c), a in zip(pixels, adu):
            image[r, c] += a
        deposits.append(Deposit("track", float("nan"), float("nan"), tuple(pixels), tuple(adu.tolist())))

    if response.readout_noise_adu > 0:
        image += response.readout_noise_adu * rng.standard_normal(shape)
    pixels = np.clip(np.rint(image), 0, ADU_MAX).astype(np.uint16)
    frame = Frame(ccd_id, frame_index, plan.frame_exposure_min, pixels)
    logger.debug(
        "ccd %d frame %d: %d deposits (%d tracks)", ccd_id, frame_index, len(deposits), n_tracks
    )
    return frame, deposits


def simulate_frame(cfg, mix, rng, *, ccd_id=0, frame_index=0, plan=None):
    """Simulate one CCD frame; see `simulate_frame_with_truth`."""
    frame, _ = simulate_frame_with_truth(
        cfg, mix, rng, ccd_id=ccd_id, frame_index=frame_index, plan=plan
    )
    return frame


def frame_rng(plan, ccd_id, frame_index, stream=None):
    """The random stream of one frame of ``plan``."""
    stream = plan.mode if stream is None else stream
    return make_rng(plan.rng_seed, _STREAMS[stream], ccd_id, frame_index)


def frame_tasks(cfg, plan):
    """``(ccd_id, frame_index)`` for every frame of the run, CCD-major."""
    return [
        (ccd_id, frame_index)
        for ccd_id in range(cfg.geometry.active_ccds)
        for frame_index in range(plan.n_frames)
    ]


class FrameTask:
    """Picklable ``(ccd_id, frame_index) -> Frame`` for executors.

    With ``out_dir`` the frame is written there and its file name is
    returned instead.
    """

    def __init__(self, cfg, mix, plan, out_dir=None, stream=None):
        self.cfg = cfg
        self.mix = mix
        self.plan = plan
        self.out_dir = out_dir
        self.stream = stream

    def __call__(self, task):
        ccd_id, frame_index = task
        rng = frame_rng(self.plan, ccd_id, frame_index, self.stream)
        frame = simulate_frame(
            self.cfg, self.mix, rng, ccd_id=ccd_id, frame_index=frame_index, plan=self.plan
        )
        if self.out_dir is None:
            return frame
        fname = frame_filename(ccd_id, frame_index)
        write_frame(frame, os.path.join(self.out_dir, fname))
        return fname


def simulate_run(cfg, mix, plan=None, *, executor=None, stream=None):
    """Yield ``duration / exposure`` frames for every active CCD.

    Without an ``executor`` frames are generated lazily in the current
    process; with one they are produced in parallel and yielded in the
    same order.
    """
    plan = plan or cfg.run
    tasks = frame_tasks(cfg, plan)
    task = FrameTask(cfg, mix, plan, stream=stream)
    if executor is None:
        for t in tasks:
            yield task(t)
    else:
        yield from run_to_completion(SequenceLearner(task, tasks), executor)


def write_run(cfg, mix, plan, out_dir, *, executor=None, stream=None):
    """Simulate a run straight to frame files in ``out_dir``.

    Returns the file names in task order.
    """
    tasks = frame_tasks(cfg, plan)
    os.makedirs(out_dir, exist_ok=True)
    task = FrameTask(cfg, mix, plan, out_dir=os.fspath(out_dir), stream=stream)
    if executor is None:
        names = [task(t) for t in tasks]
    else:
        names = run_to_completion(SequenceLearner(task, tasks), executor)
    logger.info("wrote %d %s frames to %s", len(names), stream or plan.mode, out_dir)
    return names


def simulate_event_energies(cfg, mix, plan=None, rng=None, *, with_sources=False):
    """Reconstructed energies of the selected X-ray events of a whole run.

    Event-level shortcut for ensemble studies: the number of events per
    source is Poisson around ``rate * n_ccd_frames``, energies are smeared
    with the response model and cut to the selection band. Pixel
    rendering, tracks and clustering are skipped; the result matches frame
    simulation followed by ideal topology selection.

    Returns
    -------
    energies : ndarray
    sources : ndarray of str
        Only with ``with_sources=True``.
    """
    plan = plan or cfg.run
    rng = rng if rng is not None else np.random.default_rng(plan.rng_seed)
    n_ccd_frames = cfg.geometry.active_ccds * plan.n_frames
    energies, labels = [], []
    for source, energy, mean in _line_sources(cfg, mix, plan):
        n = int(rng.poisson(mean * n_ccd_frames)) if mean > 0 else 0
        measured = _smear(cfg, _draw_energies(cfg, mix, source, energy, n, rng), rng)
        energies.append(measured)
        labels.append(np.full(n, source, dtype=object))
    energies = np.concatenate(energies) if energies else np.empty(0)
    labels = np.concatenate(labels) if labels else np.empty(0, dtype=object)
    lo, hi = cfg.selection.band_eV
    keep = (energies >= lo) & (energies <= hi)
    if with_sources:
        return energies[keep], labels[keep]
    return energies[keep]
