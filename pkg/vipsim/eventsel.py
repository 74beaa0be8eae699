"""Cluster finding and event-topology selection.

Clusters are the connected components of pixels strictly above the
pixel threshold. X-rays leave one or two pixels; cosmic-ray tracks and
other extended deposits are rejected on topology.
"""

import csv
import glob
import io
import logging
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Tuple

import numpy as np
from scipy import ndimage

from vipsim.detsim import simulate_frame_with_truth
from vipsim.io import read_frame
from vipsim.learner import AverageLearner, SequenceLearner
from vipsim.model import ResponseModel
from vipsim.runner import BlockingRunner, run_to_completion
from vipsim.utils import make_rng, write_atomic

logger = logging.getLogger(__name__)

EVENTS_HEADER = ["ccd_id", "frame_index", "adu", "n_pixels"]

_STRUCTURES = {
    4: ndimage.generate_binary_structure(2, 1),
    8: ndimage.generate_binary_structure(2, 2),
}


def topology_for(n_pixels):
    if n_pixels == 1:
        return "single"
    if n_pixels == 2:
        return "double"
    return "extended"


@dataclass(frozen=True)
class Cluster:
    ccd_id: int
    frame_index: int
    pixel_coords: Tuple[Tuple[int, int], ...]
    total_adu: int

    @property
    def n_pixels(self):
        return len(self.pixel_coords)

    @property
    def topology(self):
        return topology_for(self.n_pixels)

    @property
    def is_edge_adjacent(self):
        """True for a double whose pixels share an edge."""
        (r0, c0), (r1, c1) = self.pixel_coords[:2]
        return abs(r0 - r1) + abs(c0 - c1) == 1


@dataclass(frozen=True)
class AcceptedEvent:
    ccd_id: int
    frame_index: int
    adu: int
    n_pixels: int


def find_clusters(frame, threshold_adu, connectivity=4):
    """Maximal connected groups of pixels with ADU strictly above ``threshold_adu``.

    Clusters come out in raster order of their first pixel; the pixels of
    each cluster are in raster order too.
    """
    if connectivity not in _STRUCTURES:
        raise ValueError(f"connectivity must be 4 or 8, got {connectivity}")
    pixels = frame.pixels
    mask = pixels > threshold_adu
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    if n == 0:
        return []
    rows, cols = np.nonzero(labels)
    lab = labels[rows, cols]
    order = np.argsort(lab, kind="stable")
    rows, cols, lab = rows[order], cols[order], lab[order]
    values = pixels[rows, cols].astype(np.int64)
    bounds = np.cumsum(np.bincount(lab, minlength=n + 1)[1:])[:-1]
    sums = np.bincount(lab, weights=values, minlength=n + 1)[1:]

    clusters = []
    for r, c, total in zip(np.split(rows, bounds), np.split(cols, bounds), sums):
        coords = tuple(zip(r.tolist(), c.tolist()))
        clusters.append(Cluster(frame.ccd_id, frame.frame_index, coords, int(total)))
    # ndimage numbers components by their first pixel in raster order.
    return clusters


def select_xray_events(clusters, policy, response=None):
    """Keep single/double clusters whose summed ADU is inside the band.

    Parameters
    ----------
    clusters : list of `Cluster`
    policy : `~vipsim.model.SelectionPolicy`
    response : `~vipsim.model.ResponseModel`, optional
        Converts the policy's eV band to ADU.

    Returns
    -------
    list of `AcceptedEvent`
    """
    lo, hi = policy.band_adu(response or ResponseModel())
    accepted = []
    for cl in clusters:
        topology = cl.topology
        if topology not in policy.topologies:
            continue
        if topology == "double" and policy.require_edge_adjacent_double and not cl.is_edge_adjacent:
            continue
        if not lo <= cl.total_adu <= hi:
            continue
        accepted.append(AcceptedEvent(cl.ccd_id, cl.frame_index, cl.total_adu, cl.n_pixels))
    return accepted


def select_frame(frame, cfg):
    clusters = find_clusters(frame, cfg.response.pixel_threshold_adu, cfg.selection.connectivity)
    return select_xray_events(clusters, cfg.selection, cfg.response)


class SelectTask:
    """Picklable ``frame file -> list of AcceptedEvent``."""

    def __init__(self, cfg):
        self.cfg = cfg

    def __call__(self, path):
        frame = read_frame(path, expected_shape=self.cfg.geometry.shape)
        return select_frame(frame, self.cfg)


def frame_files(in_dir):
    return sorted(glob.glob(os.path.join(os.fspath(in_dir), "*.vipf")))


def select_directory(in_dir, cfg, *, executor=None):
    """Select the X-ray events of every frame file in ``in_dir``."""
    paths = frame_files(in_dir)
    task = SelectTask(cfg)
    if executor is None:
        per_frame = [task(p) for p in paths]
    else:
        per_frame = run_to_completion(SequenceLearner(task, paths), executor)
    events = [ev for evs in per_frame for ev in evs]
    logger.info("selected %d events from %d frames in %s", len(events), len(paths), in_dir)
    return events


def write_events(events, path):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(EVENTS_HEADER)
    for ev in events:
        writer.writerow([ev.ccd_id, ev.frame_index, ev.adu, ev.n_pixels])
    write_atomic(path, buf.getvalue())


def read_events(path):
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != EVENTS_HEADER:
            raise ValueError(f"{path}: expected header {EVENTS_HEADER}, got {header}")
        return [AcceptedEvent(*(int(v) for v in row)) for row in reader if row]


def events_adu(events):
    return np.array([ev.adu for ev in events], dtype=float)


# --- Truth-matched acceptance


@dataclass(frozen=True)
class AcceptanceReport:
    """Per-source fraction of deposits whose cluster passed the selection."""

    topologies: Tuple[str, ...]
    connectivity: int
    band_eV: Tuple[float, float]
    n_deposits: Dict[str, int] = field(default_factory=dict)
    n_accepted: Dict[str, int] = field(default_factory=dict)

    def fraction(self, source):
        n = self.n_deposits.get(source, 0)
        return self.n_accepted.get(source, 0) / n if n else float("nan")

    def _combined(self, xray):
        keys = [k for k in self.n_deposits if (k != "track") == xray]
        n = sum(self.n_deposits[k] for k in keys)
        return sum(self.n_accepted.get(k, 0) for k in keys) / n if n else float("nan")

    @property
    def xray_acceptance(self):
        return self._combined(True)

    @property
    def track_acceptance(self):
        return self._combined(False)

    def to_dict(self):
        return {
            "policy": {
                "topologies": list(self.topologies),
                "connectivity": self.connectivity,
                "band_eV": list(self.band_eV),
            },
            "sources": {
                k: {
                    "deposits": self.n_deposits[k],
                    "accepted": self.n_accepted.get(k, 0),
                    "fraction": self.fraction(k),
                }
                for k in sorted(self.n_deposits)
            },
            "xray_acceptance": self.xray_acceptance,
            "track_acceptance": self.track_acceptance,
        }


def _count_accepted(frame, deposits, cfg):
    clusters = find_clusters(frame, cfg.response.pixel_threshold_adu, cfg.selection.connectivity)
    owner = {}
    accepted = set()
    for i, cl in enumerate(clusters):
        if select_xray_events([cl], cfg.selection, cfg.response):
            accepted.add(i)
        for p in cl.pixel_coords:
            owner[p] = i
    n_dep, n_acc = Counter(), Counter()
    for dep in deposits:
        n_dep[dep.source] += 1
        if owner.get(dep.pixels[0]) in accepted:
            n_acc[dep.source] += 1
    return n_dep, n_acc


def acceptance_report(frames_with_truth, cfg):
    """Match clusters to simulated deposits and count per-source acceptance.

    A deposit counts as accepted when the cluster holding its first pixel
    is accepted.

    Parameters
    ----------
    frames_with_truth : iterable of ``(Frame, list of Deposit)``
    cfg : `~vipsim.model.RunConfig`
    """
    n_dep, n_acc = Counter(), Counter()
    for frame, deposits in frames_with_truth:
        d, a = _count_accepted(frame, deposits, cfg)
        n_dep.update(d)
        n_acc.update(a)
    policy = cfg.selection
    return AcceptanceReport(
        topologies=tuple(policy.topologies),
        connectivity=policy.connectivity,
        band_eV=tuple(policy.band_eV),
        n_deposits=dict(n_dep),
        n_accepted=dict(n_acc),
    )


class _AcceptanceTrial:
    def __init__(self, cfg, mix):
        self.cfg = cfg
        self.mix = mix

    def __call__(self, seed):
        rng = make_rng(self.cfg.run.rng_seed, 3, seed)
        frame, deposits = simulate_frame_with_truth(
            self.cfg, self.mix, rng, frame_index=seed, plan=self.cfg.run.replace(mode="current_off")
        )
        report = acceptance_report([(frame, deposits)], self.cfg)
        n = sum(v for k, v in report.n_deposits.items() if k != "track")
        if n == 0:
            return 1.0
        return report.xray_acceptance


def measure_efficiency(cfg, mix=None, *, atol=None, rtol=0.002, xrays_per_frame=50.0,
                       max_frames=500, executor=None):
    """Estimate the X-ray topology and band acceptance from truth-matched frames.

    Frames are drawn with ``xrays_per_frame`` continuum X-rays on top of
    the configured tracks until the standard error of the mean acceptance
    meets ``atol``/``rtol``.

    Returns
    -------
    mean, standard_error : float
    """
    mix = mix or cfg.sources.replace(continuum_rate_per_frame=xrays_per_frame)
    learner = AverageLearner(
        _AcceptanceTrial(cfg, mix), atol=atol, rtol=rtol, max_npoints=max_frames
    )
    BlockingRunner(learner, goal=lambda l: l.done(), executor=executor)
    logger.info(
        "X-ray acceptance %.4f +- %.4f from %d frames",
        learner.mean,
        learner.standard_error,
        learner.npoints,
    )
    return learner.mean, learner.standard_error
