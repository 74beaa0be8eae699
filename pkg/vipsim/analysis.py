"""Spectra, current-on minus current-off subtraction and ROI statistics."""

import csv
import io
import logging
import math
import os
import warnings
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit
from scipy.stats import norm

from vipsim.calib import CalibrationSet, EnergyCalibration
from vipsim.exceptions import (
    BinningMismatchError,
    FitFailureError,
    SingularFitError,
    ValidationError,
)
from vipsim.model import Spectrum
from vipsim.utils import load_json, save_json, write_atomic

logger = logging.getLogger(__name__)

SUBTRACTED_HEADER = ["bin_lo_eV", "diff_counts", "diff_error", "n_on", "n_off"]


def calibrated_energies(events, calib):
    """Energies of ``events`` (list of `~vipsim.eventsel.AcceptedEvent`)."""
    if isinstance(calib, EnergyCalibration):
        calib = CalibrationSet(calib)
    if not events:
        return np.empty(0)
    ccd = np.array([ev.ccd_id for ev in events])
    adu = np.array([ev.adu for ev in events], dtype=float)
    energies = np.empty_like(adu)
    for ccd_id in np.unique(ccd):
        sel = ccd == ccd_id
        energies[sel] = calib.apply(int(ccd_id), adu[sel])
    return energies


def histogram(energies, binning):
    """Counts per ``[lo, hi)`` bin; values outside the binning are dropped."""
    energies = np.asarray(energies, dtype=float)
    index = np.floor((energies - binning.bin_lo_eV) / binning.bin_width_eV)
    index = index[(index >= 0) & (index < binning.n_bins)].astype(np.int64)
    return np.bincount(index, minlength=binning.n_bins)


def build_spectrum(events, calib, binning, exposure_min=0.0, mode="current_on"):
    """Histogram the calibrated energies of ``events``."""
    counts = histogram(calibrated_energies(list(events), calib), binning)
    return Spectrum(binning.bin_lo_eV, binning.bin_width_eV, counts, exposure_min, mode)


def spectrum_from_energies(energies, binning, exposure_min=0.0, mode="current_on"):
    return Spectrum(
        binning.bin_lo_eV, binning.bin_width_eV, histogram(energies, binning), exposure_min, mode
    )


@dataclass(frozen=True, eq=False)
class SubtractedSpectrum:
    """``diff = N_on - r * N_off`` per bin with ``sqrt(N_on + r**2 * N_off)`` errors."""

    bin_lo_eV: float
    bin_width_eV: float
    diff_counts: np.ndarray
    diff_errors: np.ndarray
    n_on: np.ndarray
    n_off: np.ndarray
    exposure_ratio: float
    roi: Tuple[float, float] = (7564.0, 7894.0)
    normalization: str = "time"

    def __post_init__(self):
        sizes = {len(self.diff_counts), len(self.diff_errors), len(self.n_on), len(self.n_off)}
        if len(sizes) != 1:
            raise ValidationError("per-bin arrays differ in length", invariant="equal_lengths")

    @property
    def n_bins(self):
        return len(self.diff_counts)

    @property
    def edges(self):
        return self.bin_lo_eV + self.bin_width_eV * np.arange(self.n_bins + 1)

    @property
    def centers(self):
        return self.bin_lo_eV + self.bin_width_eV * (np.arange(self.n_bins) + 0.5)

    @property
    def bin_hi_eV(self):
        return self.bin_lo_eV + self.bin_width_eV * self.n_bins


def _check_same_binning(on, off):
    if (on.bin_lo_eV, on.bin_width_eV, len(on.counts)) != (off.bin_lo_eV, off.bin_width_eV, len(off.counts)):
        raise BinningMismatchError(
            f"on spectrum ({on.bin_lo_eV}, {on.bin_width_eV} eV x {len(on.counts)}) and "
            f"off spectrum ({off.bin_lo_eV}, {off.bin_width_eV} eV x {len(off.counts)}) differ"
        )


def _in_windows(centers, windows):
    mask = np.zeros(centers.shape, dtype=bool)
    for lo, hi in windows:
        mask |= (centers >= lo) & (centers <= hi)
    return mask


def sideband_ratio(on, off, sidebands):
    """``r`` from the counts of both spectra inside the ``sidebands`` windows."""
    mask = _in_windows(on.centers, sidebands)
    n_off = off.counts[mask].sum()
    if n_off == 0:
        raise ValidationError(
            "no current-off counts in the sidebands", invariant="sideband_counts", field="sidebands_eV"
        )
    return float(on.counts[mask].sum() / n_off)


def subtract(on, off, *, normalization="time", sidebands=None, roi=(7564.0, 7894.0)):
    """Exposure-normalised difference of a current-on and a current-off spectrum.

    Parameters
    ----------
    on, off : `~vipsim.model.Spectrum`
    normalization : {"time", "sideband"}
        ``r`` is the exposure ratio, or the ratio of counts in ``sidebands``.
    sidebands : sequence of (lo_eV, hi_eV)
    roi : (lo_eV, hi_eV)
    """
    _check_same_binning(on, off)
    for s, name in ((on, "on"), (off, "off")):
        if not s.exposure_min > 0:
            raise ValidationError(
                f"{name} spectrum has no exposure", invariant="positive_exposure", field="exposure_min"
            )
    if normalization == "time":
        r = on.exposure_min / off.exposure_min
    elif normalization == "sideband":
        if not sidebands:
            raise ValidationError("sideband normalization needs sidebands", invariant="sideband_counts")
        r = sideband_ratio(on, off, sidebands)
    else:
        raise ValidationError(f"unknown normalization {normalization!r}", invariant="enum_value")

    n_on = on.counts.astype(float)
    n_off = off.counts.astype(float)
    return SubtractedSpectrum(
        bin_lo_eV=on.bin_lo_eV,
        bin_width_eV=on.bin_width_eV,
        diff_counts=n_on - r * n_off,
        diff_errors=np.sqrt(n_on + r ** 2 * n_off),
        n_on=on.counts.copy(),
        n_off=off.counts.copy(),
        exposure_ratio=float(r),
        roi=tuple(float(v) for v in roi),
        normalization=normalization,
    )


@dataclass(frozen=True)
class RoiStats:
    """Counts in the region of interest and the significance of the excess.

    ``exposure_scale`` is 1 for measured statistics; `extrapolate` sets it.
    """

    n_on: float
    n_off: float
    exposure_ratio: float
    delta: float
    sigma_delta: float
    z_score: float
    roi: Tuple[float, float] = (7564.0, 7894.0)
    exposure_scale: float = 1.0

    @classmethod
    def from_counts(cls, n_on, n_off, exposure_ratio, roi=(7564.0, 7894.0)):
        delta = n_on - exposure_ratio * n_off
        sigma = math.sqrt(n_on + exposure_ratio ** 2 * n_off)
        z = delta / sigma if sigma > 0 else 0.0
        return cls(float(n_on), float(n_off), float(exposure_ratio), float(delta), sigma, z, tuple(roi))

    def extrapolate(self, k):
        """The statistics expected after ``k`` times the exposure.

        Counts scale with ``k``, the error with ``sqrt(k)``, and the
        observed significance is kept.
        """
        if not k > 0:
            raise ValidationError(f"exposure scale must be > 0, got {k}", invariant="positive_exposure")
        sigma = self.sigma_delta * math.sqrt(k)
        return RoiStats(
            n_on=self.n_on * k,
            n_off=self.n_off * k,
            exposure_ratio=self.exposure_ratio,
            delta=self.z_score * sigma,
            sigma_delta=sigma,
            z_score=self.z_score,
            roi=self.roi,
            exposure_scale=self.exposure_scale * k,
        )

    def to_dict(self):
        return {
            "n_on": self.n_on,
            "n_off": self.n_off,
            "exposure_ratio": self.exposure_ratio,
            "delta": self.delta,
            "sigma_delta": self.sigma_delta,
            "z_score": self.z_score,
            "roi": list(self.roi),
            "exposure_scale": self.exposure_scale,
        }

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        data["roi"] = tuple(data["roi"])
        return cls(**data)


def roi_mask(sub):
    """Bins whose centres lie inside the ROI."""
    lo, hi = sub.roi
    if lo < sub.bin_lo_eV or hi > sub.bin_hi_eV:
        raise ValidationError(
            f"roi ({lo}, {hi}) eV is outside the spectrum [{sub.bin_lo_eV}, {sub.bin_hi_eV}]",
            invariant="roi_in_range",
            field="roi_eV",
        )
    centers = sub.centers
    return (centers >= lo) & (centers <= hi)


def roi_stats(sub):
    mask = roi_mask(sub)
    stats = RoiStats.from_counts(
        int(sub.n_on[mask].sum()), int(sub.n_off[mask].sum()), sub.exposure_ratio, sub.roi
    )
    logger.debug(
        "ROI %s eV: n_on=%d n_off=%d delta=%.2f sigma=%.2f z=%.2f",
        sub.roi,
        stats.n_on,
        stats.n_off,
        stats.delta,
        stats.sigma_delta,
        stats.z_score,
    )
    return stats


# --- Line fits


def _bin_fractions(edges, center, sigma):
    return np.diff(norm.cdf(edges, loc=center, scale=sigma))


def fit_fixed_line(sub, line_energy_eV, sigma_eV, *, half_width_eV=1000.0):
    """Area of a fixed-centre, fixed-width Gaussian on a linear background.

    Linear least squares on the subtracted spectrum within
    ``half_width_eV`` of the line; the amplitude is not constrained to be
    positive.

    Returns
    -------
    amplitude_counts, amplitude_error
    """
    if not sub.bin_lo_eV <= line_energy_eV <= sub.bin_hi_eV:
        raise ValidationError(
            f"line at {line_energy_eV} eV is outside the spectrum", invariant="line_in_range"
        )
    if not sigma_eV > 0:
        raise ValidationError("sigma_eV must be > 0", invariant="positive_resolution")
    centers = sub.centers
    sel = np.abs(centers - line_energy_eV) <= half_width_eV
    edges = sub.edges
    shape = _bin_fractions(edges, line_energy_eV, sigma_eV)[sel]
    x = (centers[sel] - line_energy_eV) / half_width_eV
    y = np.asarray(sub.diff_counts, dtype=float)[sel]
    err = np.asarray(sub.diff_errors, dtype=float)[sel]
    err = np.where(err > 0, err, 1.0)

    design = np.column_stack([shape, np.ones_like(x), x])
    weighted = design / err[:, None]
    if np.linalg.matrix_rank(weighted) < design.shape[1]:
        raise SingularFitError(
            f"design matrix is singular ({sel.sum()} bins around {line_energy_eV} eV)"
        )
    cov = np.linalg.inv(weighted.T @ weighted)
    pars = cov @ weighted.T @ (y / err)
    return float(pars[0]), float(np.sqrt(cov[0, 0]))


def _gauss_linear(x, area, mu, sigma, b0, b1, width):
    return area * width * norm.pdf(x, mu, sigma) + b0 + b1 * (x - mu)


@dataclass(frozen=True)
class PeakFit:
    center_eV: float
    center_error_eV: float
    sigma_eV: float
    area: float
    area_error: float


def fit_peak(spectrum, window, sigma_guess_eV=136.0):
    """Free-centre Gaussian plus linear background in ``window``.

    Works on a `~vipsim.model.Spectrum` (Poisson errors) or a
    `SubtractedSpectrum`.
    """
    if isinstance(spectrum, SubtractedSpectrum):
        y_all = np.asarray(spectrum.diff_counts, dtype=float)
        err_all = np.asarray(spectrum.diff_errors, dtype=float)
    else:
        y_all = spectrum.counts.astype(float)
        err_all = np.sqrt(y_all)
    lo, hi = window
    centers = spectrum.centers
    sel = (centers >= lo) & (centers <= hi)
    if sel.sum() < 6:
        raise FitFailureError("too few bins in the fit window", {"window": window})
    x, y = centers[sel], y_all[sel]
    err = np.where(err_all[sel] > 0, err_all[sel], 1.0)
    width = spectrum.bin_width_eV

    p0 = [max(y.sum(), 1.0), float(x[np.argmax(y)]), sigma_guess_eV, float(np.median(y[:3])), 0.0]
    diagnostics = {"window": window, "p0": p0}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", OptimizeWarning)
            pars, cov = curve_fit(
                lambda x, a, mu, s, b0, b1: _gauss_linear(x, a, mu, s, b0, b1, width),
                x,
                y,
                p0=p0,
                sigma=err,
                absolute_sigma=True,
                maxfev=5000,
            )
    except (RuntimeError, OptimizeWarning) as e:
        diagnostics["message"] = str(e)
        raise FitFailureError(f"peak fit did not converge: {e}", diagnostics) from e
    perr = np.sqrt(np.diag(cov))
    if not np.all(np.isfinite(perr)):
        diagnostics.update(pars=pars.tolist(), message="undefined parameter errors")
        raise FitFailureError("peak fit gave undefined parameter errors", diagnostics)
    return PeakFit(float(pars[1]), float(perr[1]), abs(float(pars[2])), float(pars[0]), float(perr[0]))


# --- Plot data and persistence


def plot_data(spectrum):
    """``(x, y, yerr)`` rows for a `Spectrum` or a `SubtractedSpectrum`."""
    if isinstance(spectrum, SubtractedSpectrum):
        y = np.asarray(spectrum.diff_counts, dtype=float)
        yerr = np.asarray(spectrum.diff_errors, dtype=float)
    else:
        y = spectrum.counts.astype(float)
        yerr = np.sqrt(y)
    return list(zip(spectrum.centers.tolist(), y.tolist(), yerr.tolist()))


def write_plot_data(spectrum, path):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["x", "y", "yerr"])
    for row in plot_data(spectrum):
        writer.writerow([repr(v) for v in row])
    write_atomic(path, buf.getvalue())


def _sidecar(path):
    root, _ = os.path.splitext(os.fspath(path))
    return root + ".json"


def write_subtracted(sub, path):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SUBTRACTED_HEADER)
    for lo, d, e, a, b in zip(sub.edges[:-1], sub.diff_counts, sub.diff_errors, sub.n_on, sub.n_off):
        writer.writerow([repr(float(lo)), repr(float(d)), repr(float(e)), int(a), int(b)])
    write_atomic(path, buf.getvalue())
    save_json(
        _sidecar(path),
        {
            "bin_lo_eV": sub.bin_lo_eV,
            "bin_width_eV": sub.bin_width_eV,
            "n_bins": sub.n_bins,
            "exposure_ratio": sub.exposure_ratio,
            "roi": list(sub.roi),
            "normalization": sub.normalization,
        },
    )


def read_subtracted(path):
    meta = load_json(_sidecar(path))
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != SUBTRACTED_HEADER:
            raise ValueError(f"{path}: unexpected header {header}")
        rows = [row for row in reader if row]
    if len(rows) != meta["n_bins"]:
        raise ValueError(f"{path}: {len(rows)} rows, sidecar declares {meta['n_bins']}")
    cols = list(zip(*rows)) if rows else [()] * 5
    return SubtractedSpectrum(
        bin_lo_eV=meta["bin_lo_eV"],
        bin_width_eV=meta["bin_width_eV"],
        diff_counts=np.array(cols[1], dtype=float),
        diff_errors=np.array(cols[2], dtype=float),
        n_on=np.array(cols[3], dtype=np.int64),
        n_off=np.array(cols[4], dtype=np.int64),
        exposure_ratio=meta["exposure_ratio"],
        roi=tuple(meta["roi"]),
        normalization=meta["normalization"],
    )


def write_roi_stats(stats, path):
    save_json(path, stats.to_dict())


def read_roi_stats(path):
    return RoiStats.from_dict(load_json(path))
