"""Energy calibration from source lines fitted in ADU space."""

import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.optimize import OptimizeWarning, curve_fit

from vipsim.exceptions import (
    FitFailureError,
    InsufficientStatisticsError,
    SingularFitError,
    ValidationError,
)
from vipsim.eventsel import AcceptedEvent
from vipsim.utils import load_json, save_json

logger = logging.getLogger(__name__)

RESIDUAL_REFERENCE_EV = 6000.0
LINE_CLEARANCE_SIGMAS = 3.0


def _gauss_const(x, amplitude, mu, sigma, const):
    return amplitude * np.exp(-0.5 * ((x - mu) / sigma) ** 2) + const


@dataclass(frozen=True)
class EnergyCalibration:
    """Linear ADU to eV mapping ``E = gain * adu + offset``.

    ``fit_lines`` holds ``(label, fitted_adu_centroid, known_energy_eV)``.
    ``covariance`` is the 2x2 covariance of ``(gain, offset)``.
    """

    gain_eV_per_adu: float
    offset_eV: float
    residual_at_6keV_eV: float
    fit_lines: Tuple[Tuple[str, float, float], ...]
    covariance: Optional[Tuple[Tuple[float, float], Tuple[float, float]]] = None

    def __post_init__(self):
        if not self.gain_eV_per_adu > 0:
            raise ValidationError(
                f"gain must be > 0, got {self.gain_eV_per_adu}", invariant="positive_gain", field="gain"
            )
        if not self.residual_at_6keV_eV >= 0:
            raise ValidationError(
                "residual_at_6keV_eV must be >= 0",
                invariant="non_negative_residual",
                field="residual_at_6keV_eV",
            )
        if len(self.fit_lines) < 2:
            raise ValidationError("at least two fit lines are needed", invariant="min_fit_lines", field="fit_lines")

    def apply(self, adu):
        return self.gain_eV_per_adu * np.asarray(adu, dtype=float) + self.offset_eV

    def inverse(self, energy_eV):
        return (np.asarray(energy_eV, dtype=float) - self.offset_eV) / self.gain_eV_per_adu

    def energy_error(self, adu):
        """Standard error of the calibrated energy at ``adu``."""
        if self.covariance is None:
            return np.zeros_like(np.asarray(adu, dtype=float))[()]
        cov = np.asarray(self.covariance)
        adu = np.asarray(adu, dtype=float)
        var = cov[0, 0] * adu ** 2 + 2 * cov[0, 1] * adu + cov[1, 1]
        return np.sqrt(np.clip(var, 0, None))[()]

    def to_dict(self):
        return {
            "gain": self.gain_eV_per_adu,
            "offset": self.offset_eV,
            "residual_at_6keV_eV": self.residual_at_6keV_eV,
            "fit_lines": [
                {"label": label, "adu": adu, "energy_eV": energy}
                for label, adu, energy in self.fit_lines
            ],
            "covariance": None if self.covariance is None else [list(r) for r in self.covariance],
        }

    @classmethod
    def from_dict(cls, data):
        cov = data.get("covariance")
        return cls(
            gain_eV_per_adu=float(data["gain"]),
            offset_eV=float(data["offset"]),
            residual_at_6keV_eV=float(data["residual_at_6keV_eV"]),
            fit_lines=tuple(
                (d["label"], float(d["adu"]), float(d["energy_eV"])) for d in data["fit_lines"]
            ),
            covariance=None if cov is None else tuple(tuple(float(v) for v in r) for r in cov),
        )


@dataclass(frozen=True)
class CalibrationSet:
    """A global calibration plus optional per-CCD ones that override it."""

    global_: EnergyCalibration
    per_ccd: Dict[int, EnergyCalibration] = field(default_factory=dict)

    def for_ccd(self, ccd_id):
        return self.per_ccd.get(ccd_id, self.global_)

    def apply(self, ccd_id, adu):
        return self.for_ccd(ccd_id).apply(adu)

    def to_dict(self):
        data = self.global_.to_dict()
        data["per_ccd"] = {str(k): v.to_dict() for k, v in sorted(self.per_ccd.items())}
        return data

    @classmethod
    def from_dict(cls, data):
        per_ccd = {int(k): EnergyCalibration.from_dict(v) for k, v in data.get("per_ccd", {}).items()}
        return cls(EnergyCalibration.from_dict(data), per_ccd)


def fit_line_centroid(events, window, *, min_events=50, n_bins=None, maxfev=2000):
    """Fit a Gaussian plus constant to the events inside ``window``.

    Parameters
    ----------
    events : array of ADU values, or list of `~vipsim.eventsel.AcceptedEvent`
    window : (adu_lo, adu_hi)
    min_events : int
        Fewer events inside the window raise `InsufficientStatisticsError`.
    n_bins : int, optional
        Histogram bins; defaults to ``sqrt(n)`` clipped to [10, 100].
        Integer ADU values are binned in whole ADU.
    maxfev : int
        Bound on the function evaluations of the fit.

    Returns
    -------
    centroid_adu, centroid_error_adu, amplitude
        ``amplitude`` is the fitted Gaussian area in events.
    """
    adu = _as_adu(events)
    lo, hi = map(float, window)
    if not lo < hi:
        raise ValueError(f"window must satisfy lo < hi, got {window}")
    inside = adu[(adu >= lo) & (adu <= hi)]
    n = inside.size
    if n < min_events:
        raise InsufficientStatisticsError(
            f"{n} events in window [{lo:g}, {hi:g}] ADU, at least {min_events} needed"
        )
    n_bins = n_bins or int(np.clip(np.sqrt(n), 10, 100))
    counts, edges = np.histogram(inside, bins=_bin_edges(inside, lo, hi, n_bins))
    x = 0.5 * (edges[1:] + edges[:-1])
    width = edges[1] - edges[0]
    sigma_y = np.sqrt(np.maximum(counts, 1))

    p0 = [
        float(counts.max()),
        float(inside.mean()),
        float(max(inside.std(), width)),
        float(counts.min()),
    ]
    diagnostics = {"window": (lo, hi), "n_events": n, "n_bins": n_bins, "p0": p0}
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("error", OptimizeWarning)
            pars, cov = curve_fit(
                _gauss_const,
                x,
                counts,
                p0=p0,
                sigma=sigma_y,
                absolute_sigma=True,
                maxfev=maxfev,
            )
    except (RuntimeError, OptimizeWarning) as e:
        diagnostics["message"] = str(e)
        raise FitFailureError(f"line fit did not converge: {e}", diagnostics) from e

    amplitude, mu, sigma, _ = pars
    mu_err = float(np.sqrt(cov[1, 1])) if np.isfinite(cov[1, 1]) else np.inf
    if not (lo <= mu <= hi) or not np.isfinite(mu_err):
        diagnostics.update(pars=pars.tolist(), message="centroid outside window or undefined error")
        raise FitFailureError("line fit gave an unphysical centroid", diagnostics)
    area = float(amplitude * abs(sigma) * np.sqrt(2 * np.pi) / width)
    logger.debug("centroid %.3f +- %.3f ADU from %d events", mu, mu_err, n)
    return float(mu), mu_err, area


def _bin_edges(values, lo, hi, n_bins):
    """``n_bins`` equal bins over ``[lo, hi]``; whole-ADU bins centred on
    integers when every value is an integer."""
    if not np.all(values == np.round(values)):
        return np.linspace(lo, hi, n_bins + 1)
    first, last = np.ceil(lo), np.floor(hi)
    step = max(1, int(round((hi - lo) / n_bins)))
    n = max(1, int((last - first + 1) // step))
    return first - 0.5 + step * np.arange(n + 1)


def _as_adu(events):
    events = list(events) if not isinstance(events, np.ndarray) else events
    if len(events) and isinstance(events[0], AcceptedEvent):
        return np.array([ev.adu for ev in events], dtype=float)
    return np.asarray(events, dtype=float)


def calibrate(centroids, labels=None):
    """Weighted linear least squares of known energy against fitted ADU.

    Parameters
    ----------
    centroids : sequence of ``(adu, energy_eV)`` or ``(adu, energy_eV, adu_error)``
        With errors the fit is weighted and the covariance absolute;
        without, the covariance is scaled by the residual variance.
    labels : sequence of str, optional

    Returns
    -------
    `EnergyCalibration`
    """
    rows = [tuple(c) for c in centroids]
    if len(rows) < 2:
        raise SingularFitError(f"{len(rows)} calibration point(s), at least two needed")
    adu = np.array([r[0] for r in rows], dtype=float)
    energy = np.array([r[1] for r in rows], dtype=float)
    has_errors = all(len(r) > 2 and r[2] is not None for r in rows)
    adu_err = np.array([r[2] for r in rows], dtype=float) if has_errors else None
    labels = list(labels) if labels is not None else [f"line{i}" for i in range(len(rows))]

    if np.ptp(adu) == 0:
        raise SingularFitError("all calibration centroids share the same ADU value")

    if len(rows) == 2:
        (a0, a1), (e0, e1) = adu, energy
        gain = (e1 - e0) / (a1 - a0)
        offset = e0 - gain * a0
    else:
        gain, offset = np.polyfit(adu, energy, 1)

    design = np.column_stack([adu, np.ones_like(adu)])
    if has_errors:
        # Weight by the centroid errors expressed in eV.
        w = 1 / (np.abs(gain) * adu_err) ** 2
        normal = design.T @ (w[:, None] * design)
        try:
            cov = np.linalg.inv(normal)
        except np.linalg.LinAlgError as e:
            raise SingularFitError(f"singular normal matrix: {e}") from e
        if len(rows) > 2:
            gain, offset = cov @ design.T @ (w * energy)
    else:
        normal = design.T @ design
        dof = len(rows) - 2
        if dof > 0:
            chi2 = np.sum((energy - gain * adu - offset) ** 2)
            cov = np.linalg.inv(normal) * chi2 / dof
        else:
            cov = np.zeros((2, 2))

    residuals = np.abs(energy - (gain * adu + offset))
    order = np.argsort(energy)
    interpolated = float(np.interp(RESIDUAL_REFERENCE_EV, energy[order], residuals[order]))
    adu_ref = (RESIDUAL_REFERENCE_EV - offset) / gain
    propagated = float(np.sqrt(max(cov[0, 0] * adu_ref ** 2 + 2 * cov[0, 1] * adu_ref + cov[1, 1], 0)))

    return EnergyCalibration(
        gain_eV_per_adu=float(gain),
        offset_eV=float(offset),
        residual_at_6keV_eV=float(np.hypot(propagated, interpolated)),
        fit_lines=tuple(
            (label, float(a), float(e)) for label, a, e in zip(labels, adu, energy)
        ),
        covariance=tuple(tuple(float(v) for v in row) for row in cov),
    )


def line_window(label, cfg, neighbours=None):
    """ADU window of ``window_sigmas`` resolution widths around the nominal line position.

    The window is cut back to stay `LINE_CLEARANCE_SIGMAS` resolution widths
    clear of the ``neighbours`` (default: the configured calibration lines),
    but never to less than one width on either side of the line.
    """
    response, consts = cfg.response, cfg.constants
    energy = cfg.lines.energy(label)
    sigma = float(response.sigma_eV(energy, consts))
    half = cfg.calibration.window_sigmas * sigma
    lo, hi = energy - half, energy + half
    for other in neighbours or cfg.calibration.lines:
        if other == label:
            continue
        other_energy = cfg.lines.energy(other)
        clearance = LINE_CLEARANCE_SIGMAS * float(response.sigma_eV(other_energy, consts))
        if other_energy > energy:
            hi = max(min(hi, other_energy - clearance), energy + sigma)
        else:
            lo = min(max(lo, other_energy + clearance), energy - sigma)
    return float(response.eV_to_adu(lo)), float(response.eV_to_adu(hi))


def _calibrate_adu(adu, cfg, labels):
    points = []
    for label in labels:
        mu, err, _ = fit_line_centroid(
            adu, line_window(label, cfg, labels), min_events=cfg.calibration.min_events
        )
        points.append((mu, cfg.lines.energy(label), err))
    return calibrate(points, labels)


def calibrate_events(events, cfg, labels=None):
    """Calibrate from the accepted events of a calibration-source run.

    With ``cfg.calibration.per_ccd`` every CCD gets its own calibration;
    CCDs with too few events fall back to the global one.

    Returns
    -------
    `CalibrationSet`
    """
    labels = tuple(labels or cfg.calibration.lines)
    events = list(events)
    adu = _as_adu(events) if events else np.empty(0)
    global_ = _calibrate_adu(adu, cfg, labels)
    logger.info(
        "global calibration: gain %.5f eV/ADU, offset %.3f eV, residual at 6 keV %.3f eV",
        global_.gain_eV_per_adu,
        global_.offset_eV,
        global_.residual_at_6keV_eV,
    )
    if global_.residual_at_6keV_eV >= 2.0:
        logger.warning("energy-scale error at 6 keV is %.2f eV", global_.residual_at_6keV_eV)

    per_ccd = {}
    if cfg.calibration.per_ccd:
        ccds = np.array([ev.ccd_id for ev in events])
        for ccd_id in np.unique(ccds):
            try:
                per_ccd[int(ccd_id)] = _calibrate_adu(adu[ccds == ccd_id], cfg, labels)
            except (InsufficientStatisticsError, FitFailureError, SingularFitError) as e:
                logger.warning("ccd %d uses the global calibration: %s", ccd_id, e)
    return CalibrationSet(global_, per_ccd)


def write_calibration(calibration, path):
    if isinstance(calibration, EnergyCalibration):
        calibration = CalibrationSet(calibration)
    save_json(path, calibration.to_dict())


def read_calibration(path):
    return CalibrationSet.from_dict(load_json(path))
