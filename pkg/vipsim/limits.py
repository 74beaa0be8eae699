"""Upper bounds on beta^2/2 from ROI statistics.

The bound follows the Ramberg-Snow counting argument::

    beta2/2 <= N_up / ((Q / e) * (D / mu) * f_capt * eps)

where ``N_up`` is the upper fluctuation of the ROI excess.
"""

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal, localcontext
from typing import Optional, Tuple

import numpy as np
from scipy.stats import chi2, norm

from vipsim.analysis import RoiStats
from vipsim.exceptions import ValidationError
from vipsim.model import REFERENCE, DetectorGeometry, RunPlan
from vipsim.utils import load_json, save_json

logger = logging.getLogger(__name__)

# Enough digits to hold any double exactly.
_EXACT_PRECISION = 1200


def _check_efficiency(efficiency):
    if not 0 < efficiency <= 1:
        raise ValidationError(
            f"efficiency must lie in (0, 1], got {efficiency}",
            invariant="efficiency_range",
            field="efficiency",
        )


def quon_from_beta2(beta2_over_2):
    """``q`` from ``(1 + q) / 2 = beta2/2``, exact in decimal arithmetic."""
    with localcontext() as ctx:
        ctx.prec = _EXACT_PRECISION
        return 2 * Decimal(beta2_over_2) - 1


def beta2_from_quon(q):
    with localcontext() as ctx:
        ctx.prec = _EXACT_PRECISION
        return (1 + q) / 2


def ramberg_snow(n_up, n_new_electrons, n_int, capture_factor, efficiency):
    return n_up / (n_new_electrons * n_int * capture_factor * efficiency)


def zero_count_upper(confidence_level):
    """Poisson upper limit on the mean for zero observed events."""
    return 0.5 * chi2.ppf(confidence_level, 2)


def poisson_upper(n_on, n_off, exposure_ratio, confidence_level):
    """Classical upper limit on the signal counts, background subtracted.

    ``0.5 * chi2_CL(2 (n_on + 1)) - r * n_off``, floored at the zero-count limit.
    """
    s_up = 0.5 * chi2.ppf(confidence_level, 2 * (n_on + 1)) - exposure_ratio * n_off
    return float(max(s_up, zero_count_upper(confidence_level)))


@dataclass(frozen=True)
class LimitResult:
    """The beta^2/2 bound with every factor that went into it."""

    beta2_over_2_bound: float
    confidence_level: float
    n_new_electrons: float
    n_int: float
    capture_factor: float
    efficiency: float
    n_up_counts: float
    method: str
    quon_q_bound: Decimal = field(init=False)
    roi: Optional[RoiStats] = None

    def __post_init__(self):
        if not self.beta2_over_2_bound > 0:
            raise ValidationError("bound must be > 0", invariant="positive_bound")
        q = quon_from_beta2(self.beta2_over_2_bound)
        if not -1 <= q <= 1:
            raise ValidationError(f"quon q={q} outside [-1, 1]", invariant="quon_range")
        object.__setattr__(self, "quon_q_bound", q)

    def recompute(self):
        """The bound from the recorded factors alone."""
        return ramberg_snow(
            self.n_up_counts, self.n_new_electrons, self.n_int, self.capture_factor, self.efficiency
        )

    def improvement_over(self, reference_bound=None):
        """How many times tighter this bound is than ``reference_bound``.

        Defaults to the earlier gas-detector result in the reference data.
        """
        if reference_bound is None:
            reference_bound = REFERENCE["previous_bound"]["beta2_over_2"]
        return reference_bound / self.beta2_over_2_bound

    def to_dict(self):
        return {
            "beta2_over_2_bound": self.beta2_over_2_bound,
            "confidence_level": self.confidence_level,
            "n_new_electrons": self.n_new_electrons,
            "n_int": self.n_int,
            "capture_factor": self.capture_factor,
            "efficiency": self.efficiency,
            "n_up_counts": self.n_up_counts,
            "method": self.method,
            "quon_q_bound": str(self.quon_q_bound),
            "roi": None if self.roi is None else self.roi.to_dict(),
        }

    @classmethod
    def from_dict(cls, data):
        roi = data.get("roi")
        return cls(
            beta2_over_2_bound=data["beta2_over_2_bound"],
            confidence_level=data["confidence_level"],
            n_new_electrons=data["n_new_electrons"],
            n_int=data["n_int"],
            capture_factor=data["capture_factor"],
            efficiency=data["efficiency"],
            n_up_counts=data["n_up_counts"],
            method=data["method"],
            roi=None if roi is None else RoiStats.from_dict(roi),
        )


def rs_bound(roi, plan, geom, consts, efficiency, *, method="gaussian_3sigma",
             n_sigma=3.0, confidence_level=0.997):
    """Upper bound on beta^2/2 from the ROI statistics of a current-on run.

    Parameters
    ----------
    roi : `~vipsim.analysis.RoiStats`
        Statistics scaled to the exposure of ``plan``.
    plan : `~vipsim.model.RunPlan`
        The current-on run.
    geom, consts, efficiency
        Conductor geometry, physics constants and detection efficiency.
    method : {"gaussian_3sigma", "poisson_upper"}
        ``N_up = max(delta, 0) + n_sigma * sigma``, or the classical
        Poisson upper limit at ``confidence_level``.

    Returns
    -------
    `LimitResult`
    """
    _check_efficiency(efficiency)
    n_new = plan.n_new_electrons(consts)
    if not n_new > 0:
        raise ValidationError(
            "the run injects no electrons (zero exposure, zero current or current off)",
            invariant="positive_exposure",
            field="duration_min",
        )
    if method == "gaussian_3sigma":
        n_up = max(roi.delta, 0.0) + n_sigma * roi.sigma_delta
    elif method == "poisson_upper":
        n_up = poisson_upper(roi.n_on, roi.n_off, roi.exposure_ratio, confidence_level)
    else:
        raise ValidationError(f"unknown method {method!r}", invariant="enum_value", field="method")
    if n_up <= 0:
        n_up = zero_count_upper(confidence_level)
        logger.warning("empty ROI, using the zero-count limit N_up = %.3f", n_up)

    n_int = consts.scattering_count(geom)
    bound = ramberg_snow(n_up, n_new, n_int, consts.capture_factor, efficiency)
    logger.info("beta2/2 < %.3g at %.1f%% CL (%s, N_up=%.1f)", bound, 100 * confidence_level, method, n_up)
    return LimitResult(
        beta2_over_2_bound=bound,
        confidence_level=confidence_level,
        n_new_electrons=n_new,
        n_int=n_int,
        capture_factor=consts.capture_factor,
        efficiency=efficiency,
        n_up_counts=n_up,
        method=method,
        roi=roi,
    )


def bound_from_config(roi, cfg, plan=None):
    plan = plan or cfg.plan_for("current_on")
    lim = cfg.limits
    return rs_bound(
        roi,
        plan,
        cfg.geometry,
        cfg.constants,
        lim.efficiency,
        method=lim.method,
        n_sigma=lim.n_sigma,
        confidence_level=lim.confidence_level,
    )


# --- Sensitivity


@dataclass(frozen=True)
class Projection:
    """Expected bound of a background-limited null run.

    ``time_exponent`` and ``current_exponent`` give how the bound scales
    with run time and current.
    """

    bound: float
    n_up_counts: float
    background_counts: float
    time_exponent: float
    current_exponent: float = -1.0
    scenario: Optional[Tuple[Tuple[str, float], ...]] = None

    def to_dict(self):
        return {
            "bound": self.bound,
            "n_up_counts": self.n_up_counts,
            "background_counts": self.background_counts,
            "time_exponent": self.time_exponent,
            "current_exponent": self.current_exponent,
            "scenario": None if self.scenario is None else dict(self.scenario),
        }


def sensitivity_projection(plan, background_rate_in_roi, consts, efficiency, *, geom=None,
                           n_sigma=3.0, confidence_level=0.997):
    """Projected bound ``n_sigma * sqrt(2 b T) / ((I T / e) (D / mu) f eps)``.

    ``background_rate_in_roi`` is in counts per minute, per run mode.
    Without background the bound is signal-limited: the zero-count upper
    limit over the same denominator, scaling as ``1 / T``.
    """
    if background_rate_in_roi < 0:
        raise ValidationError("background rate must be >= 0", invariant="non_negative_rate")
    _check_efficiency(efficiency)
    geom = geom or DetectorGeometry()
    background = background_rate_in_roi * plan.duration_min
    if background > 0:
        n_up = n_sigma * math.sqrt(2 * background)
        exponent = -0.5
    else:
        n_up = zero_count_upper(confidence_level)
        exponent = -1.0
    denominator = (
        plan.n_new_electrons(consts) * consts.scattering_count(geom) * consts.capture_factor * efficiency
    )
    bound = n_up / denominator if denominator > 0 else math.inf
    return Projection(bound, n_up, background, exponent)


def roi_window(cfg):
    """Energy span of the ROI bins (those with centres inside the ROI)."""
    binning = cfg.analysis.binning
    lo, hi = cfg.analysis.roi_eV
    centers = binning.centers
    inside = np.nonzero((centers >= lo) & (centers <= hi))[0]
    if inside.size == 0:
        return lo, lo
    edges = binning.edges
    return float(edges[inside[0]]), float(edges[inside[-1] + 1])


def expected_roi_background(cfg, mix=None):
    """Expected accepted ROI counts per CCD frame without anomalous signal.

    Flat continuum density plus the Gaussian tails of the Cu lines.
    """
    mix = mix or cfg.sources
    lo, hi = roi_window(cfg)
    c_lo, c_hi = mix.continuum_range_eV
    overlap = max(0.0, min(hi, c_hi) - max(lo, c_lo))
    expected = mix.continuum_rate_per_frame * overlap / (c_hi - c_lo)
    for label, rate in (("Cu_Ka", mix.cu_kalpha_rate_per_frame), ("Cu_Kb", mix.cu_kbeta_rate_per_frame)):
        energy = cfg.lines.energy(label)
        sigma = float(cfg.response.sigma_eV(energy, cfg.constants))
        expected += rate * (norm.cdf(hi, energy, sigma) - norm.cdf(lo, energy, sigma))
    return float(expected)


def background_rate_per_min(cfg, mix=None, reduction=1.0):
    per_frame = expected_roi_background(cfg, mix) * cfg.geometry.active_ccds
    return per_frame / cfg.run.frame_exposure_min / reduction


def analytic_sensitivity(cfg, plan=None):
    """Expected bound of a null run with the configured exposure and sources."""
    plan = plan or cfg.plan_for("current_on")
    return sensitivity_projection(
        plan,
        background_rate_per_min(cfg),
        cfg.constants,
        cfg.limits.efficiency,
        geom=cfg.geometry,
        n_sigma=cfg.limits.n_sigma,
        confidence_level=cfg.limits.confidence_level,
    ).bound


def project_scenario(cfg, scenario=None):
    """Projection for a longer campaign with reduced background."""
    scenario = scenario or cfg.projection
    exposure = cfg.run.frame_exposure_min
    duration = math.ceil(scenario.duration_min / exposure) * exposure
    plan = RunPlan(
        current_A=scenario.current_A,
        duration_min=duration,
        frame_exposure_min=exposure,
        mode="current_on",
    )
    projection = sensitivity_projection(
        plan,
        background_rate_per_min(cfg, reduction=scenario.background_reduction),
        cfg.constants,
        cfg.limits.efficiency,
        geom=cfg.geometry,
        n_sigma=cfg.limits.n_sigma,
        confidence_level=cfg.limits.confidence_level,
    )
    projection = dataclasses.replace(projection, scenario=tuple(sorted(dataclasses.asdict(scenario).items())))
    logger.info(
        "projected bound %.3g for %.0f min per mode, background / %g",
        projection.bound,
        duration,
        scenario.background_reduction,
    )
    return projection


# --- Locality


@dataclass(frozen=True)
class LocalityBound:
    length_bound_m: float
    mapping_exponent: float
    reference_length_m: float

    def __post_init__(self):
        if not self.length_bound_m > 0:
            raise ValidationError("length bound must be > 0", invariant="positive_length")

    def to_dict(self):
        return {
            "length_bound_m": self.length_bound_m,
            "mapping_exponent": self.mapping_exponent,
            "reference_length_m": self.reference_length_m,
        }


def _check_mapping(reference_length_m, mapping_exponent):
    if not (reference_length_m > 0 and mapping_exponent > 0):
        raise ValidationError(
            f"mapping needs positive parameters, got ({reference_length_m}, {mapping_exponent})",
            invariant="positive_mapping",
        )


def locality_bound(limit, mapping):
    """``l = reference_length_m * bound ** (1 / mapping_exponent)``.

    ``limit`` is a `LimitResult` or a bare bound; ``mapping`` is
    ``(reference_length_m, mapping_exponent)``.
    """
    reference_length_m, mapping_exponent = mapping
    _check_mapping(reference_length_m, mapping_exponent)
    bound = getattr(limit, "beta2_over_2_bound", limit)
    length = reference_length_m * bound ** (1 / mapping_exponent)
    return LocalityBound(length, mapping_exponent, reference_length_m)


def calibrate_locality_mapping(anchor_bound, anchor_length_m, mapping_exponent):
    """The ``(reference_length_m, mapping_exponent)`` that sends ``anchor_bound`` to ``anchor_length_m``."""
    _check_mapping(anchor_length_m, mapping_exponent)
    if not anchor_bound > 0:
        raise ValidationError("anchor bound must be > 0", invariant="positive_mapping")
    return anchor_length_m / anchor_bound ** (1 / mapping_exponent), mapping_exponent


def fit_locality_exponent(pairs):
    """Power-law exponent through ``[(bound, length_m), ...]`` (log-log least squares)."""
    pairs = list(pairs)
    if len(pairs) < 2:
        raise ValidationError("need at least two anchor pairs", invariant="min_anchor_pairs")
    bounds, lengths = np.log(np.array(pairs, dtype=float)).T
    if np.ptp(lengths) == 0:
        raise ValidationError("anchor lengths must differ", invariant="distinct_anchors")
    slope, _ = np.polyfit(lengths, bounds, 1)
    return float(slope)


def locality_from_config(limit, cfg):
    lim = cfg.limits
    mapping = calibrate_locality_mapping(
        lim.locality_reference_bound, lim.locality_reference_length_m, lim.locality_mapping_exponent
    )
    return locality_bound(limit, mapping)


# --- Persistence


def write_limit(result, path, *, config_digest=None, locality=None, projection=None):
    data = result.to_dict()
    data["config_digest"] = config_digest
    data["improvement_over_previous"] = result.improvement_over()
    if locality is not None:
        data["locality"] = locality.to_dict()
    if projection is not None:
        data["projection"] = projection.to_dict()
    save_json(path, data)


def read_limit(path):
    return LimitResult.from_dict(load_json(path))
