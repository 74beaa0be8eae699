"""Domain types shared by every stage of the simulation and analysis.

All types are frozen value objects: they validate themselves on
construction and are safe to pass between worker processes.
"""

import dataclasses
import math
import os
from dataclasses import dataclass, field
from typing import Optional, Tuple

import numpy as np
import yaml

from vipsim.exceptions import ValidationError

FWHM_TO_SIGMA = 1 / (2 * math.sqrt(2 * math.log(2)))
ADU_MAX = 65535

_REFERENCE_FILE = os.path.join(os.path.dirname(__file__), "data", "reference.yaml")


def load_reference(fname=_REFERENCE_FILE):
    """The bundled reference data (line energies, physical constants)."""
    with open(fname, encoding="utf-8") as f:
        return yaml.safe_load(f)


REFERENCE = load_reference()
_CONST = REFERENCE["constants"]


def _require(condition, message, invariant, field=None):
    if not condition:
        raise ValidationError(message, invariant=invariant, field=field)


def _positive(obj, *names, invariant="positive"):
    for name in names:
        value = getattr(obj, name)
        _require(
            value is not None and value > 0,
            f"{name} must be > 0, got {value!r}",
            invariant,
            name,
        )


# --- Detector description


@dataclass(frozen=True)
class DetectorGeometry:
    """Copper target and CCD arrangement.

    ``conductor_length_mm`` is the length of conductor the current flows
    along; when not given it is the cylinder height.
    """

    cylinder_radius_mm: float = 45.0
    foil_thickness_um: float = 50.0
    cylinder_height_mm: float = 88.0
    n_ccds: int = 16
    ccd_distance_mm: float = 23.0
    active_ccds: int = 14
    pixel_rows: int = 600
    pixel_cols: int = 600
    pixel_pitch_um: float = 22.5
    conductor_length_mm: Optional[float] = None

    def __post_init__(self):
        _positive(
            self,
            "cylinder_radius_mm",
            "foil_thickness_um",
            "cylinder_height_mm",
            "ccd_distance_mm",
            "pixel_pitch_um",
            invariant="positive_length",
        )
        if self.conductor_length_mm is not None:
            _positive(self, "conductor_length_mm", invariant="positive_length")
        _positive(self, "n_ccds", "active_ccds", invariant="positive_count")
        _require(
            self.active_ccds <= self.n_ccds,
            f"active_ccds={self.active_ccds} exceeds n_ccds={self.n_ccds}",
            "active_ccds_le_n_ccds",
            "active_ccds",
        )
        _require(
            self.pixel_rows >= 8 and self.pixel_cols >= 8,
            f"pixel grid {self.pixel_rows}x{self.pixel_cols} is smaller than 8x8",
            "min_pixel_grid",
        )

    @property
    def conductor_length_m(self):
        length_mm = self.conductor_length_mm or self.cylinder_height_mm
        return length_mm * 1e-3

    @property
    def shape(self):
        return (self.pixel_rows, self.pixel_cols)


@dataclass(frozen=True)
class PhysicsConstants:
    electron_charge_C: float = _CONST["electron_charge_C"]
    electron_mfp_copper_m: float = _CONST["electron_mfp_copper_m"]
    capture_factor: float = _CONST["capture_factor"]
    silicon_fano: float = _CONST["silicon_fano"]
    pair_energy_eV: float = _CONST["pair_energy_eV"]

    def __post_init__(self):
        _positive(
            self,
            "electron_charge_C",
            "electron_mfp_copper_m",
            "capture_factor",
            "silicon_fano",
            "pair_energy_eV",
            invariant="positive_constant",
        )
        _require(
            self.capture_factor <= 1,
            f"capture_factor={self.capture_factor} exceeds 1",
            "capture_factor_le_1",
            "capture_factor",
        )

    def scattering_count(self, geometry):
        """``D / mu``: the number of scatterings along the conductor."""
        return geometry.conductor_length_m / self.electron_mfp_copper_m


RESOLUTION_SCALINGS = ("constant", "sqrt_energy")


@dataclass(frozen=True)
class ResponseModel:
    """CCD energy response and digitisation.

    In ``sqrt_energy`` mode the resolution is
    ``sigma(E)**2 = sigma_elec**2 + F * w * E`` with ``sigma_elec`` fixed
    so that the FWHM at ``ref_energy_eV`` equals ``fwhm_at_ref_eV``.
    """

    fwhm_at_ref_eV: float = 320.0
    ref_energy_eV: float = 8000.0
    resolution_scaling: str = "sqrt_energy"
    adu_gain_eV_per_adu: float = 5.9
    adu_offset_eV: float = 0.0
    pixel_threshold_adu: float = 20.0
    charge_sharing_fraction: float = 0.35
    readout_noise_adu: float = 2.0

    def __post_init__(self):
        _positive(self, "fwhm_at_ref_eV", "ref_energy_eV", invariant="positive_resolution")
        _positive(self, "adu_gain_eV_per_adu", invariant="positive_gain")
        _require(
            self.pixel_threshold_adu >= 0,
            f"pixel_threshold_adu must be >= 0, got {self.pixel_threshold_adu}",
            "non_negative_threshold",
            "pixel_threshold_adu",
        )
        _require(
            self.readout_noise_adu >= 0,
            f"readout_noise_adu must be >= 0, got {self.readout_noise_adu}",
            "non_negative_noise",
            "readout_noise_adu",
        )
        _require(
            0 <= self.charge_sharing_fraction <= 1,
            f"charge_sharing_fraction={self.charge_sharing_fraction} not in [0, 1]",
            "fraction_range",
            "charge_sharing_fraction",
        )
        _require(
            self.resolution_scaling in RESOLUTION_SCALINGS,
            f"resolution_scaling must be one of {RESOLUTION_SCALINGS}",
            "enum_value",
            "resolution_scaling",
        )

    @property
    def sigma_at_ref_eV(self):
        return self.fwhm_at_ref_eV * FWHM_TO_SIGMA

    def sigma_eV(self, energy_eV, constants=None):
        """Gaussian energy resolution at ``energy_eV`` (scalar or array)."""
        energy_eV = np.asarray(energy_eV, dtype=float)
        sigma_ref = self.sigma_at_ref_eV
        if self.resolution_scaling == "constant":
            return np.full_like(energy_eV, sigma_ref)[()]
        constants = constants or PhysicsConstants()
        fano_w = constants.silicon_fano * constants.pair_energy_eV
        sigma_elec_sq = sigma_ref ** 2 - fano_w * self.ref_energy_eV
        _require(
            sigma_elec_sq >= 0,
            "configured FWHM is narrower than the Fano limit at the reference energy",
            "resolution_anchor",
            "fwhm_at_ref_eV",
        )
        return np.sqrt(sigma_elec_sq + fano_w * np.clip(energy_eV, 0, None))[()]

    def eV_to_adu(self, energy_eV):
        return (np.asarray(energy_eV, dtype=float) - self.adu_offset_eV) / self.adu_gain_eV_per_adu

    def adu_to_eV(self, adu):
        return np.asarray(adu, dtype=float) * self.adu_gain_eV_per_adu + self.adu_offset_eV


# --- Lines


@dataclass(frozen=True)
class Line:
    label: str
    energy_eV: float
    relative_intensity: float


REQUIRED_LINES = ("Cu_Ka", "Cu_Kb", "Cu_anomalous", "Mn_Ka", "Mn_Kb")


@dataclass(frozen=True)
class LineCatalog:
    """Known X-ray lines, sorted by energy."""

    lines: Tuple[Line, ...] = ()

    def __post_init__(self):
        lines = tuple(sorted(self.lines, key=lambda line: line.energy_eV))
        object.__setattr__(self, "lines", lines)
        labels = [line.label for line in lines]
        missing = [label for label in REQUIRED_LINES if label not in labels]
        _require(not missing, f"catalog lacks lines {missing}", "required_lines")
        _require(
            len(set(labels)) == len(labels), "duplicate line labels", "unique_labels"
        )
        for line in lines:
            _require(
                line.energy_eV > 0 and line.relative_intensity > 0,
                f"line {line.label} must have positive energy and intensity",
                "positive_line",
                line.label,
            )
        energies = np.array([line.energy_eV for line in lines])
        _require(
            np.all(np.diff(energies) > 0),
            "line energies must be strictly increasing",
            "increasing_energies",
        )
        shift = self["Cu_anomalous"].energy_eV - self["Cu_Ka"].energy_eV
        _require(
            -400 <= shift <= -200,
            f"anomalous line is {shift:+.0f} eV from Cu Ka, expected about -300 eV",
            "anomalous_shift",
        )

    @classmethod
    def from_mapping(cls, mapping):
        """Build from ``{label: (energy_eV, relative_intensity)}``."""
        return cls(tuple(Line(k, float(e), float(i)) for k, (e, i) in mapping.items()))

    @classmethod
    def default(cls):
        return cls.from_mapping(REFERENCE["lines"])

    def __getitem__(self, label):
        for line in self.lines:
            if line.label == label:
                return line
        raise KeyError(label)

    def __iter__(self):
        return iter(self.lines)

    def __len__(self):
        return len(self.lines)

    def energy(self, label):
        return self[label].energy_eV

    def to_mapping(self):
        return {line.label: [line.energy_eV, line.relative_intensity] for line in self.lines}


# --- Run plan

RUN_MODES = ("current_on", "current_off")


@dataclass(frozen=True)
class RunPlan:
    current_A: float = 40.0
    duration_min: float = 14510.0
    frame_exposure_min: float = 10.0
    mode: str = "current_on"
    rng_seed: int = 0

    def __post_init__(self):
        _require(
            self.mode in RUN_MODES,
            f"mode must be one of {RUN_MODES}, got {self.mode!r}",
            "enum_value",
            "mode",
        )
        _require(
            self.current_A >= 0, "current_A must be >= 0", "non_negative_current", "current_A"
        )
        _require(
            self.rng_seed >= 0, f"rng_seed must be >= 0, got {self.rng_seed}", "non_negative_seed", "rng_seed"
        )
        _positive(self, "frame_exposure_min", invariant="positive_exposure")
        _require(
            self.duration_min >= 0,
            "duration_min must be >= 0",
            "non_negative_duration",
            "duration_min",
        )
        ratio = self.duration_min / self.frame_exposure_min
        _require(
            abs(ratio - round(ratio)) < 1e-9 * max(1.0, ratio),
            f"duration_min={self.duration_min} is not a multiple of "
            f"frame_exposure_min={self.frame_exposure_min}",
            "duration_multiple_of_exposure",
            "duration_min",
        )

    @property
    def n_frames(self):
        """Frames per CCD."""
        return int(round(self.duration_min / self.frame_exposure_min))

    @property
    def effective_current_A(self):
        return self.current_A if self.mode == "current_on" else 0.0

    def n_new_electrons(self, constants):
        """``Q / e`` for the whole run."""
        return self.effective_current_A * self.duration_min * 60 / constants.electron_charge_C

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


# --- Pixel data


@dataclass(frozen=True, eq=False)
class Frame:
    """One CCD exposure. ``pixels`` is a read-only ``uint16`` array."""

    ccd_id: int
    frame_index: int
    exposure_min: float
    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels)
        _require(pixels.ndim == 2, "pixels must be a 2-D array", "frame_shape", "pixels")
        if pixels.dtype != np.uint16:
            _require(
                pixels.size == 0 or (pixels.min() >= 0 and pixels.max() <= ADU_MAX),
                f"ADU values must lie in [0, {ADU_MAX}]",
                "adu_range",
                "pixels",
            )
            pixels = pixels.astype(np.uint16)
        else:
            pixels = pixels.copy()
        pixels.setflags(write=False)
        _require(0 <= self.ccd_id <= 255, "ccd_id must fit in u8", "ccd_id_range", "ccd_id")
        _require(
            0 <= self.frame_index < 2 ** 32,
            "frame_index must fit in u32",
            "frame_index_range",
            "frame_index",
        )
        object.__setattr__(self, "pixels", pixels)
        # The file format stores the exposure as float32.
        object.__setattr__(self, "exposure_min", float(np.float32(self.exposure_min)))

    @property
    def shape(self):
        return self.pixels.shape

    def check_geometry(self, geometry):
        _require(
            self.shape == geometry.shape,
            f"frame shape {self.shape} does not match geometry {geometry.shape}",
            "frame_geometry",
            "pixels",
        )

    def __eq__(self, other):
        if not isinstance(other, Frame):
            return NotImplemented
        return (
            self.ccd_id == other.ccd_id
            and self.frame_index == other.frame_index
            and self.exposure_min == other.exposure_min
            and np.array_equal(self.pixels, other.pixels)
        )


# --- Spectra


@dataclass(frozen=True)
class Binning:
    bin_lo_eV: float
    bin_width_eV: float
    n_bins: int

    def __post_init__(self):
        _positive(self, "bin_width_eV", invariant="positive_bin_width")
        _require(self.n_bins >= 1, "a spectrum needs at least one bin", "min_bins", "n_bins")

    @classmethod
    def from_range(cls, lo_eV, hi_eV, width_eV):
        n_bins = max(1, int(math.ceil((hi_eV - lo_eV) / width_eV - 1e-9)))
        return cls(float(lo_eV), float(width_eV), n_bins)

    @property
    def edges(self):
        return self.bin_lo_eV + self.bin_width_eV * np.arange(self.n_bins + 1)

    @property
    def centers(self):
        return self.bin_lo_eV + self.bin_width_eV * (np.arange(self.n_bins) + 0.5)

    @property
    def bin_hi_eV(self):
        return self.bin_lo_eV + self.bin_width_eV * self.n_bins


@dataclass(frozen=True, eq=False)
class Spectrum:
    """An exposure-tagged energy histogram."""

    bin_lo_eV: float
    bin_width_eV: float
    counts: np.ndarray
    exposure_min: float
    mode: str

    def __post_init__(self):
        counts = np.asarray(self.counts)
        _require(counts.ndim == 1 and counts.size >= 1, "counts must be a non-empty 1-D array", "min_bins", "counts")
        _require(np.all(counts >= 0), "counts must be non-negative", "non_negative_counts", "counts")
        _require(
            np.all(counts == np.round(counts)), "counts must be integers", "integer_counts", "counts"
        )
        counts = counts.astype(np.int64)
        counts.setflags(write=False)
        object.__setattr__(self, "counts", counts)
        _positive(self, "bin_width_eV", invariant="positive_bin_width")
        _require(
            self.exposure_min >= 0, "exposure_min must be >= 0", "non_negative_exposure", "exposure_min"
        )
        _require(self.mode in RUN_MODES + ("calibration",), f"unknown mode {self.mode!r}", "enum_value", "mode")

    @property
    def binning(self):
        return Binning(self.bin_lo_eV, self.bin_width_eV, len(self.counts))

    @property
    def centers(self):
        return self.binning.centers

    @property
    def edges(self):
        return self.binning.edges

    @property
    def total(self):
        return int(self.counts.sum())

    def __eq__(self, other):
        if not isinstance(other, Spectrum):
            return NotImplemented
        return (
            self.bin_lo_eV == other.bin_lo_eV
            and self.bin_width_eV == other.bin_width_eV
            and self.exposure_min == other.exposure_min
            and self.mode == other.mode
            and np.array_equal(self.counts, other.counts)
        )


# --- Simulation sources and analysis settings


@dataclass(frozen=True)
class SourceMix:
    """Mean numbers of deposits per CCD frame, per source.

    The anomalous line is not a rate here: it follows from
    ``injected_beta2_over_2`` and the run plan.
    """

    continuum_rate_per_frame: float = 2.0
    continuum_range_eV: Tuple[float, float] = (2000.0, 12000.0)
    cu_kalpha_rate_per_frame: float = 0.5
    cu_kbeta_rate_per_frame: float = 0.07
    cosmic_track_rate_per_frame: float = 1.0
    injected_beta2_over_2: float = 0.0
    calibration_source_active: bool = False
    calibration_rate_per_frame: float = 150.0

    def __post_init__(self):
        for name in (
            "continuum_rate_per_frame",
            "cu_kalpha_rate_per_frame",
            "cu_kbeta_rate_per_frame",
            "cosmic_track_rate_per_frame",
            "calibration_rate_per_frame",
        ):
            value = getattr(self, name)
            _require(value >= 0, f"{name} must be >= 0, got {value}", "non_negative_rate", name)
        lo, hi = self.continuum_range_eV
        _require(
            0 < lo < hi,
            f"continuum range ({lo}, {hi}) must satisfy 0 < lo < hi",
            "ordered_range",
            "continuum_range_eV",
        )
        _require(
            0 <= self.injected_beta2_over_2 <= 1,
            "injected_beta2_over_2 must lie in [0, 1]",
            "probability_range",
            "injected_beta2_over_2",
        )

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


TOPOLOGIES = ("single", "double", "extended")


@dataclass(frozen=True)
class SelectionPolicy:
    connectivity: int = 4
    topologies: Tuple[str, ...] = ("single", "double")
    band_eV: Tuple[float, float] = (2000.0, 12000.0)
    require_edge_adjacent_double: bool = True

    def __post_init__(self):
        _require(self.connectivity in (4, 8), "connectivity must be 4 or 8", "enum_value", "connectivity")
        _require(
            len(self.topologies) > 0 and set(self.topologies) <= {"single", "double"},
            "accepted topologies must be a non-empty subset of {single, double}",
            "enum_value",
            "topologies",
        )
        lo, hi = self.band_eV
        _require(lo < hi, "acceptance band must satisfy lo < hi", "ordered_range", "band_eV")

    def band_adu(self, response):
        lo, hi = response.eV_to_adu(self.band_eV)
        return float(lo), float(hi)


@dataclass(frozen=True)
class CalibrationSettings:
    lines: Tuple[str, ...] = ("Mn_Ka", "Mn_Kb")
    frames_per_ccd: int = 10
    per_ccd: bool = False
    window_sigmas: float = 2.0
    min_events: int = 50

    def __post_init__(self):
        _require(len(set(self.lines)) >= 2, "calibration needs at least two lines", "min_fit_lines", "lines")
        _positive(self, "frames_per_ccd", "window_sigmas", "min_events", invariant="positive_setting")


NORMALIZATIONS = ("time", "sideband")


@dataclass(frozen=True)
class AnalysisSettings:
    bin_lo_eV: float = 2000.0
    bin_hi_eV: float = 12000.0
    bin_width_eV: float = 32.0
    roi_eV: Tuple[float, float] = (7564.0, 7894.0)
    normalization: str = "time"
    sidebands_eV: Tuple[Tuple[float, float], ...] = ((2500.0, 7300.0), (9400.0, 12000.0))

    def __post_init__(self):
        _positive(self, "bin_width_eV", invariant="positive_bin_width")
        _require(self.bin_lo_eV < self.bin_hi_eV, "bin_lo_eV must be < bin_hi_eV", "ordered_range", "bin_lo_eV")
        lo, hi = self.roi_eV
        _require(lo < hi, "roi must satisfy lo < hi", "ordered_range", "roi_eV")
        _require(
            self.normalization in NORMALIZATIONS,
            f"normalization must be one of {NORMALIZATIONS}",
            "enum_value",
            "normalization",
        )
        for lo, hi in self.sidebands_eV:
            _require(lo < hi, "sidebands must satisfy lo < hi", "ordered_range", "sidebands_eV")

    @property
    def binning(self):
        return Binning.from_range(self.bin_lo_eV, self.bin_hi_eV, self.bin_width_eV)


LIMIT_METHODS = ("gaussian_3sigma", "poisson_upper")


@dataclass(frozen=True)
class LimitSettings:
    efficiency: float = 0.01
    confidence_level: float = 0.997
    method: str = "gaussian_3sigma"
    n_sigma: float = 3.0
    locality_reference_bound: float = 4.5e-28
    locality_reference_length_m: float = 1.35e-19
    locality_mapping_exponent: float = 1.2

    def __post_init__(self):
        _require(0 < self.efficiency <= 1, "efficiency must lie in (0, 1]", "efficiency_range", "efficiency")
        _require(
            0 < self.confidence_level < 1,
            "confidence_level must lie in (0, 1)",
            "probability_range",
            "confidence_level",
        )
        _require(self.method in LIMIT_METHODS, f"method must be one of {LIMIT_METHODS}", "enum_value", "method")
        _positive(
            self,
            "n_sigma",
            "locality_reference_bound",
            "locality_reference_length_m",
            "locality_mapping_exponent",
            invariant="positive_setting",
        )


@dataclass(frozen=True)
class SimulationSettings:
    """``thinning`` divides the number of simulated frames per CCD;
    ``workers`` is the executor size (0: one per core, 1: in-process)."""

    thinning: int = 100
    workers: int = 0

    def __post_init__(self):
        _require(self.thinning >= 1, "thinning must be >= 1", "positive_setting", "thinning")
        _require(self.workers >= 0, "workers must be >= 0", "positive_setting", "workers")


@dataclass(frozen=True)
class ProjectionScenario:
    """A longer campaign: ``duration_min`` per mode, background reduced by
    ``background_reduction``, run at ``current_A``."""

    duration_min: float = 525960.0
    background_reduction: float = 10.0
    current_A: float = 40.0

    def __post_init__(self):
        _positive(self, "duration_min", "background_reduction", invariant="positive_setting")
        _require(self.current_A >= 0, "current_A must be >= 0", "non_negative_current", "current_A")


@dataclass(frozen=True)
class RunConfig:
    """Complete description of one simulated experiment."""

    geometry: DetectorGeometry = field(default_factory=DetectorGeometry)
    response: ResponseModel = field(default_factory=ResponseModel)
    constants: PhysicsConstants = field(default_factory=PhysicsConstants)
    run: RunPlan = field(default_factory=RunPlan)
    sources: SourceMix = field(default_factory=SourceMix)
    selection: SelectionPolicy = field(default_factory=SelectionPolicy)
    calibration: CalibrationSettings = field(default_factory=CalibrationSettings)
    analysis: AnalysisSettings = field(default_factory=AnalysisSettings)
    limits: LimitSettings = field(default_factory=LimitSettings)
    simulation: SimulationSettings = field(default_factory=SimulationSettings)
    projection: ProjectionScenario = field(default_factory=ProjectionScenario)
    lines: LineCatalog = field(default_factory=LineCatalog.default)

    def __post_init__(self):
        for label in self.calibration.lines:
            _require(
                any(line.label == label for line in self.lines),
                f"calibration line {label!r} is not in the line catalog",
                "known_calibration_line",
                "calibration.lines",
            )
        # Resolution must be realisable at the reference energy.
        self.response.sigma_eV(self.response.ref_energy_eV, self.constants)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def plan_for(self, mode, seed=None):
        """The configured run plan switched to ``mode``."""
        seed = self.run.rng_seed if seed is None else seed
        return self.run.replace(mode=mode, rng_seed=seed)

    def desk_plan(self, plan=None):
        """A thinned version of ``plan`` and the factor that scales it back.

        Returns ``(thinned_plan, exposure_scale)`` with
        ``thinned_plan.duration_min * exposure_scale == plan.duration_min``.
        """
        plan = plan or self.run
        n_full = plan.n_frames
        if n_full == 0:
            return plan, 1.0
        n_sim = int(math.ceil(n_full / self.simulation.thinning))
        thinned = plan.replace(duration_min=n_sim * plan.frame_exposure_min)
        return thinned, plan.duration_min / thinned.duration_min
