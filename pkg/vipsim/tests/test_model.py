import numpy as np
import pytest

from vipsim.exceptions import ValidationError
from vipsim.model import (
    FWHM_TO_SIGMA,
    AnalysisSettings,
    Binning,
    DetectorGeometry,
    Frame,
    LimitSettings,
    LineCatalog,
    PhysicsConstants,
    ResponseModel,
    RunConfig,
    RunPlan,
    SelectionPolicy,
    SimulationSettings,
    SourceMix,
    Spectrum,
)


def test_defaults_describe_the_frascati_run():
    cfg = RunConfig()
    assert cfg.geometry.cylinder_radius_mm == 45.0
    assert cfg.geometry.cylinder_height_mm == 88.0
    assert cfg.geometry.foil_thickness_um == 50.0
    assert (cfg.geometry.n_ccds, cfg.geometry.active_ccds) == (16, 14)
    assert cfg.response.fwhm_at_ref_eV == 320.0
    assert cfg.run.current_A == 40.0
    assert cfg.run.duration_min == 14510.0
    assert cfg.run.frame_exposure_min == 10.0
    assert cfg.analysis.roi_eV == (7564.0, 7894.0)
    assert cfg.analysis.bin_width_eV == 32.0
    assert cfg.limits.efficiency == 0.01
    assert cfg.limits.confidence_level == 0.997
    assert cfg.constants.capture_factor == 0.1
    assert cfg.constants.electron_mfp_copper_m == 3.9e-8


def test_conductor_length_defaults_to_height():
    assert DetectorGeometry().conductor_length_m == pytest.approx(0.088)
    assert DetectorGeometry(conductor_length_mm=100.0).conductor_length_m == pytest.approx(0.1)


@pytest.mark.parametrize(
    "make, invariant",
    [
        (lambda: DetectorGeometry(cylinder_radius_mm=-1), "positive_length"),
        (lambda: DetectorGeometry(active_ccds=17), "active_ccds_le_n_ccds"),
        (lambda: DetectorGeometry(pixel_rows=4), "min_pixel_grid"),
        (lambda: PhysicsConstants(capture_factor=2.0), "capture_factor_le_1"),
        (lambda: PhysicsConstants(silicon_fano=0.0), "positive_constant"),
        (lambda: ResponseModel(adu_gain_eV_per_adu=0.0), "positive_gain"),
        (lambda: ResponseModel(charge_sharing_fraction=1.5), "fraction_range"),
        (lambda: ResponseModel(resolution_scaling="linear"), "enum_value"),
        (lambda: RunPlan(duration_min=15.0), "duration_multiple_of_exposure"),
        (lambda: RunPlan(current_A=-1.0), "non_negative_current"),
        (lambda: RunPlan(rng_seed=-1), "non_negative_seed"),
        (lambda: RunPlan(mode="calibration"), "enum_value"),
        (lambda: SourceMix(continuum_range_eV=(5000.0, 1000.0)), "ordered_range"),
        (lambda: SourceMix(cu_kalpha_rate_per_frame=-0.1), "non_negative_rate"),
        (lambda: SourceMix(injected_beta2_over_2=2.0), "probability_range"),
        (lambda: SelectionPolicy(topologies=("extended",)), "enum_value"),
        (lambda: SelectionPolicy(connectivity=6), "enum_value"),
        (lambda: AnalysisSettings(normalization="counts"), "enum_value"),
        (lambda: LimitSettings(efficiency=0.0), "efficiency_range"),
        (lambda: LimitSettings(efficiency=1.5), "efficiency_range"),
        (lambda: SimulationSettings(thinning=0), "positive_setting"),
        (lambda: Binning(2000.0, 0.0, 10), "positive_bin_width"),
        (lambda: Frame(0, 0, 10.0, np.full((8, 8), 70000)), "adu_range"),
        (lambda: Frame(300, 0, 10.0, np.zeros((8, 8))), "ccd_id_range"),
        (lambda: Spectrum(2000.0, 32.0, [1, -1], 10.0, "current_on"), "non_negative_counts"),
        (lambda: Spectrum(2000.0, 32.0, [1.5], 10.0, "current_on"), "integer_counts"),
        (lambda: Spectrum(2000.0, 32.0, [], 10.0, "current_on"), "min_bins"),
        (lambda: RunConfig(response=ResponseModel(fwhm_at_ref_eV=100.0)), "resolution_anchor"),
    ],
)
def test_invariant_violations(make, invariant):
    with pytest.raises(ValidationError) as excinfo:
        make()
    assert excinfo.value.invariant == invariant
    assert f"[{invariant}]" in str(excinfo.value)


def test_validation_errors_are_value_errors():
    with pytest.raises(ValueError):
        DetectorGeometry(n_ccds=0)


def test_resolution_is_anchored_at_reference_energy():
    response = ResponseModel()
    consts = PhysicsConstants()
    assert response.sigma_eV(8000.0, consts) == pytest.approx(320.0 * FWHM_TO_SIGMA)
    # Fano term shrinks the width at the Mn K-alpha line.
    assert response.sigma_eV(5898.75, consts) == pytest.approx(132.6, abs=0.1)
    sigmas = response.sigma_eV(np.array([2000.0, 6000.0, 10000.0]), consts)
    assert np.all(np.diff(sigmas) > 0)


def test_constant_resolution():
    response = ResponseModel(resolution_scaling="constant")
    sigmas = response.sigma_eV(np.array([2000.0, 8000.0]))
    assert np.allclose(sigmas, 320.0 * FWHM_TO_SIGMA)


def test_adu_conversion():
    response = ResponseModel(adu_gain_eV_per_adu=5.0, adu_offset_eV=10.0)
    assert response.eV_to_adu(5010.0) == pytest.approx(1000.0)
    assert response.adu_to_eV(response.eV_to_adu(7729.0)) == pytest.approx(7729.0)


def test_line_catalog():
    lines = LineCatalog.default()
    energies = [line.energy_eV for line in lines]
    assert energies == sorted(energies)
    assert lines.energy("Cu_Ka") == 8040.0
    assert lines.energy("Cu_anomalous") == 7729.0
    assert lines.energy("Cu_Ka") - lines.energy("Cu_anomalous") == pytest.approx(311.0)
    with pytest.raises(KeyError):
        lines["Fe_Ka"]


def test_line_catalog_invariants():
    mapping = dict(LineCatalog.default().to_mapping())
    del mapping["Mn_Kb"]
    with pytest.raises(ValidationError) as excinfo:
        LineCatalog.from_mapping(mapping)
    assert excinfo.value.invariant == "required_lines"

    mapping = dict(LineCatalog.default().to_mapping())
    mapping["Cu_anomalous"] = [7000.0, 1.0]
    with pytest.raises(ValidationError) as excinfo:
        LineCatalog.from_mapping(mapping)
    assert excinfo.value.invariant == "anomalous_shift"


def test_run_plan_counts():
    plan = RunPlan()
    assert plan.n_frames == 1451
    # 40 A for 14510 minutes.
    assert plan.n_new_electrons(PhysicsConstants()) == pytest.approx(2.174e26, rel=1e-3)
    off = plan.replace(mode="current_off")
    assert off.effective_current_A == 0
    assert off.n_new_electrons(PhysicsConstants()) == 0
    assert RunPlan(duration_min=0.0).n_frames == 0


def test_desk_plan_scales_back_to_full_exposure():
    cfg = RunConfig()
    thinned, scale = cfg.desk_plan()
    assert thinned.n_frames == 15
    assert thinned.duration_min * scale == pytest.approx(cfg.run.duration_min)
    assert scale == pytest.approx(14510 / 150)

    unthinned = cfg.replace(simulation=SimulationSettings(thinning=1))
    assert unthinned.desk_plan() == (cfg.run, 1.0)


def test_plan_for():
    cfg = RunConfig()
    plan = cfg.plan_for("current_off", seed=7)
    assert plan.mode == "current_off"
    assert plan.rng_seed == 7
    assert plan.duration_min == cfg.run.duration_min


def test_binning():
    binning = AnalysisSettings().binning
    assert binning.n_bins == 313
    assert binning.bin_hi_eV == 12016.0
    assert len(binning.edges) == binning.n_bins + 1
    assert binning.centers[0] == 2016.0


def test_frame_is_immutable():
    pixels = np.zeros((8, 8), dtype=np.uint16)
    frame = Frame(1, 2, 10.0, pixels)
    pixels[0, 0] = 5
    assert frame.pixels[0, 0] == 0
    with pytest.raises(ValueError):
        frame.pixels[0, 0] = 1
    assert frame == Frame(1, 2, 10.0, np.zeros((8, 8), dtype=np.uint16))
    assert frame != Frame(1, 3, 10.0, np.zeros((8, 8), dtype=np.uint16))


def test_frame_geometry_check():
    frame = Frame(0, 0, 10.0, np.zeros((8, 8)))
    frame.check_geometry(DetectorGeometry(pixel_rows=8, pixel_cols=8))
    with pytest.raises(ValidationError):
        frame.check_geometry(DetectorGeometry())


def test_spectrum():
    spectrum = Spectrum(2000.0, 32.0, np.array([1, 2, 3]), 150.0, "current_off")
    assert spectrum.total == 6
    assert spectrum.counts.dtype == np.int64
    assert list(spectrum.centers) == [2016.0, 2048.0, 2080.0]
