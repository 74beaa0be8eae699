"""Monte Carlo ensembles of paired current-on/current-off experiments.

Trials use the event-level simulator, so a full-exposure pair takes a
few milliseconds. Every trial has its own random streams derived from the
run seed and the trial number.
"""

import logging
from dataclasses import dataclass

import numpy as np
from scipy.stats import kstest

from vipsim.analysis import fit_fixed_line, roi_stats, spectrum_from_energies, subtract
from vipsim.detsim import anomalous_rate, simulate_event_energies
from vipsim.learner import SequenceLearner
from vipsim.runner import run_to_completion
from vipsim.utils import make_rng

logger = logging.getLogger(__name__)

_TRIAL_STREAM = 4


@dataclass(frozen=True)
class TrialResult:
    seed: int
    roi: object
    amplitude: float
    amplitude_error: float
    expected_signal: float

    @property
    def z_score(self):
        return self.roi.z_score


def expected_signal_counts(cfg, beta2_over_2, plan=None):
    """Mean number of anomalous X-rays over a whole current-on run."""
    plan = plan or cfg.plan_for("current_on")
    if beta2_over_2 == 0:
        return 0.0
    rate = anomalous_rate(beta2_over_2, plan, cfg.geometry, cfg.constants, cfg.limits.efficiency)
    return rate * plan.n_frames


def paired_spectra(cfg, seed, beta2_over_2=0.0, plan=None):
    """Simulate one on/off pair and return both spectra."""
    plan_on = plan or cfg.plan_for("current_on")
    plan_off = plan_on.replace(mode="current_off")
    mix = cfg.sources.replace(injected_beta2_over_2=beta2_over_2)
    binning = cfg.analysis.binning
    spectra = []
    for index, p in enumerate((plan_on, plan_off)):
        rng = make_rng(cfg.run.rng_seed, _TRIAL_STREAM, seed, index)
        energies = simulate_event_energies(cfg, mix, p, rng)
        spectra.append(spectrum_from_energies(energies, binning, p.duration_min, p.mode))
    return tuple(spectra)


def injected_trial(cfg, seed, beta2_over_2, plan=None):
    """One on/off pair with ``beta2_over_2`` injected into the current-on run."""
    on, off = paired_spectra(cfg, seed, beta2_over_2, plan)
    analysis = cfg.analysis
    sub = subtract(
        on, off, normalization=analysis.normalization, sidebands=analysis.sidebands_eV, roi=analysis.roi_eV
    )
    energy = cfg.lines.energy("Cu_anomalous")
    sigma = float(cfg.response.sigma_eV(energy, cfg.constants))
    amplitude, error = fit_fixed_line(sub, energy, sigma)
    return TrialResult(
        seed=seed,
        roi=roi_stats(sub),
        amplitude=amplitude,
        amplitude_error=error,
        expected_signal=expected_signal_counts(cfg, beta2_over_2, plan),
    )


def null_trial(cfg, seed, plan=None):
    """One on/off pair without signal."""
    return injected_trial(cfg, seed, 0.0, plan)


class _Trial:
    def __init__(self, cfg, beta2_over_2, plan):
        self.cfg = cfg
        self.beta2_over_2 = beta2_over_2
        self.plan = plan

    def __call__(self, seed):
        return injected_trial(self.cfg, seed, self.beta2_over_2, self.plan)


def run_trials(cfg, n_trials, beta2_over_2=0.0, *, plan=None, executor=None, first_seed=0):
    """``n_trials`` independent trials, in seed order."""
    seeds = list(range(first_seed, first_seed + n_trials))
    learner = SequenceLearner(_Trial(cfg, beta2_over_2, plan), seeds)
    results = run_to_completion(learner, executor)
    zs = np.array([r.z_score for r in results])
    logger.info(
        "%d trials at beta2/2=%g: mean z %.3f, %.1f%% above 3 sigma",
        n_trials,
        beta2_over_2,
        zs.mean() if zs.size else float("nan"),
        100 * np.mean(zs > 3) if zs.size else float("nan"),
    )
    return results


def ks_distance_to_normal(zs):
    """Kolmogorov-Smirnov distance between ``zs`` and the standard normal."""
    return float(kstest(np.asarray(zs, dtype=float), "norm").statistic)
