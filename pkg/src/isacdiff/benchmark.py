"""Evaluation sweeps comparing LS, MMSE and the diffusion denoisers.

Every grid point reuses the same per-trial random streams (trial ``k`` always
draws from ``SeedSequence([seed, k])``), so differences between grid points
reflect the swept knob rather than fresh scenario luck.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .channel import ScenarioKnobs
from .config import ConfigError, ScenarioConfig
from .dataset import Sample, simulate_sample
from .diffusion import DenoiserModel, denoise, ls_noise_variance
from .estimators import mmse_estimate, nmse_per_link
from .numerics import ConfigurationError

SWEEP_VARIABLES = ("snr", "num_ues", "distance")
CSV_HEADER = ("grid", "method", "nmse_db", "nmse_std_db", "trials")
LINK_HEADER = ("grid", "method", "trial", "ap", "ue", "nmse")

# fixed knobs of each sweep when the config does not override them
DEFAULT_FIXED = {
    "snr": {"num_ues": 8, "pilot_length": 8, "distance": 10.0},
    "num_ues": {"pilot_length": 4, "distance": 10.0, "snr_db": 0.0},
    "distance": {"num_ues": 8, "pilot_length": 4, "snr_db": 0.0},
}


@dataclass
class ExperimentSpec:
    variable: str
    grid: tuple[float, ...]
    fixed: dict = field(default_factory=dict)
    trials: int = 200
    seed: int = 0
    start_step: int | str | None = None

    def __post_init__(self):
        if self.variable not in SWEEP_VARIABLES:
            raise ConfigError(f"sweep variable must be one of {SWEEP_VARIABLES}, got {self.variable!r}")
        if not self.grid:
            raise ConfigError("sweep grid is empty")
        if self.trials < 1:
            raise ConfigError("sweep needs at least one trial per grid point")
        unknown = set(self.fixed) - {"num_ues", "pilot_length", "distance", "snr_db"}
        if unknown:
            raise ConfigError(f"unknown fixed sweep knobs {sorted(unknown)}")

    def knobs(self, value: float) -> ScenarioKnobs:
        k = {**DEFAULT_FIXED[self.variable], **self.fixed}
        key = {"snr": "snr_db", "num_ues": "num_ues", "distance": "distance"}[self.variable]
        k[key] = value
        knobs = ScenarioKnobs(int(k["num_ues"]), int(k["pilot_length"]), float(k["distance"]),
                              float(k["snr_db"]))
        if knobs.num_ues < 1 or knobs.pilot_length < 1 or knobs.distance <= 0:
            raise ConfigError(f"grid point {value} gives illegal scenario {knobs}")
        return knobs


@dataclass
class SweepRow:
    grid: float
    method: str
    nmse_db: float
    nmse_std_db: float
    trials: int


@dataclass
class LinkRow:
    grid: float
    method: str
    trial: int
    ap: int
    ue: int
    nmse: float


def check_compatible(model: DenoiserModel, scenario: ScenarioConfig, label: str = "model") -> None:
    want = (scenario.num_aps, scenario.antennas)
    have = (model.cfg.aps, model.cfg.antennas)
    if want != have:
        raise ConfigurationError(
            f"{label} was trained for L={have[0]}, M={have[1]} but the scenario has "
            f"L={want[0]}, M={want[1]}")


def denoise_samples(model: DenoiserModel, samples: list[Sample], start_step=None,
                    chunk: int = 2048) -> list[np.ndarray]:
    """Denoise every UE of every sample in large batches; returns [L, U, M] per sample."""
    rows_ls, rows_var, rows_sens, rows_xy, counts = [], [], [], [], []
    for s in samples:
        U = s.h_ls.shape[1]
        rows_ls.append(np.transpose(s.h_ls, (1, 0, 2)))
        rows_var.append(ls_noise_variance(s, model.noise_power))
        rows_sens.append(np.broadcast_to(s.h_sens_est, (U,) + s.h_sens_est.shape))
        rows_xy.append(s.ue_positions)
        counts.append(U)
    h_ls, var = np.concatenate(rows_ls), np.concatenate(rows_var)
    sens, xy = np.concatenate(rows_sens), np.concatenate(rows_xy)
    out = np.empty_like(h_ls)
    for a in range(0, len(h_ls), chunk):
        sl = slice(a, a + chunk)
        out[sl] = denoise(model, h_ls[sl], var[sl], sens[sl], xy[sl], start_step)
    pieces = np.split(out, np.cumsum(counts)[:-1])
    return [np.transpose(p, (1, 0, 2)) for p in pieces]


def per_link_nmse(samples: list[Sample], scenario: ScenarioConfig,
                  models: dict[str, DenoiserModel] | None = None,
                  start_step=None) -> dict[str, list[np.ndarray]]:
    """Linear NMSE of every link ([L, U] per sample) for LS, MMSE and each model."""
    out = {"LS": [], "MMSE": []}
    for s in samples:
        out["LS"].append(nmse_per_link(s.h_ls, s.h_comm))
        mmse = mmse_estimate(s.y_pilot, s.pilot_assignment, s.powers, s.large_scale,
                             scenario.noise_power, s.knobs.pilot_length)
        out["MMSE"].append(nmse_per_link(mmse, s.h_comm))
    for label, model in (models or {}).items():
        check_compatible(model, scenario, label)
        est = denoise_samples(model, samples, start_step)
        out[label] = [nmse_per_link(e, s.h_comm) for e, s in zip(est, samples)]
    return out


def per_trial_nmse(samples: list[Sample], scenario: ScenarioConfig,
                   models: dict[str, DenoiserModel] | None = None,
                   start_step=None) -> dict[str, np.ndarray]:
    """Linear NMSE (mean over links) of each method for each sample."""
    links = per_link_nmse(samples, scenario, models, start_step)
    return {k: np.array([v.mean() for v in vals]) for k, vals in links.items()}


def summarize(values: np.ndarray) -> tuple[float, float]:
    """(dB of the mean linear NMSE, std of per-trial dB values)."""
    values = np.asarray(values, float)
    return float(10 * np.log10(values.mean())), float(np.std(10 * np.log10(values)))


def trial_samples(scenario: ScenarioConfig, knobs: ScenarioKnobs, trials: int, seed: int) -> list[Sample]:
    return [simulate_sample(scenario, k, seed, knobs)[0] for k in range(trials)]


def run_sweep(spec: ExperimentSpec, scenario: ScenarioConfig,
              models: dict[str, DenoiserModel] | None = None,
              links: list | None = None) -> list[SweepRow]:
    """One row per (grid value, method), in grid order then method order.

    If ``links`` is a list, one ``LinkRow`` per (grid value, method, trial,
    AP, UE) is appended to it.
    """
    rows = []
    for value in spec.grid:
        samples = trial_samples(scenario, spec.knobs(value), spec.trials, spec.seed)
        per_link = per_link_nmse(samples, scenario, models, spec.start_step)
        for method, per_sample in per_link.items():
            vals = np.array([v.mean() for v in per_sample])
            mean_db, std_db = summarize(vals)
            rows.append(SweepRow(float(value), method, mean_db, std_db, len(vals)))
            if links is not None:
                for k, v in enumerate(per_sample):
                    links.extend(LinkRow(float(value), method, k, l, u, float(v[l, u]))
                                 for l, u in np.ndindex(*v.shape))
    return rows


def links_to_csv(rows: list["LinkRow"]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(LINK_HEADER)
    for r in rows:
        writer.writerow([repr(r.grid), r.method, r.trial, r.ap, r.ue, repr(r.nmse)])
    return buf.getvalue()


def rows_to_csv(rows: list[SweepRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_HEADER)
    for r in rows:
        writer.writerow([repr(r.grid), r.method, repr(r.nmse_db), repr(r.nmse_std_db), r.trials])
    return buf.getvalue()


def read_csv(text: str) -> list[SweepRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ValueError(f"unexpected CSV header {reader.fieldnames}")
    return [SweepRow(float(r["grid"]), r["method"], float(r["nmse_db"]), float(r["nmse_std_db"]),
                     int(r["trials"])) for r in reader]
