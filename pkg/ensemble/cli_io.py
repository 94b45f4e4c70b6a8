"""
Experiment configuration, orchestration and result emission.

Configurations are dotenv-style KEY=VALUE text. Keys are grouped by
prefix (GRID_, PHYSICS_, NOISE_, CONTROL_, RUN_, EXPERIMENT_); every key
is optional and missing keys take the defaults below.
"""
import hashlib
import json
import logging
import os
import tempfile
import time
from dataclasses import dataclass, field, fields, replace
from datetime import datetime
from functools import partial
from io import StringIO
from typing import Dict, List, Optional, Tuple

import numpy as np
import pandas as pd
from dotenv import dotenv_values

from ensemble.ensemble import EnsembleRunner, SquaredNorm, sample_observable
from ensemble.estimators import (
    FAIL,
    PASS,
    CheckReport,
    TestFamily,
    check_deterministic_decay,
    check_energy_tails,
    check_girsanov_martingale,
    check_linear_oracle,
    check_mixing,
    check_moment_bound,
    check_novikov_scaling,
    check_projected_decay,
    check_recurrence_growth,
    check_squeezing,
    check_stopping_tails,
    check_truncation_bound,
    check_unweighted_energy_tail,
    ensemble_records,
    estimate_mixing_rate,
    low_mode_direction,
    moment_bound,
    ou_oracle,
    pair_table,
    poincare_sweep,
    recurrence_moment,
)
from trajectory.coupling import (
    PairSummary,
    fit_squeeze_rate,
    pair_hitting_probability,
    run_pairs,
    squeeze_success,
)
from trajectory.dynamics import PhysParams, SimulationSetup, dt_bound, dt_max, validate_params
from trajectory.functionals import (
    StoppingParams,
    calibrate_stopping_params,
    energy_psi,
    total_variation_bound,
)
from trajectory.utils.errors import ConfigError, DomainError
from trajectory.utils.grid_space import Field, Grid, l2_norm, random_band_limited
from trajectory.utils.noise import (
    StreamRole,
    forcing_summability,
    from_coefficients,
    make_basis,
    make_coefficients,
    series_report,
)
from trajectory.utils.snapshot import read_snapshot, remove_snapshot, write_snapshot

logger = logging.getLogger(__name__)

KINDS = ("simulate", "couple", "mixing", "tails", "poincare", "validate")


@dataclass(frozen=True)
class GridConfig:
    half_width: float = 40.0
    nodes: int = 1024


@dataclass(frozen=True)
class PhysicsConfig:
    a: float = 1.0
    nu_1: float = 1.0
    nu_2: float = 0.5
    alpha_1: float = 1.0
    alpha_2: float = 1.0
    q: float = 1.0
    h: str = "gaussian"
    h_norm: float = 1.0
    h_width: float = 1.0
    dealias: bool = False


@dataclass(frozen=True)
class NoiseConfig:
    b0: float = 1.0
    p: float = 2.0
    modes: int = 64
    coefficients: Tuple[float, ...] = ()
    on: bool = True


@dataclass(frozen=True)
class ControlConfig:
    n: int = 32
    k: Optional[float] = None
    l: float = 1.0
    m: float = 4.0
    rho: float = 4.0
    pilot_paths: int = 100
    c3: float = 4.0


@dataclass(frozen=True)
class RunConfig:
    dt: float = 1e-3
    horizon: float = 20.0
    ensemble_size: int = 2000
    seed: int = 0
    batch_size: int = 50
    record_every: int = 10
    amplitude_bound: float = 10.0


@dataclass(frozen=True)
class ExperimentBlock:
    kind: str = "simulate"
    u0_norm: float = 5.0
    d: float = 1e-2
    rho_list: Tuple[float, ...] = (2.0, 4.0, 8.0)
    times: Tuple[float, ...] = (0.5, 1.0, 2.0, 5.0, 10.0)
    mixing_step: float = 1.0
    n_list: Tuple[int, ...] = (2, 8, 32)
    d_list: Tuple[float, ...] = (1e-3, 1e-2, 1e-1)
    l_list: Tuple[float, ...] = (1.0, 2.0, 4.0, 8.0)
    shift: float = 0.125
    oracle_modes: int = 8
    poincare_a: float = 20.0
    poincare_s: float = 1.0
    poincare_samples: int = 500
    poincare_n_list: Tuple[int, ...] = (4, 8, 16, 32, 64)
    test_family: int = 32
    d_ball: float = 1.0
    hit_t: float = 10.0
    delta: float = 0.1
    recurrence_norms: Tuple[float, ...] = (1.0, 2.0, 4.0)


@dataclass(frozen=True)
class ExperimentConfig:
    grid: GridConfig = field(default_factory=GridConfig)
    physics: PhysicsConfig = field(default_factory=PhysicsConfig)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    control: ControlConfig = field(default_factory=ControlConfig)
    run: RunConfig = field(default_factory=RunConfig)
    experiment: ExperimentBlock = field(default_factory=ExperimentBlock)


SECTIONS = {
    "GRID_": ("grid", GridConfig),
    "PHYSICS_": ("physics", PhysicsConfig),
    "NOISE_": ("noise", NoiseConfig),
    "CONTROL_": ("control", ControlConfig),
    "RUN_": ("run", RunConfig),
    "EXPERIMENT_": ("experiment", ExperimentBlock),
}

_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


def _convert(raw: str, tp):
    text = raw.strip()
    if tp is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {raw!r}")
    if tp == Optional[float]:
        return None if text.lower() in ("", "auto") else float(text)
    if tp == Tuple[float, ...]:
        return tuple(float(v) for v in text.split(",") if v.strip())
    if tp == Tuple[int, ...]:
        return tuple(int(v) for v in text.split(",") if v.strip())
    return tp(text)


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "auto"
    if isinstance(value, tuple):
        return ",".join(repr(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key_table() -> Dict[str, Tuple[str, str, type]]:
    table = {}
    for prefix, (section, cls) in SECTIONS.items():
        for f in fields(cls):
            table[prefix + f.name.upper()] = (section, f.name, f.type)
    return table


def parse_config(text: str) -> ExperimentConfig:
    """
    Parse and validate configuration text.

    Args:
        text: dotenv-style KEY=VALUE lines, comments allowed

    Returns:
        ExperimentConfig with defaults filled in

    Raises:
        ConfigError: listing every violation found
    """
    values = dotenv_values(stream=StringIO(text))
    table = _key_table()
    violations = []
    blocks: Dict[str, dict] = {section: {} for section, _ in SECTIONS.values()}
    for key, raw in values.items():
        if key not in table:
            violations.append(f"unknown key {key}")
            continue
        section, name, tp = table[key]
        try:
            blocks[section][name] = _convert(raw or "", tp)
        except ValueError as e:
            violations.append(f"{key}: {e}")
    if violations:
        raise ConfigError(violations)
    try:
        config = ExperimentConfig(**{
            section: cls(**blocks[section]) for section, cls in SECTIONS.values()
        })
    except TypeError as e:
        raise ConfigError([str(e)])
    violations = validate_config(config)
    if violations:
        raise ConfigError(violations)
    return config


def validate_config(config: ExperimentConfig) -> List[str]:
    """Every range violation of a configuration, empty when valid."""
    g, ph, no, co, ru, ex = (config.grid, config.physics, config.noise, config.control,
                             config.run, config.experiment)
    violations = []
    if g.nodes < 64 or g.nodes & (g.nodes - 1):
        violations.append(f"GRID_NODES = {g.nodes} must be a power of two >= 64")
    if not g.half_width > 0:
        violations.append(f"GRID_HALF_WIDTH = {g.half_width} violates X > 0")
    violations += validate_params(ph.a, complex(ph.nu_1, ph.nu_2), complex(ph.alpha_1, ph.alpha_2), ph.q)
    if ph.h not in ("gaussian", "zero"):
        violations.append(f"PHYSICS_H = {ph.h!r} must be 'gaussian' or 'zero'")
    if ph.h_norm < 0 or not ph.h_width > 0:
        violations.append("PHYSICS_H_NORM must be >= 0 and PHYSICS_H_WIDTH > 0")
    if no.coefficients:
        if any(b < 0 for b in no.coefficients):
            violations.append("NOISE_COEFFICIENTS must be nonnegative")
        n_modes = len(no.coefficients)
    else:
        n_modes = no.modes
        if not no.b0 > 0:
            violations.append(f"NOISE_B0 = {no.b0} violates b0 > 0")
        if not no.p > 1.5:
            violations.append(
                f"NOISE_P = {no.p} <= 3/2: the series B3 = sum b_j^2 k_j^2 diverges"
            )
    if not 1 <= n_modes <= g.nodes // 2 - 1:
        violations.append(f"{n_modes} noise modes outside 1..n/2-1 = {g.nodes // 2 - 1}")
    if not 1 <= co.n <= n_modes:
        violations.append(f"CONTROL_N = {co.n} outside 1..{n_modes}")
    elif no.coefficients:
        silent = [j + 1 for j, b in enumerate(no.coefficients[:co.n]) if b <= 0]
        if silent:
            violations.append(
                f"noise must act on every controlled mode: b_{silent[0]} = 0 but N = {co.n}"
            )
    if co.k is not None and not co.k > 0:
        violations.append(f"CONTROL_K = {co.k} violates K > 0")
    if co.l < 0 or co.m < 0 or not co.rho > 0:
        violations.append("CONTROL_L, CONTROL_M must be >= 0 and CONTROL_RHO > 0")
    if co.pilot_paths < 1:
        violations.append("CONTROL_PILOT_PATHS must be positive")
    if not ru.dt > 0:
        violations.append(f"RUN_DT = {ru.dt} violates dt > 0")
    elif ru.amplitude_bound > 0 and 0 < ph.q < 2:
        bound = dt_bound(complex(ph.alpha_1, ph.alpha_2), ph.q, ru.amplitude_bound)
        if ru.dt > bound:
            violations.append(f"RUN_DT = {ru.dt} exceeds the stability bound dt_max = {bound:.6g}")
    if not ru.horizon > 0:
        violations.append(f"RUN_HORIZON = {ru.horizon} violates horizon > 0")
    if ru.ensemble_size < 1 or ru.batch_size < 1 or ru.record_every < 1:
        violations.append("RUN_ENSEMBLE_SIZE, RUN_BATCH_SIZE and RUN_RECORD_EVERY must be positive")
    if not 0 <= ru.seed < 2 ** 64:
        violations.append(f"RUN_SEED = {ru.seed} must be an unsigned 64-bit integer")
    if ex.kind not in KINDS:
        violations.append(f"EXPERIMENT_KIND = {ex.kind!r} not one of {', '.join(KINDS)}")
    if ex.u0_norm < 0 or not ex.d > 0:
        violations.append("EXPERIMENT_U0_NORM must be >= 0 and EXPERIMENT_D > 0")
    if len(ex.rho_list) < 3 or any(b <= a for a, b in zip(ex.rho_list, ex.rho_list[1:])):
        violations.append("EXPERIMENT_RHO_LIST must hold at least three increasing values")
    if any(not 1 <= N <= n_modes for N in ex.n_list + ex.poincare_n_list):
        violations.append(f"EXPERIMENT_N_LIST and EXPERIMENT_POINCARE_N_LIST must lie in 1..{n_modes}")
    if any(d <= 0 for d in ex.d_list):
        violations.append("EXPERIMENT_D_LIST must be positive")
    if not 0 < ex.poincare_a <= 2 * g.half_width:
        violations.append(f"EXPERIMENT_POINCARE_A = {ex.poincare_a} outside (0, 2X]")
    if not ex.poincare_s > 0 or ex.poincare_samples < 1:
        violations.append("EXPERIMENT_POINCARE_S must be > 0 and EXPERIMENT_POINCARE_SAMPLES positive")
    if not 1 <= ex.oracle_modes <= n_modes:
        violations.append(f"EXPERIMENT_ORACLE_MODES = {ex.oracle_modes} outside 1..{n_modes}")
    if not ex.mixing_step > 0 or not ex.d_ball > 0 or not ex.hit_t > 0:
        violations.append("EXPERIMENT_MIXING_STEP, EXPERIMENT_D_BALL and EXPERIMENT_HIT_T must be positive")
    if len(ex.recurrence_norms) < 2 or any(r <= 0 for r in ex.recurrence_norms):
        violations.append("EXPERIMENT_RECURRENCE_NORMS must hold at least two positive values")
    return violations


def dump_config(config: ExperimentConfig) -> str:
    """Configuration as dotenv text; parse_config(dump_config(c)) == c."""
    lines = []
    for prefix, (section, cls) in SECTIONS.items():
        lines.append(f"# {section}")
        block = getattr(config, section)
        for f in fields(cls):
            lines.append(f"{prefix}{f.name.upper()}={_format(getattr(block, f.name))}")
    return "\n".join(lines) + "\n"


def load_config(path: str) -> ExperimentConfig:
    with open(path) as handle:
        return parse_config(handle.read())


def config_hash(config: ExperimentConfig) -> str:
    """Git-style blob SHA-1 of the echoed configuration."""
    data = dump_config(config).encode()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def with_overrides(config: ExperimentConfig, kind: Optional[str] = None,
                   seed: Optional[int] = None) -> ExperimentConfig:
    """Replace the experiment kind and seed, revalidating the result."""
    if kind is not None:
        config = replace(config, experiment=replace(config.experiment, kind=kind))
    if seed is not None:
        config = replace(config, run=replace(config.run, seed=int(seed)))
    violations = validate_config(config)
    if violations:
        raise ConfigError(violations)
    return config


def build_force(config: ExperimentConfig, grid: Grid) -> Field:
    ph = config.physics
    if ph.h == "zero" or ph.h_norm == 0:
        return Field.zeros(grid)
    bump = Field.from_function(grid, lambda x: np.exp(-x ** 2 / (2.0 * ph.h_width ** 2)))
    return bump * (ph.h_norm / l2_norm(bump))


def initial_condition(grid: Grid, norm: float) -> Field:
    """Smooth complex profile scaled to the requested L2 norm."""
    if norm == 0:
        return Field.zeros(grid)
    profile = Field.from_function(grid, lambda x: (1.0 + 0.5j) * np.exp(-x ** 2 / 8.0) * (1.0 + 0.5 * np.cos(x)))
    return profile * (norm / l2_norm(profile))


def build_setup(config: ExperimentConfig) -> SimulationSetup:
    """Grid, parameters, noise and basis of a configuration."""
    ph, no = config.physics, config.noise
    grid = Grid(config.grid.half_width, config.grid.nodes)
    params = PhysParams(config.physics.a, complex(ph.nu_1, ph.nu_2), complex(ph.alpha_1, ph.alpha_2),
                        ph.q, build_force(config, grid), ph.dealias)
    if no.coefficients:
        basis = make_basis(grid, len(no.coefficients))
        spec = from_coefficients(no.coefficients, basis)
    else:
        basis = make_basis(grid, no.modes)
        spec = make_coefficients(no.b0, no.p, no.modes, basis)
    spec.require_active(config.control.n)
    forcing_summability(params.h, basis)
    return SimulationSetup(params, spec, basis, config.run.dt, config.run.seed,
                           N=config.control.n, record_every=config.run.record_every)


def stopping_params(config: ExperimentConfig, setup: SimulationSetup, u0: Field,
                    runner: EnsembleRunner) -> StoppingParams:
    """Configured K, or K calibrated on a pilot ensemble."""
    co = config.control
    if co.k is not None:
        return StoppingParams(K=co.k, L=co.l, M=co.m, rho=co.rho)
    pilot = ensemble_records(setup, u0, config.run.horizon, co.pilot_paths, runner, StreamRole.PILOT)
    return calibrate_stopping_params(energy_psi(pilot, setup.params), co.rho, co.l, co.m)


@dataclass
class ResultRecord:
    """Everything a run produced."""
    kind: str
    config_text: str
    config_hash: str
    out_dir: str
    reports: List[CheckReport] = field(default_factory=list)
    wall_clock: float = 0.0

    @property
    def verdict(self) -> str:
        return PASS if all(r.passed for r in self.reports) else FAIL

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "config_hash": self.config_hash,
            "config": self.config_text,
            "verdict": self.verdict,
            "reports": [r.to_dict() for r in self.reports],
        }


def _to_builtin(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialise {type(value).__name__}")


def write_json(path: str, payload: dict):
    with open(path, "w") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True, default=_to_builtin)
        handle.write("\n")


def write_outputs(record: ResultRecord):
    """config.env, report.json, one CSV per table and timing.json."""
    os.makedirs(record.out_dir, exist_ok=True)
    with open(os.path.join(record.out_dir, "config.env"), "w") as handle:
        handle.write(record.config_text)
    for report in record.reports:
        for name, table in report.tables.items():
            table.to_csv(os.path.join(record.out_dir, f"{name}.csv"), index=False, float_format="%.17g")
    write_json(os.path.join(record.out_dir, "report.json"), record.to_dict())
    write_json(os.path.join(record.out_dir, "timing.json"), {"wall_clock_seconds": record.wall_clock})
    logger.info(f"💾 results written to {record.out_dir}")


def run_simulate(config: ExperimentConfig, setup: SimulationSetup, runner: EnsembleRunner,
                 out_dir: str) -> List[CheckReport]:
    ex, ru = config.experiment, config.run
    u0 = initial_condition(setup.grid, ex.u0_norm)
    records = ensemble_records(setup, u0, ru.horizon, ru.ensemble_size, runner, noise_on=config.noise.on)
    energy = energy_psi(records, setup.params)
    n = records.batch
    se = np.std(records.norm, axis=1, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(len(records.times))
    bound = moment_bound(setup.params, setup.spec, l2_norm(u0) ** 2, records.times)
    series = pd.DataFrame({
        "time": records.times,
        "norm_sq_mean": records.norm.mean(axis=1),
        "norm_sq_se": se,
        "moment_bound": bound,
        "E_mean": energy.E.mean(axis=1),
        "E_hat_psi_mean": energy.E_hat_psi.mean(axis=1),
        "E_psi_mean": energy.E_psi.mean(axis=1),
    })
    snapshot = os.path.join(out_dir, "final.snap")
    remove_snapshot(snapshot)
    write_snapshot(snapshot, float(records.times[-1]),
                   Field(setup.grid, records.final[0]),
                   {"seed": ru.seed, "path": 0, "config_hash": config_hash(config)})
    within = bool(np.all(series["norm_sq_mean"] <= bound + 3 * se + 1e-9))
    reports = [CheckReport("simulate", PASS if within else FAIL,
                           {"paths": n, "dt_max": dt_max(setup.params, ru.amplitude_bound),
                            "noise": series_report(setup.spec)},
                           {"trajectory": series})]
    if ru.ensemble_size >= 500 and config.noise.on:
        reports.append(check_moment_bound(setup, u0, ex.times, ru.ensemble_size, runner))
    if setup.params.alpha == 0:
        modes = list(range(ex.oracle_modes))
        reports.append(check_linear_oracle(setup, u0, modes, ru.horizon, ru.ensemble_size, runner,
                                           window=(ru.horizon / 2, ru.horizon)))
    return reports


def run_couple(config: ExperimentConfig, setup: SimulationSetup, runner: EnsembleRunner,
               out_dir: str) -> List[CheckReport]:
    ex, ru = config.experiment, config.run
    a = setup.params.a
    u0 = initial_condition(setup.grid, ex.u0_norm)
    v0 = u0 + low_mode_direction(setup.basis) * ex.d
    sp = stopping_params(config, setup, u0, runner)
    task = partial(run_pairs, setup, u0, v0, ru.horizon, sp, noise_on=config.noise.on)
    summary = PairSummary.concatenate(runner.map(task, ru.ensemble_size))
    fit = fit_squeeze_rate(summary.times, summary.w_norm_sq)
    success = squeeze_success(summary.times, summary.w_norm_sq, a)
    squeeze = pd.DataFrame({
        "time": summary.times,
        "w_norm_sq_mean": summary.w_norm_sq.mean(axis=1),
        "w_norm_sq_median": np.median(summary.w_norm_sq, axis=1),
        "pn_w_norm_sq_mean": summary.pn_w_norm_sq.mean(axis=1),
    })
    ok = np.mean(success) >= 0.9 and fit.c_prime >= a / 2
    report = CheckReport("couple", PASS if ok else FAIL, {
        "N": setup.N, "d": ex.d, "K": sp.K, "c": fit.c, "c_prime": fit.c_prime,
        "success_fraction": float(np.mean(success)),
        "tau_triggered_fraction": float(np.mean(np.isfinite(summary.tau))),
        "novikov_integral_mean": float(np.mean(summary.novikov_integral)),
        "tv_bound": total_variation_bound(summary.novikov_integral, setup.spec, setup.N),
    }, {"squeeze": squeeze, "pairs": pair_table(summary, setup.N, a)})
    reports = [report]
    if len(ex.n_list) > 1:
        squeezing = check_squeezing(setup, u0, ex.n_list, ex.d, ru.horizon, ru.ensemble_size, runner)
        squeezing.tables.pop("pairs")
        reports.append(squeezing)
    if len(ex.d_list) > 1:
        reports.append(check_novikov_scaling(setup, u0, ex.d_list, ru.horizon, ru.ensemble_size, runner))
    if ex.shift > 0:
        reports.append(check_girsanov_martingale(setup, ex.shift, ru.horizon, ru.ensemble_size, runner))
    return reports


def mixing_times(config: ExperimentConfig) -> List[float]:
    step = config.experiment.mixing_step
    count = int(np.floor(config.run.horizon / step + 1e-9))
    return [step * (i + 1) for i in range(count)]


def run_mixing(config: ExperimentConfig, setup: SimulationSetup, runner: EnsembleRunner,
               out_dir: str) -> List[CheckReport]:
    ex, ru = config.experiment, config.run
    u0_a = Field.zeros(setup.grid)
    u0_b = initial_condition(setup.grid, ex.u0_norm)
    window = (min(2.0, ru.horizon), ru.horizon)
    return [check_mixing(setup, u0_a, u0_b, mixing_times(config), ru.ensemble_size,
                         ex.test_family, runner, window)]


def run_tails(config: ExperimentConfig, setup: SimulationSetup, runner: EnsembleRunner,
              out_dir: str) -> List[CheckReport]:
    ex, ru = config.experiment, config.run
    u0 = initial_condition(setup.grid, ex.u0_norm)
    sp = stopping_params(config, setup, u0, runner)
    records = ensemble_records(setup, u0, ru.horizon, ru.ensemble_size, runner)
    reports = [
        check_energy_tails(setup, u0, sp, ex.rho_list, ru.ensemble_size, ru.horizon,
                           config.control.c3, records=records),
        check_unweighted_energy_tail(setup, u0, ex.rho_list, ru.ensemble_size, ru.horizon,
                                     records=records),
        check_stopping_tails(records, setup.params, sp, ex.l_list),
    ]
    hitting = pair_hitting_probability(setup, u0, Field.zeros(setup.grid), ex.d_ball, ex.hit_t,
                                       ru.ensemble_size, runner)
    hit_report = CheckReport("hitting", PASS if hitting.hits > 0 else FAIL, {
        "probability": hitting.probability, "ci_low": hitting.low, "ci_high": hitting.high,
        "trials": hitting.trials, "d_ball": ex.d_ball, "T": ex.hit_t})
    if hitting.hits == 0:
        hit_report.warnings.append("no pair reached the ball; increase T or d_ball")
    reports.append(hit_report)
    reports.append(recurrence_moment(setup, u0, Field.zeros(setup.grid), ex.d_ball, ex.delta,
                                     ru.horizon, ru.ensemble_size, runner))
    reports.append(check_recurrence_growth(setup, u0, ex.recurrence_norms, ex.d_ball, ex.delta,
                                           ru.horizon, ru.ensemble_size, runner))
    if ru.ensemble_size >= 40:
        reports.append(check_truncation_bound(setup, u0, sp, ru.horizon, ru.ensemble_size, ex.d,
                                              runner, records))
    return reports


def run_poincare(config: ExperimentConfig, setup: SimulationSetup, runner: EnsembleRunner,
                 out_dir: str) -> List[CheckReport]:
    ex = config.experiment
    rng = np.random.default_rng(config.run.seed)
    band = 0.5 * float(setup.basis.wavenumbers[-1])
    samples = random_band_limited(setup.grid, rng, band, ex.poincare_samples, real=True)
    return [poincare_sweep(setup.basis, ex.poincare_a, ex.poincare_s, ex.poincare_n_list, samples)]


def run_validate(config: ExperimentConfig, setup: SimulationSetup, runner: EnsembleRunner,
                 out_dir: str) -> List[CheckReport]:
    """Fast invariant suite; every check has an exact expected outcome."""
    return validation_suite(config, setup)


def validation_suite(config: ExperimentConfig, setup: SimulationSetup) -> List[CheckReport]:
    ex = config.experiment
    horizon = min(config.run.horizon, 2.0)
    u0 = initial_condition(setup.grid, ex.u0_norm)
    reports = [
        check_deterministic_decay(setup, min(config.run.horizon, 10.0)),
        check_projected_decay(setup, u0, ex.d, min(horizon, 1.0), tolerance=10 * setup.dt),
        _oracle_initial_time(setup),
        _identical_laws(setup, u0, horizon),
        _vacuous_stopping_tail(config, setup, u0, horizon),
        _determinism(setup, u0),
        _lipschitz_family(setup, ex.test_family),
        _config_round_trip(config),
        _snapshot_round_trip(setup, u0),
    ]
    failed = [r.name for r in reports if not r.passed]
    if failed:
        logger.error(f"❌ validation failures: {', '.join(failed)}")
    else:
        logger.info(f"✅ all {len(reports)} invariants hold")
    return reports


def _oracle_initial_time(setup: SimulationSetup) -> CheckReport:
    linear = replace(setup.params, alpha=0)
    mean_factor, variance = ou_oracle(linear, setup.spec, setup.basis, 0, 0.0)
    try:
        ou_oracle(setup.params, setup.spec, setup.basis, 0, 1.0)
        rejected = setup.params.alpha == 0
    except DomainError:
        rejected = True
    ok = mean_factor == 1 and variance == 0 and rejected
    return CheckReport("ou_oracle_initial_time", PASS if ok else FAIL,
                       {"mean_factor": abs(mean_factor), "variance": variance})


def _identical_laws(setup: SimulationSetup, u0: Field, horizon: float) -> CheckReport:
    times = [horizon / 4, horizon / 2, horizon]
    estimate = estimate_mixing_rate(setup, u0, u0, times, 8, 8, EnsembleRunner())
    table = estimate.table
    ok = bool(np.all(table["distance"] <= 2 * table["se"] + 1e-15))
    return CheckReport("identical_laws", PASS if ok else FAIL,
                       {"max_distance": float(table["distance"].max())})


def _vacuous_stopping_tail(config: ExperimentConfig, setup: SimulationSetup, u0: Field,
                           horizon: float) -> CheckReport:
    co = config.control
    sp = StoppingParams(K=co.k or 1.0, L=co.l, M=co.m, rho=co.rho)
    records = ensemble_records(setup, u0, horizon, 4)
    report = check_stopping_tails(records, setup.params, sp, [horizon + 1.0, horizon + 2.0])
    ok = bool(np.all(report.tables["stopping_tails"]["frequency"] == 0))
    return CheckReport("stopping_tail_beyond_horizon", PASS if ok else FAIL)


def _determinism(setup: SimulationSetup, u0: Field) -> CheckReport:
    first = sample_observable(setup, u0, 20, 5, SquaredNorm(setup), StreamRole.PRIMARY, range(3))
    second = sample_observable(setup, u0, 20, 5, SquaredNorm(setup), StreamRole.PRIMARY, range(3))
    return CheckReport("determinism", PASS if np.array_equal(first, second) else FAIL)


def _lipschitz_family(setup: SimulationSetup, size: int) -> CheckReport:
    family = TestFamily.build(setup.basis, size)
    quotient = family.lipschitz_quotient(np.random.default_rng(setup.seed))
    return CheckReport("lipschitz_family", PASS if quotient <= 1 + 1e-6 else FAIL,
                       {"max_quotient": quotient})


def _config_round_trip(config: ExperimentConfig) -> CheckReport:
    ok = parse_config(dump_config(config)) == config
    return CheckReport("config_round_trip", PASS if ok else FAIL)


def _snapshot_round_trip(setup: SimulationSetup, u0: Field) -> CheckReport:
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "u0.snap")
        write_snapshot(path, 0.0, u0, {"seed": setup.seed})
        records, metadata = read_snapshot(path)
    ok = (len(records) == 1 and np.array_equal(records[0][1].values, u0.values)
          and metadata["seed"] == setup.seed)
    return CheckReport("snapshot_round_trip", PASS if ok else FAIL)


RUNNERS = {
    "simulate": run_simulate,
    "couple": run_couple,
    "mixing": run_mixing,
    "tails": run_tails,
    "poincare": run_poincare,
    "validate": run_validate,
}


def run(config: ExperimentConfig, out_root: str = "results", workers: int = 1) -> ResultRecord:
    """
    Run the configured experiment and write its output directory.

    Args:
        config: validated configuration
        out_root: parent of the per-run directory kind-hash12-timestamp
        workers: joblib worker count; results do not depend on it

    Returns:
        ResultRecord
    """
    started = time.time()
    kind = config.experiment.kind
    digest = config_hash(config)
    stamp = datetime.now().strftime("%Y%m%dT%H%M%S")
    out_dir = os.path.join(out_root, f"{kind}-{digest[:12]}-{stamp}")
    os.makedirs(out_dir, exist_ok=True)
    logger.info(f"🚀 {kind} run {digest[:12]} (seed {config.run.seed}, {workers} worker(s))")
    setup = build_setup(config)
    runner = EnsembleRunner(workers, config.run.batch_size)
    reports = RUNNERS[kind](config, setup, runner, out_dir)
    for report in reports:
        report.seed = config.run.seed
        report.config_hash = digest
        logger.info(f"{'✅' if report.passed else '❌'} {report.name}: {report.verdict}")
        for warning in report.warnings:
            logger.warning(f"⚠️ {report.name}: {warning}")
    record = ResultRecord(kind, dump_config(config), digest, out_dir, reports, time.time() - started)
    write_outputs(record)
    return record
