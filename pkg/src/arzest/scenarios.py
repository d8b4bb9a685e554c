"""Twin-experiment scenarios: truth generation, estimation runs and sweeps.

A scenario bundles the network, its boundary inputs, an optional local
slowdown window (the "jam"), a sensor schedule, a noise level and the
estimators to compare.  Truth trajectories come from the nonlinear model;
estimators see noisy measurements of them plus the true boundary inputs.
"""
from __future__ import annotations

import csv
import math
import time as _time
from dataclasses import dataclass, field, replace

import numpy as np

from .kalman import EstimatorConfig, KalmanRunner
from .mhe import MheConfig, MheSession
from .model import (
    ModelParams,
    OffRamp,
    OnRamp,
    StepDiagnostics,
    Topology,
    equilibrium_state,
    measure_h,
    pack_inputs,
    state_bounds,
    step,
)
from .sensing import (
    SensorSchedule,
    _noise_draw,
    build_observation,
    positions_at,
)

__all__ = [
    "JamSpec",
    "EstimatorSpec",
    "Scenario",
    "paper_params",
    "paper_topology",
    "default_schedule",
    "default_scenario",
    "constant_inputs",
    "TruthResult",
    "generate_truth",
    "make_estimator",
    "RunResult",
    "run_estimation",
    "rmse",
    "moving_average",
    "FILL_ORDER",
    "sweep_sensor_count",
    "sweep_rotation",
    "sweep_spacing",
    "sweep_noise",
    "write_sweep_csv",
]

# Order in which extra fixed mainline sensors are placed in the sensor-count
# sweep.
FILL_ORDER = (1, 3, 7, 5, 2, 4, 6, 8)


@dataclass(frozen=True)
class JamSpec:
    """Local slowdown: during steps [start, end) the named segment's demand
    and supply are scaled by ``scale`` (its whole diagram slows down)."""

    segment: int
    start: int
    end: int
    scale: float = 0.3

    def __post_init__(self):
        if not 0 < self.scale <= 1:
            raise ValueError("jam scale must lie in (0, 1]")
        if self.start < 0 or self.end < self.start:
            raise ValueError("jam window must satisfy 0 <= start <= end")


@dataclass(frozen=True)
class EstimatorSpec:
    """Estimator kind ('ekf', 'ukf', 'enkf' or 'mhe') plus its tuning."""

    kind: str
    kalman: EstimatorConfig = field(default_factory=EstimatorConfig)
    mhe: MheConfig = field(default_factory=MheConfig)

    def __post_init__(self):
        if self.kind not in ("ekf", "ukf", "enkf", "mhe"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")


@dataclass(frozen=True)
class Scenario:
    scenario_id: str
    params: ModelParams
    topo: Topology
    t_f: int
    inputs: np.ndarray  # (t_f, n_u); row k drives step k -> k+1
    schedule: SensorSchedule
    noise_std: float
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    estimators: tuple[EstimatorSpec, ...] = ()
    jam: JamSpec | None = None
    warmup_steps: int = 300
    x_init: np.ndarray | None = None

    def __post_init__(self):
        inputs = np.asarray(self.inputs, dtype=float)
        if inputs.shape != (self.t_f, self.topo.n_u):
            raise ValueError(
                f"inputs must have shape ({self.t_f}, {self.topo.n_u})")
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "seeds", tuple(self.seeds))
        object.__setattr__(self, "estimators", tuple(self.estimators))
        if self.jam is not None:
            if not 1 <= self.jam.segment <= self.topo.n_segments:
                raise ValueError("jam segment out of range")
            if self.jam.end > self.t_f:
                raise ValueError("jam window exceeds scenario duration")


def paper_params() -> ModelParams:
    """Reference highway parameters (1 s steps on 100 m cells)."""
    return ModelParams(v_f=102.0, rho_m=345.0, tau=20.0, gamma=1.75,
                       T=1.0 / 3600.0, l=0.1)


def paper_topology() -> Topology:
    """Nine mainline cells, an on-ramp into cell 6, off-ramps at 3 and 8."""
    return Topology(
        n_mainline=9,
        on_ramps=(OnRamp(merge_into=6),),
        off_ramps=(OffRamp(diverge_from=3, alpha=0.2),
                   OffRamp(diverge_from=8, alpha=0.2)),
    )


def default_schedule(topo: Topology) -> SensorSchedule:
    """Minimum fixed set (last mainline cell + all ramps) plus three
    connected vehicles starting at 1, 3, 7 and hopping every 15 steps."""
    fixed = [topo.n_mainline]
    fixed += [topo.onramp_segment(j + 1) for j in range(topo.n_onramps)]
    fixed += [topo.offramp_segment(l + 1) for l in range(topo.n_offramps)]
    return SensorSchedule(fixed_segments=tuple(fixed), mobile_count=3,
                          rotation_period=15, initial_positions=(1, 3, 7))


def constant_inputs(topo: Topology, t_f: int, d_in: float, w_in: float,
                    rho_out: float, ramp_demand=(), ramp_w=(),
                    offramp_rho_out=()) -> np.ndarray:
    """Tile one input vector over the whole run."""
    u = pack_inputs(topo, d_in, w_in, rho_out, ramp_demand, ramp_w,
                    offramp_rho_out)
    return np.tile(u, (t_f, 1))


def default_scenario(t_f: int = 500, noise_std: float = 1.0,
                     estimators: tuple[EstimatorSpec, ...] = (),
                     scenario_id: str = "default") -> Scenario:
    """Reference twin experiment: steady feed at about 70% of capacity with
    a 200-step slowdown on cell 7."""
    params = paper_params()
    topo = paper_topology()
    inputs = constant_inputs(
        topo, t_f,
        d_in=8800.0, w_in=params.v_f, rho_out=30.0,
        ramp_demand=(600.0,), ramp_w=(params.v_f,),
        offramp_rho_out=(20.0, 20.0),
    )
    jam = JamSpec(segment=7, start=100, end=300, scale=0.3)
    if jam.end > t_f:
        jam = None
    return Scenario(
        scenario_id=scenario_id,
        params=params, topo=topo, t_f=t_f, inputs=inputs,
        schedule=default_schedule(topo), noise_std=noise_std,
        estimators=estimators, jam=jam,
    )


@dataclass
class TruthResult:
    traj: np.ndarray  # (t_f + 1, n_x)
    clamp_events: int


def _jam_scales(sc: Scenario) -> np.ndarray | None:
    if sc.jam is None:
        return None
    scales = np.ones(sc.topo.n_segments)
    scales[sc.jam.segment - 1] = sc.jam.scale
    return scales


def generate_truth(sc: Scenario) -> TruthResult:
    """Simulate the scenario's truth trajectory.

    Starts from ``x_init`` when given, otherwise from the steady state
    reached after ``warmup_steps`` constant-input steps.  The jam scaling
    applies only inside its step window.
    """
    params, topo = sc.params, sc.topo
    if sc.x_init is not None:
        x = np.asarray(sc.x_init, dtype=float).copy()
    else:
        x = equilibrium_state(topo, params, 20.0)
        u0 = sc.inputs[0]
        for _ in range(sc.warmup_steps):
            x = step(x, u0, topo, params)
    diag = StepDiagnostics()
    jam_sc = _jam_scales(sc)
    traj = np.empty((sc.t_f + 1, topo.n_x))
    traj[0] = x
    for k in range(sc.t_f):
        active = (jam_sc is not None and sc.jam.start <= k < sc.jam.end)
        x = step(x, sc.inputs[k], topo, params,
                 ds_scale=jam_sc if active else None, diag=diag)
        traj[k + 1] = x
    return TruthResult(traj=traj, clamp_events=diag.clamped)


def make_estimator(spec: EstimatorSpec, x0, topo: Topology,
                   params: ModelParams, rng: np.random.Generator):
    """Instantiate a stateful estimator with the common step interface."""
    if spec.kind == "mhe":
        return MheSession(x0, spec.mhe, topo, params)
    return KalmanRunner(spec.kind, x0, spec.kalman, topo, params, rng)


@dataclass
class RunResult:
    estimator: str
    est: np.ndarray  # (t_f + 1, n_x)
    rmse_rho: float
    rmse_v: float
    mean_step_time_s: float
    max_step_time_s: float
    within_bounds: bool
    flags: str


def rmse(truth_traj, est_traj, params: ModelParams) -> tuple[float, float]:
    """Density and speed RMSE averaged over all segments and steps 1..t_f.

    Speeds are reconstructed from both trajectories with the measurement
    map; the relative-flow states themselves are not scored.
    """
    truth_traj = np.asarray(truth_traj, dtype=float)
    est_traj = np.asarray(est_traj, dtype=float)
    if truth_traj.shape != est_traj.shape:
        raise ValueError("trajectory shapes differ")
    tt = truth_traj[1:]
    ee = est_traj[1:]
    d_rho = ee[:, 0::2] - tt[:, 0::2]
    v_t = np.apply_along_axis(lambda r: measure_h(r, params)[1::2], 1, tt)
    v_e = np.apply_along_axis(lambda r: measure_h(r, params)[1::2], 1, ee)
    d_v = v_e - v_t
    return (float(np.sqrt(np.mean(d_rho ** 2))),
            float(np.sqrt(np.mean(d_v ** 2))))


def moving_average(series, window: int) -> np.ndarray:
    """Trailing moving average along axis 0 with a ramp-in at the start."""
    if window < 1:
        raise ValueError("window must be at least 1")
    arr = np.asarray(series, dtype=float)
    squeeze = arr.ndim == 1
    if squeeze:
        arr = arr[:, None]
    out = np.empty_like(arr)
    csum = np.cumsum(arr, axis=0)
    for k in range(arr.shape[0]):
        if k < window:
            out[k] = csum[k] / (k + 1)
        else:
            out[k] = (csum[k] - csum[k - window]) / window
    return out[:, 0] if squeeze else out


def run_estimation(sc: Scenario, truth: TruthResult, spec: EstimatorSpec,
                   seed: int) -> RunResult:
    """One estimator pass over a truth trajectory with seeded noise."""
    params, topo = sc.params, sc.topo
    root = np.random.SeedSequence(seed)
    noise_ss, est_ss = root.spawn(2)
    rng_noise = np.random.default_rng(noise_ss)
    rng_est = np.random.default_rng(est_ss)

    x0 = truth.traj[0].copy()
    estimator = make_estimator(spec, x0, topo, params, rng_est)
    est = np.empty_like(truth.traj)
    est[0] = x0
    lo, hi = state_bounds(topo, params)
    within = True
    times = []
    for k in range(1, sc.t_f + 1):
        measured = positions_at(sc.schedule, topo, k - 1)
        C = build_observation(measured, topo)
        y = C @ measure_h(truth.traj[k], params)
        y = y + _noise_draw(rng_noise, sc.noise_std, C.shape[0])
        t0 = _time.perf_counter()
        x_hat = estimator.step(sc.inputs[k - 1], y, C)
        times.append(_time.perf_counter() - t0)
        est[k] = x_hat
        if np.any(x_hat < lo - 1e-12) or np.any(x_hat > hi + 1e-12):
            within = False
    r_rho, r_v = rmse(truth.traj, est, params)
    flags = []
    if isinstance(estimator, MheSession):
        if estimator.failed_solves:
            flags.append(f"qp_fail={estimator.failed_solves}")
    else:
        if estimator.state.jitter_events:
            flags.append(f"jitter={estimator.state.jitter_events}")
    if not within:
        flags.append("bounds")
    return RunResult(
        estimator=spec.kind, est=est, rmse_rho=r_rho, rmse_v=r_v,
        mean_step_time_s=float(np.mean(times)),
        max_step_time_s=float(np.max(times)),
        within_bounds=within, flags=";".join(flags),
    )


def _averaged_row(sc: Scenario, sweep: str, knob, spec: EstimatorSpec,
                  truth: TruthResult, scenario: Scenario) -> dict:
    """Run one sweep cell over every seed and average the metrics."""
    rr, rv, ts, flags = [], [], [], []
    for seed in scenario.seeds:
        res = run_estimation(scenario, truth, spec, seed)
        rr.append(res.rmse_rho)
        rv.append(res.rmse_v)
        ts.append(res.mean_step_time_s)
        if res.flags:
            flags.append(res.flags)
    return {
        "scenario_id": sc.scenario_id,
        "sweep": sweep,
        "estimator": spec.kind,
        "knob": knob,
        "rmse_rho": float(np.mean(rr)),
        "rmse_v": float(np.mean(rv)),
        "mean_step_time_s": float(np.mean(ts)),
        "flags": "|".join(flags),
    }


def _cell_job(args) -> dict:
    sc, sweep, knob, spec, truth, cell = args
    return _averaged_row(sc, sweep, knob, spec, truth, cell)


def _run_cells(sc, sweep, cells, truth, jobs: int) -> list[dict]:
    """Run sweep cells, optionally across worker processes.

    Rows come back in cell order either way, so the output is
    deterministic regardless of worker scheduling.
    """
    tasks = [(sc, sweep, knob, spec, truth, cell)
             for (knob, spec, cell) in cells]
    if jobs <= 1 or len(tasks) <= 1:
        return [_cell_job(t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(_cell_job, tasks))


def _min_fixed(topo: Topology) -> list[int]:
    fixed = [topo.n_mainline]
    fixed += [topo.onramp_segment(j + 1) for j in range(topo.n_onramps)]
    fixed += [topo.offramp_segment(l + 1) for l in range(topo.n_offramps)]
    return fixed


def sweep_sensor_count(sc: Scenario, counts=(0, 1, 2, 3, 4, 5, 6, 7, 8),
                       truth: TruthResult | None = None,
                       jobs: int = 1) -> list[dict]:
    """Add fixed mainline sensors one at a time in the canonical order."""
    truth = truth if truth is not None else generate_truth(sc)
    cells = []
    for c in counts:
        if c > len(FILL_ORDER):
            raise ValueError(f"at most {len(FILL_ORDER)} extra sensors")
        fixed = _min_fixed(sc.topo) + list(FILL_ORDER[:c])
        sched = SensorSchedule(fixed_segments=tuple(fixed))
        cell = replace(sc, schedule=sched)
        for spec in sc.estimators:
            cells.append((c, spec, cell))
    return _run_cells(sc, "sensors", cells, truth, jobs)


def sweep_rotation(sc: Scenario, periods=(1, 5, 15, 60, None),
                   truth: TruthResult | None = None,
                   jobs: int = 1) -> list[dict]:
    """Vary how often the mobile sensors hop (None parks them)."""
    truth = truth if truth is not None else generate_truth(sc)
    cells = []
    for p in periods:
        sched = SensorSchedule(
            fixed_segments=tuple(_min_fixed(sc.topo)), mobile_count=3,
            rotation_period=None if p in (None, math.inf) else p,
            initial_positions=(1, 3, 7))
        cell = replace(sc, schedule=sched)
        knob = "inf" if p in (None, math.inf) else p
        for spec in sc.estimators:
            cells.append((knob, spec, cell))
    return _run_cells(sc, "rotation", cells, truth, jobs)


def sweep_spacing(sc: Scenario, configs=((1, 2, 3), (1, 3, 5), (1, 4, 7)),
                  periods=(1, 15, None),
                  truth: TruthResult | None = None,
                  jobs: int = 1) -> list[dict]:
    """Mobile-sensor spacing sweep (moving-horizon estimator only)."""
    truth = truth if truth is not None else generate_truth(sc)
    specs = [s for s in sc.estimators if s.kind == "mhe"]
    if not specs:
        specs = [EstimatorSpec("mhe")]
    cells = []
    for cfgp in configs:
        for p in periods:
            sched = SensorSchedule(
                fixed_segments=tuple(_min_fixed(sc.topo)),
                mobile_count=len(cfgp),
                rotation_period=None if p in (None, math.inf) else p,
                initial_positions=tuple(cfgp))
            cell = replace(sc, schedule=sched)
            pk = "inf" if p in (None, math.inf) else p
            knob = "-".join(str(s) for s in cfgp) + f"@{pk}"
            for spec in specs:
                cells.append((knob, spec, cell))
    return _run_cells(sc, "spacing", cells, truth, jobs)


def sweep_noise(sc: Scenario, stds=(0.0, 1.0, 5.0, 10.0, 20.0, 40.0),
                truth: TruthResult | None = None,
                jobs: int = 1) -> list[dict]:
    """Vary the measurement noise level, averaging over the seed list."""
    truth = truth if truth is not None else generate_truth(sc)
    cells = []
    for s in stds:
        cell = replace(sc, noise_std=float(s))
        for spec in sc.estimators:
            cells.append((s, spec, cell))
    return _run_cells(sc, "noise", cells, truth, jobs)


def write_sweep_csv(rows: list[dict], path: str) -> None:
    """Write sweep rows as UTF-8 CSV with 9-significant-digit floats."""
    cols = ["scenario_id", "sweep", "estimator", "knob",
            "rmse_rho", "rmse_v", "mean_step_time_s", "flags"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for r in rows:
            w.writerow([
                r["scenario_id"], r["sweep"], r["estimator"], r["knob"],
                f"{r['rmse_rho']:.9g}", f"{r['rmse_v']:.9g}",
                f"{r['mean_step_time_s']:.9g}", r["flags"],
            ])
