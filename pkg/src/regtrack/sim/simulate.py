"""Ground truth, measurement generation and Monte Carlo orchestration."""
from __future__ import annotations

import os
import time
import traceback
from dataclasses import dataclass, field

import numpy as np

from ..geometry import wrap_angle
from ..metrics import ospa, registration_errors
from .scenario import Scenario

__all__ = ["propagate_targets", "generate_measurements", "stream_rng", "RunRecord", "run_single", "run_monte_carlo"]

# stream tags keep measurement draws apart from any other per-(run, node, t) use
MEASUREMENT_STREAM = 0


def stream_rng(master_seed: int, run: int, node: int, t: int, stream: int = MEASUREMENT_STREAM) -> np.random.Generator:
    """Counter-based stream: ``SeedSequence([master, run, node, t, stream])``."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed), int(run), int(node), int(t), int(stream)]))


def propagate_targets(scenario: Scenario, t: int) -> np.ndarray:
    """Global states ``(n, 4)`` of the targets alive at step ``t``."""
    if not 0 <= t <= scenario.horizon:
        raise ValueError(f"step {t} outside the horizon")
    x = scenario.trajectories[:, t]
    return x[~np.isnan(x[:, 0])]


def generate_measurements(scenario: Scenario, truth: np.ndarray, node: int, t: int, rng: np.random.Generator, sensor=None) -> np.ndarray:
    """Range-bearing scan ``(m, 2)`` of node ``node``: detections then clutter.

    ``t`` is unused by the model and kept for the record; ``sensor`` may
    override the scenario's detection/clutter/noise settings.
    """
    sensor = scenario.sensor_model() if sensor is None else sensor
    truth = np.asarray(truth, dtype=float).reshape(-1, 4)
    local = scenario.to_local(node, truth) if len(truth) else truth
    detected = local[rng.random(len(local)) < sensor.p_d]
    z = sensor.h(detected).reshape(-1, 2)
    z = z + rng.standard_normal(z.shape) * np.sqrt(np.diag(sensor.R))
    n_c = rng.poisson(sensor.clutter_rate)
    x0, x1, y0, y1 = scenario.region
    cl = np.zeros((n_c, 4))
    cl[:, 0] = rng.uniform(x0, x1, n_c)
    cl[:, 2] = rng.uniform(y0, y1, n_c)
    zc = sensor.h(scenario.to_local(node, cl)).reshape(-1, 2)
    out = np.vstack([z, zc])
    out[:, 1] = wrap_angle(out[:, 1])
    return out


@dataclass
class RunRecord:
    """Per-run traces; index ``t`` runs over ``1..horizon`` (column ``t - 1``)."""

    run: int
    ospa: np.ndarray  # (n_nodes, T)
    cardinality: np.ndarray  # (n_nodes, T) MAP cardinality
    true_cardinality: np.ndarray  # (T,)
    drift_error: np.ndarray  # (n_directed_edges, T)
    gamma_error: np.ndarray  # (n_directed_edges, T)
    timing: np.ndarray  # (n_nodes, T) seconds
    directed_edges: list
    consensus_steps: np.ndarray  # (T,) consensus iterations performed
    failures: list = field(default_factory=list)


def run_single(scenario: Scenario, config, run: int, master_seed: int) -> RunRecord:
    """One Monte Carlo run of the network filter."""
    from ..jsr import Network

    T = scenario.horizon
    net = Network(scenario, config)
    dedges = net.directed_edges
    n = scenario.n_nodes
    rec = RunRecord(
        run=run,
        ospa=np.full((n, T), np.nan),
        cardinality=np.zeros((n, T), dtype=int),
        true_cardinality=np.zeros(T, dtype=int),
        drift_error=np.full((len(dedges), T), np.nan),
        gamma_error=np.full((len(dedges), T), np.nan),
        timing=np.zeros((n, T)),
        directed_edges=dedges,
        consensus_steps=np.zeros(T, dtype=int),
    )
    truth_params = [scenario.true_params(i, j) for i, j in dedges]
    td = np.array([p[0] for p in truth_params]).reshape(-1, 2)
    tg = np.array([p[1] for p in truth_params])
    for t in range(1, T + 1):
        truth = propagate_targets(scenario, t)
        scans = [generate_measurements(scenario, truth, i, t, stream_rng(master_seed, run, i, t)) for i in range(n)]
        try:
            info = net.step(t, scans)
        except Exception as exc:  # recorded, run continues with the next one
            rec.failures.append({"t": t, "error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc()})
            break
        rec.timing[:, t - 1] = info["timing"]
        rec.consensus_steps[t - 1] = info["consensus_steps"]
        rec.true_cardinality[t - 1] = len(truth)
        for i in range(n):
            est = net.estimates(i)
            tl = scenario.to_local(i, truth) if len(truth) else truth
            rec.ospa[i, t - 1] = ospa(est[:, [0, 2]], tl[:, [0, 2]], scenario.ospa)
            rec.cardinality[i, t - 1] = len(est)
        ed, eg = net.registration_estimates()
        de, ge = registration_errors(ed, eg, td, tg)
        rec.drift_error[:, t - 1] = de
        rec.gamma_error[:, t - 1] = ge
    return rec


def _worker(args):
    scenario, config, run, seed = args
    t0 = time.perf_counter()
    try:
        rec = run_single(scenario, config, run, seed)
    except Exception as exc:
        T, n = scenario.horizon, scenario.n_nodes
        rec = RunRecord(run, np.full((n, T), np.nan), np.zeros((n, T), int), np.zeros(T, int),
                        np.zeros((0, T)), np.zeros((0, T)), np.zeros((n, T)), [], np.zeros(T, int),
                        [{"t": 0, "error": f"{type(exc).__name__}: {exc}", "trace": traceback.format_exc()}])
    rec.wall_time = time.perf_counter() - t0
    return rec


def run_monte_carlo(scenario: Scenario, config, n_runs: int, master_seed: int = 0, workers: int | None = None, first_run: int = 0):
    """``n_runs`` independent runs; results are ordered by run index and do
    not depend on ``workers``."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    jobs = [(scenario, config, first_run + r, master_seed) for r in range(n_runs)]
    workers = min(n_runs, os.cpu_count() or 1) if workers is None else max(1, int(workers))
    if workers == 1:
        return [_worker(j) for j in jobs]
    import multiprocessing as mp

    with mp.get_context("spawn").Pool(workers) as pool:
        return pool.map(_worker, jobs)
