"""Scenario documents: loading, validation and derived quantities.

Scenario files are YAML with units in the field names. Node ids in files
are 1-based; everything in memory is 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from ..cphd import MotionModel, SensorModel, cv_transition
from ..errors import ScenarioError
from ..fusion import NetworkGraph
from ..geometry import rot2, wrap_angle
from ..gm import GaussianMixture
from ..metrics import OspaConfig

__all__ = ["TargetScript", "Scenario", "load_scenario", "parse_scenario", "validate_file", "builtin_scenarios", "resolve_scenario_path"]

BUILTIN = ("ref_tree", "ref_cycle")


@dataclass(frozen=True)
class TargetScript:
    birth: int
    death: int  # first step at which the target is gone
    initial_state: np.ndarray  # [xi, xi_dot, eta, eta_dot] in the global frame


@dataclass(frozen=True)
class Scenario:
    name: str
    region: tuple  # (xmin, xmax, ymin, ymax)
    horizon: int
    dt: float
    targets: tuple
    truth_accel_std: float
    trajectory_seed: int
    node_positions: np.ndarray
    node_headings: np.ndarray
    edges: tuple
    weights: np.ndarray
    p_s: float
    filter_accel_std: float
    n_max: int
    birth_positions: np.ndarray
    birth_velocities: np.ndarray
    birth_pos_std: float
    birth_vel_std: float
    birth_rate: float
    p_d: float
    clutter_rate: float
    range_std: float
    bearing_std: float
    l_consensus: int
    consensus_on_time: int
    registration: dict = field(default_factory=dict)
    ospa: OspaConfig = OspaConfig()
    seed: int = 0

    @property
    def n_nodes(self) -> int:
        return len(self.node_positions)

    @property
    def region_area(self) -> float:
        x0, x1, y0, y1 = self.region
        return (x1 - x0) * (y1 - y0)

    @cached_property
    def graph(self) -> NetworkGraph:
        return NetworkGraph(self.n_nodes, self.edges, self.weights)

    def true_params(self, i: int, j: int):
        """``(drift, gamma)`` with ``x^i = M(gamma) x^j + [drift_x, 0, drift_y, 0]``."""
        pi, pj = self.node_positions[i], self.node_positions[j]
        gi, gj = self.node_headings[i], self.node_headings[j]
        return rot2(-gi) @ (pj - pi), float(wrap_angle(gj - gi))

    def to_local(self, i: int, states: np.ndarray) -> np.ndarray:
        """Global states (rows) expressed in the frame of node ``i``."""
        R = rot2(-self.node_headings[i])
        out = np.empty_like(states)
        out[:, [0, 2]] = (states[:, [0, 2]] - self.node_positions[i]) @ R.T
        out[:, [1, 3]] = states[:, [1, 3]] @ R.T
        return out

    @cached_property
    def trajectories(self) -> np.ndarray:
        """``(n_targets, horizon + 1, 4)`` global states; NaN outside the lifetime.

        Process noise is drawn once from ``trajectory_seed`` so every run
        sees the same paths.
        """
        F, _ = cv_transition(self.dt, self.truth_accel_std)
        dt = self.dt
        G = self.truth_accel_std * np.array([[dt * dt / 2, 0.0], [dt, 0.0], [0.0, dt * dt / 2], [0.0, dt]])
        rng = np.random.default_rng(self.trajectory_seed)
        out = np.full((len(self.targets), self.horizon + 1, 4), np.nan)
        for k, tgt in enumerate(self.targets):
            noise = rng.standard_normal((self.horizon + 1, 2))
            x = np.asarray(tgt.initial_state, dtype=float)
            for t in range(tgt.birth, min(tgt.death, self.horizon + 1)):
                if t > tgt.birth:
                    x = F @ x + G @ noise[t]
                out[k, t] = x
        return out

    def motion_model(self, i: int) -> MotionModel:
        F, Q = cv_transition(self.dt, self.filter_accel_std)
        n = len(self.birth_positions)
        glob = np.zeros((n, 4))
        glob[:, [0, 2]] = self.birth_positions
        glob[:, [1, 3]] = self.birth_velocities
        means = self.to_local(i, glob)
        P = np.diag([self.birth_pos_std ** 2, self.birth_vel_std ** 2] * 2)
        birth = GaussianMixture(np.full(n, 1.0 / n), means, np.tile(P, (n, 1, 1)))
        from ..cphd import truncated_poisson

        return MotionModel(F, Q, self.p_s, birth, truncated_poisson(self.birth_rate, self.n_max))

    def sensor_model(self) -> SensorModel:
        R = np.diag([self.range_std ** 2, self.bearing_std ** 2])
        return SensorModel("range_bearing", R, self.p_d, self.clutter_rate, self.region_area)


def _compose_lines(text: str):
    """Python data plus a map from key paths to 1-based line numbers."""
    node = yaml.compose(text, Loader=yaml.SafeLoader)
    lines = {}

    def walk(n, path):
        lines[path] = n.start_mark.line + 1
        if isinstance(n, yaml.MappingNode):
            out = {}
            for k, v in n.value:
                key = yaml.safe_load(yaml.serialize(k)) if not isinstance(k, yaml.ScalarNode) else k.value
                lines[path + (key,)] = k.start_mark.line + 1
                out[key] = walk(v, path + (key,))
            return out
        if isinstance(n, yaml.SequenceNode):
            return [walk(v, path + (i,)) for i, v in enumerate(n.value)]
        return yaml.safe_load(yaml.serialize(n))

    if node is None:
        return {}, {}
    return walk(node, ()), lines


class _Checker:
    def __init__(self, lines):
        self.lines = lines
        self.violations = []

    def line(self, path):
        path = tuple(path)
        while path and path not in self.lines:
            path = path[:-1]
        return self.lines.get(path, 0)

    def add(self, path, msg):
        self.violations.append((self.line(path), msg))

    def get(self, data, path, kind=float, required=True, default=None):
        cur = data
        for key in path:
            if not isinstance(cur, (dict, list)) or (isinstance(cur, dict) and key not in cur):
                if required:
                    self.add(path[:-1], f"missing field '{'.'.join(map(str, path))}'")
                return default
            cur = cur[key]
        try:
            if kind is float:
                val = float(cur)
                if not np.isfinite(val):
                    raise ValueError
                return val
            if kind is int:
                if isinstance(cur, bool) or int(cur) != cur:
                    raise ValueError
                return int(cur)
            if kind is list:
                return np.asarray(cur, dtype=float)
            return kind(cur)
        except (TypeError, ValueError):
            self.add(path, f"field '{'.'.join(map(str, path))}' has an invalid value {cur!r}")
            return default


def parse_scenario(text: str, name: str = "scenario") -> Scenario:
    """Parse and validate a scenario document; raises :class:`ScenarioError`."""
    try:
        data, lines = _compose_lines(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioError([((mark.line + 1) if mark else 0, f"not valid YAML: {exc}")]) from exc
    if not isinstance(data, dict):
        raise ScenarioError([(1, "scenario document must be a mapping")])
    ck = _Checker(lines)
    g = ck.get

    region = g(data, ("region_m",), dict, default={}) or {}
    xr = g(data, ("region_m", "x"), list, default=np.array([0.0, 1.0]))
    yr = g(data, ("region_m", "y"), list, default=np.array([0.0, 1.0]))
    if xr.shape != (2,) or yr.shape != (2,) or xr[1] <= xr[0] or yr[1] <= yr[0]:
        ck.add(("region_m",), "region must give increasing [min, max] pairs for x and y")
        xr, yr = np.array([0.0, 1.0]), np.array([0.0, 1.0])
    del region
    box = (xr[0], xr[1], yr[0], yr[1])
    horizon = g(data, ("horizon_steps",), int, default=1)
    dt = g(data, ("dt_s",), float, default=1.0)
    if horizon is not None and horizon < 1:
        ck.add(("horizon_steps",), "horizon must be at least one step")

    # targets
    targets = []
    for k, t in enumerate(data.get("targets", []) or []):
        p = ("targets", k)
        birth = g(t, ("birth_step",), int, default=1)
        death = t.get("death_step") if isinstance(t, dict) else None
        death = max(horizon, birth or 1) + 1 if death is None else g(t, ("death_step",), int, default=horizon + 1)
        x0 = g(t, ("initial_state_m_mps",), list, default=np.zeros(4))
        if x0.shape != (4,):
            ck.add(p + ("initial_state_m_mps",), f"target {k + 1}: initial state needs 4 entries [x, vx, y, vy]")
            x0 = np.zeros(4)
        if birth is not None and death is not None and not (1 <= birth < death):
            ck.add(p + ("birth_step",), f"target {k + 1}: birth step must be >= 1 and before the death step")
        targets.append(TargetScript(birth, death, x0))
    if not targets:
        ck.add(("targets",), "at least one target script is required")

    nodes = data.get("nodes", []) or []
    pos, head = [], []
    for k, nd in enumerate(nodes):
        q = g(nd, ("position_m",), list, default=np.zeros(2))
        if q.shape != (2,):
            ck.add(("nodes", k, "position_m"), f"node {k + 1}: position needs 2 entries")
            q = np.zeros(2)
        pos.append(q)
        head.append(np.deg2rad(g(nd, ("heading_deg",), float, default=0.0)))
    n = len(nodes)
    if n == 0:
        ck.add(("nodes",), "at least one node is required")
    pos = np.array(pos).reshape(-1, 2)
    head = np.array(head)
    for k, q in enumerate(pos):
        if not (box[0] <= q[0] <= box[1] and box[2] <= q[1] <= box[3]):
            ck.add(("nodes", k, "position_m"), f"node {k + 1} lies outside the surveillance region")

    edges = []
    for k, e in enumerate(data.get("edges", []) or []):
        if not (isinstance(e, list) and len(e) == 2 and all(isinstance(v, int) for v in e)):
            ck.add(("edges", k), f"edge {k + 1} must be a pair of node ids")
            continue
        a, b = e
        if not (1 <= a <= n and 1 <= b <= n) or a == b:
            ck.add(("edges", k), f"edge {a}-{b} refers to an unknown node or is a self loop")
            continue
        edges.append((a - 1, b - 1))

    weights = None
    if "consensus_weights" in data:
        W = g(data, ("consensus_weights",), list, default=None)
        if W is None or W.shape != (n, n):
            ck.add(("consensus_weights",), f"consensus weights must be a {n}x{n} matrix")
        else:
            adj = np.eye(n, dtype=bool)
            for a, b in edges:
                adj[a, b] = adj[b, a] = True
            for i in range(n):
                if np.any(W[i] < 0):
                    ck.add(("consensus_weights", i), f"node {i + 1}: negative consensus weight")
                if abs(W[i].sum() - 1.0) > 1e-9:
                    ck.add(("consensus_weights", i), f"node {i + 1}: consensus weight row sums to {W[i].sum():.6g}, not 1")
                if np.any((W[i] > 0) & ~adj[i]):
                    ck.add(("consensus_weights", i), f"node {i + 1}: weight on a node that is not a neighbour")
                if W[i, i] <= 0:
                    ck.add(("consensus_weights", i), f"node {i + 1}: self weight must be positive")
            weights = W
    if weights is None and n:
        weights = NetworkGraph.metropolis(n, edges).weights

    f = ("filter",)
    p_s = g(data, f + ("survival_prob",), float, default=0.9)
    facc = g(data, f + ("accel_std_mps2",), float, default=3.0)
    n_max = g(data, f + ("n_max",), int, default=10)
    zones = (data.get("filter", {}) or {}).get("birth_zones", []) if isinstance(data.get("filter"), dict) else []
    bpos, bvel = [], []
    for k, z in enumerate(zones or []):
        bpos.append(g(z, ("position_m",), list, default=np.zeros(2)))
        bvel.append(g(z, ("velocity_mps",), list, default=np.zeros(2)))
    if not zones:
        ck.add(f, "at least one birth zone is required")
    bstd_p = g(data, f + ("birth_position_std_m",), float, default=100.0)
    bstd_v = g(data, f + ("birth_velocity_std_mps",), float, default=20.0)
    brate = g(data, f + ("birth_rate_per_step",), float, default=0.06)

    s = ("sensor",)
    p_d = g(data, s + ("detection_prob",), float, default=0.98)
    clutter = g(data, s + ("clutter_rate",), float, default=20.0)
    rstd = g(data, s + ("range_std_m",), float, default=2.0)
    bstd = np.deg2rad(g(data, s + ("bearing_std_deg",), float, default=0.1))

    for path, val, lo, hi in [
        (f + ("survival_prob",), p_s, 0.0, 1.0),
        (s + ("detection_prob",), p_d, 0.0, 1.0),
    ]:
        if val is not None and not (lo <= val <= hi):
            ck.add(path, f"probability '{path[-1]}' must lie in [0, 1]")
    for path, val in [
        (f + ("accel_std_mps2",), facc),
        (f + ("birth_position_std_m",), bstd_p),
        (f + ("birth_velocity_std_mps",), bstd_v),
        (s + ("range_std_m",), rstd),
        (s + ("bearing_std_deg",), bstd),
    ]:
        if val is not None and val <= 0:
            ck.add(path, f"'{path[-1]}' must be positive")
    for path, val in [(f + ("birth_rate_per_step",), brate), (s + ("clutter_rate",), clutter)]:
        if val is not None and val < 0:
            ck.add(path, f"'{path[-1]}' must be nonnegative")
    if n_max is not None and n_max < 1:
        ck.add(f + ("n_max",), "n_max must be at least 1")

    tacc = g(data, ("truth", "accel_std_mps2"), float, default=0.0)
    tseed = g(data, ("truth", "trajectory_seed"), int, default=0)
    if tacc is not None and tacc < 0:
        ck.add(("truth", "accel_std_mps2"), "truth acceleration noise must be nonnegative")

    c = ("consensus",)
    L = g(data, c + ("l_steps",), int, default=3)
    t_on = g(data, c + ("on_time_s",), int, default=150)
    if L is not None and L < 0:
        ck.add(c + ("l_steps",), "number of consensus steps must be nonnegative")

    reg = data.get("registration", {}) or {}
    reg_cfg = {}
    for key, kind in [
        ("n_cap", int),
        ("t_cap", int),
        ("n_starts", int),
        ("delta_theta_m", float),
        ("delta_gamma_deg", float),
        ("max_hypotheses", int),
        ("min_cardinality", int),
        ("track_weight_floor", float),
        ("search_every", int),
    ]:
        if isinstance(reg, dict) and key in reg:
            reg_cfg[key] = g(reg, (key,), kind)

    ospa_cfg = OspaConfig()
    if "ospa" in data:
        op = g(data, ("ospa", "order"), float, default=2.0)
        oc = g(data, ("ospa", "cutoff_m"), float, default=50.0)
        try:
            ospa_cfg = OspaConfig(op, oc)
        except (TypeError, ValueError) as exc:
            ck.add(("ospa",), str(exc))
    seed = g(data, ("seed",), int, required=False, default=0)

    if ck.violations:
        raise ScenarioError(ck.violations)

    sc = Scenario(
        name=str(data.get("name", name)),
        region=box,
        horizon=horizon,
        dt=dt,
        targets=tuple(targets),
        truth_accel_std=tacc,
        trajectory_seed=tseed,
        node_positions=pos,
        node_headings=head,
        edges=tuple(edges),
        weights=weights,
        p_s=p_s,
        filter_accel_std=facc,
        n_max=n_max,
        birth_positions=np.array(bpos).reshape(-1, 2),
        birth_velocities=np.array(bvel).reshape(-1, 2),
        birth_pos_std=bstd_p,
        birth_vel_std=bstd_v,
        birth_rate=brate,
        p_d=p_d,
        clutter_rate=clutter,
        range_std=rstd,
        bearing_std=bstd,
        l_consensus=L,
        consensus_on_time=t_on,
        registration=reg_cfg,
        ospa=ospa_cfg,
        seed=seed,
    )
    _check_truth_registration(data, sc, ck)
    _check_containment(sc, ck)
    if ck.violations:
        raise ScenarioError(ck.violations)
    return sc


def _check_truth_registration(data, sc: Scenario, ck: _Checker, tol_m=1e-3, tol_rad=1e-6):
    """Listed per-edge parameters must be antisymmetric and match the node poses."""
    block = data.get("registration_truth", []) or []
    given = {}
    for k, item in enumerate(block):
        p = ("registration_truth", k)
        e = item.get("edge") if isinstance(item, dict) else None
        if not (isinstance(e, list) and len(e) == 2):
            ck.add(p, f"registration entry {k + 1} needs an 'edge' pair")
            continue
        i, j = e[0] - 1, e[1] - 1
        d = ck.get(item, ("drift_m",), list, default=None)
        gdeg = ck.get(item, ("orientation_deg",), float, default=None)
        if d is None or gdeg is None or d.shape != (2,):
            ck.add(p, f"registration entry {e[0]}-{e[1]} needs drift_m [x, y] and orientation_deg")
            continue
        given[(i, j)] = (d, np.deg2rad(gdeg), p)
        if (i, j) not in sc.edges and (j, i) not in sc.edges:
            ck.add(p, f"registration entry {e[0]}-{e[1]} is not an edge of the network")
    for (i, j), (d, gam, p) in given.items():
        if i == j:
            if np.linalg.norm(d) > tol_m or abs(wrap_angle(gam)) > tol_rad:
                ck.add(p, f"registration of node {i + 1} with itself must be zero")
            continue
        if (j, i) in given:
            d2, g2, _ = given[(j, i)]
            if abs(wrap_angle(gam + g2)) > tol_rad:
                ck.add(p, f"orientation of edge pair {i + 1}-{j + 1} / {j + 1}-{i + 1} is not antisymmetric")
            if np.linalg.norm(d2 + rot2(-gam) @ d) > tol_m:
                ck.add(p, f"drift of edge pair {i + 1}-{j + 1} / {j + 1}-{i + 1} is inconsistent with the inverse change of frame")
        td, tg = sc.true_params(i, j)
        if np.linalg.norm(td - d) > tol_m or abs(wrap_angle(tg - gam)) > tol_rad:
            ck.add(p, f"registration of edge {i + 1}-{j + 1} does not match the node poses")


def _check_containment(sc: Scenario, ck: _Checker):
    x0, x1, y0, y1 = sc.region
    tr = sc.trajectories
    for k in range(len(sc.targets)):
        alive = ~np.isnan(tr[k, :, 0])
        p = tr[k, alive][:, [0, 2]]
        if len(p) and (p[:, 0].min() < x0 or p[:, 0].max() > x1 or p[:, 1].min() < y0 or p[:, 1].max() > y1):
            ck.add(("targets", k), f"target {k + 1} leaves the surveillance region")


def resolve_scenario_path(name_or_path) -> Path:
    p = Path(name_or_path)
    if p.exists():
        return p
    if str(name_or_path) in BUILTIN:
        return Path(str(resources.files("regtrack") / "scenarios" / f"{name_or_path}.yaml"))
    return p


def load_scenario(name_or_path) -> Scenario:
    """Load a built-in scenario by name or a scenario file by path."""
    p = resolve_scenario_path(name_or_path)
    return parse_scenario(p.read_text(), p.stem)


def validate_file(path) -> list:
    """List of ``(line, message)`` violations (empty when valid)."""
    try:
        parse_scenario(Path(path).read_text(), Path(path).stem)
    except ScenarioError as exc:
        return exc.violations
    return []


def builtin_scenarios():
    return list(BUILTIN)
