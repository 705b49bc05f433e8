"""Joint distributed registration and tracking over a sensor network.

Each node runs a local GM-CPHD filter in its own frame. Neighbouring
densities are exchanged; the first exchange of every step feeds
registration, and from the consensus activation time on, ``L`` rounds of
GCI fusion use the current registration estimates to bring neighbour
densities into the local frame.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .cphd import IidClusterDensity, MotionModel, cphd_correct, cphd_predict, extract_states, truncated_poisson
from .errors import FusionDegenerateError, RegistrationUnavailable
from .fusion import gci_fuse, transform_density
from .geometry import lift, wrap_angle
from .gm import DEFAULT_MAX_COMPONENTS, DEFAULT_MERGE, DEFAULT_PRUNE, GaussianMixture
from .registration import (
    TotalCostState,
    build_irf,
    estimate_drift_known_orientation,
    hypothesis_update,
    instantaneous_estimate,
    tc_update,
)

__all__ = ["MODES", "JsrConfig", "NodeState", "Network", "local_step", "joint_step"]

MODES = ("jsr-dmt", "ccphd-pk", "local-only")


@dataclass(frozen=True)
class JsrConfig:
    mode: str = "jsr-dmt"
    # False under jsr-dmt injects the true parameters (the ccphd-pk pipeline)
    registration: bool = True
    # Known orientations: drift only, via the total-cost recursion
    orientation_known: bool = False
    l_consensus: int = 3
    consensus_on_time: int = 150
    n_max: int | None = None
    n_cap: int = 8
    t_cap: int = 200
    n_starts: int = 3
    delta_theta: float = 50.0
    delta_gamma: float = np.deg2rad(5.0)
    max_hypotheses: int = 20
    min_cardinality: int = 3
    track_weight_floor: float = 0.5
    # full triplet search every k steps; warm-started ascent in between
    search_every: int = 1
    gate_prob: float | None = 0.9999
    prune_thresh: float = DEFAULT_PRUNE
    merge_dist: float = DEFAULT_MERGE
    max_components: int = DEFAULT_MAX_COMPONENTS

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.l_consensus < 0:
            raise ValueError("l_consensus must be nonnegative")
        if self.search_every < 1:
            raise ValueError("search_every must be at least 1")

    @property
    def reduce_kw(self) -> dict:
        return dict(prune_thresh=self.prune_thresh, merge_dist=self.merge_dist, max_components=self.max_components)

    @property
    def registers(self) -> bool:
        return self.mode == "jsr-dmt" and self.registration

    @classmethod
    def from_scenario(cls, scenario, **overrides) -> "JsrConfig":
        reg = dict(scenario.registration)
        kw = dict(l_consensus=scenario.l_consensus, consensus_on_time=scenario.consensus_on_time)
        for key in ("n_cap", "t_cap", "n_starts", "max_hypotheses", "min_cardinality", "track_weight_floor", "search_every"):
            if key in reg:
                kw[key] = reg[key]
        if "delta_theta_m" in reg:
            kw["delta_theta"] = reg["delta_theta_m"]
        if "delta_gamma_deg" in reg:
            kw["delta_gamma"] = float(np.deg2rad(reg["delta_gamma_deg"]))
        kw.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**kw)


@dataclass
class NodeState:
    density: IidClusterDensity
    neighbors: list
    # current estimates (drift (2,), gamma) per neighbour, frame j -> frame i
    params: dict = field(default_factory=dict)
    estimated: dict = field(default_factory=dict)
    hypotheses: list = field(default_factory=list)
    tc: TotalCostState | None = None
    last_search: int | None = None
    events: list = field(default_factory=list)


def local_step(state: NodeState, scan, motion: MotionModel, sensor, config: JsrConfig) -> NodeState:
    """Local GM-CPHD prediction and correction."""
    pred = cphd_predict(state.density, motion)
    state.density = cphd_correct(pred, scan, sensor, gate_prob=config.gate_prob, **config.reduce_kw)
    return state


def _track_mixture(d: IidClusterDensity, floor: float) -> GaussianMixture:
    """Spatial components whose intensity weight reaches ``floor``."""
    sp = d.spatial
    if len(sp) == 0:
        return sp
    w = sp.weights / sp.total_weight * d.expected_cardinality
    return sp.subset(np.flatnonzero(w >= floor))


def _register(state: NodeState, i: int, densities, weights, config: JsrConfig, t: int, true_gammas=None) -> NodeState:
    """Update the registration estimates of node ``i`` from the exchanged densities."""
    nbrs = state.neighbors
    hood = [i] + nbrs
    if any(densities[j].map_cardinality < config.min_cardinality for j in hood):
        state.events.append((t, "registration-skipped", "cardinality"))
        return state
    mixes = [_track_mixture(densities[j], config.track_weight_floor) for j in hood]
    if any(len(m) < 3 for m in mixes):
        state.events.append((t, "registration-skipped", "tracks"))
        return state
    try:
        irf = build_irf(mixes, weights, n_cap=config.n_cap, neighbor_ids=nbrs)
    except RegistrationUnavailable:
        state.events.append((t, "registration-skipped", "unavailable"))
        return state
    m = len(nbrs)
    if config.orientation_known:
        gam = np.asarray(true_gammas, dtype=float)
        tc = state.tc if state.tc is not None else TotalCostState.initial(2 * m)
        pmfs = [densities[j].card_pmf for j in hood]
        tc = tc_update(tc, irf, pmfs, weights, gammas=gam, reduce_kw=config.reduce_kw)
        # exp(-TC) only matters up to scale; keep it away from underflow
        scale = tc.C + tc.W.total_weight if len(tc.W) else tc.C
        if scale > 0:
            tc = TotalCostState(tc.C / scale, tc.W.scaled(1.0 / scale))
        state.tc = tc
        prev = np.concatenate([state.params[j][0] for j in nbrs])
        est = estimate_drift_known_orientation(tc, prev)
        if est.updated:
            for k, j in enumerate(nbrs):
                state.params[j] = (est.drift[2 * k : 2 * k + 2].copy(), float(gam[k]))
                state.estimated[j] = True
        state.events.append((t, "registration", "known-orientation"))
        return state
    full = not state.hypotheses or state.last_search is None or t - state.last_search >= config.search_every
    warm = []
    if state.hypotheses:
        best = max(state.hypotheses, key=lambda h: h.kappa)
        warm.append((best.drift, best.gamma))
    try:
        est = instantaneous_estimate(
            irf,
            t_cap=config.t_cap,
            n_starts=config.n_starts if full else 0,
            warm_starts=warm,
            delta_theta=config.delta_theta,
            delta_gamma=config.delta_gamma,
        )
    except RegistrationUnavailable:
        state.events.append((t, "registration-skipped", "unavailable"))
        return state
    if full:
        state.last_search = t
    state.hypotheses, best = hypothesis_update(
        state.hypotheses,
        (est.drift, est.gamma, est.reward),
        delta_theta=config.delta_theta,
        delta_gamma=config.delta_gamma,
        max_hypotheses=config.max_hypotheses,
    )
    for k, j in enumerate(nbrs):
        state.params[j] = (best.drift[k].copy(), float(wrap_angle(best.gamma[k])))
        state.estimated[j] = True
    state.events.append((t, "registration", "search" if full else "warm"))
    return state


def joint_step(state: NodeState, i: int, received: dict, weights: dict, config: JsrConfig, t: int, ell: int,
               consensus: bool, true_gammas=None) -> IidClusterDensity:
    """Node ``i`` at consensus iteration ``ell``: optionally register (first
    iteration only) and optionally fuse. Returns the node's new density.

    ``received`` maps node ids (including ``i``) to densities in their own
    frames; ``weights`` maps them to consensus weights.
    """
    if ell == 0 and config.registers:
        hood = [i] + state.neighbors
        dens = {j: received[j] for j in hood}
        _register(state, i, dens, np.array([weights[j] for j in hood]), config, t, true_gammas)
    if not consensus:
        return state.density
    local, w = [received[i]], [weights[i]]
    for j in state.neighbors:
        if not state.estimated.get(j, False):
            continue
        drift, gamma = state.params[j]
        local.append(transform_density(received[j], lift(drift), gamma))
        w.append(weights[j])
    w = np.asarray(w) / np.sum(w)
    try:
        fused = gci_fuse(local, w, **config.reduce_kw)
    except FusionDegenerateError:
        state.events.append((t, "fusion-degenerate", ell))
        return received[i]
    return fused


class Network:
    """All nodes of a scenario stepped synchronously."""

    def __init__(self, scenario, config: JsrConfig):
        self.scenario = scenario
        self.config = config
        self.graph = scenario.graph
        n_max = config.n_max if config.n_max is not None else scenario.n_max
        self.n_max = n_max
        self.motion = []
        for i in range(scenario.n_nodes):
            mm = scenario.motion_model(i)
            self.motion.append(replace(mm, birth_pmf=truncated_poisson(scenario.birth_rate, n_max)))
        self.sensor = scenario.sensor_model()
        pmf0 = np.zeros(n_max + 1)
        pmf0[0] = 1.0
        empty = IidClusterDensity(pmf0, GaussianMixture.empty(4))
        self.nodes = []
        known = not config.registers
        for i in range(scenario.n_nodes):
            nb = self.graph.neighbors(i)
            st = NodeState(empty, nb)
            for j in nb:
                if known:
                    st.params[j] = scenario.true_params(i, j)
                    st.estimated[j] = True
                else:
                    st.params[j] = (np.zeros(2), 0.0)
                    st.estimated[j] = False
            self.nodes.append(st)
        self.directed_edges = [(i, j) for i in range(scenario.n_nodes) for j in self.graph.neighbors(i)]

    def consensus_active(self, t: int) -> bool:
        return self.config.mode != "local-only" and t >= self.config.consensus_on_time and self.config.l_consensus > 0

    def step(self, t: int, scans) -> dict:
        cfg = self.config
        n = len(self.nodes)
        timing = np.zeros(n)
        for i, st in enumerate(self.nodes):
            t0 = time.perf_counter()
            local_step(st, scans[i], self.motion[i], self.sensor, cfg)
            timing[i] += time.perf_counter() - t0
        if cfg.mode == "local-only":
            return {"timing": timing, "consensus_steps": 0}
        consensus = self.consensus_active(t)
        rounds = cfg.l_consensus if consensus else (1 if cfg.registers else 0)
        for ell in range(rounds):
            snapshot = [st.density for st in self.nodes]
            new = []
            for i, st in enumerate(self.nodes):
                t0 = time.perf_counter()
                hood = self.graph.neighborhood(i)
                received = {j: snapshot[j] for j in hood}
                weights = {j: self.graph.weights[i, j] for j in hood}
                tg = [self.scenario.true_params(i, j)[1] for j in st.neighbors] if cfg.orientation_known else None
                new.append(joint_step(st, i, received, weights, cfg, t, ell, consensus, tg))
                timing[i] += time.perf_counter() - t0
            for st, d in zip(self.nodes, new):
                st.density = d
        return {"timing": timing, "consensus_steps": cfg.l_consensus if consensus else 0}

    def estimates(self, i: int) -> np.ndarray:
        est = extract_states(self.nodes[i].density)
        return np.array(est).reshape(-1, 4)

    def registration_estimates(self):
        """Stacked ``(drift, gamma)`` over :attr:`directed_edges`."""
        d = np.array([self.nodes[i].params[j][0] for i, j in self.directed_edges]).reshape(-1, 2)
        g = np.array([self.nodes[i].params[j][1] for i, j in self.directed_edges])
        return d, g
