"""Reference hydrodynamic solver used to label training data.

Nodes are storage volumes with a plan area; every link carries one flow
given by the head-driven Manning law Q = sign(dH) K sqrt(|dH|) with
K = A R^(2/3) / (n sqrt(L)) and the flow area capped at the full circular
section (pressurised pipes keep the full section). Water above a weir crest
leaves the system for good (spilling configuration); the outlet discharges
freely.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .net import Network, StateLayout, state_layout
from .rain import RunoffSeries


class SolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class HifiConfig:
    dt: float = 5.0  # s
    sampling: int = 1  # minutes
    gravity: float = 9.81
    max_velocity: float = 6.0  # m/s
    head_regularisation: float = 5e-3  # m, smooths the square-root law at zero head difference
    newton_iterations: int = 4
    mean_flows: bool = True  # label link flows as minute means rather than end-of-minute values
    newton_tolerance: float = 1e-6  # m

    def __post_init__(self):
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        steps = self.sampling * 60.0 / self.dt
        if abs(steps - round(steps)) > 1e-9:
            raise ValueError("dt must divide the sampling interval")

    @property
    def substeps(self) -> int:
        return int(round(self.sampling * 60.0 / self.dt))


@dataclass
class HifiState:
    volume: np.ndarray  # m³ per node
    flow: np.ndarray  # m³/s per link

    @classmethod
    def dry(cls, net: Network) -> HifiState:
        return cls(np.zeros(net.n_nodes), np.zeros(net.n_links))

    def levels(self, net: Network) -> np.ndarray:
        return _geometry(net).level(self.volume)


@dataclass
class Trajectory:
    """Labelled states sampled once per minute.

    ``states[t]`` is the state at minute t (row 0 is the initial state);
    ``runoff[t]`` is the inflow during minute t -> t+1. Excess flows and
    ``outflow`` (free discharge at the outlet) are averages over the minute
    that ends at the row.
    """

    layout: StateLayout
    states: np.ndarray  # (T+1, 2N+M)
    runoff: np.ndarray  # (T, N)
    outflow: np.ndarray  # (T+1,)

    def __post_init__(self):
        T = self.runoff.shape[0]
        if self.states.shape != (T + 1, len(self.layout)) or self.outflow.shape != (T + 1,):
            raise ValueError("trajectory arrays have inconsistent shapes")

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.states.shape[0])

    @property
    def h(self):
        return self.states[:, self.layout.h]

    @property
    def q(self):
        return self.states[:, self.layout.q]

    @property
    def qw(self):
        return self.states[:, self.layout.qw]

    def slice(self, start: int, stop: int) -> Trajectory:
        """Sub-trajectory with states start..stop (inclusive) and runoff start..stop-1."""
        return Trajectory(self.layout, self.states[start:stop + 1], self.runoff[start:stop],
                          self.outflow[start:stop + 1].copy())


class _Geometry:
    def __init__(self, net: Network):
        self.invert = np.array([n.invert_elevation for n in net.nodes])
        self.area_low = np.array([n.storage_area for n in net.nodes])
        self.area_high = np.array([n.upper_area for n in net.nodes])
        ground = np.array([n.ground_elevation for n in net.nodes])
        self.crown = np.clip([net.pipe_crown(n.id) for n in net.nodes], self.invert, ground)
        self.crown_volume = (self.crown - self.invert) * self.area_low
        self.crest = np.array([n.weir_crest for n in net.nodes])
        self.weir_cw = np.array([n.weir_coefficient * n.weir_width for n in net.nodes])
        self.outlet = net.outlet_index
        self.spills = np.ones(net.n_nodes, dtype=bool)
        self.spills[self.outlet] = False
        self.crest_volume = self.volume(self.crest)
        self.up = np.array([net.node_index(l.upstream_node) for l in net.links], dtype=int)
        self.dn = np.array([net.node_index(l.downstream_node) for l in net.links], dtype=int)
        self.length = np.array([l.length for l in net.links])
        self.diam = np.array([l.diameter for l in net.links])
        self.n = np.array([l.manning_n for l in net.links])
        self.up_inv = np.array([l.upstream_invert for l in net.links])
        self.dn_inv = np.array([l.downstream_invert for l in net.links])
        self.incidence = net.incidence_matrix()
        self.up_onehot = np.eye(net.n_nodes)[self.up]
        self.dn_onehot = np.eye(net.n_nodes)[self.dn]
        self.node_ids = [n.id for n in net.nodes]
        self.link_ids = [l.id for l in net.links]

    # storage curve: pipe free surface counts only while the pipes are not full
    def level(self, volume):
        low = volume <= self.crown_volume
        return np.where(low, self.invert + volume / self.area_low,
                        self.crown + (volume - self.crown_volume) / self.area_high)

    def volume(self, level):
        y = np.maximum(level - self.invert, 0.0)
        below = np.minimum(y, self.crown - self.invert)
        return below * self.area_low + (y - below) * self.area_high

    def area(self, volume):
        return np.where(volume < self.crown_volume, self.area_low, self.area_high)


_GEOM_CACHE: dict[int, tuple[Network, _Geometry]] = {}


def _geometry(net: Network) -> _Geometry:
    hit = _GEOM_CACHE.get(id(net))
    if hit is None or hit[0] is not net:
        hit = (net, _Geometry(net))
        _GEOM_CACHE[id(net)] = hit
    return hit[1]


def circular_section(depth: np.ndarray, diameter: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flow area and hydraulic radius of a partly filled circular pipe."""
    y = np.clip(depth, 0.0, diameter)
    theta = 2.0 * np.arccos(np.clip(1.0 - 2.0 * y / diameter, -1.0, 1.0))
    area = diameter ** 2 / 8.0 * (theta - np.sin(theta))
    perimeter = diameter * theta / 2.0
    radius = np.where(perimeter > 0, area / np.where(perimeter > 0, perimeter, 1.0), 0.0)
    return area, radius


def _conveyance(depth, diameter, roughness, length):
    """K = A R^(2/3) / (n sqrt(L)) and dK/d(depth) for a circular section."""
    y = np.clip(depth, 1e-9, diameter)
    c = 1.0 - 2.0 * y / diameter
    theta = 2.0 * np.arccos(c)
    dtheta = 4.0 / (diameter * np.sqrt(np.maximum(1.0 - c * c, 1e-12)))
    area = diameter ** 2 / 8.0 * (theta - np.sin(theta))
    darea = diameter ** 2 / 8.0 * (1.0 - np.cos(theta)) * dtheta
    per = diameter * theta / 2.0
    dper = diameter / 2.0 * dtheta
    r = area / per
    dr = (darea * per - area * dper) / per ** 2
    scale = 1.0 / (roughness * np.sqrt(length))
    K = area * r ** (2.0 / 3.0) * scale
    dK = (darea * r ** (2.0 / 3.0) + area * (2.0 / 3.0) * r ** (-1.0 / 3.0) * dr) * scale
    dry = depth <= 1e-9
    return np.where(dry, 0.0, K), np.where(dry | (depth >= diameter), 0.0, dK), area


def _head_response(dH, delta):
    """Regularised square-root law x / sqrt(|x| + delta) and its derivative."""
    ax = np.abs(dH)
    root = np.sqrt(ax + delta)
    return dH / root, (0.5 * ax + delta) / (root * (ax + delta))


def _link_law(g: _Geometry, h, cfg: HifiConfig):
    """Link flows at heads ``h`` with their derivatives w.r.t. the end heads."""
    hu, hd = h[g.up], h[g.dn]
    yu, yd = hu - g.up_inv, hd - g.dn_inv
    depth = 0.5 * (np.clip(yu, 0.0, g.diam) + np.clip(yd, 0.0, g.diam))
    K, dK, area = _conveyance(depth, g.diam, g.n, g.length)
    phi, dphi = _head_response(np.maximum(hu, g.up_inv) - np.maximum(hd, g.dn_inv), cfg.head_regularisation)
    # dQ/dh at each end: head term plus the depth dependence of conveyance
    gu = K * dphi * (yu > 0) + 0.5 * dK * phi * ((yu > 0) & (yu < g.diam))
    gd = K * dphi * (yd > 0) - 0.5 * dK * phi * ((yd > 0) & (yd < g.diam))
    return K * phi, gu, gd, area


def _weir_law(g: _Geometry, h):
    over = np.where(g.spills, np.maximum(h - g.crest, 0.0), 0.0)
    return g.weir_cw * over ** 1.5, 1.5 * g.weir_cw * np.sqrt(over)


def _advance(g: _Geometry, volume, inflow, cfg: HifiConfig):
    """One dt step. Returns (volume, flow, spilled volume, outlet volume).

    Link flow follows the friction-balanced Manning value
    Q = K(depth) sqrt(dH). Backward Euler on the node storages is solved
    for the new heads with a few Newton iterations; link flows and weir
    spills at those heads are then limited to the volume available at each
    node and applied to the storages, so volume bookkeeping is exact.
    """
    dt = cfg.dt
    o = g.outlet
    h = g.level(volume)
    for _ in range(cfg.newton_iterations):
        q, gu, gd, _ = _link_law(g, h, cfg)
        w, w1 = _weir_law(g, h)
        vol = g.volume(h)
        F = vol - volume - dt * (inflow + g.incidence @ q - w)
        J = np.diag(g.area(vol) + dt * w1) - dt * ((g.incidence * gu) @ g.up_onehot - (g.incidence * gd) @ g.dn_onehot)
        F[o] = 0.0
        J[o, :] = 0.0
        J[:, o] = 0.0
        J[o, o] = 1.0
        dh = np.linalg.solve(J, -F)
        h = np.maximum(h + dh, g.invert)
        if np.abs(dh).max() < cfg.newton_tolerance:
            break

    q, _, _, a = _link_law(g, h, cfg)
    vmax = cfg.max_velocity * a
    q = np.clip(q, -vmax, vmax)
    spill_rate, _ = _weir_law(g, h)

    # a node exports at most its volume plus this step's runoff
    src = np.where(q >= 0.0, g.up, g.dn)
    demand = np.bincount(src, weights=np.abs(q), minlength=len(volume)) * dt
    avail = volume + inflow * dt
    factor = np.where(demand > avail, avail / np.where(demand > 0, demand, 1.0), 1.0)
    q = q * factor[src]

    volume = np.maximum(volume + dt * (inflow + g.incidence @ q), 0.0)
    outlet_vol = volume[o]
    volume[o] = 0.0
    spill = np.minimum(spill_rate * dt, np.maximum(volume - g.crest_volume, 0.0))
    spill[o] = 0.0
    return volume - spill, q, spill, outlet_vol


def hifi_step(net: Network, state: HifiState, inflow, cfg: HifiConfig = HifiConfig()):
    """Advance one solver step of length ``cfg.dt``.

    Returns the new state and the per-node excess rate (m³/s) spilled over
    weirs during the step.
    """
    g = _geometry(net)
    vol, q, spill, _ = _advance(g, state.volume, np.asarray(inflow, dtype=float), cfg)
    if not (np.all(np.isfinite(vol)) and np.all(np.isfinite(q))):
        raise SolverError(_diagnose(g, vol, q, "single step"))
    return HifiState(vol, q), spill / cfg.dt


def _diagnose(g, vol, q, when):
    bad_nodes = [g.node_ids[i] for i in np.flatnonzero(~np.isfinite(vol))]
    bad_links = [g.link_ids[i] for i in np.flatnonzero(~np.isfinite(q))]
    return f"non-finite state at {when}: nodes {bad_nodes}, links {bad_links}"


def hifi_simulate(net: Network, runoff: RunoffSeries | np.ndarray, cfg: HifiConfig = HifiConfig(),
                  initial: HifiState | None = None) -> Trajectory:
    """Simulate a runoff series, holding runoff constant within each minute."""
    rates = runoff.rates if isinstance(runoff, RunoffSeries) else np.asarray(runoff, dtype=float)
    if cfg.sampling != 1:
        raise ValueError("trajectories are sampled once per minute")
    g = _geometry(net)
    T = rates.shape[0]
    N, M = net.n_nodes, net.n_links
    layout = state_layout(net, include_qw=True)
    states = np.zeros((T + 1, 2 * N + M))
    outflow = np.zeros(T + 1)
    state = initial or HifiState.dry(net)
    vol, q = state.volume.copy(), state.flow.copy()
    states[0, :N] = g.level(vol)
    states[0, N:N + M] = q
    nsub = cfg.substeps
    for t in range(T):
        inflow = rates[t]
        spilled = np.zeros(N)
        conveyed = np.zeros(M)
        out_vol = 0.0
        for _ in range(nsub):
            vol, q, spill, ov = _advance(g, vol, inflow, cfg)
            spilled += spill
            conveyed += q
            out_vol += ov
        if not (np.all(np.isfinite(vol)) and np.all(np.isfinite(q))):
            raise SolverError(_diagnose(g, vol, q, f"minute {t}"))
        row = states[t + 1]
        row[:N] = g.level(vol)
        row[N:N + M] = conveyed / nsub if cfg.mean_flows else q
        row[N + M:] = spilled / 60.0
        outflow[t + 1] = out_vol / 60.0
    return Trajectory(layout, states, rates.copy(), outflow)


@dataclass
class BalanceReport:
    runoff: float
    storage_change: float
    outlet: float
    overflow: float
    surcharge: float

    @property
    def closure(self) -> float:
        return self.runoff - self.storage_change - self.outlet - self.overflow - self.surcharge

    @property
    def relative_closure(self) -> float:
        return self.closure / self.runoff if self.runoff > 0 else 0.0

    def to_dict(self) -> dict:
        return {"runoff_m3": self.runoff, "storage_change_m3": self.storage_change, "outlet_m3": self.outlet,
                "overflow_m3": self.overflow, "surcharge_m3": self.surcharge, "closure_m3": self.closure,
                "relative_closure": self.relative_closure}


def mass_balance_audit(traj: Trajectory, runoff: RunoffSeries | np.ndarray, net: Network) -> BalanceReport:
    """Volume bookkeeping over a trajectory: runoff in, storage change, outlet, spills."""
    rates = runoff.rates if isinstance(runoff, RunoffSeries) else np.asarray(runoff, dtype=float)
    if rates.shape != traj.runoff.shape or traj.states.shape[1] != 2 * net.n_nodes + net.n_links:
        raise ValueError("trajectory, runoff and network do not match")
    g = _geometry(net)
    h = traj.h
    dstore = float(np.sum(g.volume(h[-1]) - g.volume(h[0])))
    excess = traj.qw[1:].sum(axis=0) * 60.0
    kinds = np.array(net.excess_kinds())
    return BalanceReport(
        runoff=float(rates.sum() * 60.0),
        storage_change=dstore,
        outlet=float(traj.outflow[1:].sum() * 60.0),
        overflow=float(excess[kinds == "overflow"].sum()),
        surcharge=float(excess[kinds == "surcharge"].sum()),
    )
