"""Generalised residue network surrogate.

One step maps the state at minute t to minute t+1:

    x_next = L(x) + N(x, R)

in min-max scaled space, where L is a single-hidden-layer prior acting on
the state only and N is a deeper residue network that also sees the runoff.
The constrained variant drops excess flows from the state and recovers them
from a local mass balance on the predicted link flows.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .hifi import Trajectory
from .net import Network, StateLayout, build_network, state_layout
from .rain import RunoffSeries

CHECKPOINT_FORMAT = "drainsurrogate-checkpoint"
CHECKPOINT_VERSION = 1
DEGENERATE_SPAN = 1e-9
DIVERGENCE_THRESHOLD = 10.0

SPECS = {"S1": (2, 10), "S2": (4, 20), "S3": (6, 50), "S4": (6, 100)}


class DivergenceError(RuntimeError):
    def __init__(self, step: int, index: int, value: float):
        self.step, self.index, self.value = step, index, value
        super().__init__(f"rollout diverged at step {step}: scaled state {index} = {value:.3g}")


@dataclass(frozen=True)
class ResidueSpec:
    depth: int
    width: int
    name: str = "custom"

    @classmethod
    def parse(cls, text: str) -> ResidueSpec:
        """Accept 'S1'..'S4' or a custom 'DEPTHxWIDTH' such as '3x40'."""
        key = text.strip().upper()
        if key in SPECS:
            return cls(*SPECS[key], key)
        try:
            depth, width = (int(v) for v in key.split("X"))
        except ValueError:
            raise ValueError(f"unknown residue spec {text!r}") from None
        if depth < 1 or width < 1:
            raise ValueError(f"invalid residue spec {text!r}")
        return cls(depth, width, f"{depth}x{width}")


# ---------------------------------------------------------------- scaling


@dataclass
class Scaler:
    """Per-column min-max scaling of labels (h, Q, Qw) and runoff.

    Columns whose training range is narrower than 1e-9 are flagged
    degenerate. They keep the training value at 0 and use the ``fallback``
    span (unit span when none is given), so departures from the training
    value stay visible.
    """

    lo: np.ndarray
    hi: np.ndarray
    runoff_lo: np.ndarray
    runoff_hi: np.ndarray
    fallback: np.ndarray | None = None

    @property
    def degenerate(self) -> np.ndarray:
        return (self.hi - self.lo) < DEGENERATE_SPAN

    @property
    def span(self) -> np.ndarray:
        fill = 1.0 if self.fallback is None else self.fallback
        return np.where(self.degenerate, fill, self.hi - self.lo)

    @property
    def runoff_span(self) -> np.ndarray:
        width = self.runoff_hi - self.runoff_lo
        return np.where(width < DEGENERATE_SPAN, 1.0, width)

    def scale(self, x, cols: slice = slice(None)):
        x = np.asarray(x, dtype=float)
        lo, span = self.lo[cols], self.span[cols]
        if x.shape[-1] != lo.shape[0]:
            raise ValueError(f"expected {lo.shape[0]} states, got {x.shape[-1]}")
        return (x - lo) / span

    def unscale(self, s, cols: slice = slice(None)):
        s = np.asarray(s, dtype=float)
        lo, span = self.lo[cols], self.span[cols]
        if s.shape[-1] != lo.shape[0]:
            raise ValueError(f"expected {lo.shape[0]} states, got {s.shape[-1]}")
        return s * span + lo

    def scale_runoff(self, r):
        r = np.asarray(r, dtype=float)
        if r.shape[-1] != self.runoff_lo.shape[0]:
            raise ValueError("runoff does not match the network")
        return (r - self.runoff_lo) / self.runoff_span

    def to_document(self) -> dict:
        doc = {k: getattr(self, k).tolist() for k in ("lo", "hi", "runoff_lo", "runoff_hi")}
        if self.fallback is not None:
            doc["fallback"] = self.fallback.tolist()
        return doc

    @classmethod
    def from_document(cls, doc: dict) -> Scaler:
        arrays = [np.array(doc[k], dtype=float) for k in ("lo", "hi", "runoff_lo", "runoff_hi")]
        fallback = np.array(doc["fallback"], dtype=float) if "fallback" in doc else None
        return cls(*arrays, fallback)


def fit_scaler(labels: Trajectory | list[Trajectory], runoff=None) -> Scaler:
    """Capture per-column minima and maxima of the training labels and runoff."""
    trajs = labels if isinstance(labels, (list, tuple)) else [labels]
    if not trajs or any(t.states.shape[0] == 0 for t in trajs):
        raise ValueError("cannot fit a scaler on an empty trajectory")
    states = np.concatenate([t.states for t in trajs])
    if runoff is None:
        rates = np.concatenate([t.runoff for t in trajs])
    else:
        runs = runoff if isinstance(runoff, (list, tuple)) else [runoff]
        rates = np.concatenate([r.rates if isinstance(r, RunoffSeries) else np.asarray(r) for r in runs])
    if rates.shape[0] == 0:
        raise ValueError("cannot fit a scaler on empty runoff")
    lo, hi = states.min(0), states.max(0)
    return Scaler(lo, hi, rates.min(0), rates.max(0), _group_spans(trajs[0].layout, hi - lo))


def _group_spans(layout, width: np.ndarray) -> np.ndarray:
    """Median span of the varying columns of each state kind (h, Q, Qw), per column.

    A state that never moved in training, such as a weir that never spilled,
    borrows the typical span of its kind so that its errors keep a
    comparable weight in the loss.
    """
    fill = np.ones_like(width)
    for cols in (layout.h, layout.q, layout.qw):
        w = width[cols]
        live = w[w >= DEGENERATE_SPAN]
        if live.size:
            fill[cols] = np.median(live)
    return fill


# ---------------------------------------------------------------- networks

Params = list  # [(W, b), ...] with W of shape (fan_in, fan_out)


def init_mlp(sizes: list[int], rng: np.random.Generator) -> Params:
    return [(rng.standard_normal((a, b)) / np.sqrt(a), np.zeros(b)) for a, b in zip(sizes[:-1], sizes[1:])]


def mlp_forward(params: Params, x):
    """tanh hidden layers, linear output."""
    for W, b in params[:-1]:
        x = np.tanh(x @ W + b)
    W, b = params[-1]
    return x @ W + b


def _check_params(params: Params, n_in: int):
    if params[0][0].shape[0] != n_in:
        raise ValueError(f"network expects {params[0][0].shape[0]} inputs, got {n_in}")
    for W, b in params:
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise ValueError("non-finite network parameter")


def prior_forward(params: Params, x_scaled):
    x_scaled = np.asarray(x_scaled, dtype=float)
    _check_params(params, x_scaled.shape[-1])
    return mlp_forward(params, x_scaled)


def residue_forward(params: Params, x_scaled, r_scaled):
    x = np.concatenate([np.asarray(x_scaled, dtype=float), np.asarray(r_scaled, dtype=float)], axis=-1)
    _check_params(params, x.shape[-1])
    return mlp_forward(params, x)


def parameter_count(params: Params) -> int:
    return sum(W.size + b.size for W, b in params)


# ---------------------------------------------------------------- constraint


def _excess(up_idx, dn_idx, outlet_mask, Q, R):
    n = R.shape[-1]
    inflow = np.bincount(dn_idx, weights=Q, minlength=n)
    outflow = np.bincount(up_idx, weights=Q, minlength=n)
    return np.where(outlet_mask, 0.0, np.maximum(inflow - outflow + R, 0.0))


def _topology(net: Network):
    up = np.array([net.node_index(l.upstream_node) for l in net.links], dtype=int)
    dn = np.array([net.node_index(l.downstream_node) for l in net.links], dtype=int)
    mask = np.zeros(net.n_nodes, dtype=bool)
    mask[net.outlet_index] = True
    return up, dn, mask


def constraint_excess(net: Network, Q, R) -> np.ndarray:
    """Excess flow per node from the local mass balance of link flows and runoff.

    Qw_i = max(sum of inflowing link flows - sum of outflowing link flows + R_i, 0),
    zero at the outlet. Raw units (m³/s).
    """
    Q = np.asarray(Q, dtype=float)
    R = np.asarray(R, dtype=float)
    if Q.shape != (net.n_links,) or R.shape != (net.n_nodes,):
        raise ValueError("flows or runoff do not match the network")
    return _excess(*_topology(net), Q, R)


# ---------------------------------------------------------------- model


@dataclass
class SurrogateModel:
    network: Network
    scaler: Scaler
    prior: Params
    residue: Params
    constrained: bool
    spec: ResidueSpec
    seed: int = 0
    provenance: dict = field(default_factory=dict)
    dt: float = 60.0

    def __post_init__(self):
        self.layout = state_layout(self.network, include_qw=not self.constrained)
        self.full_layout = state_layout(self.network, include_qw=True)
        self._up, self._dn, self._outlet = _topology(self.network)
        S, N = len(self.layout), self.network.n_nodes
        if self.prior[0][0].shape[0] != S or self.prior[-1][0].shape[1] != S:
            raise ValueError("prior network does not match the state layout")
        if self.residue[0][0].shape[0] != S + N or self.residue[-1][0].shape[1] != S:
            raise ValueError("residue network does not match the state layout")

    @property
    def n_states(self) -> int:
        return len(self.layout)

    @property
    def state_cols(self) -> slice:
        return slice(0, self.n_states)

    @property
    def parameters(self) -> Params:
        return list(self.prior) + list(self.residue)

    def with_parameters(self, params: Params) -> SurrogateModel:
        k = len(self.prior)
        return SurrogateModel(self.network, self.scaler, list(params[:k]), list(params[k:]), self.constrained,
                              self.spec, self.seed, dict(self.provenance), self.dt)

    def excess(self, Q, R) -> np.ndarray:
        return _excess(self._up, self._dn, self._outlet, Q, R)


def init_model(net: Network, scaler: Scaler, spec: ResidueSpec | str = "S4", constrained: bool = True,
               seed: int = 0) -> SurrogateModel:
    """Fresh model with fan-in scaled normal weights drawn from ``seed``."""
    if isinstance(spec, str):
        spec = ResidueSpec.parse(spec)
    rng = np.random.default_rng(seed)
    S = net.n_nodes + net.n_links + (0 if constrained else net.n_nodes)
    prior = init_mlp([S, S, S], rng)
    residue = init_mlp([S + net.n_nodes] + [spec.width] * spec.depth + [S], rng)
    return SurrogateModel(net, scaler, prior, residue, constrained, spec, seed)


def _state_vector(m: SurrogateModel, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] == len(m.full_layout) and m.constrained:
        x = x[..., :m.n_states]
    if x.shape[-1] != m.n_states:
        raise ValueError(f"state has {x.shape[-1]} entries, layout expects {m.n_states}")
    return x


def surrogate_step(m: SurrogateModel, x_raw, R_raw) -> tuple[np.ndarray, np.ndarray]:
    """Advance one minute. Returns the next raw state and the per-node excess flow."""
    x = _state_vector(m, x_raw)
    R = np.asarray(R_raw, dtype=float)
    xs = m.scaler.scale(x, m.state_cols)
    out = prior_forward(m.prior, xs) + residue_forward(m.residue, xs, m.scaler.scale_runoff(R))
    bad = np.flatnonzero(~np.isfinite(out))
    if bad.size:
        raise FloatingPointError(f"non-finite prediction for state {m.layout.names[bad[0]]}")
    nxt = m.scaler.unscale(out, m.state_cols)
    if m.constrained:
        qw = m.excess(nxt[m.layout.q], R)
    else:
        qw = nxt[m.layout.qw]
    return nxt, qw


def rollout(m: SurrogateModel, x0_raw, runoff, steps: int | None = None) -> Trajectory:
    """Autoregressive simulation feeding every prediction back as the next input.

    ``runoff[t]`` drives the step from minute t to t+1. Returns a trajectory
    in the full (h, Q, Qw) layout whose ``outflow`` is the flow delivered to
    the outlet at each minute.
    """
    rates = runoff.rates if isinstance(runoff, RunoffSeries) else np.asarray(runoff, dtype=float)
    steps = rates.shape[0] if steps is None else steps
    if steps > rates.shape[0]:
        raise ValueError("more steps requested than runoff available")
    x = _state_vector(m, x0_raw).copy()
    S, N = m.n_states, m.network.n_nodes
    scaler = m.scaler
    lo, span = scaler.lo[:S], scaler.span[:S]
    rlo, rspan = scaler.runoff_lo, scaler.runoff_span
    (W1, b1), (W2, b2) = m.prior
    hidden = m.residue[:-1]
    Wn, bn = m.residue[-1]
    qsl = m.layout.q
    Wx = hidden[0][0][:S]
    Wr = hidden[0][0][S:]
    b0 = hidden[0][1]
    rs_all = (rates[:steps] - rlo) / rspan
    r_proj = rs_all @ Wr + b0  # runoff part of the first residue layer for every step

    states = np.zeros((steps + 1, len(m.full_layout)))
    states[0, :S] = x
    for t in range(steps):
        xs = (x - lo) / span
        z = np.tanh(xs @ Wx + r_proj[t])
        for W, b in hidden[1:]:
            z = np.tanh(z @ W + b)
        out = np.tanh(xs @ W1 + b1) @ W2 + b2 + (z @ Wn + bn)
        big = np.abs(out).max()
        if not big <= DIVERGENCE_THRESHOLD:
            i = int(np.nanargmax(np.where(np.isfinite(out), np.abs(out), np.inf)))
            raise DivergenceError(t + 1, i, float(out[i]))
        x = out * span + lo
        row = states[t + 1]
        row[:S] = x
        if m.constrained:
            row[S:] = _excess(m._up, m._dn, m._outlet, x[qsl], rates[t])
    into_outlet = m._dn == m.network.outlet_index
    outflow = states[:, m.full_layout.q][:, into_outlet].sum(axis=1)
    return Trajectory(m.full_layout, states, rates[:steps].copy(), outflow)


# ---------------------------------------------------------------- checkpoints


def _params_doc(params: Params) -> list:
    return [{"W": W.tolist(), "b": b.tolist()} for W, b in params]


def _params_from_doc(doc: list) -> Params:
    return [(np.array(p["W"], dtype=float).reshape(len(p["W"]), -1), np.array(p["b"], dtype=float)) for p in doc]


def content_hash(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(np.asarray(a, dtype=float)).tobytes())
    return h.hexdigest()


def save_checkpoint(m: SurrogateModel, path: str | Path) -> None:
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "layout": m.layout.to_document(),
        "constrained": m.constrained,
        "dt": m.dt,
        "seed": m.seed,
        "residue_spec": {"name": m.spec.name, "depth": m.spec.depth, "width": m.spec.width},
        "prior_hidden": int(m.prior[0][0].shape[1]),
        "scaler": m.scaler.to_document(),
        "prior": _params_doc(m.prior),
        "residue": _params_doc(m.residue),
        "provenance": m.provenance,
        "network": m.network.to_document(),
    }
    Path(path).write_text(json.dumps(doc))


def load_checkpoint(path: str | Path) -> SurrogateModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a surrogate checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: checkpoint version {doc.get('version')} != {CHECKPOINT_VERSION}")
    net = build_network(doc["network"])
    spec = ResidueSpec(doc["residue_spec"]["depth"], doc["residue_spec"]["width"], doc["residue_spec"]["name"])
    m = SurrogateModel(net, Scaler.from_document(doc["scaler"]), _params_from_doc(doc["prior"]),
                       _params_from_doc(doc["residue"]), bool(doc["constrained"]), spec, int(doc["seed"]),
                       doc.get("provenance", {}), float(doc.get("dt", 60.0)))
    if m.layout != StateLayout.from_document(doc["layout"]):
        raise ValueError(f"{path}: stored layout does not match the stored network")
    return m
