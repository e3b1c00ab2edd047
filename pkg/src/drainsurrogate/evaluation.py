"""Scoring of surrogate trajectories against reference trajectories.

All metrics are computed in physical units: metres for levels and m³/s
for flows.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .hifi import HifiConfig, Trajectory, hifi_simulate
from .net import Network
from .rain import RunoffSeries
from .surrogate import SurrogateModel, rollout

GROUPS = ("levels", "flows", "overflow", "surcharge")


def _pair(obs, pred, min_len: int):
    obs = np.asarray(obs, dtype=float)
    pred = np.asarray(pred, dtype=float)
    if obs.shape != pred.shape:
        raise ValueError(f"length mismatch: {obs.shape} vs {pred.shape}")
    if obs.size < min_len:
        raise ValueError(f"need at least {min_len} values, got {obs.size}")
    return obs, pred


def rmse(obs, pred) -> float:
    obs, pred = _pair(obs, pred, 1)
    return float(np.sqrt(np.mean((obs - pred) ** 2)))


def r2(obs, pred) -> float | None:
    """Coefficient of determination; ``None`` when the observations are constant."""
    obs, pred = _pair(obs, pred, 2)
    total = float(np.sum((obs - obs.mean()) ** 2))
    if total <= 1e-12 * max(1.0, float(np.sum(obs ** 2))):
        return None
    return 1.0 - float(np.sum((obs - pred) ** 2)) / total


def _mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def _check_aligned(ref: Trajectory, pred: Trajectory):
    if ref.states.shape != pred.states.shape:
        raise ValueError(f"trajectories are misaligned: {ref.states.shape} vs {pred.states.shape}")


# ---------------------------------------------------------------- event rollouts


def event_rollouts(m: SurrogateModel, ref: Trajectory, events: list[tuple[int, int]]) -> Trajectory:
    """Surrogate predictions per event, each started from the reference state at the event start.

    Rows outside every event repeat the reference, so that only event
    minutes carry information; use :func:`event_mask` to select them.
    """
    states = ref.states.copy()
    outflow = ref.outflow.copy()
    for a, b in events:
        if not 0 <= a < b <= ref.runoff.shape[0]:
            raise ValueError(f"event ({a}, {b}) lies outside the series")
        p = rollout(m, ref.states[a], ref.runoff[a:b])
        states[a + 1:b + 1] = p.states[1:]
        outflow[a + 1:b + 1] = p.outflow[1:]
    return Trajectory(ref.layout, states, ref.runoff, outflow)


def event_mask(n_rows: int, events: list[tuple[int, int]]) -> np.ndarray:
    """Rows predicted by an event rollout (the initial row of each event excluded)."""
    mask = np.zeros(n_rows, dtype=bool)
    for a, b in events:
        mask[a + 1:b + 1] = True
    return mask


# ---------------------------------------------------------------- metric report


@dataclass
class GroupMetrics:
    rmse: float | None
    r2: float | None  # mean over states with a defined R²
    per_state: dict = field(default_factory=dict)  # name -> {"rmse", "r2"}


def _group_columns(net: Network, layout) -> dict[str, list[int]]:
    kinds = net.excess_kinds()
    N, M = net.n_nodes, net.n_links
    out = net.outlet_index
    return {
        "levels": [i for i in range(N) if i != out],
        "flows": list(range(N, N + M)),
        "overflow": [N + M + i for i in range(N) if kinds[i] == "overflow"],
        "surcharge": [N + M + i for i in range(N) if kinds[i] == "surcharge"],
    }


def group_metrics(ref: Trajectory, pred: Trajectory, net: Network, rows=None) -> dict[str, GroupMetrics]:
    """RMSE pooled over all states of a group, R² averaged over states where it is defined."""
    _check_aligned(ref, pred)
    rows = slice(1, None) if rows is None else rows
    names = ref.layout.names
    out = {}
    for group, cols in _group_columns(net, ref.layout).items():
        if not cols:
            out[group] = GroupMetrics(None, None)
            continue
        o, p = ref.states[rows][:, cols], pred.states[rows][:, cols]
        per = {names[c]: {"rmse": rmse(o[:, k], p[:, k]), "r2": r2(o[:, k], p[:, k])} for k, c in enumerate(cols)}
        out[group] = GroupMetrics(rmse(o.ravel(), p.ravel()), _mean_defined(v["r2"] for v in per.values()), per)
    return out


def event_excess_volumes(ref: Trajectory, pred: Trajectory, events: list[tuple[int, int]],
                         dt: float = 60.0) -> list[dict]:
    """Per-node, per-event excess volumes (m³) of reference and prediction.

    The excess flow at row t+1 is the average over minute t -> t+1, so an
    event covering minutes [a, b) sums rows a+1..b.
    """
    _check_aligned(ref, pred)
    names = [n[3:] for n in ref.layout.names[ref.layout.qw]]
    rows = []
    for k, (a, b) in enumerate(events):
        if not 0 <= a < b < ref.states.shape[0]:
            raise ValueError(f"event ({a}, {b}) lies outside the trajectories")
        vr = ref.qw[a + 1:b + 1].sum(axis=0) * dt
        vp = pred.qw[a + 1:b + 1].sum(axis=0) * dt
        rows += [{"event": k, "node": n, "reference_m3": float(x), "surrogate_m3": float(y)}
                 for n, x, y in zip(names, vr, vp)]
    return rows


def signed_log(x: float) -> float:
    """sign(x) * log10(1 + |x|), for plotting biases spanning orders of magnitude."""
    return math.copysign(math.log10(1.0 + abs(x)), x)


def volume_summary(ref: Trajectory, pred: Trajectory, runoff: RunoffSeries | np.ndarray, net: Network,
                   rows=None, dt: float = 60.0) -> dict:
    """Total runoff, surcharge, overflow and outflow volumes with signed relative errors."""
    _check_aligned(ref, pred)
    rates = runoff.rates if isinstance(runoff, RunoffSeries) else np.asarray(runoff, dtype=float)
    if rates.shape[0] != ref.states.shape[0] - 1:
        raise ValueError("runoff and trajectories are misaligned")
    mask = np.ones(ref.states.shape[0], dtype=bool) if rows is None else np.asarray(rows, dtype=bool)
    mask[0] = False
    kinds = np.array(net.excess_kinds())

    def totals(tr: Trajectory) -> dict:
        qw = tr.qw[mask].sum(axis=0) * dt
        return {
            "runoff": float(rates[mask[1:]].sum() * dt),
            "surcharge": float(qw[kinds == "surcharge"].sum()),
            "overflow": float(qw[kinds == "overflow"].sum()),
            "outflow": float(tr.outflow[mask].sum() * dt),
        }

    r, p = totals(ref), totals(pred)
    table = {}
    for key in r:
        rel = (p[key] - r[key]) / r[key] if r[key] != 0 else (0.0 if p[key] == 0 else None)
        table[key] = {"reference_m3": r[key], "surrogate_m3": p[key], "difference_m3": p[key] - r[key],
                      "relative_error": rel, "signed_log_difference": signed_log(p[key] - r[key])}
    return table


@dataclass
class MetricReport:
    groups: dict
    events: list
    volumes: dict
    excess_volumes: list
    negative_excess: int
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "groups": {g: asdict(v) for g, v in self.groups.items()},
            "events": self.events,
            "volumes": self.volumes,
            "negative_excess": self.negative_excess,
            "notes": self.notes,
        }


def evaluate(m: SurrogateModel, ref: Trajectory, events: list[tuple[int, int]], net: Network | None = None,
             peak_split: float | None = None) -> tuple[MetricReport, Trajectory]:
    """Score per-event rollouts of ``m`` against the reference trajectory.

    Events are rolled out from the reference state at their start. When
    ``peak_split`` is given, every event is tagged high or low flow by the
    reference peak outlet flow.
    """
    net = net or m.network
    pred = event_rollouts(m, ref, events)
    mask = event_mask(ref.states.shape[0], events)
    groups = group_metrics(ref, pred, net, rows=mask)
    per_event = []
    for k, (a, b) in enumerate(events):
        ev = group_metrics(ref.slice(a, b), pred.slice(a, b), net)
        row = {"event": k, "start": a, "stop": b, "peak_outflow": float(ref.outflow[a + 1:b + 1].max())}
        if peak_split is not None:
            row["class"] = "high" if row["peak_outflow"] >= peak_split else "low"
        for g in GROUPS:
            row[f"{g}_rmse"], row[f"{g}_r2"] = ev[g].rmse, ev[g].r2
        per_event.append(row)
    report = MetricReport(
        groups=groups,
        events=per_event,
        volumes=volume_summary(ref, pred, ref.runoff, net, rows=mask),
        excess_volumes=event_excess_volumes(ref, pred, events),
        negative_excess=int(np.sum(pred.qw[mask] < 0)),
    )
    return report, pred


def write_report(report: MetricReport, out_dir: str | Path) -> list[Path]:
    """Metric JSON plus delimited tables for per-event scores and excess volumes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "metrics.json", out / "events.csv", out / "excess_volumes.csv"]
    paths[0].write_text(json.dumps(report.to_dict(), indent=1))
    for path, rows in ((paths[1], report.events), (paths[2], report.excess_volumes)):
        with open(path, "w", newline="") as fh:
            if rows:
                w = csv.DictWriter(fh, fieldnames=list(rows[0]))
                w.writeheader()
                w.writerows(rows)
    return paths


# ---------------------------------------------------------------- timing


@dataclass
class TimingReport:
    minutes: int
    reference_seconds: float
    surrogate_seconds: float
    reference_dt: float
    surrogate_dt: float
    half_length_surrogate_seconds: float | None = None

    @property
    def speedup(self) -> float:
        return self.reference_seconds / self.surrogate_seconds

    @property
    def linearity(self) -> float | None:
        """Full-length time over twice the half-length time (1 means linear scaling)."""
        if not self.half_length_surrogate_seconds:
            return None
        return self.surrogate_seconds / (2.0 * self.half_length_surrogate_seconds)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speedup"] = self.speedup
        d["linearity"] = self.linearity
        return d


def _best_time(fn, repeats: int) -> float:
    best = math.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def benchmark_speedup(net: Network, runoff: RunoffSeries | np.ndarray, m: SurrogateModel,
                      hifi_cfg: HifiConfig = HifiConfig(), x0=None, repeats: int = 3) -> TimingReport:
    """Wall time of the reference solve and the surrogate rollout over the same series.

    Both run serially in this process. The surrogate is timed over the full
    and the half-length series to expose its scaling; every timing is the
    best of ``repeats``.
    """
    rates = runoff.rates if isinstance(runoff, RunoffSeries) else np.asarray(runoff, dtype=float)
    t0 = time.perf_counter()
    ref = hifi_simulate(net, rates, hifi_cfg)
    t_ref = time.perf_counter() - t0
    x0 = ref.states[0] if x0 is None else x0
    t_full = _best_time(lambda: rollout(m, x0, rates), repeats)
    half = rates.shape[0] // 2
    t_half = _best_time(lambda: rollout(m, x0, rates[:half]), repeats) if half else None
    return TimingReport(rates.shape[0], t_ref, t_full, hifi_cfg.dt, m.dt, t_half)
