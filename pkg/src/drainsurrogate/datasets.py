"""Labelled datasets: rain, runoff, reference trajectory and event index.

A dataset directory holds ``runoff.csv``, ``trajectory.csv``,
``events.csv`` and ``audit.json``. Tables are plain delimited text with
full float precision so files round-trip exactly.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hifi import HifiConfig, Trajectory, hifi_simulate, mass_balance_audit
from .net import Network, state_layout
from .rain import (GeneratorConfig, RainEvent, RainSeries, RunoffSeries, assemble_dataset, extract_events,
                   generate_events, read_event_file, simulate_runoff, write_event_file)
from .surrogate import content_hash

FILES = ("runoff.csv", "trajectory.csv", "events.csv", "audit.json")


@dataclass
class Dataset:
    rain: RainSeries
    runoff: RunoffSeries
    trajectory: Trajectory
    events: list[tuple[str, str, int, int]]  # id, source, offset, length

    @property
    def bounds(self) -> list[tuple[int, int]]:
        return [(off, off + n) for _, _, off, n in self.events]

    def fingerprint(self) -> str:
        return content_hash(self.trajectory.states, self.runoff.rates)


def label(net: Network, rain: RainSeries, events: list[tuple[str, str, int, int]],
          hifi_cfg: HifiConfig = HifiConfig()) -> Dataset:
    runoff = simulate_runoff(net, rain)
    return Dataset(rain, runoff, hifi_simulate(net, runoff, hifi_cfg), events)


def from_events(net: Network, events: list[RainEvent], hifi_cfg: HifiConfig = HifiConfig()) -> Dataset:
    """Concatenate events with dry pads and label the result with the reference solver."""
    rain, bounds = assemble_dataset(events, [e.id for e in events])
    index = [(e.id, e.source, a, b - a) for e, (a, b) in zip(events, bounds)]
    return label(net, rain, index, hifi_cfg)


def from_rain(net: Network, rain: RainSeries, source: str = "series",
              hifi_cfg: HifiConfig = HifiConfig()) -> Dataset:
    """Label a continuous series; events are found with the standard extraction rule."""
    index = [(e.id, e.source, e.offset, len(e)) for e in extract_events(rain, source=source)]
    return label(net, rain, index, hifi_cfg)


def generated(net: Network, cfg: GeneratorConfig, source: str = "synthetic",
              hifi_cfg: HifiConfig = HifiConfig()) -> Dataset:
    return from_events(net, generate_events(cfg, source), hifi_cfg)


# Seeds and sizes of the desk-scale benchmark: an extreme-biased training
# set, a smaller validation set and an independent test set of ordinary events.
BENCH_SPLITS = {
    "train": GeneratorConfig(n_events=40, mode="extreme", seed=11),
    "val": GeneratorConfig(n_events=10, mode="extreme", seed=12),
    "test": GeneratorConfig(n_events=50, mode="normal", seed=13),
}


def bench_suite(net: Network, hifi_cfg: HifiConfig = HifiConfig()) -> dict[str, Dataset]:
    return {name: generated(net, cfg, name, hifi_cfg) for name, cfg in BENCH_SPLITS.items()}


def audit(ds: Dataset, net: Network) -> dict:
    """Mass balance over the whole series and per event."""
    per_event = []
    for (eid, _, off, n) in ds.events:
        rep = mass_balance_audit(ds.trajectory.slice(off, off + n), ds.runoff.rates[off:off + n], net)
        per_event.append({"event_id": eid, **rep.to_dict()})
    total = mass_balance_audit(ds.trajectory, ds.runoff, net).to_dict()
    worst = max((abs(e["relative_closure"]) for e in per_event), default=0.0)
    return {"total": total, "events": per_event, "max_event_relative_closure": worst}


# ---------------------------------------------------------------- files


def _write_table(path: Path, header: list[str], rows: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["minute"] + header)
        for i, row in enumerate(rows):
            w.writerow([i] + [repr(float(v)) for v in row])


def _read_table(path: Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "minute":
            raise ValueError(f"{path}: missing 'minute' header")
        rows = []
        for lineno, r in enumerate(reader, start=2):
            if not r:
                continue
            if len(r) != len(header):
                raise ValueError(f"{path}:{lineno}: expected {len(header)} columns, got {len(r)}")
            try:
                rows.append([float(v) for v in r[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value") from None
    return header[1:], np.array(rows, dtype=float).reshape(len(rows), len(header) - 1)


def write_runoff(path, runoff: RunoffSeries) -> None:
    _write_table(Path(path), list(runoff.node_ids), runoff.rates)


def read_runoff(path, net: Network) -> RunoffSeries:
    names, rates = _read_table(Path(path))
    ids = [n.id for n in net.nodes]
    if names != ids:
        raise ValueError(f"{path}: runoff columns do not match the network nodes")
    return RunoffSeries(rates, tuple(ids))


def write_trajectory(path, traj: Trajectory) -> None:
    _write_table(Path(path), traj.layout.names + ["outflow"], np.column_stack([traj.states, traj.outflow]))


def read_trajectory(path, net: Network, runoff: RunoffSeries | None = None) -> Trajectory:
    """Read a trajectory table; runoff defaults to zeros when not supplied."""
    layout = state_layout(net, include_qw=True)
    names, data = _read_table(Path(path))
    if names != layout.names + ["outflow"]:
        raise ValueError(f"{path}: trajectory columns do not match the network layout")
    T = data.shape[0] - 1
    if T < 0:
        raise ValueError(f"{path}: empty trajectory")
    rates = np.zeros((T, net.n_nodes)) if runoff is None else runoff.rates
    if rates.shape[0] != T:
        raise ValueError(f"{path}: trajectory has {T} steps but runoff has {rates.shape[0]}")
    return Trajectory(layout, data[:, :-1], rates, data[:, -1])


def write_dataset(ds: Dataset, net: Network, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / f for f in FILES]
    write_runoff(paths[0], ds.runoff)
    write_trajectory(paths[1], ds.trajectory)
    write_event_file(paths[2], ds.events)
    paths[3].write_text(json.dumps(audit(ds, net), indent=1))
    return paths


def read_dataset(path, net: Network) -> Dataset:
    """Load a dataset directory (rain is not stored and comes back empty)."""
    d = Path(path)
    missing = [f for f in FILES[:3] if not (d / f).exists()]
    if missing:
        raise FileNotFoundError(f"{d}: missing {', '.join(missing)}")
    runoff = read_runoff(d / FILES[0], net)
    traj = read_trajectory(d / FILES[1], net, runoff)
    events = read_event_file(d / FILES[2])
    for eid, _, off, n in events:
        if off < 0 or n < 1 or off + n > len(runoff):
            raise ValueError(f"{d / FILES[2]}: event {eid} lies outside the series")
    return Dataset(RainSeries(np.zeros(0)), runoff, traj, events)
