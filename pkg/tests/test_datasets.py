import numpy as np
import pytest

from drainsurrogate.datasets import (audit, from_rain, read_dataset, read_runoff, read_trajectory,
                                     write_dataset, write_runoff, write_trajectory)
from drainsurrogate.rain import RainSeries, RunoffSeries


def test_dataset_round_trip(tmp_path, bench, small_data):
    paths = write_dataset(small_data, bench, tmp_path)
    assert [p.name for p in paths] == ["runoff.csv", "trajectory.csv", "events.csv", "audit.json"]
    back = read_dataset(tmp_path, bench)
    assert np.array_equal(back.trajectory.states, small_data.trajectory.states)
    assert np.array_equal(back.trajectory.outflow, small_data.trajectory.outflow)
    assert np.array_equal(back.runoff.rates, small_data.runoff.rates)
    assert back.events == small_data.events
    assert back.fingerprint() == small_data.fingerprint()


def test_event_bounds_follow_the_assembly(small_data):
    bounds = small_data.bounds
    assert len(bounds) == 4
    assert [b - a for a, b in bounds] == [n for _, _, _, n in small_data.events]
    assert all(b2[0] - b1[1] == 120 for b1, b2 in zip(bounds, bounds[1:]))


def test_audit_per_event(bench, small_data):
    rep = audit(small_data, bench)
    assert len(rep["events"]) == 4
    assert rep["max_event_relative_closure"] <= 5e-3
    assert rep["total"]["runoff_m3"] == pytest.approx(small_data.runoff.total_volume())


def test_continuous_rain_uses_event_extraction(net2):
    rain = RainSeries(np.concatenate([np.full(10, 0.5), np.zeros(200), np.full(5, 0.3), np.zeros(30)]))
    ds = from_rain(net2, rain, source="gauge")
    assert [(e[0], e[2], e[3]) for e in ds.events] == [("gauge-00000", 0, 70), ("gauge-00001", 210, 35)]


def test_table_errors(tmp_path, bench, net2, small_data):
    write_runoff(tmp_path / "r.csv", small_data.runoff)
    with pytest.raises(ValueError, match="do not match"):
        read_runoff(tmp_path / "r.csv", net2)
    write_trajectory(tmp_path / "t.csv", small_data.trajectory)
    with pytest.raises(ValueError, match="steps"):
        read_trajectory(tmp_path / "t.csv", bench, RunoffSeries(np.zeros((3, bench.n_nodes))))
    bad = tmp_path / "bad.csv"
    bad.write_text("minute,a\n0,x\n")
    with pytest.raises(ValueError, match="bad.csv:2"):
        read_runoff(bad, net2)
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path / "nowhere", bench)
