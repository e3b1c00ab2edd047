import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from drainsurrogate.benchnets import bench15, two_node_document
from drainsurrogate.hifi import Trajectory
from drainsurrogate.net import build_network, state_layout
from drainsurrogate.surrogate import (DivergenceError, ResidueSpec, Scaler, SurrogateModel, constraint_excess,
                                      fit_scaler, init_model, load_checkpoint, parameter_count, prior_forward,
                                      residue_forward, rollout, save_checkpoint, surrogate_step)


NET2 = build_network(two_node_document())
BENCH = bench15()


def two_node_labels(net, values):
    """Trajectory whose rows are the given full-layout states."""
    states = np.asarray(values, dtype=float)
    lay = state_layout(net, True)
    return Trajectory(lay, states, np.zeros((len(states) - 1, net.n_nodes)), np.zeros(len(states)))


@pytest.fixture
def scaler2(net2):
    labels = two_node_labels(net2, [[0.0, 2.0, 0.0, 0.0, 0.0], [0.0, 4.0, 0.5, 0.0, 0.3]])
    return fit_scaler(labels, np.array([[0.0, 0.0], [0.0, 0.2]]))


def test_scaler_fit(scaler2):
    assert scaler2.lo[1] == 2.0 and scaler2.hi[1] == 4.0
    assert scaler2.degenerate.tolist() == [True, False, False, True, False]
    assert scaler2.scale(np.array([0.0, 3.0, 0.25, 0.0, 0.15])).tolist() == [0.0, 0.5, 0.5, 0.0, 0.5]
    assert not scaler2.scale(scaler2.lo).any()


def test_degenerate_columns_borrow_their_kind_span(scaler2):
    # levels: the varying level spans 2 m; excess: the varying column spans 0.3 m³/s
    assert scaler2.span.tolist() == [2.0, 2.0, 0.5, 0.3, 0.3]
    assert scaler2.scale(np.array([1.0, 2.0, 0.0, 0.03, 0.0]))[[0, 3]].tolist() == pytest.approx([0.5, 0.1])
    legacy = Scaler(scaler2.lo, scaler2.hi, scaler2.runoff_lo, scaler2.runoff_hi)
    assert legacy.span.tolist() == [1.0, 2.0, 0.5, 1.0, 0.3]
    back = Scaler.from_document(json.loads(json.dumps(scaler2.to_document())))
    assert back.span.tolist() == scaler2.span.tolist()
    assert Scaler.from_document(legacy.to_document()).fallback is None


@settings(max_examples=50, deadline=None)
@given(arrays(float, (20, 5), elements=st.floats(-50, 50)))
def test_scaler_round_trip(values):
    sc = fit_scaler(two_node_labels(NET2, values), np.zeros((19, 2)))
    assert np.allclose(sc.unscale(sc.scale(values)), values, rtol=0, atol=1e-9)


def test_scaler_rejects_wrong_width(scaler2):
    with pytest.raises(ValueError):
        scaler2.scale(np.zeros(4))
    with pytest.raises(ValueError):
        fit_scaler([])


def test_residue_spec_parse():
    assert ResidueSpec.parse("s4") == ResidueSpec(6, 100, "S4")
    assert ResidueSpec.parse("3x40") == ResidueSpec(3, 40, "3x40")
    with pytest.raises(ValueError):
        ResidueSpec.parse("S9")


def test_prior_hand_arithmetic():
    W1 = np.array([[1.0, 0.0], [0.5, -1.0]])
    b1 = np.array([0.1, 0.0])
    W2 = np.array([[2.0, 0.0], [1.0, 1.0]])
    b2 = np.array([0.0, -0.5])
    x = np.array([0.2, 0.4])
    hidden = np.tanh([0.2 + 0.5 * 0.4 + 0.1, -0.4])
    expected = np.array([2 * hidden[0] + hidden[1], hidden[1] - 0.5])
    out = prior_forward([(W1, b1), (W2, b2)], x)
    assert np.allclose(out, expected, rtol=0, atol=1e-15)
    doubled = prior_forward([(W1, b1), (2 * W2, b2)], x)
    assert np.allclose(doubled - b2, 2 * (out - b2))
    zero = [(np.zeros((2, 2)), np.zeros(2))] * 2
    assert not prior_forward(zero, x).any()


def test_residue_hand_arithmetic():
    W1 = np.array([[1.0], [2.0], [-1.0]])  # inputs x0, x1, r
    W2 = np.array([[3.0, -1.0]])
    out = residue_forward([(W1, np.zeros(1)), (W2, np.array([0.5, 0.0]))], np.array([0.1, 0.2]), np.array([0.3]))
    z = np.tanh(0.1 + 0.4 - 0.3)
    assert np.allclose(out, [3 * z + 0.5, -z], rtol=0, atol=1e-15)


def test_parameter_count_formula(net2, scaler2):
    m = init_model(net2, scaler2, "S1", constrained=True)
    S, N = 3, 2
    assert parameter_count(m.residue) == (S + N) * 10 + 10 + 10 * 10 + 10 + 10 * S + S
    assert parameter_count(m.prior) == 2 * (S * S + S)


def test_constraint_examples(bench):
    Q = np.zeros(bench.n_links)
    R = np.zeros(bench.n_nodes)
    assert not constraint_excess(bench, Q, R).any()
    # A2 receives P07 (A1 -> A2) and drains through P08 (A2 -> N3)
    a2 = bench.node_index("A2")
    Q[bench.link_index("P07")], Q[bench.link_index("P08")] = 0.5, 0.2
    R[a2] = 0.1
    assert constraint_excess(bench, Q, R)[a2] == pytest.approx(0.4)
    Q[bench.link_index("P07")], Q[bench.link_index("P08")] = 0.1, 0.5
    R[a2] = 0.0
    assert constraint_excess(bench, Q, R)[a2] == 0.0


@settings(max_examples=50, deadline=None)
@given(arrays(float, 14, elements=st.floats(-5, 5)), arrays(float, 15, elements=st.floats(0, 2)))
def test_constraint_is_non_negative_with_dry_outlet(Q, R):
    qw = constraint_excess(BENCH, Q, R)
    assert (qw >= 0).all() and qw[BENCH.outlet_index] == 0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**16), arrays(float, (6, 2), elements=st.floats(0, 0.5)))
def test_unconstrained_excess_is_unchecked_and_rollouts_repeat(seed, R):
    labels = two_node_labels(NET2, [[0.0, 2.0, 0.0, 0.0, 0.0], [0.0, 4.0, 0.5, 0.0, 0.3]])
    sc = fit_scaler(labels, np.array([[0.0, 0.0], [0.0, 0.2]]))
    free = init_model(NET2, sc, "S1", constrained=False, seed=seed)
    tied = init_model(NET2, sc, "S1", constrained=True, seed=seed)
    x0 = np.array([0.0, 3.0, 0.2, 0.0, 0.0])
    a, b = rollout(free, x0, R), rollout(free, x0, R)
    assert np.array_equal(a.states, b.states)
    assert (rollout(tied, x0[:3], R).qw >= 0).all()
    # the free model reads its excess straight from the network output, sign unchecked
    out = free.scaler.unscale(prior_forward(free.prior, free.scaler.scale(x0))
                              + residue_forward(free.residue, free.scaler.scale(x0), free.scaler.scale_runoff(R[0])))
    assert a.states[1, 3:] == pytest.approx(out[3:])
    # a network with a constant negative excess output emits it unchanged
    x_neg = sc.lo + np.array([0.0, 0.0, 0.0, 0.0, -0.05])
    params = [(W * 0, b * 0) for W, b in free.parameters]
    params[-1] = (params[-1][0], sc.scale(x_neg))
    assert (rollout(free.with_parameters(params), x0, R).qw[1:, 1] == pytest.approx(-0.05))


def test_constrained_layout_drops_one_state_per_node():
    free = init_model(BENCH, fit_scaler(two_bench_labels()), "S1", constrained=False)
    tied = init_model(BENCH, free.scaler, "S1", constrained=True)
    assert free.n_states - tied.n_states == BENCH.n_nodes
    assert tied.n_states == BENCH.n_nodes + BENCH.n_links


def two_bench_labels():
    lay = state_layout(BENCH, True)
    rng = np.random.default_rng(0)
    return Trajectory(lay, rng.uniform(0, 1, (3, len(lay))), rng.uniform(0, 1, (2, BENCH.n_nodes)), np.zeros(3))


def near_identity_model(net, scaler, eps=1e-4):
    m = init_model(net, scaler, "S1", constrained=True)
    S = m.n_states
    prior = [(eps * np.eye(S), np.zeros(S)), (np.eye(S) / eps, np.zeros(S))]
    residue = [(W * 0, b * 0) for W, b in m.residue]
    return SurrogateModel(net, scaler, prior, residue, True, m.spec)


def test_identity_prior_keeps_state(net2, scaler2):
    m = near_identity_model(net2, scaler2)
    x = np.array([0.0, 3.0, 0.3])
    R = np.array([0.0, 0.05])
    nxt, qw = surrogate_step(m, x, R)
    assert np.allclose(nxt, x, atol=1e-6)
    assert np.array_equal(qw, constraint_excess(net2, nxt[2:], R))
    traj = rollout(m, x, np.zeros((5, 2)))
    assert np.allclose(traj.states[:, :3], x, atol=1e-6)


def test_zero_model_is_exactly_constant(net2, scaler2):
    m = init_model(net2, scaler2, "S1", constrained=False)
    m = m.with_parameters([(W * 0, b * 0) for W, b in m.parameters])
    x0 = scaler2.lo.copy()
    traj = rollout(m, x0, np.zeros((4, 2)))
    assert np.array_equal(traj.states, np.tile(x0, (5, 1)))


def test_step_matches_manual_composition(net2, scaler2, rng):
    m = init_model(net2, scaler2, "S1", constrained=True, seed=7)
    m = m.with_parameters([(W, rng.normal(size=b.shape)) for W, b in m.parameters])
    x = np.array([0.0, 2.7, 0.2])
    R = np.array([0.0, 0.11])
    xs = (x - scaler2.lo[:3]) / scaler2.span[:3]
    rs = (R - scaler2.runoff_lo) / scaler2.runoff_span
    h = np.tanh(xs @ m.prior[0][0] + m.prior[0][1])
    out = h @ m.prior[1][0] + m.prior[1][1]
    z = np.concatenate([xs, rs])
    for W, b in m.residue[:-1]:
        z = np.tanh(z @ W + b)
    out = out + z @ m.residue[-1][0] + m.residue[-1][1]
    nxt = out * scaler2.span[:3] + scaler2.lo[:3]
    qw = np.array([0.0, max(R[1] - nxt[2], 0.0)])  # N1 has no inflowing pipe
    got, got_qw = surrogate_step(m, x, R)
    assert np.allclose(got, nxt, rtol=0, atol=1e-12)
    assert np.allclose(got_qw, qw, rtol=0, atol=1e-12)


@pytest.mark.parametrize("constrained", [True, False])
def test_rollout_single_step_equals_step(bench, small_data, constrained):
    sc = fit_scaler(small_data.trajectory)
    m = init_model(bench, sc, "S2", constrained=constrained, seed=3)
    t = 50
    x = small_data.trajectory.states[t]
    R = small_data.runoff.rates[t]
    nxt, qw = surrogate_step(m, x, R)
    traj = rollout(m, x, small_data.runoff.rates[t:t + 1])
    assert np.allclose(traj.states[1, :m.n_states], nxt, rtol=0, atol=1e-12)
    assert np.allclose(traj.states[1, m.n_states:] if constrained else traj.qw[1], qw, rtol=0, atol=1e-12)


def test_constraint_identity_along_rollout(bench, small_data):
    sc = fit_scaler(small_data.trajectory)
    m = init_model(bench, sc, "S2", constrained=True, seed=4)
    m = m.with_parameters([(0.3 * W, b) for W, b in m.parameters])
    traj = rollout(m, small_data.trajectory.states[0], small_data.runoff.rates[:200])
    for t in range(1, 201):
        assert np.array_equal(traj.qw[t], constraint_excess(bench, traj.q[t], small_data.runoff.rates[t - 1]))
    assert (traj.qw >= 0).all()


def test_divergence_is_reported(net2, scaler2):
    m = init_model(net2, scaler2, "S1", constrained=True)
    m = m.with_parameters([(W, b + 50.0) for W, b in m.parameters])
    with pytest.raises(DivergenceError) as exc:
        rollout(m, scaler2.lo, np.zeros((3, 2)))
    assert exc.value.step == 1


def test_state_length_is_checked(net2, scaler2):
    m = init_model(net2, scaler2, "S1", constrained=False)
    with pytest.raises(ValueError):
        surrogate_step(m, np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        rollout(m, np.zeros(5), np.zeros((3, 2)), steps=4)


def test_checkpoint_round_trip(tmp_path, bench, small_data):
    sc = fit_scaler(small_data.trajectory)
    m = init_model(bench, sc, "S1", constrained=True, seed=9)
    m.provenance = {"train_fingerprint": "abc"}
    path = tmp_path / "ck.json"
    save_checkpoint(m, path)
    back = load_checkpoint(path)
    x = small_data.trajectory.states[40]
    a = rollout(m, x, small_data.runoff.rates[40:100])
    b = rollout(back, x, small_data.runoff.rates[40:100])
    assert np.array_equal(a.states, b.states)
    assert back.provenance == m.provenance and back.spec == m.spec and back.seed == 9

    doc = json.loads(path.read_text())
    doc["version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(ValueError, match="version"):
        load_checkpoint(path)


def test_init_is_seeded(net2, scaler2):
    a = init_model(net2, scaler2, "S1", seed=1).parameters
    b = init_model(net2, scaler2, "S1", seed=1).parameters
    c = init_model(net2, scaler2, "S1", seed=2).parameters
    assert all(np.array_equal(p[0], q[0]) for p, q in zip(a, b))
    assert not np.array_equal(a[0][0], c[0][0])
