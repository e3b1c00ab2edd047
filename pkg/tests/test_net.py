import json

import pytest
from hypothesis import given, settings, strategies as st

from drainsurrogate.benchnets import branched_chain_document, two_node_document
from drainsurrogate.net import NetworkError, build_network, node_incidence, state_layout, StateLayout


def kinds_of(exc):
    return {k for k, _, _ in exc.value.violations}


def test_smallest_network(net2):
    assert (net2.n_nodes, net2.n_links) == (2, 1)
    assert net2.nodes[net2.outlet_index].is_outlet


def test_sixty_pipe_layout():
    net = build_network(branched_chain_document(60))
    assert (net.n_nodes, net.n_links) == (61, 60)
    assert len(state_layout(net, True)) == 182


def test_bench15_shape_and_kinds(bench):
    assert (bench.n_nodes, bench.n_links) == (15, 14)
    kinds = bench.excess_kinds()
    assert kinds.count("outlet") == 1
    assert [bench.nodes[i].id for i, k in enumerate(kinds) if k == "overflow"] == ["N5"]


def test_dangling_link():
    doc = two_node_document()
    doc["links"][0]["downstream_node"] = "NOPE"
    with pytest.raises(NetworkError) as exc:
        build_network(doc)
    assert "dangling id" in kinds_of(exc)


def test_outlet_count():
    doc = two_node_document()
    doc["nodes"][1]["is_outlet"] = True
    doc["catchments"] = []
    with pytest.raises(NetworkError, match="outlet"):
        build_network(doc)
    doc = two_node_document()
    doc["nodes"][0]["is_outlet"] = False
    with pytest.raises(NetworkError, match="no outlet"):
        build_network(doc)


def test_cycle_and_disconnected(bench_doc):
    # turn N1 -> N2 into a loop back from N2 to N1 via an extra link
    extra = dict(bench_doc["links"][0], id="LOOP", upstream_node="N2", downstream_node="N1")
    doc = dict(bench_doc, links=bench_doc["links"] + [extra])
    with pytest.raises(NetworkError) as exc:
        build_network(doc)
    assert "cycle detected" in kinds_of(exc)

    doc = json.loads(json.dumps(bench_doc))
    doc["links"] = [l for l in doc["links"] if l["upstream_node"] != "C1"]
    with pytest.raises(NetworkError) as exc:
        build_network(doc)
    assert ("disconnected", "C1") in {(k, i) for k, i, _ in exc.value.violations}


def test_geometry_violations_are_collected():
    doc = two_node_document()
    doc["nodes"][1]["ground_elevation"] = doc["nodes"][1]["invert_elevation"] - 1
    doc["links"][0]["diameter"] = -0.5
    doc["catchments"][0]["imperviousness"] = 1.5
    with pytest.raises(NetworkError) as exc:
        build_network(doc)
    assert len(exc.value.violations) >= 3


def test_read_from_file(tmp_path):
    path = tmp_path / "net.json"
    path.write_text(json.dumps(two_node_document()))
    assert build_network(path).n_links == 1


def test_unknown_ids(net2):
    with pytest.raises(KeyError):
        net2.node_index("ZZ")
    with pytest.raises(KeyError):
        node_incidence(net2, "ZZ")


def test_incidence_of_outlet_and_junction(net2, bench):
    assert node_incidence(net2, "OUT") == (["P00"], [])
    up, down = node_incidence(bench, "N3")
    assert len(up) == 2 and len(down) == 1


@pytest.mark.parametrize("n_links", [14, 30, 60])
def test_every_link_listed_once_each_side(n_links):
    net = build_network(branched_chain_document(n_links))
    ups, downs = [], []
    for node in net.nodes:
        u, d = node_incidence(net, node.id)
        ups += u
        downs += d
    ids = sorted(l.id for l in net.links)
    assert sorted(ups) == ids and sorted(downs) == ids


def test_incidence_matrix_columns(bench):
    C = bench.incidence_matrix()
    assert C.shape == (15, 14)
    assert (C.sum(axis=0) == 0).all()
    assert ((C == 1).sum(axis=0) == 1).all()


def test_layout_lengths(net2):
    assert len(state_layout(net2, False)) == 3
    assert len(state_layout(net2, True)) == 5
    with pytest.raises(AttributeError):
        state_layout(net2, False).qw


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 40), st.integers(2, 6))
def test_layout_document_round_trip(n_links, branch_every):
    net = build_network(branched_chain_document(n_links, branch_every))
    for flag in (True, False):
        lay = state_layout(net, flag)
        assert StateLayout.from_document(json.loads(json.dumps(lay.to_document()))) == lay
        assert len(lay.names) == len(lay) == len(set(lay.names))


def test_document_round_trip(bench):
    again = build_network(json.loads(json.dumps(bench.to_document())))
    assert again.to_document() == bench.to_document()
