"""Synthetic test networks.

``bench15`` is the desk-scale benchmark: a 15-node, 14-link multi-branch
system with one overflow weir at pipe crown and surcharge weirs at ground
level everywhere else. ``branched_chain`` builds larger analogues such as
the 61-node / 60-link layout.
"""

from __future__ import annotations

import numpy as np

from .net import Network, build_network

MANHOLE_AREA = 2.0  # m²
PIPE_SURFACE_SHARE = 0.05  # share of D*L of every attached pipe lumped into the node


def _document(edges, diameters, lengths, areas, imperv, overflow_node=None, slope=0.005,
              depth=2.6, tc=None, manhole_area=MANHOLE_AREA, outlet="OUT"):
    """Assemble a network document from a tree given as (upstream, downstream) pairs.

    Inverts are laid out from the outlet upwards with a constant slope and a
    2 cm drop across every manhole. Below the pipe crowns a node stores water
    over the manhole plus a share of the free-surface area of the attached
    pipes; above them, with the pipes full, only the manhole remains.
    """
    down = {u: d for u, d in edges}
    nodes = [outlet] + [u for u, _ in edges]
    def dist(n):
        k = 0
        while n != outlet:
            n = down[n]
            k += 1
        return k

    order = sorted(nodes, key=dist)
    invert = {outlet: 0.0}
    link_dn_inv, link_up_inv = {}, {}
    lk = dict(zip((u for u, _ in edges), range(len(edges))))
    for n in order[1:]:
        j = lk[n]
        dn_inv = invert[down[n]] + 0.02
        up_inv = dn_inv + slope * lengths[j]
        link_dn_inv[n], link_up_inv[n] = dn_inv, up_inv
        invert[n] = up_inv
    storage = {n: manhole_area for n in nodes}
    for j, (u, d) in enumerate(edges):
        share = PIPE_SURFACE_SHARE * diameters[j] * lengths[j]
        storage[u] += share
        storage[d] += share

    node_docs = []
    for n in nodes:
        is_outlet = n == outlet
        inv = invert[n]
        ground = inv + depth
        if is_outlet:
            crest = ground
        elif n == overflow_node:
            j = lk[n]
            crown = max(link_up_inv[n] + diameters[j],
                        max((link_dn_inv[u] + diameters[lk[u]] for u, d in edges if d == n), default=-np.inf))
            crest = crown + 0.05
        else:
            crest = ground
        node_docs.append({
            "id": n, "invert_elevation": round(inv, 4), "ground_elevation": round(ground, 4),
            "storage_area": round(storage[n], 2), "surcharge_area": manhole_area, "weir_crest": round(crest, 4),
            "weir_coefficient": 1.7, "weir_width": 3.0 if n == overflow_node else 2.0,
            "is_outlet": is_outlet,
        })
    link_docs = []
    for j, (u, d) in enumerate(edges):
        link_docs.append({
            "id": f"P{j:02d}", "upstream_node": u, "downstream_node": d, "length": lengths[j],
            "diameter": diameters[j], "manning_n": 0.013,
            "upstream_invert": round(link_up_inv[u], 4), "downstream_invert": round(link_dn_inv[u], 4),
        })
    tc = tc if tc is not None else [8.0] * len(edges)
    catch_docs = [{
        "node": u, "area": areas[j], "imperviousness": imperv[j], "initial_loss": 1.0,
        "horton_f0": 72.0, "horton_fmin": 18.0, "horton_k": 2.0, "concentration_time": tc[j],
    } for j, (u, _) in enumerate(edges)]
    return {"nodes": node_docs, "links": link_docs, "catchments": catch_docs}


BENCH15_EDGES = [
    ("N1", "N2"), ("N2", "N3"), ("N3", "N4"), ("N4", "N5"), ("N5", "N6"), ("N6", "N7"), ("N7", "OUT"),
    ("A1", "A2"), ("A2", "N3"),
    ("B1", "B2"), ("B2", "B3"), ("B3", "N5"),
    ("C1", "N6"),
    ("D1", "N2"),
]


def bench15_document() -> dict:
    diameters = [0.4, 0.5, 0.6, 0.6, 0.8, 0.8, 0.9, 0.3, 0.4, 0.3, 0.4, 0.5, 0.3, 0.3]
    lengths = [60.0, 70.0, 80.0, 75.0, 90.0, 85.0, 100.0, 55.0, 65.0, 50.0, 60.0, 70.0, 55.0, 50.0]
    areas = [9000.0, 8000.0, 10000.0, 7000.0, 9000.0, 8000.0, 7000.0,
             6000.0, 7000.0, 5000.0, 6000.0, 8000.0, 7000.0, 6000.0]
    imperv = [0.6, 0.5, 0.55, 0.45, 0.5, 0.6, 0.5, 0.65, 0.5, 0.6, 0.55, 0.45, 0.6, 0.55]
    tc = [8.0, 9.0, 10.0, 9.0, 10.0, 11.0, 9.0, 7.0, 8.0, 6.0, 7.0, 9.0, 7.0, 6.0]
    return _document(BENCH15_EDGES, diameters, lengths, areas, imperv, overflow_node="N5", tc=tc)


def bench15() -> Network:
    return build_network(bench15_document())


def branched_chain_document(n_links: int = 60, branch_every: int = 4) -> dict:
    """A trunk with a one-pipe side branch joining every ``branch_every`` trunk nodes."""
    n_branch = n_links // (branch_every + 1)
    n_trunk = n_links - n_branch
    trunk = [f"T{i}" for i in range(n_trunk)]
    edges = [(trunk[i], trunk[i + 1] if i + 1 < n_trunk else "OUT") for i in range(n_trunk)]
    edges += [(f"S{j}", trunk[min(branch_every * (j + 1), n_trunk - 1)]) for j in range(n_branch)]
    rng = np.random.default_rng(7)
    m = len(edges)
    return _document(edges, [0.5] * m, list(rng.uniform(40, 90, m).round(1)),
                     list(rng.uniform(3e3, 9e3, m).round(0)), list(rng.uniform(0.3, 0.7, m).round(2)))


def two_node_document() -> dict:
    return _document([("N1", "OUT")], [0.5], [60.0], [10000.0], [1.0])
