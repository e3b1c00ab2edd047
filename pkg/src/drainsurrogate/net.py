"""Drainage network topology, geometry and the flat state-vector layout."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np


class NetworkError(ValueError):
    """Raised when a network document fails validation.

    ``violations`` holds one ``(kind, offending_id, message)`` tuple per problem.
    """

    def __init__(self, violations):
        self.violations = list(violations)
        lines = [f"{kind} [{oid}]: {msg}" for kind, oid, msg in self.violations]
        super().__init__("invalid network:\n  " + "\n  ".join(lines))


@dataclass(frozen=True)
class Node:
    id: str
    invert_elevation: float
    ground_elevation: float
    storage_area: float  # plan area below the highest attached pipe crown
    weir_crest: float
    weir_coefficient: float = 1.7
    weir_width: float = 2.0
    is_outlet: bool = False
    surcharge_area: float | None = None  # plan area above the crown; defaults to storage_area

    @property
    def upper_area(self) -> float:
        return self.storage_area if self.surcharge_area is None else self.surcharge_area


@dataclass(frozen=True)
class Link:
    id: str
    upstream_node: str
    downstream_node: str
    length: float
    diameter: float
    manning_n: float
    upstream_invert: float
    downstream_invert: float


@dataclass(frozen=True)
class Catchment:
    node: str
    area: float
    imperviousness: float
    initial_loss: float = 1.0
    horton_f0: float = 72.0
    horton_fmin: float = 18.0
    horton_k: float = 2.0
    concentration_time: float = 10.0


@dataclass
class Network:
    nodes: list[Node]
    links: list[Link]
    catchments: list[Catchment]
    _node_index: dict = field(init=False, repr=False)
    _link_index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._node_index = {n.id: i for i, n in enumerate(self.nodes)}
        self._link_index = {l.id: i for i, l in enumerate(self.links)}

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_links(self) -> int:
        return len(self.links)

    @property
    def outlet_index(self) -> int:
        return next(i for i, n in enumerate(self.nodes) if n.is_outlet)

    def node_index(self, node_id: str) -> int:
        try:
            return self._node_index[node_id]
        except KeyError:
            raise KeyError(f"unknown node id {node_id!r}") from None

    def link_index(self, link_id: str) -> int:
        try:
            return self._link_index[link_id]
        except KeyError:
            raise KeyError(f"unknown link id {link_id!r}") from None

    def catchment_of(self, node_id: str) -> Catchment | None:
        for c in self.catchments:
            if c.node == node_id:
                return c
        return None

    def incidence_matrix(self) -> np.ndarray:
        """Signed node-link incidence: +1 where a link delivers into the node,
        -1 where it drains the node. Shape (N, M)."""
        C = np.zeros((self.n_nodes, self.n_links))
        for j, link in enumerate(self.links):
            C[self._node_index[link.downstream_node], j] += 1.0
            C[self._node_index[link.upstream_node], j] -= 1.0
        return C

    def pipe_crown(self, node_id: str) -> float:
        """Highest pipe soffit among the links attached to a node."""
        crowns = []
        for link in self.links:
            if link.upstream_node == node_id:
                crowns.append(link.upstream_invert + link.diameter)
            if link.downstream_node == node_id:
                crowns.append(link.downstream_invert + link.diameter)
        if not crowns:
            return self.nodes[self.node_index(node_id)].invert_elevation
        return max(crowns)

    def excess_kinds(self, overflow_margin: float = 0.3) -> list[str]:
        """Classify every node as 'overflow', 'surcharge' or 'outlet'.

        A weir whose crest sits within ``overflow_margin`` of the highest
        attached pipe crown spills frequently and counts as an overflow;
        crests further up (near ground) represent surcharge to the surface.
        """
        kinds = []
        for node in self.nodes:
            if node.is_outlet:
                kinds.append("outlet")
            elif node.weir_crest <= self.pipe_crown(node.id) + overflow_margin:
                kinds.append("overflow")
            else:
                kinds.append("surcharge")
        return kinds

    def to_document(self) -> dict:
        return {
            "nodes": [asdict(n) for n in self.nodes],
            "links": [asdict(l) for l in self.links],
            "catchments": [asdict(c) for c in self.catchments],
        }


def _check_positive(violations, kind, oid, **values):
    for name, value in values.items():
        if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
            violations.append(("invariant violation", oid, f"{kind} {name} must be > 0, got {value!r}"))


def build_network(description: dict | str | Path) -> Network:
    """Validate a network document and build a :class:`Network`.

    ``description`` is either a parsed dict or a path to a JSON file with
    ``nodes``, ``links`` and ``catchments`` arrays. Ordering of nodes and
    links is preserved. All problems are collected before raising
    :class:`NetworkError`.
    """
    if isinstance(description, (str, Path)):
        with open(description) as fh:
            description = json.load(fh)

    violations = []
    try:
        nodes = [Node(**{**d, "is_outlet": bool(d.get("is_outlet", False))}) for d in description["nodes"]]
        links = [Link(**d) for d in description["links"]]
        catchments = [Catchment(**d) for d in description.get("catchments", [])]
    except (KeyError, TypeError) as exc:
        raise NetworkError([("parse error", "-", str(exc))]) from None

    node_ids = [n.id for n in nodes]
    seen = set()
    for nid in node_ids:
        if nid in seen:
            violations.append(("duplicate id", nid, "node id used twice"))
        seen.add(nid)
    seen = set()
    for link in links:
        if link.id in seen:
            violations.append(("duplicate id", link.id, "link id used twice"))
        seen.add(link.id)
    node_set = set(node_ids)

    for n in nodes:
        if not n.ground_elevation > n.invert_elevation:
            violations.append(("invariant violation", n.id, "ground_elevation must exceed invert_elevation"))
        if not n.is_outlet and not (n.invert_elevation <= n.weir_crest <= n.ground_elevation + 0.5):
            violations.append(("invariant violation", n.id, "weir_crest must lie in [invert, ground + 0.5 m]"))
        _check_positive(violations, "node", n.id, storage_area=n.storage_area, surcharge_area=n.upper_area,
                        weir_width=n.weir_width, weir_coefficient=n.weir_coefficient)

    outlets = [n.id for n in nodes if n.is_outlet]
    if len(outlets) != 1:
        violations.append(("multiple outlets" if outlets else "no outlet", ",".join(outlets) or "-",
                           f"exactly one outlet required, found {len(outlets)}"))

    for link in links:
        _check_positive(violations, "link", link.id, length=link.length,
                        diameter=link.diameter, manning_n=link.manning_n)
        for end in (link.upstream_node, link.downstream_node):
            if end not in node_set:
                violations.append(("dangling id", link.id, f"references unknown node {end!r}"))
        if link.upstream_node == link.downstream_node:
            violations.append(("invariant violation", link.id, "upstream and downstream node are identical"))

    with_catchment = {}
    for c in catchments:
        if c.node not in node_set:
            violations.append(("dangling id", c.node, "catchment references unknown node"))
            continue
        if c.node in with_catchment:
            violations.append(("invariant violation", c.node, "node has more than one catchment"))
        with_catchment[c.node] = c
        _check_positive(violations, "catchment", c.node, area=c.area)
        if not 0.0 <= c.imperviousness <= 1.0:
            violations.append(("invariant violation", c.node, "imperviousness must lie in [0, 1]"))
        if not c.horton_f0 >= c.horton_fmin >= 0.0:
            violations.append(("invariant violation", c.node, "require horton_f0 >= horton_fmin >= 0"))
    for n in nodes:
        if n.is_outlet and n.id in with_catchment:
            violations.append(("invariant violation", n.id, "the outlet must not have a catchment"))
        if not n.is_outlet and n.id not in with_catchment:
            violations.append(("invariant violation", n.id, "non-outlet node without catchment"))

    if not violations:
        violations.extend(_topology_violations(nodes, links, outlets[0]))
    if violations:
        raise NetworkError(violations)
    return Network(nodes, links, catchments)


def _topology_violations(nodes, links, outlet):
    succ = {n.id: [] for n in nodes}
    for link in links:
        succ[link.upstream_node].append(link.downstream_node)

    # iterative DFS colouring for cycle detection
    state = {nid: 0 for nid in succ}
    for root in succ:
        if state[root]:
            continue
        stack = [(root, iter(succ[root]))]
        state[root] = 1
        while stack:
            nid, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                state[nid] = 2
                stack.pop()
            elif state[nxt] == 1:
                return [("cycle detected", nxt, "directed cycle through this node")]
            elif state[nxt] == 0:
                state[nxt] = 1
                stack.append((nxt, iter(succ[nxt])))

    pred = {n.id: [] for n in nodes}
    for link in links:
        pred[link.downstream_node].append(link.upstream_node)
    reached, frontier = {outlet}, [outlet]
    while frontier:
        nid = frontier.pop()
        for p in pred[nid]:
            if p not in reached:
                reached.add(p)
                frontier.append(p)
    return [("disconnected", n.id, "no directed path to the outlet") for n in nodes if n.id not in reached]


def node_incidence(net: Network, node_id: str) -> tuple[list[str], list[str]]:
    """Return ``(upstream link ids, downstream link ids)`` for a node."""
    net.node_index(node_id)
    upstream = [l.id for l in net.links if l.downstream_node == node_id]
    downstream = [l.id for l in net.links if l.upstream_node == node_id]
    return upstream, downstream


@dataclass(frozen=True)
class StateLayout:
    """Positions of node levels, link flows and (optionally) excess flows."""

    node_ids: tuple[str, ...]
    link_ids: tuple[str, ...]
    include_qw: bool

    @property
    def n_nodes(self) -> int:
        return len(self.node_ids)

    @property
    def n_links(self) -> int:
        return len(self.link_ids)

    def __len__(self) -> int:
        return 2 * self.n_nodes + self.n_links if self.include_qw else self.n_nodes + self.n_links

    @property
    def h(self) -> slice:
        return slice(0, self.n_nodes)

    @property
    def q(self) -> slice:
        return slice(self.n_nodes, self.n_nodes + self.n_links)

    @property
    def qw(self) -> slice:
        if not self.include_qw:
            raise AttributeError("layout has no excess-flow slots")
        start = self.n_nodes + self.n_links
        return slice(start, start + self.n_nodes)

    @property
    def names(self) -> list[str]:
        names = [f"h:{n}" for n in self.node_ids] + [f"Q:{l}" for l in self.link_ids]
        if self.include_qw:
            names += [f"Qw:{n}" for n in self.node_ids]
        return names

    def index(self, name: str) -> int:
        return self.names.index(name)

    def with_qw(self, include_qw: bool) -> StateLayout:
        return StateLayout(self.node_ids, self.link_ids, include_qw)

    def to_document(self) -> dict:
        return {"node_ids": list(self.node_ids), "link_ids": list(self.link_ids), "include_qw": self.include_qw}

    @classmethod
    def from_document(cls, doc: dict) -> StateLayout:
        return cls(tuple(doc["node_ids"]), tuple(doc["link_ids"]), bool(doc["include_qw"]))


def state_layout(net: Network, include_qw: bool) -> StateLayout:
    return StateLayout(tuple(n.id for n in net.nodes), tuple(l.id for l in net.links), include_qw)
