"""Heterogeneous graph view of a topology and two-hop typed neighbour sampling."""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .channel import ChannelParams, path_gain
from .scenario import Role, Topology, beam_blocker_count, los_blocker_count, pairwise_distances


class NodeType(enum.IntEnum):
    SPV = 0
    COMM = 1
    SENSE = 2


class EdgeType(enum.IntEnum):
    SC = 0  # SPV - comm target
    SS = 1  # SPV - sensing target
    I = 2   # SPV - SPV interference link


_NODE_OF_ROLE = {Role.SPV: NodeType.SPV, Role.COMM: NodeType.COMM, Role.SENSE: NodeType.SENSE}


@dataclass(frozen=True)
class GraphSettings:
    blocker_radius: float = 1.0
    # "segment": SPVs within blocker_radius of the v-m segment; "beam": SPVs in v's main lobe toward m
    feature_rule: str = "segment"
    edge_range_m: float | None = None
    # False: s2 is a total second-hop budget shared round-robin by the first hop
    second_hop_per_node: bool = False

    def __post_init__(self):
        if self.feature_rule not in ("segment", "beam"):
            raise ValueError(f"unknown feature_rule {self.feature_rule!r}")
        if not self.blocker_radius > 0:
            raise ValueError("blocker_radius must be positive")


class Edge(NamedTuple):
    u: int
    v: int
    type: EdgeType
    weight: float


class Neighbor(NamedTuple):
    node: int
    type: EdgeType
    weight: float


@dataclass(frozen=True)
class HeteroGraph:
    node_types: tuple[NodeType, ...]
    node_ids: tuple[int, ...]
    features: np.ndarray        # n_nodes x L
    edges: tuple[Edge, ...]
    target_nodes: tuple[int, ...]  # node index of each feature column
    _adj: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        adj: dict[int, list[Neighbor]] = {i: [] for i in range(len(self.node_types))}
        for e in self.edges:
            adj[e.u].append(Neighbor(e.v, e.type, e.weight))
            adj[e.v].append(Neighbor(e.u, e.type, e.weight))
        for lst in adj.values():
            lst.sort(key=lambda nb: nb.node)
        object.__setattr__(self, "_adj", adj)

    @property
    def n_targets(self) -> int:
        return self.features.shape[1]

    @property
    def spv_nodes(self) -> list[int]:
        return [i for i, t in enumerate(self.node_types) if t is NodeType.SPV]

    def neighbors(self, node: int) -> list[Neighbor]:
        return self._adj[node]

    def edge_weight(self, u: int, v: int) -> float:
        for nb in self._adj[u]:
            if nb.node == v:
                return nb.weight
        raise KeyError((u, v))

    def to_dict(self) -> dict:
        return {
            "schema": "thzjcs.graph/1",
            "nodes": [{"id": i, "vehicle_id": vid, "type": t.name, "features": self.features[i].tolist()}
                      for i, (vid, t) in enumerate(zip(self.node_ids, self.node_types))],
            "target_nodes": list(self.target_nodes),
            "edges": [{"u": e.u, "v": e.v, "type": e.type.name, "weight": e.weight} for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeteroGraph":
        nodes = d["nodes"]
        L = len(d["target_nodes"])
        return cls(
            node_types=tuple(NodeType[n["type"]] for n in nodes),
            node_ids=tuple(int(n["vehicle_id"]) for n in nodes),
            features=np.array([n["features"] for n in nodes], dtype=float).reshape(len(nodes), L),
            edges=tuple(Edge(int(e["u"]), int(e["v"]), EdgeType[e["type"]], float(e["weight"]))
                        for e in d["edges"]),
            target_nodes=tuple(int(t) for t in d["target_nodes"]),
        )


def build_graph(topology: Topology, params: ChannelParams | None = None,
                settings: GraphSettings | None = None) -> HeteroGraph:
    """Nodes follow vehicle order; feature column j counts blockers toward target j."""
    params = params or ChannelParams()
    settings = settings or GraphSettings()
    n = len(topology.vehicles)
    types = tuple(_NODE_OF_ROLE[v.role] for v in topology.vehicles)
    targets = topology.targets
    feats = np.zeros((n, len(targets)))
    for v in range(n):
        for j, t in enumerate(targets):
            if v == t:
                continue
            if settings.feature_rule == "beam":
                feats[v, j] = beam_blocker_count(topology, v, t)
            else:
                feats[v, j] = los_blocker_count(topology, v, t, settings.blocker_radius)

    dist = pairwise_distances(topology.positions)
    spv = topology.spvs
    rng_limit = settings.edge_range_m
    edges = []

    def add(u, v, etype):
        if rng_limit is not None and dist[u, v] > rng_limit:
            return
        edges.append(Edge(u, v, etype, float(path_gain(params, dist[u, v]))))

    for a_i, a in enumerate(spv):
        for b in spv[a_i + 1:]:
            add(a, b, EdgeType.I)
        for m in topology.comm:
            add(a, m, EdgeType.SC)
        for s in topology.sense:
            add(a, s, EdgeType.SS)
    return HeteroGraph(types, tuple(v.id for v in topology.vehicles), feats, tuple(edges), tuple(targets))


@dataclass(frozen=True)
class SampledNeighborhood:
    source: int
    first_hop: tuple[Neighbor, ...]
    second_hop: tuple[tuple[Neighbor, ...], ...]  # aligned with first_hop

    def typed(self, etype: EdgeType) -> list[Neighbor]:
        return [nb for nb in self.first_hop if nb.type == etype]

    @property
    def second_hop_size(self) -> int:
        return sum(len(x) for x in self.second_hop)

    def to_dict(self) -> dict:
        return {"source": self.source,
                "first_hop": [nb.node for nb in self.first_hop],
                "second_hop": [[nb.node for nb in hop] for hop in self.second_hop]}

    @classmethod
    def from_dict(cls, graph: HeteroGraph, d: dict) -> "SampledNeighborhood":
        src = int(d["source"])

        def nbr(u, v):
            for nb in graph.neighbors(u):
                if nb.node == v:
                    return nb
            raise KeyError((u, v))

        first = tuple(nbr(src, v) for v in d["first_hop"])
        second = tuple(tuple(nbr(f.node, v) for v in hop) for f, hop in zip(first, d["second_hop"]))
        return cls(src, first, second)


def _draw(rng: np.random.Generator, items: list, size: int) -> list:
    if size >= len(items):
        size = len(items)
    idx = rng.choice(len(items), size=size, replace=False) if size else []
    return [items[i] for i in idx]


def sample_neighborhood(graph: HeteroGraph, source: int, s1: int, s2: int,
                        rng: np.random.Generator, per_node: bool = False) -> SampledNeighborhood:
    """Uniform two-hop sampling without replacement, truncated at the degree.

    With ``per_node`` False the second-hop budget ``s2`` is shared by the
    first-hop nodes round-robin; otherwise each first-hop node gets ``s2``.
    Second-hop lists never contain the source.
    """
    first = _draw(rng, graph.neighbors(source), s1)
    pools = [[nb for nb in graph.neighbors(f.node) if nb.node != source] for f in first]
    if per_node:
        quota = [min(s2, len(p)) for p in pools]
    else:
        quota = [0] * len(first)
        left = s2
        while left > 0 and any(q < len(p) for q, p in zip(quota, pools)):
            for j, p in enumerate(pools):
                if left and quota[j] < len(p):
                    quota[j] += 1
                    left -= 1
    second = tuple(tuple(_draw(rng, p, q)) for p, q in zip(pools, quota))
    return SampledNeighborhood(source, tuple(first), second)
