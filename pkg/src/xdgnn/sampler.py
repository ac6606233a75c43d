"""Leakage-safe neighbor sampling.

`sample_fanout` draws a layered block for message passing: per (node,
edge type, layer), at most `fanout` neighbors uniformly without replacement
from the neighbors visible strictly before the cutoff. `sample_recent_k`
returns the chronologically most recent engagement neighbors for the
temporal aggregator.

Both are deterministic given their seed, and stateless: concurrent calls
over a shared finalized graph are safe. Same-type relations (affinity) are
traversed source-side; they are materialized in both directions, so nothing
is lost.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .graph_store import NO_TS, EdgeClass, HeteroGraph, NodeRef, SchemaViolation


@dataclass(frozen=True)
class FanoutSpec:
    """Per-layer edge-type fanouts; layer 0 expands the seeds."""
    layers: tuple[tuple[tuple[str, int], ...], ...]

    @staticmethod
    def uniform(edge_types: Sequence[str], fanout: int, num_layers: int) -> "FanoutSpec":
        per_layer = tuple(sorted((et, fanout) for et in edge_types))
        return FanoutSpec(tuple(per_layer for _ in range(num_layers)))

    @staticmethod
    def from_dicts(layer_dicts: Sequence[dict[str, int]]) -> "FanoutSpec":
        return FanoutSpec(tuple(tuple(sorted(d.items())) for d in layer_dicts))

    @property
    def num_layers(self) -> int:
        return len(self.layers)


@dataclass
class BlockLayer:
    dst: list[NodeRef]
    # parallel to dst: sampled (src, edge_type, timestamp-or-None) triples
    samples: list[list[tuple[NodeRef, str, Optional[int]]]]

    def sources(self) -> list[NodeRef]:
        return [src for cell in self.samples for (src, _, _) in cell]


@dataclass
class SampledBlock:
    before_ts: Optional[int]
    layers: list[BlockLayer]  # layers[0].dst == seeds; layer l+1 expands layer l's sources


def _sample_cell(graph: HeteroGraph, node: NodeRef, edge_type: str, fanout: int,
                 before_ts: Optional[int], rng: np.random.Generator):
    ids, ts, nbr_type = graph.neighbor_slice(node, edge_type, before_ts)
    m = ids.shape[0]
    if m == 0 or fanout <= 0:
        return []
    if m > fanout:
        keep = np.sort(rng.choice(m, size=fanout, replace=False))
        ids, ts = ids[keep], ts[keep]
    return [(NodeRef(nbr_type, int(i)), edge_type, None if t == NO_TS else int(t))
            for i, t in zip(ids, ts)]


def sample_fanout(graph: HeteroGraph, seeds: Sequence[NodeRef], spec: FanoutSpec,
                  before_ts: Optional[int], rng_seed: int) -> SampledBlock:
    """Layered uniform fanout sampling under the temporal cutoff.

    Edge types in the spec that do not touch a node's type are skipped for
    that node. Nodes with no valid neighbors yield empty cells.
    """
    for s in seeds:
        graph._check_node(s)
    rng = np.random.default_rng(np.random.PCG64(rng_seed))
    layers: list[BlockLayer] = []
    frontier = list(seeds)
    for layer_fanouts in spec.layers:
        samples: list[list[tuple[NodeRef, str, Optional[int]]]] = []
        for node in frontier:
            cell: list[tuple[NodeRef, str, Optional[int]]] = []
            for edge_type, fanout in layer_fanouts:
                decl = graph.schema.edge_type(edge_type)
                if node.node_type not in (decl.src, decl.dst):
                    continue
                cell.extend(_sample_cell(graph, node, edge_type, fanout, before_ts, rng))
            samples.append(cell)
        layer = BlockLayer(frontier, samples)
        layers.append(layer)
        frontier = layer.sources()
    return SampledBlock(before_ts, layers)


def sample_recent_k(graph: HeteroGraph, member: NodeRef, edge_type: str, k: int,
                    before_ts: Optional[int]) -> list[tuple[NodeRef, int]]:
    """The k most recent neighbors strictly before the cutoff, ascending by time.

    Only engagement edge types qualify: they are the class that guarantees a
    timestamp on every edge. Equal timestamps break ties by neighbor local id,
    keeping the selection deterministic.
    """
    decl = graph.schema.edge_type(edge_type)
    if decl.edge_class != EdgeClass.ENGAGEMENT:
        raise SchemaViolation(f"recent-k requires a timestamped engagement edge type, "
                              f"got {edge_type!r} ({decl.edge_class.value})")
    if k <= 0:
        return []
    ids, ts, nbr_type = graph.neighbor_slice(member, edge_type, before_ts)
    ids, ts = ids[-k:], ts[-k:]  # stored order is (timestamp, neighbor id) ascending
    return [(NodeRef(nbr_type, int(i)), int(t)) for i, t in zip(ids, ts)]


def sample_recent_multi(graph: HeteroGraph, member: NodeRef, edge_types: Sequence[str],
                        k: int, before_ts: Optional[int]) -> list[tuple[NodeRef, int]]:
    """Recent-k across several engagement edge types, merged chronologically."""
    merged: list[tuple[int, str, int, NodeRef]] = []
    for et in edge_types:
        for ref, t in sample_recent_k(graph, member, et, k, before_ts):
            merged.append((t, et, ref.local_id, ref))
    merged.sort(key=lambda q: (q[0], q[1], q[2]))
    return [(ref, t) for (t, _, _, ref) in merged[-k:]] if k > 0 else []
