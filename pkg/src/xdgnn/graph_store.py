"""Immutable heterogeneous temporal graph with typed nodes, typed edges and
two-kind node features.

Edges fall into three classes:

- engagement: directed member->content interactions, always timestamped
- affinity:   member<->member ties, materialized in both directions at insert
- intrinsic:  static / slowly-changing attribute edges, timestamp optional

Adjacency is finalized into CSR arrays per edge type, indexed both by source
and by destination, with per-neighbor timestamps sorted ascending
(untimestamped edges order first). A finalized graph is immutable and safe
for unrestricted concurrent reads.

File format (magic ``XDGG``): see `save_graph` for the exact layout; a
CRC32 over the body guards against truncation and bit rot.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

MAGIC = b"XDGG"
FORMAT_VERSION = 1
NO_TS = -(2 ** 63)  # sentinel for "edge carries no timestamp"; sorts first


class GraphError(Exception):
    pass


class DuplicateName(GraphError):
    pass


class UnknownNodeType(GraphError):
    pass


class SchemaViolation(GraphError):
    pass


class MissingTimestamp(GraphError):
    pass


class FormatError(GraphError):
    pass


class EdgeClass(str, Enum):
    ENGAGEMENT = "engagement"
    AFFINITY = "affinity"
    INTRINSIC = "intrinsic"


class NodeRef(NamedTuple):
    node_type: str
    local_id: int


@dataclass(frozen=True)
class NodeTypeDecl:
    name: str
    dense_dim: int = 0
    categorical: tuple[tuple[str, int], ...] = ()  # (field name, cardinality)


@dataclass(frozen=True)
class EdgeTypeDecl:
    name: str
    src: str
    dst: str
    edge_class: EdgeClass


@dataclass(frozen=True)
class Schema:
    node_types: tuple[NodeTypeDecl, ...]
    edge_types: tuple[EdgeTypeDecl, ...]

    def __post_init__(self):
        seen: set[str] = set()
        for nt in self.node_types:
            if nt.name in seen:
                raise DuplicateName(f"node type {nt.name!r} declared twice")
            seen.add(nt.name)
        by_name = {nt.name for nt in self.node_types}
        eseen: set[str] = set()
        for et in self.edge_types:
            if et.name in eseen:
                raise DuplicateName(f"edge type {et.name!r} declared twice")
            eseen.add(et.name)
            for side in (et.src, et.dst):
                if side not in by_name:
                    raise UnknownNodeType(f"edge type {et.name!r} references unregistered node type {side!r}")

    def node_type(self, name: str) -> NodeTypeDecl:
        for nt in self.node_types:
            if nt.name == name:
                return nt
        raise UnknownNodeType(f"unregistered node type {name!r}")

    def edge_type(self, name: str) -> EdgeTypeDecl:
        for et in self.edge_types:
            if et.name == name:
                return et
        raise SchemaViolation(f"unregistered edge type {name!r}")

    def has_edge_type(self, name: str) -> bool:
        return any(et.name == name for et in self.edge_types)

    def to_json(self) -> str:
        obj = {
            "node_types": [
                {"name": nt.name, "dense_dim": nt.dense_dim,
                 "categorical": [[f, c] for f, c in nt.categorical]}
                for nt in self.node_types
            ],
            "edge_types": [
                {"name": et.name, "src": et.src, "dst": et.dst, "class": et.edge_class.value}
                for et in self.edge_types
            ],
        }
        return json.dumps(obj, sort_keys=True, separators=(",", ":"))

    @staticmethod
    def from_json(blob: str) -> "Schema":
        obj = json.loads(blob)
        nts = tuple(
            NodeTypeDecl(d["name"], d["dense_dim"], tuple((f, c) for f, c in d["categorical"]))
            for d in obj["node_types"]
        )
        ets = tuple(
            EdgeTypeDecl(d["name"], d["src"], d["dst"], EdgeClass(d["class"]))
            for d in obj["edge_types"]
        )
        return Schema(nts, ets)


def register_schema(node_type_decls: Sequence[NodeTypeDecl],
                    edge_type_decls: Sequence[EdgeTypeDecl]) -> Schema:
    """Validate and freeze a schema; all subsequent inserts check against it."""
    return Schema(tuple(node_type_decls), tuple(edge_type_decls))


@dataclass
class TemporalEdge:
    src: NodeRef
    dst: NodeRef
    edge_type: str
    edge_class: EdgeClass
    timestamp: Optional[int] = None


@dataclass
class NodeFeatures:
    dense: np.ndarray
    categorical: list[tuple[str, int]] = field(default_factory=list)


class _Adjacency(NamedTuple):
    indptr: np.ndarray    # (n_index_side + 1,) int64
    nbr_ids: np.ndarray   # (n_edges,) int64, neighbor local ids
    ts: np.ndarray        # (n_edges,) int64, NO_TS when absent


class GraphBuilder:
    """Single-writer accumulator; `finalize()` produces the immutable graph."""

    def __init__(self, schema: Schema):
        self.schema = schema
        self._finalized = False
        self._counts = {nt.name: 0 for nt in schema.node_types}
        self._dense: dict[str, list[np.ndarray]] = {nt.name: [] for nt in schema.node_types}
        self._cats: dict[str, dict[str, list[int]]] = {
            nt.name: {f: [] for f, _ in nt.categorical} for nt in schema.node_types
        }
        self._edges: dict[str, list[tuple[int, int, int]]] = {et.name: [] for et in schema.edge_types}

    def _check_open(self):
        if self._finalized:
            raise GraphError("builder already finalized")

    def add_node(self, node_type: str, dense: Optional[np.ndarray] = None,
                 categorical: Optional[dict[str, int]] = None) -> NodeRef:
        self._check_open()
        decl = self.schema.node_type(node_type)
        vec = np.zeros(decl.dense_dim, dtype=np.float32) if dense is None \
            else np.asarray(dense, dtype=np.float32)
        if vec.shape != (decl.dense_dim,):
            raise SchemaViolation(
                f"dense feature length {vec.shape} != declared ({decl.dense_dim},) for {node_type!r}")
        cats = categorical or {}
        for f, card in decl.categorical:
            v = int(cats.get(f, 0))
            if not (0 <= v < card):
                raise SchemaViolation(f"category {f}={v} outside cardinality {card} for {node_type!r}")
            self._cats[node_type][f].append(v)
        unknown = set(cats) - {f for f, _ in decl.categorical}
        if unknown:
            raise SchemaViolation(f"unknown categorical fields {sorted(unknown)} for {node_type!r}")
        self._dense[node_type].append(vec)
        idx = self._counts[node_type]
        self._counts[node_type] += 1
        return NodeRef(node_type, idx)

    def add_nodes(self, node_type: str, dense: np.ndarray,
                  categorical: Optional[dict[str, np.ndarray]] = None) -> int:
        """Bulk insert; returns the local id of the first inserted node."""
        self._check_open()
        decl = self.schema.node_type(node_type)
        dense = np.asarray(dense, dtype=np.float32)
        if dense.ndim != 2 or dense.shape[1] != decl.dense_dim:
            raise SchemaViolation(f"dense matrix {dense.shape} != (n, {decl.dense_dim}) for {node_type!r}")
        start = self._counts[node_type]
        n = dense.shape[0]
        cats = categorical or {}
        for f, card in decl.categorical:
            col = np.asarray(cats.get(f, np.zeros(n, dtype=np.int32)), dtype=np.int64)
            if col.shape != (n,):
                raise SchemaViolation(f"categorical column {f} has shape {col.shape}, want ({n},)")
            if col.size and (col.min() < 0 or col.max() >= card):
                raise SchemaViolation(f"category {f} outside cardinality {card} for {node_type!r}")
            self._cats[node_type][f].extend(int(v) for v in col)
        for row in dense:
            self._dense[node_type].append(row)
        self._counts[node_type] += n
        return start

    def ensure_node(self, node_type: str, local_id: int):
        """Grow the node table with zero-feature rows up through local_id (TSV ingest)."""
        self._check_open()
        decl = self.schema.node_type(node_type)
        while self._counts[node_type] <= local_id:
            self._dense[node_type].append(np.zeros(decl.dense_dim, dtype=np.float32))
            for f, _ in decl.categorical:
                self._cats[node_type][f].append(0)
            self._counts[node_type] += 1

    def add_edge(self, edge: TemporalEdge):
        """Record one edge; affinity edges are materialized in both directions."""
        self._check_open()
        decl = self.schema.edge_type(edge.edge_type)
        if edge.edge_class != decl.edge_class:
            raise SchemaViolation(
                f"edge class {edge.edge_class} != declared {decl.edge_class} for {edge.edge_type!r}")
        if edge.src.node_type != decl.src or edge.dst.node_type != decl.dst:
            raise SchemaViolation(
                f"{edge.edge_type!r} expects {decl.src}->{decl.dst}, "
                f"got {edge.src.node_type}->{edge.dst.node_type}")
        for ref in (edge.src, edge.dst):
            if not (0 <= ref.local_id < self._counts[ref.node_type]):
                raise SchemaViolation(f"node {ref} does not exist")
        if decl.edge_class == EdgeClass.ENGAGEMENT and edge.timestamp is None:
            raise MissingTimestamp(f"engagement edge {edge.edge_type!r} requires a timestamp")
        ts = NO_TS if edge.timestamp is None else int(edge.timestamp)
        self._edges[edge.edge_type].append((edge.src.local_id, edge.dst.local_id, ts))
        if decl.edge_class == EdgeClass.AFFINITY:
            if decl.src != decl.dst:
                raise SchemaViolation(f"affinity edge type {edge.edge_type!r} must connect one node type")
            self._edges[edge.edge_type].append((edge.dst.local_id, edge.src.local_id, ts))

    def finalize(self) -> "HeteroGraph":
        self._check_open()
        self._finalized = True
        node_dense: dict[str, np.ndarray] = {}
        node_cats: dict[str, dict[str, np.ndarray]] = {}
        for nt in self.schema.node_types:
            rows = self._dense[nt.name]
            mat = np.stack(rows).astype(np.float32) if rows else np.zeros((0, nt.dense_dim), np.float32)
            node_dense[nt.name] = mat
            node_cats[nt.name] = {
                f: np.asarray(vals, dtype=np.int32) for f, vals in self._cats[nt.name].items()
            }
        out_adj: dict[str, _Adjacency] = {}
        in_adj: dict[str, _Adjacency] = {}
        for et in self.schema.edge_types:
            triples = self._edges[et.name]
            if triples:
                arr = np.asarray(triples, dtype=np.int64)
                src, dst, ts = arr[:, 0], arr[:, 1], arr[:, 2]
            else:
                src = dst = ts = np.zeros(0, dtype=np.int64)
            n_src = self._counts[et.src]
            n_dst = self._counts[et.dst]
            out_adj[et.name] = _build_csr(src, dst, ts, n_src)
            in_adj[et.name] = _build_csr(dst, src, ts, n_dst)
        return HeteroGraph(self.schema, node_dense, node_cats, out_adj, in_adj)


def _build_csr(index_side: np.ndarray, nbr_side: np.ndarray, ts: np.ndarray, n_index: int) -> _Adjacency:
    # stable (index node, timestamp asc, neighbor id) ordering; NO_TS sorts first
    order = np.lexsort((nbr_side, ts, index_side))
    nbr = np.ascontiguousarray(nbr_side[order])
    tss = np.ascontiguousarray(ts[order])
    counts = np.bincount(index_side, minlength=n_index) if index_side.size else np.zeros(n_index, np.int64)
    indptr = np.zeros(n_index + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    for a in (indptr, nbr, tss):
        a.setflags(write=False)
    return _Adjacency(indptr, nbr, tss)


class HeteroGraph:
    """Finalized, immutable typed multigraph."""

    def __init__(self, schema: Schema, node_dense, node_cats, out_adj, in_adj):
        self.schema = schema
        self._dense = node_dense
        self._cats = node_cats
        self._out = out_adj
        self._in = in_adj
        for mat in self._dense.values():
            mat.setflags(write=False)
        for cols in self._cats.values():
            for col in cols.values():
                col.setflags(write=False)

    # -- counts ------------------------------------------------------------

    def num_nodes(self, node_type: str) -> int:
        self.schema.node_type(node_type)
        return self._dense[node_type].shape[0]

    def edge_count(self, edge_type: str) -> int:
        self.schema.edge_type(edge_type)
        return int(self._out[edge_type].nbr_ids.shape[0])

    def total_edges(self) -> int:
        return sum(self.edge_count(et.name) for et in self.schema.edge_types)

    def summary(self) -> dict:
        return {
            "nodes": {nt.name: self.num_nodes(nt.name) for nt in self.schema.node_types},
            "edges": {et.name: self.edge_count(et.name) for et in self.schema.edge_types},
        }

    # -- features ----------------------------------------------------------

    def dense_table(self, node_type: str) -> np.ndarray:
        self.schema.node_type(node_type)
        return self._dense[node_type]

    def cat_table(self, node_type: str, fld: str) -> np.ndarray:
        return self._cats[node_type][fld]

    def node_features(self, ref: NodeRef) -> NodeFeatures:
        self._check_node(ref)
        cats = [(f, int(self._cats[ref.node_type][f][ref.local_id]))
                for f, _ in self.schema.node_type(ref.node_type).categorical]
        return NodeFeatures(self._dense[ref.node_type][ref.local_id], cats)

    def _check_node(self, ref: NodeRef):
        if not (0 <= ref.local_id < self.num_nodes(ref.node_type)):
            raise SchemaViolation(f"node {ref} does not exist")

    # -- adjacency ---------------------------------------------------------

    def direction_for(self, node_type: str, edge_type: str) -> str:
        """Which side of edge_type a node of node_type sits on ('out' = node is src)."""
        decl = self.schema.edge_type(edge_type)
        if node_type == decl.src:
            return "out"
        if node_type == decl.dst:
            return "in"
        raise SchemaViolation(f"node type {node_type!r} is not an endpoint of {edge_type!r}")

    def adjacency(self, edge_type: str, direction: str) -> _Adjacency:
        self.schema.edge_type(edge_type)
        return (self._out if direction == "out" else self._in)[edge_type]

    def neighbor_slice(self, node: NodeRef, edge_type: str,
                       before_ts: Optional[int] = None) -> tuple[np.ndarray, np.ndarray, str]:
        """(neighbor ids, timestamps, neighbor node type) honoring the cutoff.

        Timestamped edges must be strictly earlier than before_ts; untimestamped
        edges always pass. Ordering is timestamp ascending, untimestamped first.
        """
        self._check_node(node)
        decl = self.schema.edge_type(edge_type)
        direction = self.direction_for(node.node_type, edge_type)
        adj = self.adjacency(edge_type, direction)
        nbr_type = decl.dst if direction == "out" else decl.src
        lo, hi = adj.indptr[node.local_id], adj.indptr[node.local_id + 1]
        ids = adj.nbr_ids[lo:hi]
        ts = adj.ts[lo:hi]
        if before_ts is not None:
            cut = int(np.searchsorted(ts, int(before_ts), side="left"))
            ids, ts = ids[:cut], ts[:cut]
        return ids, ts, nbr_type

    def neighbors(self, node: NodeRef, edge_type: str,
                  before_ts: Optional[int] = None) -> list[tuple[NodeRef, Optional[int]]]:
        ids, ts, nbr_type = self.neighbor_slice(node, edge_type, before_ts)
        return [(NodeRef(nbr_type, int(i)), None if t == NO_TS else int(t))
                for i, t in zip(ids, ts)]

    # -- derived graphs ------------------------------------------------------

    def restrict_edge_types(self, keep: Iterable[str]) -> "HeteroGraph":
        """Same nodes/features, edge set restricted to `keep` (ablation graphs)."""
        keep = list(keep)
        for name in keep:
            self.schema.edge_type(name)
        sub_schema = Schema(self.schema.node_types,
                            tuple(et for et in self.schema.edge_types if et.name in keep))
        out = {name: self._out[name] for name in (et.name for et in sub_schema.edge_types)}
        inn = {name: self._in[name] for name in (et.name for et in sub_schema.edge_types)}
        return HeteroGraph(sub_schema, self._dense, self._cats, out, inn)


def neighbors(graph: HeteroGraph, node: NodeRef, edge_type: str,
              before_ts: Optional[int] = None) -> list[tuple[NodeRef, Optional[int]]]:
    return graph.neighbors(node, edge_type, before_ts)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _pack_arr(buf: io.BytesIO, arr: np.ndarray, dtype: str):
    buf.write(np.ascontiguousarray(arr, dtype=np.dtype(dtype).newbyteorder("<")).tobytes())


def save_graph(graph: HeteroGraph, path: str):
    """Write the bit-exact binary format.

    Layout: magic "XDGG" | u16 version | body | u32 CRC32(body), where body is
    u32 schema-json length + schema json, then per node type (schema order):
    u64 count, u32 dense dim, f32 features, i32 categorical columns; then per
    edge type (schema order): u64 edge count, u64 CSR offsets (by source),
    u64 neighbor ids, i64 timestamps (NO_TS sentinel for absent).
    """
    body = io.BytesIO()
    blob = graph.schema.to_json().encode()
    body.write(struct.pack("<I", len(blob)))
    body.write(blob)
    for nt in graph.schema.node_types:
        dense = graph.dense_table(nt.name)
        body.write(struct.pack("<QI", dense.shape[0], nt.dense_dim))
        _pack_arr(body, dense, "f4")
        for f, _ in nt.categorical:
            _pack_arr(body, graph.cat_table(nt.name, f), "i4")
    for et in graph.schema.edge_types:
        adj = graph.adjacency(et.name, "out")
        body.write(struct.pack("<Q", adj.nbr_ids.shape[0]))
        _pack_arr(body, adj.indptr, "u8")
        _pack_arr(body, adj.nbr_ids, "u8")
        _pack_arr(body, adj.ts, "i8")
    payload = body.getvalue()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", FORMAT_VERSION))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("truncated file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))

    def arr(self, count: int, dtype: str) -> np.ndarray:
        dt = np.dtype(dtype).newbyteorder("<")
        raw = self.read(count * dt.itemsize)
        return np.frombuffer(raw, dtype=dt).astype(dtype)


def load_graph(path: str) -> HeteroGraph:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 10:
        raise FormatError("truncated file")
    if data[:4] != MAGIC:
        raise FormatError(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack("<H", data[4:6])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version {version}")
    payload, crc_bytes = data[6:-4], data[-4:]
    (crc_stored,) = struct.unpack("<I", crc_bytes)
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise FormatError("checksum mismatch")
    r = _Reader(payload)
    (blob_len,) = r.unpack("<I")
    schema = Schema.from_json(r.read(blob_len).decode())
    node_dense: dict[str, np.ndarray] = {}
    node_cats: dict[str, dict[str, np.ndarray]] = {}
    for nt in schema.node_types:
        count, dense_dim = r.unpack("<QI")
        if dense_dim != nt.dense_dim:
            raise FormatError(f"dense dim mismatch for {nt.name!r}")
        node_dense[nt.name] = r.arr(count * dense_dim, "f4").reshape(count, dense_dim)
        node_cats[nt.name] = {f: r.arr(count, "i4") for f, _ in nt.categorical}
    out_adj: dict[str, _Adjacency] = {}
    in_adj: dict[str, _Adjacency] = {}
    for et in schema.edge_types:
        (edge_count,) = r.unpack("<Q")
        n_src = node_dense[et.src].shape[0]
        n_dst = node_dense[et.dst].shape[0]
        indptr = r.arr(n_src + 1, "u8").astype(np.int64)
        nbr = r.arr(edge_count, "u8").astype(np.int64)
        ts = r.arr(edge_count, "i8")
        for a in (indptr, nbr, ts):
            a.setflags(write=False)
        out_adj[et.name] = _Adjacency(indptr, nbr, ts)
        # rebuild the destination index deterministically from the source CSR
        src_of_edge = np.repeat(np.arange(n_src, dtype=np.int64), np.diff(indptr))
        in_adj[et.name] = _build_csr(nbr, src_of_edge, ts, n_dst)
    if r.pos != len(payload):
        raise FormatError(f"{len(payload) - r.pos} trailing bytes")
    return HeteroGraph(schema, node_dense, node_cats, out_adj, in_adj)


# ---------------------------------------------------------------------------
# TSV ingestion: edge_type<TAB>src_id<TAB>dst_id<TAB>timestamp_or_dash
# ---------------------------------------------------------------------------

class TsvFormatError(GraphError):
    def __init__(self, line_no: int, msg: str):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


def ingest_edge_tsv(builder: GraphBuilder, lines: Iterable[str]):
    """Parse edge lines into the builder, auto-growing zero-feature nodes."""
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise TsvFormatError(line_no, f"expected 4 tab-separated fields, got {len(parts)}")
        et_name, src_s, dst_s, ts_s = parts
        if not builder.schema.has_edge_type(et_name):
            raise TsvFormatError(line_no, f"unregistered edge type {et_name!r}")
        decl = builder.schema.edge_type(et_name)
        try:
            src_id, dst_id = int(src_s), int(dst_s)
        except ValueError:
            raise TsvFormatError(line_no, f"non-integer node id in {src_s!r}/{dst_s!r}")
        if src_id < 0 or dst_id < 0:
            raise TsvFormatError(line_no, "negative node id")
        if ts_s == "-":
            ts = None
        else:
            try:
                ts = int(ts_s)
            except ValueError:
                raise TsvFormatError(line_no, f"bad timestamp {ts_s!r}")
        builder.ensure_node(decl.src, src_id)
        builder.ensure_node(decl.dst, dst_id)
        try:
            builder.add_edge(TemporalEdge(NodeRef(decl.src, src_id), NodeRef(decl.dst, dst_id),
                                          et_name, decl.edge_class, ts))
        except GraphError as e:
            raise TsvFormatError(line_no, str(e))


# Canonical five node types / five edge types of the production graph the
# desk-scale fixtures mirror.
def reference_schema(dense_dims: Optional[dict[str, int]] = None) -> Schema:
    dims = {"member": 8, "company": 8, "notification": 8, "post": 8, "email": 8}
    if dense_dims:
        dims.update(dense_dims)
    node_types = [NodeTypeDecl(n, dims[n]) for n in ("member", "company", "notification", "post", "email")]
    edge_types = [
        EdgeTypeDecl("notification-member-affinity", "member", "member", EdgeClass.AFFINITY),
        EdgeTypeDecl("feed-member-affinity", "member", "member", EdgeClass.AFFINITY),
        EdgeTypeDecl("member-click-post", "member", "post", EdgeClass.ENGAGEMENT),
        EdgeTypeDecl("member-click-notification", "member", "notification", EdgeClass.ENGAGEMENT),
        EdgeTypeDecl("member-click-email", "member", "email", EdgeClass.ENGAGEMENT),
    ]
    return register_schema(node_types, edge_types)
