"""Directed property graph stored in the ``G/`` subspace of a :class:`KVStore`.

Key layout (ids are 8-byte big-endian so scans come back in id order)::

    G/V/<vid>                 vertex record
    G/E/o/<out>/<in>/<eid>    edge record, indexed under its out-vertex
    G/E/i/<in>/<out>/<eid>    same edge record, indexed under its in-vertex
    G/X/<eid>                 edge locator: <out><in>

Keeping the far endpoint in the adjacency key lets one prefix scan answer
"edges of v" and a longer prefix answer "edges between v and w".

Records use a canonical length-prefixed encoding with properties sorted by
name; see :func:`encode_record`.

Every mutation emits a :class:`GraphChange` to the subscribed listeners,
synchronously and inside the mutating transaction, after the mutation is
buffered. Listeners may therefore read the post-change state through the
same transaction and add their own writes to its buffer.
"""
from __future__ import annotations

import functools
import struct
import threading
from collections import Counter
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Union

from .errors import NotFound
from .kvstore import KVStore, Transaction

Scalar = Union[str, int, bool]

OUT = "out"
IN = "in"
BOTH = "both"
DIRECTIONS = (OUT, IN, BOTH)

VERTEX_PREFIX = b"G/V/"
OUT_PREFIX = b"G/E/o/"
IN_PREFIX = b"G/E/i/"
EDGE_INDEX_PREFIX = b"G/X/"

ADD_VERTEX = "add-vertex"
DELETE_VERTEX = "delete-vertex"
ADD_EDGE = "add-edge"
DELETE_EDGE = "delete-edge"
VERTEX_PROP = "vertex-prop-change"
EDGE_PROP = "edge-prop-change"

_U16 = struct.Struct(">H")
_U32 = struct.Struct(">I")
_I64 = struct.Struct(">q")
_U64 = struct.Struct(">Q")
_EDGE_HEAD = struct.Struct(">QQQ")


def _id(n: int) -> bytes:
    return _U64.pack(n)


@dataclass(frozen=True)
class Vertex:
    id: int
    label: str
    props: dict = field(default_factory=dict)

    def with_prop(self, name: str, value: Scalar | None) -> "Vertex":
        props = dict(self.props)
        if value is None:
            props.pop(name, None)
        else:
            props[name] = value
        return replace(self, props=props)


@dataclass(frozen=True)
class Edge:
    id: int
    out_v: int
    in_v: int
    label: str
    props: dict = field(default_factory=dict)

    def with_prop(self, name: str, value: Scalar | None) -> "Edge":
        props = dict(self.props)
        if value is None:
            props.pop(name, None)
        else:
            props[name] = value
        return replace(self, props=props)

    def other(self, vid: int) -> int:
        return self.in_v if vid == self.out_v else self.out_v


@dataclass(frozen=True)
class GraphChange:
    """One write, with the state maintenance needs to reason about it.

    ``vertex`` / ``edge`` hold the element as it was *before* the change
    (for additions, the new element). For property changes ``old_value`` is
    None when the property is being added and ``new_value`` is None when it
    is being deleted. ``incident_edges`` is only set for ``delete-vertex``.
    """

    kind: str
    vertex: Vertex | None = None
    edge: Edge | None = None
    prop_name: str | None = None
    old_value: Scalar | None = None
    new_value: Scalar | None = None
    incident_edges: tuple[Edge, ...] = ()

    @property
    def subject(self) -> int:
        return self.vertex.id if self.vertex is not None else self.edge.id


# -- record encoding ---------------------------------------------------------

def _encode_scalar(value: Scalar) -> bytes:
    if isinstance(value, bool):
        return b"b\x01" if value else b"b\x00"
    if isinstance(value, int):
        return b"i" + _I64.pack(value)
    if isinstance(value, str):
        raw = value.encode()
        return b"s" + _U32.pack(len(raw)) + raw
    raise TypeError(f"unsupported property type {type(value).__name__}")


def encode_record(label: str, props: dict) -> bytes:
    """``u16 len, label, u16 count, (u16 len, name, tagged value)*``."""
    raw_label = label.encode()
    parts = [_U16.pack(len(raw_label)), raw_label, _U16.pack(len(props))]
    for name in sorted(props):
        raw = name.encode()
        parts.append(_U16.pack(len(raw)))
        parts.append(raw)
        parts.append(_encode_scalar(props[name]))
    return b"".join(parts)


def decode_record(buf: bytes, offset: int = 0) -> tuple[str, dict]:
    (n,) = _U16.unpack_from(buf, offset)
    offset += 2
    label = buf[offset:offset + n].decode()
    offset += n
    (count,) = _U16.unpack_from(buf, offset)
    offset += 2
    props = {}
    for _ in range(count):
        (n,) = _U16.unpack_from(buf, offset)
        offset += 2
        name = buf[offset:offset + n].decode()
        offset += n
        tag = buf[offset]
        offset += 1
        if tag == 0x62:  # b
            props[name] = buf[offset] == 1
            offset += 1
        elif tag == 0x69:  # i
            props[name] = _I64.unpack_from(buf, offset)[0]
            offset += 8
        else:
            (n,) = _U32.unpack_from(buf, offset)
            offset += 4
            props[name] = buf[offset:offset + n].decode()
            offset += n
    return label, props


def encode_edge(edge: Edge) -> bytes:
    return _EDGE_HEAD.pack(edge.id, edge.out_v, edge.in_v) + encode_record(edge.label, edge.props)


# Records are immutable once decoded (props are never mutated in place), so
# hot rows can be shared between readers.
@functools.lru_cache(maxsize=65536)
def decode_edge(buf: bytes) -> Edge:
    eid, out_v, in_v = _EDGE_HEAD.unpack_from(buf, 0)
    label, props = decode_record(buf, 24)
    return Edge(eid, out_v, in_v, label, props)


@functools.lru_cache(maxsize=65536)
def decode_vertex(vid: int, buf: bytes) -> Vertex:
    label, props = decode_record(buf)
    return Vertex(vid, label, props)


# -- id allocation -----------------------------------------------------------

class IdAllocator:
    """Per-store id source; ids consumed by aborted transactions are lost.

    It travels with the store when pickled, so ids of deleted elements are
    never handed out again.
    """

    def __init__(self, start: int = 1):
        self._next = start
        self._lock = threading.Lock()

    def __call__(self) -> int:
        with self._lock:
            n = self._next
            self._next += 1
            return n

    def reserve(self, n: int) -> None:
        """Never hand out ``n`` or anything below it."""
        with self._lock:
            self._next = max(self._next, n + 1)

    def __getstate__(self):
        return {"_next": self._next}

    def __setstate__(self, state):
        self._next = state["_next"]
        self._lock = threading.Lock()


def allocator_for(kv: KVStore) -> IdAllocator:
    alloc = kv.__dict__.get("id_allocator")
    if alloc is None:
        alloc = IdAllocator()
        top = 0
        for k, v in kv.items(VERTEX_PREFIX):
            top = max(top, _U64.unpack_from(k, len(VERTEX_PREFIX))[0])
        for k, v in kv.items(EDGE_INDEX_PREFIX):
            top = max(top, _U64.unpack_from(k, len(EDGE_INDEX_PREFIX))[0])
        alloc.reserve(top)
        kv.id_allocator = alloc
    return alloc


Listener = Callable[[Transaction, GraphChange], None]


class GraphStore:
    """Graph operations scoped to a caller-supplied transaction."""

    def __init__(self, kv: KVStore):
        self.kv = kv
        self._ids = allocator_for(kv)
        self._listeners: list[Listener] = []
        self.counters: Counter[str] = Counter()

    def subscribe(self, listener: Listener) -> None:
        self._listeners.append(listener)

    def unsubscribe(self, listener: Listener) -> None:
        self._listeners.remove(listener)

    def _emit(self, tx: Transaction, change: GraphChange) -> None:
        for listener in self._listeners:
            listener(tx, change)

    # -- reads -------------------------------------------------------------

    def get_vertex(self, tx: Transaction, vid: int) -> Vertex | None:
        self.counters["vertex_reads"] += 1
        buf = tx.get(VERTEX_PREFIX + _id(vid))
        return None if buf is None else decode_vertex(vid, buf)

    def vertex(self, tx: Transaction, vid: int) -> Vertex:
        v = self.get_vertex(tx, vid)
        if v is None:
            raise NotFound(f"vertex {vid}")
        return v

    def get_edge(self, tx: Transaction, eid: int) -> Edge | None:
        loc = tx.get(EDGE_INDEX_PREFIX + _id(eid))
        if loc is None:
            return None
        buf = tx.get(OUT_PREFIX + loc + _id(eid))
        return decode_edge(buf)

    def edge(self, tx: Transaction, eid: int) -> Edge:
        e = self.get_edge(tx, eid)
        if e is None:
            raise NotFound(f"edge {eid}")
        return e

    def vertices(self, tx: Transaction) -> list[Vertex]:
        n = len(VERTEX_PREFIX)
        return [decode_vertex(_U64.unpack_from(k, n)[0], v) for k, v in tx.range_scan(VERTEX_PREFIX)]

    def all_edges(self, tx: Transaction) -> list[Edge]:
        return [decode_edge(v) for _, v in tx.range_scan(OUT_PREFIX)]

    def edges(self, tx: Transaction, vid: int, direction: str = OUT, label: str | None = None) -> list[Edge]:
        """Incident edges of ``vid``; for ``both`` a self-loop appears once."""
        self.counters["adjacency_scans"] += 1
        found: dict[int, Edge] = {}
        if direction in (OUT, BOTH):
            for _, buf in tx.range_scan(OUT_PREFIX + _id(vid)):
                e = decode_edge(buf)
                found[e.id] = e
        if direction in (IN, BOTH):
            for _, buf in tx.range_scan(IN_PREFIX + _id(vid)):
                e = decode_edge(buf)
                found[e.id] = e
        edges = sorted(found.values(), key=lambda e: e.id) if direction == BOTH else list(found.values())
        if label is not None:
            edges = [e for e in edges if e.label == label]
        return edges

    def edges_between(self, tx: Transaction, root: int, leaf: int, direction: str) -> list[Edge]:
        """Edges that lead from ``root`` to ``leaf`` when traversed in ``direction``."""
        self.counters["pair_scans"] += 1
        found: dict[int, Edge] = {}
        if direction in (OUT, BOTH):
            for _, buf in tx.range_scan(OUT_PREFIX + _id(root) + _id(leaf)):
                e = decode_edge(buf)
                found[e.id] = e
        if direction in (IN, BOTH):
            for _, buf in tx.range_scan(IN_PREFIX + _id(root) + _id(leaf)):
                e = decode_edge(buf)
                found[e.id] = e
        return list(found.values())

    def neighbors(
        self,
        tx: Transaction,
        root: int,
        direction: str = OUT,
        edge_label: str | None = None,
        edge_pred: Callable[[Edge], bool] | None = None,
        leaf_pred: Callable[[Vertex], bool] | None = None,
        *,
        check_root: bool = True,
    ) -> list[int]:
        """Ascending ids of far vertices reached over qualifying edges.

        Each distinct far vertex of a qualifying edge is read once.
        """
        if check_root and self.get_vertex(tx, root) is None:
            raise NotFound(f"vertex {root}")
        candidates = set()
        for e in self.edges(tx, root, direction, edge_label):
            if edge_pred is None or edge_pred(e):
                candidates.add(e.in_v if e.out_v == root else e.out_v)
        if leaf_pred is None:
            return sorted(candidates)
        out = []
        for vid in sorted(candidates):
            leaf = self.get_vertex(tx, vid)
            if leaf is not None and leaf_pred(leaf):
                out.append(vid)
        return out

    # -- writes ------------------------------------------------------------

    def add_vertex(self, tx: Transaction, label: str, props: dict | None = None, *, vid: int | None = None) -> int:
        props = dict(props or {})
        if vid is None:
            vid = self._ids()
        else:
            if tx.get(VERTEX_PREFIX + _id(vid)) is not None:
                raise ValueError(f"vertex id {vid} already in use")
            self._ids.reserve(vid)
        tx.set(VERTEX_PREFIX + _id(vid), encode_record(label, props))
        self._emit(tx, GraphChange(ADD_VERTEX, vertex=Vertex(vid, label, props)))
        return vid

    def _put_edge(self, tx: Transaction, edge: Edge) -> None:
        buf = encode_edge(edge)
        o, i, e = _id(edge.out_v), _id(edge.in_v), _id(edge.id)
        tx.set(OUT_PREFIX + o + i + e, buf)
        tx.set(IN_PREFIX + i + o + e, buf)

    def add_edge(self, tx: Transaction, out_v: int, in_v: int, label: str, props: dict | None = None) -> Edge:
        for vid in {out_v, in_v}:
            if tx.get(VERTEX_PREFIX + _id(vid)) is None:
                raise NotFound(f"endpoint vertex {vid}")
        edge = Edge(self._ids(), out_v, in_v, label, dict(props or {}))
        self._put_edge(tx, edge)
        tx.set(EDGE_INDEX_PREFIX + _id(edge.id), _id(out_v) + _id(in_v))
        self._emit(tx, GraphChange(ADD_EDGE, edge=edge))
        return edge

    def delete_edge(self, tx: Transaction, eid: int) -> None:
        edge = self.edge(tx, eid)
        o, i, e = _id(edge.out_v), _id(edge.in_v), _id(edge.id)
        tx.delete(OUT_PREFIX + o + i + e)
        tx.delete(IN_PREFIX + i + o + e)
        tx.delete(EDGE_INDEX_PREFIX + e)
        self._emit(tx, GraphChange(DELETE_EDGE, edge=edge))

    def delete_vertex(self, tx: Transaction, vid: int) -> None:
        """Delete ``vid`` and, first, every incident edge (one event each)."""
        vertex = self.vertex(tx, vid)
        incident = tuple(self.edges(tx, vid, BOTH))
        for edge in incident:
            self.delete_edge(tx, edge.id)
        tx.delete(VERTEX_PREFIX + _id(vid))
        self._emit(tx, GraphChange(DELETE_VERTEX, vertex=vertex, incident_edges=incident))

    def set_vertex_property(self, tx: Transaction, vid: int, name: str, value: Scalar | None) -> bool:
        """Set (or with ``None`` delete) a property; returns False for a no-op."""
        vertex = self.vertex(tx, vid)
        old = vertex.props.get(name)
        if value is None and old is None:
            return False
        if value is not None and old is not None and type(old) is type(value) and old == value:
            return False
        new = vertex.with_prop(name, value)
        tx.set(VERTEX_PREFIX + _id(vid), encode_record(new.label, new.props))
        self._emit(tx, GraphChange(VERTEX_PROP, vertex=vertex, prop_name=name, old_value=old, new_value=value))
        return True

    def set_edge_property(self, tx: Transaction, eid: int, name: str, value: Scalar | None) -> bool:
        edge = self.edge(tx, eid)
        old = edge.props.get(name)
        if value is None and old is None:
            return False
        if value is not None and old is not None and type(old) is type(value) and old == value:
            return False
        self._put_edge(tx, edge.with_prop(name, value))
        self._emit(tx, GraphChange(EDGE_PROP, edge=edge, prop_name=name, old_value=old, new_value=value))
        return True


def apply_change(vertices: dict[int, Vertex], edges: dict[int, Edge], change: GraphChange) -> None:
    """Replay ``change`` onto a plain in-memory copy of a graph."""
    kind = change.kind
    if kind == ADD_VERTEX:
        vertices[change.vertex.id] = change.vertex
    elif kind == DELETE_VERTEX:
        del vertices[change.vertex.id]
    elif kind == ADD_EDGE:
        edges[change.edge.id] = change.edge
    elif kind == DELETE_EDGE:
        del edges[change.edge.id]
    elif kind == VERTEX_PROP:
        vid = change.vertex.id
        vertices[vid] = vertices[vid].with_prop(change.prop_name, change.new_value)
    elif kind == EDGE_PROP:
        eid = change.edge.id
        edges[eid] = edges[eid].with_prop(change.prop_name, change.new_value)
    else:
        raise ValueError(kind)


def snapshot(graph: GraphStore, tx: Transaction) -> tuple[dict[int, Vertex], dict[int, Edge]]:
    return {v.id: v for v in graph.vertices(tx)}, {e.id: e for e in graph.all_edges(tx)}


def load_jsonl(graph: GraphStore, lines: Iterable[str], aliases: dict[str, int] | None = None, batch: int = 5000) -> dict[str, int]:
    """Load the newline-delimited JSON ingest format.

    Vertex ids in the file are external aliases (stringified); returns the
    alias table mapping them to engine ids.
    """
    import json

    aliases = {} if aliases is None else aliases
    tx = graph.kv.begin()
    pending = 0
    for lineno, line in enumerate(lines, 1):
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        if rec["t"] == "v":
            aliases[str(rec["id"])] = graph.add_vertex(tx, rec["label"], rec.get("props") or {})
        elif rec["t"] == "e":
            try:
                out_v, in_v = aliases[str(rec["out"])], aliases[str(rec["in"])]
            except KeyError as exc:
                raise NotFound(f"line {lineno}: unknown vertex alias {exc.args[0]!r}") from None
            graph.add_edge(tx, out_v, in_v, rec["label"], rec.get("props") or {})
        else:
            raise ValueError(f"line {lineno}: unknown record type {rec['t']!r}")
        pending += 1
        if pending >= batch:
            tx.commit()
            tx = graph.kv.begin()
            pending = 0
    tx.commit()
    return aliases
