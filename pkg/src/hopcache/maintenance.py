"""Cache maintenance for read-write transactions.

A :class:`Maintainer` subscribes to a :class:`GraphStore` and, for every
change, works out which cache keys of each maintained template the change
can affect. Under write-around it deletes them. Under write-through it
edits the stored leaf list in place, and with pro-active refill it also
creates entries that come into existence.

Write-through edits do not replay the change arithmetically. For each
impacted ``(key, leaf)`` pair the leaf's membership is recomputed from the
transaction's post-change state (root passes the root predicate, leaf
passes the specialized leaf predicate, and at least one edge between them
passes the specialized edge predicate). That keeps parallel edges and
self-loops correct without special cases.

All work runs inside the mutating transaction, so cache edits commit or
abort together with the graph write.
"""
from __future__ import annotations

import json
import logging
from bisect import bisect_left, insort
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .cache import CacheStore
from .errors import Conflict
from .graphstore import (
    ADD_EDGE,
    ADD_VERTEX,
    BOTH,
    DELETE_EDGE,
    DELETE_VERTEX,
    EDGE_PROP,
    IN,
    OUT,
    VERTEX_PROP,
    Edge,
    GraphChange,
    GraphStore,
    Vertex,
)
from .kvstore import KVStore, Transaction
from .templates import CacheKey, SubQueryTemplate, execute_instance, instances_for_root, root_prefix

log = logging.getLogger(__name__)

WRITE_AROUND = "write-around"
WRITE_THROUGH = "write-through"
LAZY = "lazy"
PROACTIVE = "pro-active"

SUPERNODE_THRESHOLD = 1000


@dataclass(frozen=True)
class MaintenancePolicy:
    mode: str = WRITE_AROUND
    refill: str = LAZY

    def __post_init__(self):
        if self.mode not in (WRITE_AROUND, WRITE_THROUGH):
            raise ValueError(f"unknown maintenance mode {self.mode!r}")
        if self.refill not in (LAZY, PROACTIVE):
            raise ValueError(f"unknown refill {self.refill!r}")

    @classmethod
    def parse(cls, text: str) -> "MaintenancePolicy":
        """``write-around``, ``write-through``, ``write-through:lazy`` or ``write-through:proactive``."""
        mode, _, refill = text.partition(":")
        refill = {"": LAZY, "lazy": LAZY, "proactive": PROACTIVE, "pro-active": PROACTIVE}.get(refill, refill)
        return cls(mode, refill)

    @property
    def proactive(self) -> bool:
        return self.mode == WRITE_THROUGH and self.refill == PROACTIVE

    def __str__(self) -> str:
        if self.mode == WRITE_AROUND:
            return WRITE_AROUND
        return f"{WRITE_THROUGH}:{'proactive' if self.refill == PROACTIVE else 'lazy'}"


@dataclass
class ValueEdit:
    key: CacheKey
    added: tuple[int, ...] = ()
    removed: tuple[int, ...] = ()
    applied: bool = False  # False when the entry was absent


@dataclass
class ImpactReport:
    kind: str
    subject: int
    incident_count: int = 0
    keys_deleted: list[CacheKey] = field(default_factory=list)
    ranges_cleared: list[str] = field(default_factory=list)
    values_edited: list[ValueEdit] = field(default_factory=list)
    keys_created: list[CacheKey] = field(default_factory=list)

    def impacted_keys(self) -> set[CacheKey]:
        return set(self.keys_deleted) | {e.key for e in self.values_edited}

    def per_template(self) -> dict[str, tuple[int, int]]:
        """``{template: (distinct keys, ranges)}``."""
        out: dict[str, list[int]] = {}
        for k in self.impacted_keys():
            out.setdefault(k.template, [0, 0])[0] += 1
        for r in self.ranges_cleared:
            out.setdefault(r.split(":", 1)[0], [0, 0])[1] += 1
        return {t: (a, b) for t, (a, b) in out.items()}

    @property
    def empty(self) -> bool:
        return not (self.keys_deleted or self.ranges_cleared or self.values_edited or self.keys_created)

    def to_json(self) -> dict:
        return {
            "kind": self.kind,
            "subject": self.subject,
            "incident_count": self.incident_count,
            "keys_deleted": [str(k) for k in self.keys_deleted],
            "ranges_cleared": list(self.ranges_cleared),
            "values_edited": [
                {"key": str(e.key), "added": list(e.added), "removed": list(e.removed), "applied": e.applied}
                for e in self.values_edited
            ],
            "keys_created": [str(k) for k in self.keys_created],
        }

    def to_jsonl(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def impact_bound_check(change: GraphChange, report: ImpactReport) -> bool:
    """Whether ``report`` stays within the per-template key/range bounds for its change type."""
    L = report.incident_count
    for keys, ranges in report.per_template().values():
        kind = change.kind
        if kind in (ADD_EDGE, DELETE_EDGE):
            ok = keys <= 2 and ranges == 0
        elif kind == EDGE_PROP:
            limit = 4 if change.old_value is not None and change.new_value is not None else 2
            ok = keys <= limit and ranges == 0
        elif kind == DELETE_VERTEX:
            ok = keys <= L and ranges <= 1
        elif kind == VERTEX_PROP:
            ok = keys <= 2 * L and ranges <= 1
        else:
            ok = keys == 0 and ranges == 0
        if not ok:
            return False
    return True


# -- impact analysis -----------------------------------------------------------

def _pairs(template: SubQueryTemplate, edge: Edge) -> list[tuple[int, int]]:
    """(root, leaf) pairs an edge can serve for ``template``; at most two."""
    o, i = edge.out_v, edge.in_v
    if template.direction == OUT:
        return [(o, i)]
    if template.direction == IN:
        return [(i, o)]
    return [(o, i)] if o == i else [(o, i), (i, o)]


def _leaf_side_edges(template: SubQueryTemplate, vid: int, edges: Iterable[Edge]) -> Iterable[tuple[Edge, int]]:
    """Edges that reach ``vid`` as a leaf, paired with the root at the far end."""
    label = template.edge.label
    for e in edges:
        if label is not None and e.label != label:
            continue
        d = template.direction
        if (d in (OUT, BOTH)) and e.in_v == vid:
            yield e, e.out_v
        if (d in (IN, BOTH)) and e.out_v == vid and not (d == BOTH and e.in_v == vid):
            yield e, e.in_v


class Maintainer:
    """Graph listener applying a :class:`MaintenancePolicy`.

    The templates maintained for a transaction come from
    ``tx.annotations["maintained"]`` when present (a node's invalidation
    flags snapshotted at transaction start), else from ``templates()``.
    Each change's :class:`ImpactReport` is appended to
    ``tx.annotations["impact"]`` as ``(change, report)``.
    """

    def __init__(
        self,
        graph: GraphStore,
        cache: CacheStore,
        policy: MaintenancePolicy = MaintenancePolicy(),
        templates: Callable[[], Iterable[SubQueryTemplate]] | Iterable[SubQueryTemplate] = (),
    ):
        self.graph = graph
        self.cache = cache
        self.policy = policy
        self._templates = templates if callable(templates) else (lambda t=tuple(templates): t)
        self.enabled = True

    def attach(self) -> "Maintainer":
        self.graph.subscribe(self)
        return self

    def detach(self) -> None:
        self.graph.unsubscribe(self)

    def templates_for(self, tx: Transaction) -> Iterable[SubQueryTemplate]:
        maintained = tx.annotations.get("maintained")
        return self._templates() if maintained is None else maintained

    def __call__(self, tx: Transaction, change: GraphChange) -> None:
        if not self.enabled:
            return
        report = self.handle(tx, change)
        tx.annotations.setdefault("impact", []).append((change, report))

    def handle(self, tx: Transaction, change: GraphChange) -> ImpactReport:
        templates = list(self.templates_for(tx))
        kind = change.kind
        if kind == DELETE_VERTEX:
            return self.on_delete_vertex(tx, change, templates)
        if kind == VERTEX_PROP:
            return self.on_vertex_property_change(tx, change, templates)
        if kind in (ADD_EDGE, DELETE_EDGE):
            return self.on_edge_add_delete(tx, change, templates)
        if kind == EDGE_PROP:
            return self.on_edge_property_change(tx, change, templates)
        return ImpactReport(kind, change.subject)  # adding a vertex impacts nothing

    # -- per-change handlers ---------------------------------------------------

    def on_delete_vertex(self, tx, change, templates) -> ImpactReport:
        v = change.vertex
        report = ImpactReport(change.kind, v.id, incident_count=len(change.incident_edges))
        impacted: dict[CacheKey, int] = {}
        for t in templates:
            if t.root.matches(v):
                self._clear_root(tx, t, v.id, report, refill=False)
            self._keys_for_leaf(tx, t, v, change.incident_edges, impacted)
        self._act(tx, impacted, report)
        return report

    def on_vertex_property_change(self, tx, change, templates) -> ImpactReport:
        old = change.vertex
        new = old.with_prop(change.prop_name, change.new_value)
        name = change.prop_name
        report = ImpactReport(change.kind, old.id)
        impacted: dict[CacheKey, int] = {}
        incident: list[Edge] | None = None
        for t in templates:
            if t.root.references(name) and (t.root.matches(old) or t.root.matches(new)):
                self._clear_root(tx, t, old.id, report, refill=t.root.matches(new))
            if t.leaf.references(name):
                if incident is None:
                    incident = self.graph.edges(tx, old.id, BOTH)
                edges = [e for e in incident if t.edge.label is None or e.label == t.edge.label]
                self._keys_for_leaf(tx, t, old, edges, impacted)
                self._keys_for_leaf(tx, t, new, edges, impacted)
        if incident is None:
            incident = self.graph.edges(tx, old.id, BOTH) if report.ranges_cleared else []
        report.incident_count = len(incident)
        self._act(tx, impacted, report)
        return report

    def on_edge_add_delete(self, tx, change, templates) -> ImpactReport:
        e = change.edge
        report = ImpactReport(change.kind, e.id)
        impacted: dict[CacheKey, int] = {}
        for t in templates:
            self._handle_edge(tx, t, e, impacted)
        self._act(tx, impacted, report)
        return report

    def on_edge_property_change(self, tx, change, templates) -> ImpactReport:
        old = change.edge
        new = old.with_prop(change.prop_name, change.new_value)
        report = ImpactReport(change.kind, old.id)
        impacted: dict[CacheKey, int] = {}
        for t in templates:
            if not t.edge.references(change.prop_name):
                continue
            self._handle_edge(tx, t, old, impacted)
            self._handle_edge(tx, t, new, impacted)
        self._act(tx, impacted, report)
        return report

    # -- shared steps ----------------------------------------------------------

    def _vertex(self, tx, vid: int, cache: dict) -> Vertex | None:
        if vid not in cache:
            cache[vid] = self.graph.get_vertex(tx, vid)
        return cache[vid]

    def _handle_edge(self, tx, t: SubQueryTemplate, e: Edge, impacted: dict) -> None:
        if t.edge.label is not None and e.label != t.edge.label:
            return
        if not t.edge.matches(e):
            return
        seen: dict[int, Vertex | None] = {}
        for root_id, leaf_id in _pairs(t, e):
            root = self._vertex(tx, root_id, seen)
            leaf = self._vertex(tx, leaf_id, seen)
            if root is None or leaf is None:
                continue
            if t.root.matches(root) and t.leaf.matches(leaf):
                impacted[CacheKey(t.name, root_id, t.edge.extract(e), t.leaf.extract(leaf))] = leaf_id

    def _keys_for_leaf(self, tx, t: SubQueryTemplate, v: Vertex, edges, impacted: dict) -> None:
        if not t.leaf.matches(v):
            return
        wl = t.leaf.extract(v)
        seen: dict[int, Vertex | None] = {v.id: v}
        for e, root_id in _leaf_side_edges(t, v.id, edges):
            if not t.edge.matches(e):
                continue
            root = self._vertex(tx, root_id, seen)
            if root is not None and t.root.matches(root):
                impacted[CacheKey(t.name, root_id, t.edge.extract(e), wl)] = v.id

    def _clear_root(self, tx, t: SubQueryTemplate, vid: int, report: ImpactReport, refill: bool) -> None:
        prefix = root_prefix(t, vid)
        self.cache.clear_prefix(tx, prefix)
        report.ranges_cleared.append(prefix)
        if refill and self.policy.proactive:
            for key, ids in instances_for_root(tx, self.graph, t, vid).items():
                self.cache.put_entry(tx, key, ids)
                report.keys_created.append(key)

    def _act(self, tx, impacted: dict[CacheKey, int], report: ImpactReport) -> None:
        if not impacted:
            return
        cleared = tuple(report.ranges_cleared)
        if self.policy.mode == WRITE_AROUND:
            for key in impacted:
                if not str(key).startswith(cleared):
                    self.cache.delete_entry(tx, key)
                report.keys_deleted.append(key)
            return
        by_name = {t.name: t for t in self.templates_for(tx)}
        for key, leaf_id in impacted.items():
            if str(key).startswith(cleared):
                report.keys_deleted.append(key)  # already covered by the root clear
                continue
            self._edit(tx, by_name[key.template], key, leaf_id, report)

    def _member(self, tx, t: SubQueryTemplate, key: CacheKey, leaf_id: int) -> bool:
        g = self.graph
        root = g.get_vertex(tx, key.root)
        if root is None or not t.root.matches(root):
            return False
        leaf = g.get_vertex(tx, leaf_id)
        if leaf is None or not t.leaf.specialize(key.leaf_values).evaluate(leaf):
            return False
        edge_pred = t.edge.specialize(key.edge_values)
        return any(edge_pred.evaluate(e) for e in g.edges_between(tx, key.root, leaf_id, t.direction))

    def _edit(self, tx, t: SubQueryTemplate, key: CacheKey, leaf_id: int, report: ImpactReport) -> None:
        member = self._member(tx, t, key, leaf_id)
        ids = self.cache.get_entry(tx, key)
        if ids is None:
            report.values_edited.append(ValueEdit(key, (leaf_id,) if member else (), () if member else (leaf_id,)))
            if member and self.policy.proactive:
                fresh = execute_instance(tx, self.graph, t, key.root, key.edge_values, key.leaf_values)
                self.cache.put_entry(tx, key, fresh)
                report.keys_created.append(key)
            return
        i = bisect_left(ids, leaf_id)
        present = i < len(ids) and ids[i] == leaf_id
        if member and not present:
            insort(ids, leaf_id)
            self.cache.put_entry(tx, key, ids)
            report.values_edited.append(ValueEdit(key, (leaf_id,), (), True))
        elif present and not member:
            del ids[i]
            self.cache.put_entry(tx, key, ids)
            report.values_edited.append(ValueEdit(key, (), (leaf_id,), True))
        else:
            report.values_edited.append(ValueEdit(key, (), (), True))


def delete_vertex_batched(
    kv: KVStore,
    graph: GraphStore,
    vid: int,
    threshold: int = SUPERNODE_THRESHOLD,
    batch: int = 500,
    begin: Callable[[], Transaction] | None = None,
    retries: int = 10,
) -> int:
    """Delete ``vid``; a supernode's edges go first in batches, each its own transaction.

    Returns the number of transactions committed. ``begin`` lets a caller
    decorate each transaction (e.g. with a node's maintained templates).
    """
    begin = begin or kv.begin

    def run(fn) -> None:
        for attempt in range(retries):
            tx = begin()
            try:
                fn(tx)
                tx.commit()
                return
            except Conflict:
                if attempt == retries - 1:
                    raise
            finally:
                tx.close()

    with kv.begin("read-only") as tx:
        incident = graph.edges(tx, vid, BOTH)
    commits = 0
    if len(incident) > threshold:
        ids = [e.id for e in incident]
        for start in range(0, len(ids), batch):
            chunk = ids[start:start + batch]

            def drop(tx, chunk=chunk):
                for eid in chunk:
                    if graph.get_edge(tx, eid) is not None:
                        graph.delete_edge(tx, eid)

            run(drop)
            commits += 1
    run(lambda tx: graph.delete_vertex(tx, vid))
    return commits + 1
