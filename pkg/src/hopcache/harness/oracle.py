"""Brute-force consistency oracle.

Recomputes every cached sub-query result from a raw snapshot of the graph
(all vertices, all edges) and compares it with the stored value. It uses
neither the maintenance code nor the adjacency indexes, so a bug there
cannot hide itself.
"""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Iterable

from ..cache import CacheStore, decode
from ..errors import MalformedValue
from ..graphstore import BOTH, IN, OUT, GraphStore
from ..kvstore import READ_ONLY, KVStore
from ..templates import CacheKey, SubQueryTemplate


@dataclass
class Violation:
    key: str
    kind: str  # stale | orphan | malformed | unknown-template | bad-key
    expected: list[int] | None = None
    actual: list[int] | None = None

    def to_json(self) -> dict:
        return asdict(self)


def _far_ends(edges, root: int, direction: str):
    for e in edges:
        if direction in (OUT, BOTH) and e.out_v == root:
            yield e, e.in_v
        elif direction in (IN, BOTH) and e.in_v == root:
            yield e, e.out_v


def brute_force(vertices: dict, incident: dict, t: SubQueryTemplate, root: int, we, wl) -> list[int] | None:
    """Expected value of an instance, or ``None`` when the root cannot carry an entry."""
    r = vertices.get(root)
    if r is None or not t.root.matches(r):
        return None
    ep = t.edge.specialize(we)
    lp = t.leaf.specialize(wl)
    out = set()
    for e, far in _far_ends(incident.get(root, ()), root, t.direction):
        leaf = vertices.get(far)
        if leaf is not None and ep.evaluate(e) and lp.evaluate(leaf):
            out.add(far)
    return sorted(out)


def oracle_check(kv: KVStore, templates: Iterable[SubQueryTemplate], limit: int | None = None) -> list[Violation]:
    """Every cache entry whose stored value is not the fresh result of its instance.

    Call it on a quiescent store. ``templates`` are those whose entries
    may legitimately exist; entries of any other template are reported.
    """
    by_name = {t.name: t for t in templates}
    graph = GraphStore(kv)
    with kv.begin(READ_ONLY) as tx:
        vertices = {v.id: v for v in graph.vertices(tx)}
        incident = defaultdict(list)
        for e in graph.all_edges(tx):
            incident[e.out_v].append(e)
            if e.in_v != e.out_v:
                incident[e.in_v].append(e)
        raw = CacheStore(kv).entries(tx)
    out: list[Violation] = []
    for text, blob in sorted(raw.items()):
        name = text.split(":", 1)[0]
        t = by_name.get(name)
        if t is None:
            out.append(Violation(text, "unknown-template"))
            continue
        try:
            key = CacheKey.parse(text, t)
            if (tuple(n for n, _ in key.edge_values), tuple(n for n, _ in key.leaf_values)) != (
                t.edge.wildcards, t.leaf.wildcards):
                raise ValueError("binding names differ from the template")
        except ValueError:
            out.append(Violation(text, "bad-key"))
            continue
        try:
            actual = decode(blob)
        except MalformedValue:
            out.append(Violation(text, "malformed"))
            continue
        expected = brute_force(vertices, incident, t, key.root, key.edge_values, key.leaf_values)
        if expected is None:
            out.append(Violation(text, "orphan", None, actual))
        elif actual != expected:
            out.append(Violation(text, "stale", expected, actual))
        if limit is not None and len(out) >= limit:
            break
    return out


def cache_keys(kv: KVStore, prefix: str = "") -> list[str]:
    """Rendered keys of every cache entry under ``prefix``."""
    with kv.begin(READ_ONLY) as tx:
        return sorted(CacheStore(kv).entries(tx, prefix))


def corrupt(kv: KVStore, key: str, ids: list[int]) -> None:
    """Overwrite one entry's value behind the engine's back (fault injection)."""
    from ..cache import encode, key_bytes, write_blob

    tx = kv.begin()
    write_blob(tx, key_bytes(key), encode(ids))
    tx.commit()


__all__ = ["Violation", "brute_force", "oracle_check", "cache_keys", "corrupt"]
