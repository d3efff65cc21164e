"""Read-modify-write programs for the three production write shapes.

Each factory returns ``program(tx, engine) -> int`` (the number of graph
mutations it made), for :meth:`QueryEngine.execute_rmw`. Reads inside a
program go to the graph through the same read-write transaction, so they
see the program's own earlier writes.
"""
from __future__ import annotations

from typing import Mapping

from ..graphstore import OUT, Scalar
from ..kvstore import Transaction


def _set_props(setter, tx, element, props: Mapping[str, Scalar]) -> int:
    n = 0
    for name, value in props.items():
        if setter(tx, element.id, name, value):
            n += 1
    return n


def upsert_subgraph(
    root_alias: str,
    edge_label: str,
    leaf_alias: str,
    leaf_label: str,
    leaf_props: Mapping[str, Scalar] | None = None,
    edge_props: Mapping[str, Scalar] | None = None,
):
    """Make sure ``root -edge_label-> leaf`` exists with the given properties.

    The leaf is created when its alias is unknown; an existing leaf or edge
    only has differing properties updated. Re-running an upsert that is
    already reflected in the graph mutates nothing.
    """
    leaf_props = dict(leaf_props or {})
    edge_props = dict(edge_props or {})

    def program(tx: Transaction, engine) -> int:
        g = engine.graph
        aliases = engine.aliases
        root = aliases.get(root_alias)
        if root is None or g.get_vertex(tx, root) is None:
            return 0
        n = 0
        leaf = aliases.get(leaf_alias)
        leaf_v = g.get_vertex(tx, leaf) if leaf is not None else None
        if leaf_v is None:
            leaf = g.add_vertex(tx, leaf_label, {**leaf_props, engine.alias_property: leaf_alias})
            tx.on_commit.append(lambda: aliases.__setitem__(leaf_alias, leaf))
            n += 1
        else:
            n += _set_props(g.set_vertex_property, tx, leaf_v, leaf_props)
        existing = [e for e in g.edges_between(tx, root, leaf, OUT) if e.label == edge_label]
        if not existing:
            g.add_edge(tx, root, leaf, edge_label, edge_props)
            n += 1
        else:
            n += _set_props(g.set_edge_property, tx, existing[0], edge_props)
        return n

    return program


def update_last_seen(out_v: int, in_v: int, edge_label: str, timestamp: int, prop: str = "last_seen"):
    """Stamp ``prop`` on every ``out_v -edge_label-> in_v`` edge."""

    def program(tx: Transaction, engine) -> int:
        g = engine.graph
        n = 0
        for e in g.edges_between(tx, out_v, in_v, OUT):
            if e.label == edge_label and g.set_edge_property(tx, e.id, prop, timestamp):
                n += 1
        return n

    return program


def delete_edges(vid: int, edge_label: str, direction: str = OUT, where: Mapping[str, Scalar] | None = None,
                 limit: int | None = None):
    """Delete ``vid``'s edges with ``edge_label`` whose properties match ``where``."""
    where = dict(where or {})

    def program(tx: Transaction, engine) -> int:
        g = engine.graph
        if g.get_vertex(tx, vid) is None:
            return 0
        n = 0
        for e in g.edges(tx, vid, direction, edge_label):
            if all(e.props.get(k) == v and type(e.props.get(k)) is type(v) for k, v in where.items()):
                g.delete_edge(tx, e.id)
                n += 1
                if limit is not None and n >= limit:
                    break
        return n

    return program
