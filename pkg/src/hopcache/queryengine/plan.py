"""Decomposition of a traversal into one-hop sub-query references.

A traversal groups into a start filter followed by hops; hop ``k`` is an
edge step plus the vertex filter that follows it. Hop ``k`` can be served
by a template when

* the edge step has the template's direction and label and its equality
  terms line up with the template's edge predicate,
* the following filter's label and equality terms line up with the leaf
  predicate.

"Line up" is syntactic: the property names are the same set, template
exact values equal the query's values, and template wildcards bind to the
query's values. Inequality and id filters never take part in matching;
they are applied to the hop's output afterwards.

The root predicate is not part of the query text of hop ``k``. When the
preceding filter already implies it the match is unconditional; otherwise
the executor checks each root at run time and serves roots that fail it
without the cache.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

from ..graphstore import Edge, Scalar, Vertex
from ..templates import WILDCARD, Predicate, SubQueryTemplate, same_scalar
from .parser import EdgeTraverse, Has, HasId, HasLabel, ToVertex, Traversal


@dataclass(frozen=True)
class VertexFilter:
    labels: tuple[str, ...] = ()
    terms: tuple[tuple[str, Scalar], ...] = ()
    excluded: tuple[tuple[str, Scalar], ...] = ()
    ids: tuple[HasId, ...] = ()

    @property
    def reads_vertex(self) -> bool:
        return bool(self.labels or self.terms or self.excluded)

    @property
    def empty(self) -> bool:
        return not (self.reads_vertex or self.ids)

    def accepts_id(self, vid: int) -> bool:
        return all((vid != f.value) if f.negate else (vid == f.value) for f in self.ids)

    def accepts(self, v: Vertex) -> bool:
        """Id, label, equality and inequality terms; a ``neq`` term needs the property present."""
        if not self.accepts_id(v.id):
            return False
        if any(v.label != lab for lab in self.labels):
            return False
        props = v.props
        for name, value in self.terms:
            if name not in props or not same_scalar(props[name], value):
                return False
        for name, value in self.excluded:
            if name not in props or same_scalar(props[name], value):
                return False
        return True

    def without_matched_terms(self) -> "VertexFilter":
        """What is left to check after a template hop has applied label and equality terms."""
        return VertexFilter((), (), self.excluded, self.ids)


@dataclass(frozen=True)
class EdgeStep:
    direction: str
    label: str
    terms: tuple[tuple[str, Scalar], ...] = ()
    excluded: tuple[tuple[str, Scalar], ...] = ()

    def accepts(self, e: Edge) -> bool:
        if e.label != self.label:
            return False
        props = e.props
        for name, value in self.terms:
            if name not in props or not same_scalar(props[name], value):
                return False
        for name, value in self.excluded:
            if name not in props or same_scalar(props[name], value):
                return False
        return True


@dataclass(frozen=True)
class Match:
    template: SubQueryTemplate
    edge_values: tuple[tuple[str, Scalar], ...]
    leaf_values: tuple[tuple[str, Scalar], ...]
    root_implied: bool

    @property
    def bindings(self) -> dict:
        return dict(self.edge_values + self.leaf_values)


@dataclass(frozen=True)
class Hop:
    edge: EdgeStep
    leaf: VertexFilter
    match: Match | None = None

    @property
    def cached(self) -> bool:
        return self.match is not None


@dataclass(frozen=True)
class QueryPlan:
    start: int | str | None
    start_filter: VertexFilter
    hops: tuple[Hop, ...]
    final: str
    traversal: Traversal | None = field(default=None, compare=False)

    def matched_templates(self) -> list[str | None]:
        return [h.match.template.name if h.match else None for h in self.hops]


def _filter(steps: Iterable) -> VertexFilter:
    labels, terms, excluded, ids = [], [], [], []
    for s in steps:
        if isinstance(s, HasLabel):
            labels.append(s.label)
        elif isinstance(s, HasId):
            ids.append(s)
        elif s.negate:
            excluded.append((s.name, s.value))
        else:
            terms.append((s.name, s.value))
    return VertexFilter(tuple(labels), tuple(terms), tuple(excluded), tuple(ids))


def group(traversal: Traversal) -> tuple[VertexFilter, list[tuple[EdgeStep, VertexFilter]]]:
    """Split the step list into a start filter and (edge step, leaf filter) hops."""
    segments: list[list] = [[]]
    edges: list[tuple[EdgeTraverse, list[Has]]] = []
    in_edge = False
    for s in traversal.steps:
        if isinstance(s, EdgeTraverse):
            edges.append((s, []))
            in_edge = True
        elif isinstance(s, ToVertex):
            in_edge = False
            segments.append([])
        elif in_edge:
            edges[-1][1].append(s)
        else:
            segments[-1].append(s)
    hops = []
    for (e, has), seg in zip(edges, segments[1:]):
        step = EdgeStep(
            e.direction,
            e.label,
            tuple((h.name, h.value) for h in has if not h.negate),
            tuple((h.name, h.value) for h in has if h.negate),
        )
        hops.append((step, _filter(seg)))
    return _filter(segments[0]), hops


def _bind(pred: Predicate, terms: Sequence[tuple[str, Scalar]]) -> tuple[tuple[str, Scalar], ...] | None:
    query = dict(terms)
    if len(query) != len(terms) or set(query) != pred.names:
        return None
    for name, value in pred.exact:
        if not same_scalar(query[name], value):
            return None
    return tuple((n, query[n]) for n in pred.wildcards)


def _implies(f: VertexFilter, pred: Predicate) -> bool:
    if pred.label is not None and pred.label not in f.labels:
        return False
    have = {}
    for name, value in f.terms:
        have.setdefault(name, []).append(value)
    for name, value in pred.terms:
        if name not in have:
            return False
        if value is not WILDCARD and not any(same_scalar(v, value) for v in have[name]):
            return False
    return True


def match_hop(template: SubQueryTemplate, before: VertexFilter, edge: EdgeStep, leaf: VertexFilter) -> Match | None:
    if template.direction != edge.direction or template.edge.label != edge.label or edge.excluded:
        return None
    if len(leaf.labels) > 1 or (leaf.labels[0] if leaf.labels else None) != template.leaf.label:
        return None
    we = _bind(template.edge, edge.terms)
    if we is None:
        return None
    wl = _bind(template.leaf, leaf.terms)
    if wl is None:
        return None
    return Match(template, we, wl, _implies(before, template.root))


def decompose(traversal: Traversal, templates: Iterable[SubQueryTemplate]) -> QueryPlan:
    """Match every hop against ``templates`` (the first match in order wins)."""
    templates = list(templates)
    start_filter, raw = group(traversal)
    hops = []
    before = start_filter
    for edge, leaf in raw:
        match = None
        for t in templates:
            match = match_hop(t, before, edge, leaf)
            if match is not None:
                break
        hops.append(Hop(edge, leaf, match))
        before = leaf
    return QueryPlan(traversal.start, start_filter, tuple(hops), traversal.final, traversal)
