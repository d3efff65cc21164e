"""One-hop sub-query templates and cache keys.

A template is a root predicate, an edge predicate (with the edge label) and
a leaf predicate, plus the direction the edge is traversed. Predicate terms
are either exact values or the wildcard ``?``; wildcard values observed on an
instance become part of its cache key::

    SQ1:10:IsActive=true&Status=0
    ^^^ ^^ ^^^^^^^^^^^^^^^^^^^^^^
    |   |  edge wildcard values, then leaf wildcard values, declaration order
    |   root vertex id
    template name

Scalar values are rendered so the key stays injective: ``true``/``false`` for
booleans, decimal for integers, and strings with ``% : & = /`` escaped as
``%XX``. A string that would otherwise read back as an integer or boolean
gets its first character escaped, so ``"0"`` renders as ``%30``.
"""
from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping

from .errors import BindingMismatch, MissingWildcardProperty
from .graphstore import BOTH, DIRECTIONS, IN, OUT, Edge, GraphStore, Scalar, Vertex
from .kvstore import Transaction


class _Wildcard:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "?"

    def __reduce__(self):
        return (_Wildcard, ())


WILDCARD = _Wildcard()


def same_scalar(a, b) -> bool:
    """Equality that keeps ``True`` and ``1`` apart."""
    return type(a) is type(b) and a == b


@dataclass(frozen=True)
class Predicate:
    """Label filter plus property terms; the empty predicate accepts everything."""

    label: str | None = None
    terms: tuple[tuple[str, object], ...] = ()
    exact: tuple[tuple[str, Scalar], ...] = field(init=False, repr=False, compare=False)
    wildcards: tuple[str, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        names = [n for n, _ in self.terms]
        if len(names) != len(set(names)):
            raise ValueError(f"duplicate property term in {self.terms}")
        object.__setattr__(self, "exact", tuple((n, v) for n, v in self.terms if v is not WILDCARD))
        object.__setattr__(self, "wildcards", tuple(n for n, v in self.terms if v is WILDCARD))

    @property
    def names(self) -> frozenset[str]:
        return frozenset(n for n, _ in self.terms)

    def references(self, name: str) -> bool:
        return any(n == name for n, _ in self.terms)

    def evaluate(self, x: Vertex | Edge) -> bool:
        """Label and exact terms only; wildcard terms are checked separately."""
        if self.label is not None and x.label != self.label:
            return False
        props = x.props
        for name, value in self.exact:
            v = props.get(name)
            if v is None or type(v) is not type(value) or v != value:
                return False
        return True

    def has_all_wildcards(self, x: Vertex | Edge) -> bool:
        props = x.props
        return all(n in props for n in self.wildcards)

    def matches(self, x: Vertex | Edge) -> bool:
        return self.evaluate(x) and self.has_all_wildcards(x)

    def extract(self, x: Vertex | Edge) -> tuple[tuple[str, Scalar], ...]:
        props = x.props
        try:
            return tuple((n, props[n]) for n in self.wildcards)
        except KeyError as exc:
            raise MissingWildcardProperty(f"{x!r} lacks wildcard property {exc.args[0]!r}") from None

    def specialize(self, binding: Iterable[tuple[str, Scalar]]) -> "Predicate":
        """Replace wildcards with the bound values."""
        values = dict(binding)
        if set(values) != set(self.wildcards):
            raise BindingMismatch(f"binding {sorted(values)} does not cover wildcards {list(self.wildcards)}")
        return Predicate(self.label, tuple((n, values[n] if v is WILDCARD else v) for n, v in self.terms))

    def to_json(self) -> dict:
        out: dict = {}
        if self.label is not None:
            out["label"] = self.label
        if self.terms:
            out["props"] = [{"name": n, "match": "?" if v is WILDCARD else v} for n, v in self.terms]
        return out

    @classmethod
    def from_json(cls, obj: Mapping | None) -> "Predicate":
        obj = obj or {}
        terms = tuple((t["name"], WILDCARD if t["match"] == "?" else t["match"]) for t in obj.get("props", ()))
        return cls(obj.get("label"), terms)


def evaluate(pred: Predicate, element: Vertex | Edge) -> bool:
    return pred.evaluate(element)


def has_all_wildcards(pred: Predicate, element: Vertex | Edge) -> bool:
    return pred.has_all_wildcards(element)


def extract_wildcard_values(pred: Predicate, element: Vertex | Edge) -> tuple[tuple[str, Scalar], ...]:
    return pred.extract(element)


_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")


@dataclass(frozen=True)
class SubQueryTemplate:
    name: str
    root: Predicate
    edge: Predicate
    leaf: Predicate
    direction: str = OUT

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise ValueError(f"template name {self.name!r} must match {_NAME_RE.pattern}")
        if self.direction not in DIRECTIONS:
            raise ValueError(f"direction must be one of {DIRECTIONS}")

    @property
    def edge_label(self) -> str | None:
        return self.edge.label

    @property
    def reverse_direction(self) -> str:
        return {OUT: IN, IN: OUT, BOTH: BOTH}[self.direction]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "root": self.root.to_json(),
            "dir": self.direction,
            "edge": self.edge.to_json(),
            "leaf": self.leaf.to_json(),
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "SubQueryTemplate":
        return cls(
            obj["name"],
            Predicate.from_json(obj.get("root")),
            Predicate.from_json(obj.get("edge")),
            Predicate.from_json(obj.get("leaf")),
            obj.get("dir", OUT),
        )

    @classmethod
    def parse(cls, name: str, text: str) -> "SubQueryTemplate":
        """Build a template from its traversal form, e.g.
        ``__.hasLabel("watch-list").outE("includes").has("IsActive",?).inV().has("Status",?)``.
        """
        from .queryengine.parser import parse_template

        return parse_template(name, text)


def load_templates(lines: Iterable[str]) -> list[SubQueryTemplate]:
    """Parse the JSON-lines template definition format."""
    return [SubQueryTemplate.from_json(json.loads(line)) for line in lines if line.strip()]


# -- cache keys --------------------------------------------------------------

_ESCAPE = {c: f"%{ord(c):02X}" for c in "%:&=/"}
_INT_RE = re.compile(r"^-?[0-9]+$")


def _escape(text: str) -> str:
    if not any(c in text for c in _ESCAPE):
        return text
    return "".join(_ESCAPE.get(c, c) for c in text)


def render_scalar(value: Scalar) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, int):
        return str(value)
    text = _escape(value)
    if text in ("true", "false") or _INT_RE.match(text):
        text = f"%{ord(text[0]):02X}{text[1:]}"
    return text


def _unescape(text: str) -> str:
    return re.sub(r"%([0-9A-F]{2})", lambda m: chr(int(m.group(1), 16)), text)


def parse_scalar(text: str) -> Scalar:
    if "%" in text:
        return _unescape(text)
    if text == "true":
        return True
    if text == "false":
        return False
    if _INT_RE.match(text):
        return int(text)
    return text


@dataclass(frozen=True)
class CacheKey:
    template: str
    root: int
    edge_values: tuple[tuple[str, Scalar], ...] = ()
    leaf_values: tuple[tuple[str, Scalar], ...] = ()

    def render(self) -> str:
        params = "&".join(
            f"{_escape(n)}={render_scalar(v)}" for n, v in self.edge_values + self.leaf_values
        )
        return f"{self.template}:{self.root}:{params}"

    def __str__(self) -> str:
        return self.render()

    @classmethod
    def parse(cls, text: str, template: SubQueryTemplate | None = None) -> "CacheKey":
        """Inverse of :meth:`render`. Without ``template`` every parameter is
        returned as an edge value."""
        name, root, params = text.split(":", 2)
        pairs = []
        if params:
            for part in params.split("&"):
                n, v = part.split("=", 1)
                pairs.append((_unescape(n), parse_scalar(v)))
        pairs = tuple(pairs)
        if template is None:
            return cls(name, int(root), pairs, ())
        k = len(template.edge.wildcards)
        return cls(name, int(root), pairs[:k], pairs[k:])


def build_key(template: SubQueryTemplate, root: int, we, wl) -> CacheKey:
    we = tuple(we.items()) if isinstance(we, Mapping) else tuple(we)
    wl = tuple(wl.items()) if isinstance(wl, Mapping) else tuple(wl)
    if tuple(n for n, _ in we) != template.edge.wildcards:
        raise BindingMismatch(f"edge binding {we} does not match {template.edge.wildcards}")
    if tuple(n for n, _ in wl) != template.leaf.wildcards:
        raise BindingMismatch(f"leaf binding {wl} does not match {template.leaf.wildcards}")
    return CacheKey(template.name, root, we, wl)


def root_prefix(template: SubQueryTemplate | str, root: int) -> str:
    name = template if isinstance(template, str) else template.name
    return f"{name}:{root}:"


def template_prefix(template: SubQueryTemplate | str) -> str:
    name = template if isinstance(template, str) else template.name
    return f"{name}:"


# -- execution ---------------------------------------------------------------

def execute_instance(
    tx: Transaction,
    graph: GraphStore,
    template: SubQueryTemplate,
    root: int,
    we=(),
    wl=(),
    *,
    check_root: bool = True,
) -> list[int]:
    """Leaf ids of one sub-query instance, ascending.

    Empty when the root is missing or fails the root predicate.
    """
    if check_root:
        r = graph.get_vertex(tx, root)
        if r is None or not template.root.matches(r):
            return []
    edge_pred = template.edge.specialize(we)
    leaf_pred = template.leaf.specialize(wl)
    return graph.neighbors(
        tx, root, template.direction, edge_pred.label, edge_pred.evaluate, leaf_pred.evaluate, check_root=False
    )


def instances_for_root(
    tx: Transaction, graph: GraphStore, template: SubQueryTemplate, root: int
) -> dict[CacheKey, list[int]]:
    """Every non-empty instance of ``template`` rooted at ``root``."""
    r = graph.get_vertex(tx, root)
    if r is None or not template.root.matches(r):
        return {}
    groups: dict[CacheKey, set[int]] = {}
    leaves: dict[int, Vertex | None] = {}
    for e in graph.edges(tx, root, template.direction, template.edge.label):
        if not template.edge.matches(e):
            continue
        far = e.in_v if e.out_v == root else e.out_v
        if far not in leaves:
            leaves[far] = graph.get_vertex(tx, far)
        leaf = leaves[far]
        if leaf is None or not template.leaf.matches(leaf):
            continue
        key = CacheKey(template.name, root, template.edge.extract(e), template.leaf.extract(leaf))
        groups.setdefault(key, set()).add(far)
    return {k: sorted(v) for k, v in groups.items()}
