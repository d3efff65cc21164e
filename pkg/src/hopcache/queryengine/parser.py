"""Parser for the traversal language.

::

    query    := "g.V(" selector? ")" step* final
    selector := INT | STRING
    step     := ".hasLabel(" STRING ")"
              | ".has(" STRING "," literal ")"
              | ".has(" STRING "," "neq(" literal ")" ")"
              | ".hasId(" INT ")" | ".hasId(neq(" INT "))"
              | ".outE(" STRING ")" | ".inE(" STRING ")" | ".bothE(" STRING ")"
              | ".inV()" | ".outV()"
    final    := ".valueMap()" | ".count()" | ".dedup()" | ".id()"
    literal  := STRING | INT | "true" | "false"

Template text uses the same steps, starts with ``__`` and has no final
clause; there ``?`` is also a literal and stands for a wildcard.

Besides the grammar, a traversal is checked structurally: every edge step
is followed by its own ``has`` terms and then by ``inV()``/``outV()``
(``outE`` pairs with ``inV``, ``inE`` with ``outV``, ``bothE`` with either).
"""
from __future__ import annotations

import functools
import json
import re
from dataclasses import dataclass
from typing import Union

from ..errors import QuerySyntaxError
from ..graphstore import BOTH, IN, OUT, Scalar
from ..templates import WILDCARD, Predicate, SubQueryTemplate

FINALS = ("valueMap", "count", "dedup", "id")


@dataclass(frozen=True)
class HasLabel:
    label: str


@dataclass(frozen=True)
class Has:
    name: str
    value: object  # Scalar, or WILDCARD in templates
    negate: bool = False


@dataclass(frozen=True)
class HasId:
    value: int
    negate: bool = False


@dataclass(frozen=True)
class EdgeTraverse:
    direction: str
    label: str


@dataclass(frozen=True)
class ToVertex:
    end: str  # "in" or "out"


Step = Union[HasLabel, Has, HasId, EdgeTraverse, ToVertex]


@dataclass(frozen=True)
class Traversal:
    start: int | str | None
    steps: tuple[Step, ...]
    final: str

    def to_text(self) -> str:
        sel = "" if self.start is None else _literal_text(self.start)
        return f"g.V({sel})" + "".join(step_text(s) for s in self.steps) + f".{self.final}()"

    def __str__(self) -> str:
        return self.to_text()


def _literal_text(v) -> str:
    if v is WILDCARD:
        return "?"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    return json.dumps(v)


def step_text(s: Step) -> str:
    if isinstance(s, HasLabel):
        return f".hasLabel({json.dumps(s.label)})"
    if isinstance(s, Has):
        lit = _literal_text(s.value)
        return f".has({json.dumps(s.name)},{'neq(' + lit + ')' if s.negate else lit})"
    if isinstance(s, HasId):
        return f".hasId({'neq(%d)' % s.value if s.negate else s.value})"
    if isinstance(s, EdgeTraverse):
        return f".{ {OUT: 'outE', IN: 'inE', BOTH: 'bothE'}[s.direction]}({json.dumps(s.label)})"
    return f".{s.end}V()"


# -- tokenizer -----------------------------------------------------------------

_TOKEN = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<string>"(?:[^"\\]|\\.)*"|'[^']*')
  | (?P<int>-?[0-9]+)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<punct>[.(),?])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True)
class _Tok:
    kind: str
    text: str
    pos: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise QuerySyntaxError(f"unexpected character {text[pos]!r}", pos)
        kind = m.lastgroup
        if kind != "ws":
            toks.append(_Tok(kind, m.group(), pos))
        pos = m.end()
    toks.append(_Tok("eof", "", len(text)))
    return toks


class _Parser:
    def __init__(self, text: str, wildcards: bool):
        self.toks = _tokenize(text)
        self.i = 0
        self.wildcards = wildcards

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def fail(self, what: str):
        t = self.tok
        found = "end of input" if t.kind == "eof" else repr(t.text)
        raise QuerySyntaxError(f"expected {what}, found {found}", t.pos)

    def expect(self, text: str) -> _Tok:
        t = self.tok
        if t.text != text or t.kind == "string":
            self.fail(repr(text))
        self.i += 1
        return t

    def accept(self, text: str) -> bool:
        if self.tok.text == text and self.tok.kind != "string":
            self.i += 1
            return True
        return False

    def string(self) -> str:
        t = self.tok
        if t.kind != "string":
            self.fail("a string")
        self.i += 1
        if t.text[0] == "'":
            return t.text[1:-1]
        return json.loads(t.text)

    def integer(self) -> int:
        t = self.tok
        if t.kind != "int":
            self.fail("an integer")
        self.i += 1
        return int(t.text)

    def literal(self):
        t = self.tok
        if t.kind == "string":
            return self.string()
        if t.kind == "int":
            return self.integer()
        if t.kind == "name" and t.text in ("true", "false"):
            self.i += 1
            return t.text == "true"
        if self.wildcards and t.text == "?":
            self.i += 1
            return WILDCARD
        self.fail("a literal")

    # -- grammar -------------------------------------------------------------

    def query(self) -> Traversal:
        self.expect("g")
        self.expect(".")
        self.expect("V")
        self.expect("(")
        start = None
        if self.tok.kind == "int":
            start = self.integer()
        elif self.tok.kind == "string":
            start = self.string()
        self.expect(")")
        steps, final = self.steps(allow_final=True)
        if final is None:
            self.fail("a final clause")
        if self.tok.kind != "eof":
            self.fail("end of input")
        return Traversal(start, tuple(steps), final)

    def template_steps(self) -> list[Step]:
        self.expect("__")
        steps, _ = self.steps(allow_final=False)
        if self.tok.kind != "eof":
            self.fail("end of input")
        return steps

    def steps(self, allow_final: bool):
        steps: list = []
        pending_edge: EdgeTraverse | None = None
        while self.tok.text == ".":
            self.i += 1
            t = self.tok
            if t.kind != "name":
                self.fail("a step name")
            self.i += 1
            name = t.text
            self.expect("(")
            if name == "hasLabel":
                if pending_edge:
                    raise QuerySyntaxError("hasLabel is not allowed on an edge", t.pos)
                step = HasLabel(self.string())
            elif name == "has":
                key = self.string()
                self.expect(",")
                if self.accept("neq"):
                    self.expect("(")
                    step = Has(key, self.literal(), negate=True)
                    self.expect(")")
                else:
                    step = Has(key, self.literal())
            elif name == "hasId":
                if pending_edge:
                    raise QuerySyntaxError("hasId is not allowed on an edge", t.pos)
                if self.accept("neq"):
                    self.expect("(")
                    step = HasId(self.integer(), negate=True)
                    self.expect(")")
                else:
                    step = HasId(self.integer())
            elif name in ("outE", "inE", "bothE"):
                if pending_edge:
                    raise QuerySyntaxError("edge step must be followed by inV() or outV()", t.pos)
                step = pending_edge = EdgeTraverse({"outE": OUT, "inE": IN, "bothE": BOTH}[name], self.string())
            elif name in ("inV", "outV"):
                end = name[:-1]
                if pending_edge is None:
                    raise QuerySyntaxError(f"{name}() must follow an edge step", t.pos)
                if (pending_edge.direction, end) in ((OUT, "out"), (IN, "in")):
                    raise QuerySyntaxError(f"{name}() after an {pending_edge.direction}-edge step returns to the start vertex", t.pos)
                step = ToVertex(end)
                pending_edge = None
            elif name in FINALS:
                if not allow_final:
                    raise QuerySyntaxError("final clause is not allowed here", t.pos)
                if pending_edge:
                    raise QuerySyntaxError("edge step must be followed by inV() or outV()", t.pos)
                self.expect(")")
                return steps, name
            else:
                raise QuerySyntaxError(f"unknown step {name!r}", t.pos)
            self.expect(")")
            steps.append(step)
        if pending_edge:
            self.fail("inV() or outV()")
        return steps, None


@functools.lru_cache(maxsize=4096)
def parse(text: str) -> Traversal:
    """Parse query text; raises :class:`QuerySyntaxError` with the offset."""
    return _Parser(text, wildcards=False).query()


def parse_template(name: str, text: str) -> SubQueryTemplate:
    """Parse the traversal form of a one-hop template."""
    steps = _Parser(text, wildcards=True).template_steps()
    groups: list[list[Step]] = [[]]
    direction = edge_label = None
    for s in steps:
        if isinstance(s, EdgeTraverse):
            if direction is not None:
                raise QuerySyntaxError("a template has exactly one edge step", 0)
            direction, edge_label = s.direction, s.label
            groups.append([])
        elif isinstance(s, ToVertex):
            groups.append([])
        elif isinstance(s, HasId) or (isinstance(s, Has) and s.negate):
            raise QuerySyntaxError("templates take equality and wildcard terms only", 0)
        else:
            groups[-1].append(s)
    if direction is None:
        raise QuerySyntaxError("a template needs an edge step", len(text))

    def pred(group: list[Step], label: str | None = None) -> Predicate:
        for s in group:
            if isinstance(s, HasLabel):
                label = s.label
        return Predicate(label, tuple((s.name, s.value) for s in group if isinstance(s, Has)))

    root, edge, leaf = groups
    return SubQueryTemplate(name, pred(root), pred(edge, edge_label), pred(leaf), direction)
