"""Workload specs and deterministic operation traces.

A trace is a list of JSON-friendly dicts. Vertices are named by their
``uid`` alias, so a trace can be replayed against any store loaded from
the same graph file.
"""
from __future__ import annotations

import json
import math
import random
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

from ..errors import InvalidWorkload
from .fixtures import REGIONS, STATUSES, TIERS

UPSERT = "upsert"
LAST_SEEN = "last_seen"
DELETE_EDGES = "delete_edges"
MUTATION = "mutation"
WRITE_KINDS = (UPSERT, LAST_SEEN, DELETE_EDGES, MUTATION)

SUM_TOLERANCE = 1e-3

# stand-in queries; each name maps to a text builder below
QUERY_MIX = {
    "q1": 0.25,  # watch-list -> active listings with a status (out)
    "q2": 0.08,  # active listings of a seller, counted (out)
    "q3": 0.15,  # watch-lists including a listing (in)
    "q4": 0.08,  # sellers of a listing in a region (in)
    "q5": 0.08,  # listings of a category with a status, counted (in)
    "q6": 0.12,  # two hops with a neq id filter
    "q7": 0.04,  # no template applies
    "q8": 0.10,  # premium watch-lists including a listing (in)
    "intersect": 0.10,  # listings common to two watch-lists
}

ROOT_LABEL = {
    "q1": "watch-list", "q2": "seller", "q3": "listing", "q4": "listing", "q5": "category",
    "q6": "listing", "q7": "listing", "q8": "listing", "intersect": "watch-list",
}


def _lit(v) -> str:
    return json.dumps(v)


def query_text(kind: str, root: str, rng: random.Random) -> str:
    r = _lit(root)
    if kind == "q1":
        active = rng.random() < 0.85
        return (f'g.V({r}).outE("includes").has("IsActive",{_lit(active)}).inV()'
                f'.has("Status",{rng.choice(STATUSES)}).id()')
    if kind == "q2":
        return f'g.V({r}).outE("sells").has("IsActive",true).inV().hasLabel("listing").count()'
    if kind == "q3":
        return f'g.V({r}).inE("includes").has("IsActive",true).outV().hasLabel("watch-list").id()'
    if kind == "q4":
        return f'g.V({r}).inE("sells").outV().has("region",{_lit(rng.choice(REGIONS))}).valueMap()'
    if kind == "q5":
        return (f'g.V({r}).inE("in_category").has("primary",{_lit(rng.random() < 0.5)}).outV()'
                f'.has("Status",{rng.choice(STATUSES)}).count()')
    if kind == "q6":
        return (f'g.V({r}).inE("includes").has("IsActive",true).outV().hasLabel("watch-list")'
                f'.outE("includes").has("IsActive",true).inV().has("Status",{rng.choice(STATUSES)})'
                f'.has("uid",neq({r})).dedup()')
    if kind == "q7":
        return f'g.V({r}).outE("in_category").inV().hasLabel("category").id()'
    if kind == "q8":
        return f'g.V({r}).inE("includes").has("IsActive",true).outV().has("tier",{_lit(rng.choice(TIERS))}).id()'
    raise InvalidWorkload(f"unknown query kind {kind!r}")


@dataclass(frozen=True)
class WorkloadSpec:
    name: str = "custom"
    duration_ops: int = 10_000
    read_fraction: float = 0.99
    queries: dict = field(default_factory=lambda: dict(QUERY_MIX))
    zipf_s: float = 1.0
    write_shares: dict = field(default_factory=lambda: {UPSERT: 0.4485, LAST_SEEN: 0.4394, DELETE_EDGES: 0.1122})
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not isinstance(self.duration_ops, int) or self.duration_ops < 0:
            raise InvalidWorkload("duration_ops must be a non-negative integer")
        if not 0.0 <= self.read_fraction <= 1.0:
            raise InvalidWorkload("read_fraction must lie in [0, 1]")
        if self.zipf_s < 0 or not math.isfinite(self.zipf_s):
            raise InvalidWorkload("zipf_s must be a finite non-negative number")
        _check_shares("queries", self.queries, QUERY_MIX)
        _check_shares("write_shares", self.write_shares, WRITE_KINDS)

    @property
    def write_fraction(self) -> float:
        return 1.0 - self.read_fraction

    def with_(self, **changes) -> "WorkloadSpec":
        return replace(self, **changes)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "WorkloadSpec":
        obj = dict(obj)
        base = obj.pop("preset", None)
        unknown = set(obj) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidWorkload(f"unknown workload fields {sorted(unknown)}")
        spec = preset(base) if base else cls()
        return replace(spec, **obj)

    @classmethod
    def load(cls, path: str | Path) -> "WorkloadSpec":
        try:
            obj = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise InvalidWorkload(f"{path}: {exc}") from None
        return cls.from_json(obj)


def _check_shares(what: str, shares: dict, allowed) -> None:
    if not shares:
        raise InvalidWorkload(f"{what} is empty")
    for k, v in shares.items():
        if k not in allowed:
            raise InvalidWorkload(f"{what}: unknown entry {k!r}")
        if not isinstance(v, (int, float)) or v < 0:
            raise InvalidWorkload(f"{what}: share of {k!r} must be non-negative")
    total = sum(shares.values())
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise InvalidWorkload(f"{what} must sum to 1 (got {total:.6f})")


# read-heavy, write-heavy and read-mostly daily mixes
R_HAT = WorkloadSpec("R-hat", read_fraction=0.99)
W_HAT = WorkloadSpec("W-hat", read_fraction=0.62)
R_CHECK = WorkloadSpec("R-check", read_fraction=0.94)
PRESETS = {"R-hat": R_HAT, "W-hat": W_HAT, "R-check": R_CHECK}


def preset(name: str, **changes) -> WorkloadSpec:
    try:
        spec = PRESETS[name]
    except KeyError:
        raise InvalidWorkload(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return replace(spec, **changes) if changes else spec


# -- trace generation --------------------------------------------------------------

@dataclass
class Universe:
    """What the generator knows about the loaded graph: uids by label, and some edges."""

    uids: dict[str, list[str]]
    edges: list[tuple[str, str, str]]  # (out uid, in uid, label)

    @classmethod
    def from_records(cls, records) -> "Universe":
        uids: dict[str, list[str]] = {}
        edges = []
        for r in records:
            if r["t"] == "v":
                uids.setdefault(r["label"], []).append(str(r["id"]))
            else:
                edges.append((str(r["out"]), str(r["in"]), r["label"]))
        return cls(uids, edges)

    @classmethod
    def from_graph(cls, kv, aliases: dict[str, int]) -> "Universe":
        from ..graphstore import GraphStore

        g = GraphStore(kv)
        with kv.begin("read-only") as tx:
            vs = g.vertices(tx)
            es = g.all_edges(tx)
        by_id = {vid: a for a, vid in aliases.items()}
        uids: dict[str, list[str]] = {}
        for v in vs:
            if v.id in by_id:
                uids.setdefault(v.label, []).append(by_id[v.id])
        edges = [(by_id[e.out_v], by_id[e.in_v], e.label) for e in es if e.out_v in by_id and e.in_v in by_id]
        return cls(uids, edges)


class _Zipf:
    def __init__(self, items: list[str], s: float, rng: random.Random):
        self.items = list(items)
        rng.shuffle(self.items)
        acc, cum = 0.0, []
        for i in range(len(self.items)):
            acc += 1.0 / (i + 1) ** s
            cum.append(acc)
        self.cum = cum

    def __call__(self, rng: random.Random) -> str:
        return rng.choices(self.items, cum_weights=self.cum)[0]


def generate(spec: WorkloadSpec, universe: Universe) -> list[dict]:
    """A deterministic trace of ``spec.duration_ops`` operations."""
    spec.validate()
    rng = random.Random(spec.seed)
    for label in ("watch-list", "listing", "seller", "category"):
        if not universe.uids.get(label):
            raise InvalidWorkload(f"graph has no {label!r} vertices")
    pick = {label: _Zipf(uids, spec.zipf_s, rng) for label, uids in universe.uids.items()}
    qkinds = list(spec.queries)
    qweights = [spec.queries[k] for k in qkinds]
    wkinds = list(spec.write_shares)
    wweights = [spec.write_shares[k] for k in wkinds]
    includes = [e for e in universe.edges if e[2] == "includes"] or [("W0", "L0", "includes")]
    fresh = [0]
    trace = []
    for i in range(spec.duration_ops):
        if rng.random() < spec.read_fraction:
            kind = rng.choices(qkinds, qweights)[0]
            root = pick[ROOT_LABEL[kind]](rng)
            if kind == "intersect":
                other = pick["watch-list"](rng)
                trace.append({"op": "intersect", "kind": kind,
                              "a": query_text("q1", root, rng), "b": query_text("q1", other, rng)})
            else:
                trace.append({"op": "read", "kind": kind, "query": query_text(kind, root, rng)})
            continue
        kind = rng.choices(wkinds, wweights)[0]
        trace.append({"op": "write", "kind": kind, "args": _write_args(kind, rng, universe, pick, includes, fresh, i)})
    return trace


def _write_args(kind, rng, universe, pick, includes, fresh, i) -> dict:
    if kind == UPSERT:
        if rng.random() < 0.2:
            fresh[0] += 1
            leaf = f"LN{fresh[0]}"
        else:
            leaf = rng.choice(universe.uids["listing"])
        leaf_props = {"Status": rng.choice(STATUSES)} if rng.random() < 0.5 else {}
        if rng.random() < 0.3:
            leaf_props["tier"] = rng.choice(TIERS)
        return {"root": pick["watch-list"](rng), "leaf": leaf, "leaf_props": leaf_props,
                "edge_props": {"IsActive": rng.random() < 0.7, "last_seen": i}}
    if kind == LAST_SEEN:
        out, inn, _ = rng.choice(includes)
        return {"out": out, "in": inn, "label": "includes", "ts": i}
    if kind == DELETE_EDGES:
        return {"root": pick["watch-list"](rng), "label": "includes", "where": {"IsActive": False}, "limit": 4}
    return _mutation(rng, universe, pick, fresh)


def _mutation(rng, universe, pick, fresh) -> dict:
    u = universe.uids
    r = rng.random()
    if r < 0.30:
        label = rng.choice(("listing", "listing", "watch-list", "seller"))
        name, values = {
            "listing": (("Status", STATUSES), ("tier", TIERS)),
            "watch-list": (("tier", TIERS), ("Status", STATUSES)),
            "seller": (("region", REGIONS),),
        }[label][rng.randrange(2) if label != "seller" else 0]
        value = None if rng.random() < 0.1 else rng.choice(values)
        return {"m": "vertex-prop", "v": pick[label](rng), "name": name, "value": value}
    if r < 0.50:
        label = rng.choice(("includes", "sells", "in_category"))
        name = {"includes": "IsActive", "sells": "IsActive", "in_category": "primary"}[label]
        out, inn = _endpoints(label, rng, u, pick)
        value = None if rng.random() < 0.1 else rng.random() < 0.5
        return {"m": "edge-prop", "out": out, "in": inn, "label": label, "name": name, "value": value}
    if r < 0.75:
        label = rng.choice(("includes", "sells", "in_category"))
        out, inn = _endpoints(label, rng, u, pick)
        props = {"includes": {"IsActive": True}, "sells": {"IsActive": True}, "in_category": {"primary": False}}[label]
        return {"m": "add-edge", "out": out, "in": inn, "label": label, "props": props}
    if r < 0.88:
        label = rng.choice(("includes", "sells", "in_category"))
        out, inn = _endpoints(label, rng, u, pick)
        return {"m": "delete-edge", "out": out, "in": inn, "label": label}
    if r < 0.94:
        fresh[0] += 1
        return {"m": "add-vertex", "label": "listing", "uid": f"LN{fresh[0]}",
                "props": {"Status": rng.choice(STATUSES), "tier": rng.choice(TIERS)}}
    label = rng.choice(("listing",) * 6 + ("watch-list", "seller", "category"))
    return {"m": "delete-vertex", "v": rng.choice(u[label])}


def _endpoints(label, rng, u, pick) -> tuple[str, str]:
    src, dst = {"includes": ("watch-list", "listing"), "sells": ("seller", "listing"),
                "in_category": ("listing", "category")}[label]
    return pick[src](rng), rng.choice(u[dst])


def mix(trace: list[dict]) -> dict[str, int]:
    """Operation counts by kind."""
    out: dict[str, int] = {}
    for op in trace:
        key = op["op"] if op["op"] != "write" else f"write:{op['kind']}"
        out[key] = out.get(key, 0) + 1
    return out
