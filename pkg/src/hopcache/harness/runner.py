"""Replay a trace against one or more query-processor nodes and collect metrics."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

from ..cache import DEFAULT_CODEC, PopulateStats
from ..errors import Conflict, MalformedValue, NotFound, TransactionTimeout
from ..graphstore import OUT
from ..kvstore import KVStore
from ..maintenance import MaintenancePolicy, impact_bound_check
from ..queryengine import QueryEngine, delete_edges, update_last_seen, upsert_subgraph
from ..templates import SubQueryTemplate
from .metrics import RunMetrics
from .oracle import oracle_check
from .workload import DELETE_EDGES, LAST_SEEN, MUTATION, UPSERT

MAX_EXAMPLES = 5


@dataclass
class RunConfig:
    cache: bool = True
    rewrite: bool = True
    policy: str = "write-around"
    codec: str = DEFAULT_CODEC
    nodes: int = 1
    drain_every: int = 1        # ops between populate drains (0: only at the end)
    warm: bool = False          # replay the trace's reads once, untimed, before measuring
    verify: bool = False        # re-run every read without cache or rewriting and diff
    oracle: bool = False        # run the oracle at the end of the run
    oracle_every: int = 0       # ...and every this many ops
    race_every: int = 0         # interleave a pending populate with every n-th write
    op_delay: float = 0.0       # seconds added to every store operation
    op_budget: int | None = None

    def __post_init__(self):
        MaintenancePolicy.parse(self.policy)
        if self.nodes < 1:
            raise ValueError("nodes must be at least 1")

    @property
    def label(self) -> str:
        return f"C{'+' if self.cache else '-'}Q{'+' if self.rewrite else '-'}"

    def to_json(self) -> dict:
        return {**asdict(self), "label": self.label}


@dataclass
class Deployment:
    """Nodes over a shared store; with the cache on, every template is enabled on every node."""

    kv: KVStore
    aliases: dict[str, int]
    templates: list[SubQueryTemplate]
    config: RunConfig
    engines: list[QueryEngine] = field(default_factory=list)

    def __post_init__(self):
        c = self.config
        for i in range(c.nodes):
            e = QueryEngine(self.kv, policy=c.policy, codec=c.codec, cp_mode="deferred", aliases=self.aliases,
                            use_cache=c.cache, rewrite=c.rewrite, op_budget=c.op_budget, node_id=i)
            self.engines.append(e)
        if c.cache:
            for e in self.engines:
                for t in self.templates:
                    e.install(t)
            for e in self.engines:
                for t in self.templates:
                    e.activate_reads(t.name)

    @property
    def active_templates(self) -> list[SubQueryTemplate]:
        return list(self.templates) if self.config.cache else []

    def drain(self) -> PopulateStats:
        total = PopulateStats()
        for e in self.engines:
            total.merge(e.cp_drain())
        return total

    def close(self) -> None:
        for e in self.engines:
            e.close()


# -- write programs ----------------------------------------------------------------

def _edges_between(engine, tx, out_alias, in_alias, label):
    a, b = engine.aliases.get(out_alias), engine.aliases.get(in_alias)
    if a is None or b is None:
        return []
    return [e for e in engine.graph.edges_between(tx, a, b, OUT) if e.label == label]


def _mutation(args: dict):
    m = args["m"]

    def program(tx, engine) -> int:
        g = engine.graph
        aliases = engine.aliases
        if m == "vertex-prop":
            vid = aliases.get(args["v"])
            if vid is None or g.get_vertex(tx, vid) is None:
                return 0
            return int(g.set_vertex_property(tx, vid, args["name"], args["value"]))
        if m == "edge-prop":
            n = 0
            for e in _edges_between(engine, tx, args["out"], args["in"], args["label"]):
                n += g.set_edge_property(tx, e.id, args["name"], args["value"])
            return n
        if m == "add-edge":
            a, b = aliases.get(args["out"]), aliases.get(args["in"])
            if a is None or b is None or g.get_vertex(tx, a) is None or g.get_vertex(tx, b) is None:
                return 0
            g.add_edge(tx, a, b, args["label"], args["props"])
            return 1
        if m == "delete-edge":
            es = _edges_between(engine, tx, args["out"], args["in"], args["label"])
            for e in es[:1]:
                g.delete_edge(tx, e.id)
            return len(es[:1])
        if m == "add-vertex":
            uid = args["uid"]
            if uid in aliases and g.get_vertex(tx, aliases[uid]) is not None:
                return 0
            vid = g.add_vertex(tx, args["label"], {**args["props"], engine.alias_property: uid})
            tx.on_commit.append(lambda: aliases.__setitem__(uid, vid))
            return 1
        if m == "delete-vertex":
            vid = aliases.get(args["v"])
            if vid is None or g.get_vertex(tx, vid) is None:
                return 0
            g.delete_vertex(tx, vid)
            return 1
        raise ValueError(f"unknown mutation {m!r}")

    return program


def write_program(op: dict, aliases: dict[str, int]):
    kind, args = op["kind"], op["args"]
    if kind == UPSERT:
        return upsert_subgraph(args["root"], "includes", args["leaf"], "listing", args["leaf_props"], args["edge_props"])
    if kind == LAST_SEEN:
        out_v, in_v = aliases.get(args["out"], -1), aliases.get(args["in"], -1)
        return update_last_seen(out_v, in_v, args["label"], args["ts"])
    if kind == DELETE_EDGES:
        vid = aliases.get(args["root"], -1)
        return delete_edges(vid, args["label"], OUT, args["where"], args["limit"])
    if kind == MUTATION:
        return _mutation(args)
    raise ValueError(f"unknown write kind {kind!r}")


# -- the driver --------------------------------------------------------------------

def _read(engine: QueryEngine, op: dict, **kw):
    if op["op"] == "intersect":
        return engine.query_intersection(op["a"], op["b"], **kw)
    return engine.query(op["query"], **kw)


def run(trace: list[dict], dep: Deployment, workload: str = "") -> RunMetrics:
    """Execute ``trace`` on ``dep``; errors are counted, never raised."""
    c = dep.config
    kv = dep.kv
    m = RunMetrics(workload, c.to_json())
    populate = PopulateStats()
    engines = dep.engines
    if c.warm and c.cache:
        for i, op in enumerate(trace):
            if op["op"] != "write":
                try:
                    _read(engines[i % len(engines)], op)
                except (Conflict, TransactionTimeout, NotFound):
                    pass
        populate.merge(dep.drain())
    for e in engines:
        e.hits.clear()
        e.misses.clear()
        e.stats.clear()
        e.reset_counters()
    saved_delay = kv.op_delay
    kv.op_delay = c.op_delay
    started = time.perf_counter()
    try:
        for i, op in enumerate(trace):
            engine = engines[i % len(engines)]
            if op["op"] == "write":
                _write(engine, op, m, c, i, populate)
            else:
                _timed_read(engine, op, m, c, kv)
            if c.cache and c.drain_every and (i + 1) % c.drain_every == 0:
                populate.merge(dep.drain())
            if c.oracle_every and (i + 1) % c.oracle_every == 0:
                _oracle(dep, m, populate)
        m.elapsed_s = time.perf_counter() - started
    finally:
        kv.op_delay = saved_delay
    populate.merge(dep.drain())
    if c.oracle:
        _oracle(dep, m, populate)
    m.ops = len(trace)
    for e in engines:
        m.hits.update(e.hits)
        m.misses.update(e.misses)
        m.errors["malformed"] += e.stats["malformed"]
        m.errors["populate_dropped"] += e.populator.queue.dropped
        for k, v in e.op_counts().items():
            m.counters[k] = m.counters.get(k, 0) + v
        for k in ("direct_hops", "uncached_roots", "intersection_comparisons", "write_conflicts"):
            m.counters[k] = m.counters.get(k, 0) + e.stats[k]
    m.errors = +m.errors
    m.populate = asdict(populate)
    return m


def _timed_read(engine, op, m: RunMetrics, c: RunConfig, kv) -> None:
    t0 = time.perf_counter()
    try:
        result = _read(engine, op)
    except TransactionTimeout:
        m.errors["timeout"] += 1
        return
    except Conflict:
        m.errors["conflict"] += 1
        return
    finally:
        m.record("read", (time.perf_counter() - t0) * 1e6)
    if c.verify:
        delay, kv.op_delay = kv.op_delay, 0.0
        try:
            expected = _read(engine, op, use_cache=False, rewrite=False)
        finally:
            kv.op_delay = delay
        if result != expected:
            m.diffs += 1
            if len(m.diff_examples) < MAX_EXAMPLES:
                m.diff_examples.append({"op": op, "cached": result, "uncached": expected})


def _write(engine, op, m: RunMetrics, c: RunConfig, i: int, populate: PopulateStats) -> None:
    pending = req = None
    if c.race_every and c.cache and i % c.race_every == 0:
        # begin a populate before the write and commit it after, so the two overlap
        req = engine.populator.queue.get_nowait()
        if req is not None:
            try:
                pending = engine.populator.begin(req)
            except MalformedValue:
                pending = engine.populator.begin(req, repair=True)
    t0 = time.perf_counter()
    try:
        result = engine.execute_rmw(write_program(op, engine.aliases))
    except Conflict:
        m.errors["conflict"] += 1
        result = None
    except TransactionTimeout:
        m.errors["timeout"] += 1
        result = None
    m.record("write", (time.perf_counter() - t0) * 1e6)
    if pending is not None:
        if pending.key is None:
            populate.skipped += 1
        elif pending.commit():
            populate.populated += 1
        else:
            m.errors["race_conflict"] += 1
            populate.conflicts += 1
            engine.populator.queue.put(req)
    if result is None:
        return
    keys = 0
    for change, report in result.impact:
        keys += len(report.impacted_keys())
        if not impact_bound_check(change, report):
            m.errors["impact_bound"] += 1
    m.record_impact(op["kind"], keys)


def _oracle(dep: Deployment, m: RunMetrics, populate: PopulateStats) -> None:
    populate.merge(dep.drain())
    m.oracle_checks += 1
    for v in oracle_check(dep.kv, dep.active_templates):
        if len(m.oracle_violations) < 50:
            m.oracle_violations.append(v.to_json())
        m.errors["oracle"] += 1
