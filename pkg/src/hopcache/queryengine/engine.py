"""Per-node query processor: template slots, cache-aware reads, maintained writes."""
from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Mapping

from ..cache import DEFAULT_CODEC, CachePopulator, CacheStore, PopulateQueue, PopulateStats
from ..errors import Conflict, DuplicateTemplate, LifecycleError, MalformedValue, NotFound
from ..graphstore import GraphStore, Vertex
from ..kvstore import READ_ONLY, READ_WRITE, KVStore, Transaction
from ..maintenance import SUPERNODE_THRESHOLD, MaintenancePolicy, Maintainer, delete_vertex_batched
from ..templates import CacheKey, SubQueryTemplate, execute_instance
from .parser import Traversal, parse
from .plan import Hop, QueryPlan, VertexFilter, decompose
from .rewrite import naive_intersection, rewrite_id_filter, sorted_intersection

log = logging.getLogger(__name__)

CP_MODES = ("async", "deferred", "sync")


@dataclass
class TemplateSlot:
    template: SubQueryTemplate
    invalidate_active: bool = False
    read_active: bool = False


@dataclass
class WriteResult:
    value: Any
    impact: list = field(default_factory=list)  # (GraphChange, ImpactReport) pairs
    attempts: int = 1
    version: int | None = None


class QueryEngine:
    """One query-processor node over a shared :class:`KVStore`.

    Nodes keep their own graph listeners, populate queue and template flags;
    the store (graph and cache subspaces) is shared. ``cp_mode`` picks how
    populate requests run: ``"async"`` on a background thread,
    ``"deferred"`` when :meth:`cp_drain` is called, ``"sync"`` right after
    the read that missed.
    """

    def __init__(
        self,
        kv: KVStore,
        *,
        policy: MaintenancePolicy | str = MaintenancePolicy(),
        codec: str = DEFAULT_CODEC,
        cp_mode: str = "async",
        cp_retries: int = 3,
        queue_capacity: int = 4096,
        aliases: dict[str, int] | None = None,
        alias_property: str = "uid",
        use_cache: bool = True,
        rewrite: bool = False,
        op_budget: int | None = None,
        node_id: int = 0,
    ):
        if cp_mode not in CP_MODES:
            raise ValueError(f"cp_mode must be one of {CP_MODES}")
        if isinstance(policy, str):
            policy = MaintenancePolicy.parse(policy)
        self.kv = kv
        self.node_id = node_id
        self.graph = GraphStore(kv)
        self.cache = CacheStore(kv, codec)
        self.slots: dict[str, TemplateSlot] = {}
        self.maintainer = Maintainer(self.graph, self.cache, policy, self.maintained_templates).attach()
        self.populator = CachePopulator(
            kv, self.graph, self.cache, PopulateQueue(queue_capacity), cp_retries, is_active=self._invalidating
        )
        self.cp_mode = cp_mode
        self.aliases = aliases if aliases is not None else {}
        self.alias_property = alias_property
        self.use_cache = use_cache
        self.rewrite = rewrite
        self.op_budget = op_budget
        self.stats: Counter[str] = Counter()
        self.hits: Counter[str] = Counter()
        self.misses: Counter[str] = Counter()
        if cp_mode == "async":
            self.populator.start()

    @property
    def policy(self) -> MaintenancePolicy:
        return self.maintainer.policy

    @policy.setter
    def policy(self, policy: MaintenancePolicy) -> None:
        self.maintainer.policy = policy

    def close(self) -> None:
        if self.populator.running:
            self.populator.stop()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    # -- template flags ------------------------------------------------------

    def install(self, template: SubQueryTemplate) -> None:
        """Start maintaining the cache for ``template`` on writes (idempotent)."""
        slot = self.slots.get(template.name)
        if slot is not None and slot.template != template:
            raise DuplicateTemplate(f"a different template named {template.name!r} is installed")
        if slot is None:
            slot = self.slots[template.name] = TemplateSlot(template)
        slot.invalidate_active = True

    def activate_reads(self, name: str) -> None:
        slot = self._slot(name)
        if not slot.invalidate_active:
            raise LifecycleError(f"{name}: reads cannot use a cache that writes do not maintain")
        slot.read_active = True

    def deactivate_reads(self, name: str) -> None:
        slot = self.slots.get(name)
        if slot is not None:
            slot.read_active = False

    def deactivate_invalidation(self, name: str) -> None:
        slot = self.slots.get(name)
        if slot is None:
            return
        if slot.read_active:
            raise LifecycleError(f"{name}: deactivate reads before invalidation")
        del self.slots[name]

    def register(self, template: SubQueryTemplate) -> None:
        """Single-node shortcut: install and activate reads at once."""
        self.install(template)
        self.activate_reads(template.name)

    def _slot(self, name: str) -> TemplateSlot:
        try:
            return self.slots[name]
        except KeyError:
            raise LifecycleError(f"template {name!r} is not installed on node {self.node_id}") from None

    def _invalidating(self, name: str) -> bool:
        slot = self.slots.get(name)
        return slot is not None and slot.invalidate_active

    def maintained_templates(self) -> tuple[SubQueryTemplate, ...]:
        return tuple(s.template for s in self.slots.values() if s.invalidate_active)

    def read_templates(self) -> tuple[SubQueryTemplate, ...]:
        return tuple(s.template for s in self.slots.values() if s.read_active)

    # -- transactions --------------------------------------------------------

    def begin_read(self) -> Transaction:
        tx = self.kv.begin(READ_ONLY, self.op_budget)
        tx.annotations["read_templates"] = self.read_templates()
        return tx

    def begin_write(self) -> Transaction:
        tx = self.kv.begin(READ_WRITE, self.op_budget)
        tx.annotations["maintained"] = self.maintained_templates()
        return tx

    # -- reads ---------------------------------------------------------------

    def plan(self, query: str | Traversal, templates: Iterable[SubQueryTemplate] | None = None,
             rewrite: bool | None = None) -> QueryPlan:
        traversal = parse(query) if isinstance(query, str) else query
        if self.rewrite if rewrite is None else rewrite:
            traversal = rewrite_id_filter(traversal, self.aliases, self.alias_property)
        return decompose(traversal, self.read_templates() if templates is None else templates)

    def query(self, query: str | Traversal, *, use_cache: bool | None = None, rewrite: bool | None = None):
        """Run a read query in its own read-only transaction and apply its final clause."""
        use_cache = self.use_cache if use_cache is None else use_cache
        with self.begin_read() as tx:
            plan = self.plan(query, tx.annotations["read_templates"] if use_cache else (), rewrite)
            result = self.finish(tx, plan, self.execute_read(tx, plan, use_cache=use_cache))
        self._after_read()
        return result

    def query_intersection(self, a: str | Traversal, b: str | Traversal, *, use_cache: bool | None = None,
                           rewrite: bool | None = None) -> list[int]:
        """Ids produced by both queries; sorted merge when rewriting is on, nested loops otherwise."""
        use_cache = self.use_cache if use_cache is None else use_cache
        rewrite = self.rewrite if rewrite is None else rewrite
        with self.begin_read() as tx:
            templates = tx.annotations["read_templates"] if use_cache else ()
            xs = self.execute_read(tx, self.plan(a, templates, rewrite), use_cache=use_cache)
            ys = self.execute_read(tx, self.plan(b, templates, rewrite), use_cache=use_cache)
        self._after_read()
        stats: dict = {}
        out = sorted_intersection(xs, ys, stats) if rewrite else naive_intersection(xs, ys, stats)
        self.stats["intersection_comparisons"] += stats["comparisons"]
        return out

    def _after_read(self) -> None:
        if self.cp_mode == "sync" and len(self.populator.queue):
            self.cp_drain()

    def execute_read(self, tx: Transaction, plan: QueryPlan, *, use_cache: bool = True) -> list[int]:
        """Ids of the vertices the traversal ends on, ascending.

        A read-write transaction never uses the cache, so it sees its own
        uncommitted writes.
        """
        use_cache = use_cache and tx.read_only
        memo: dict[int, Vertex | None] = {}
        roots = self._start(tx, plan, memo)
        for hop in plan.hops:
            out: set[int] = set()
            for r in roots:
                out.update(self._hop(tx, hop, r, memo, use_cache))
            rest = hop.leaf.without_matched_terms()
            roots = sorted(out)
            if rest.ids:
                roots = [v for v in roots if rest.accepts_id(v)]
            if rest.excluded:
                roots = [v for v in roots if (x := self._vertex(tx, v, memo)) is not None and rest.accepts(x)]
        return roots

    def _vertex(self, tx, vid: int, memo: dict) -> Vertex | None:
        if vid not in memo:
            memo[vid] = self.graph.get_vertex(tx, vid)
        return memo[vid]

    def _start(self, tx, plan: QueryPlan, memo: dict) -> list[int]:
        f = plan.start_filter
        start = plan.start
        if start is None:
            alias = next((v for n, v in f.terms if n == self.alias_property and isinstance(v, str)), None)
            if alias is not None:
                candidates = [self.aliases[alias]] if alias in self.aliases else []
            else:
                vs = self.graph.vertices(tx)
                memo.update((v.id, v) for v in vs)
                candidates = [v.id for v in vs]
        elif isinstance(start, str):
            candidates = [self.aliases[start]] if start in self.aliases else []
        else:
            candidates = [start]
        out = []
        for vid in candidates:
            v = self._vertex(tx, vid, memo)
            if v is not None and f.accepts(v):
                out.append(vid)
        return out

    def _hop(self, tx, hop: Hop, root: int, memo: dict, use_cache: bool) -> list[int]:
        m = hop.match
        if use_cache and m is not None:
            t = m.template
            ok = m.root_implied
            if not ok:
                v = self._vertex(tx, root, memo)
                ok = v is not None and t.root.matches(v)
            if ok:
                key = CacheKey(t.name, root, m.edge_values, m.leaf_values)
                try:
                    ids = self.cache.get_entry(tx, key)
                except MalformedValue:
                    self.stats["malformed"] += 1
                    ids = None
                if ids is not None:
                    self.hits[t.name] += 1
                    return ids
                self.misses[t.name] += 1
                ids = execute_instance(tx, self.graph, t, root, m.edge_values, m.leaf_values, check_root=False)
                if not self.populator.enqueue(t, root, m.edge_values, m.leaf_values):
                    self.stats["populate_dropped"] += 1
                return ids
            self.stats["uncached_roots"] += 1
        else:
            self.stats["direct_hops"] += 1
        leaf = hop.leaf
        leaf_pred = None
        if leaf.labels or leaf.terms:
            leaf_pred = VertexFilter(leaf.labels, leaf.terms).accepts
        e = hop.edge
        return self.graph.neighbors(tx, root, e.direction, e.label, e.accepts, leaf_pred, check_root=False)

    def finish(self, tx, plan: QueryPlan, ids: list[int]):
        """Apply the final clause."""
        if plan.final == "count":
            return len(ids)
        if plan.final == "valueMap":
            out = []
            for vid in ids:
                v = self.graph.get_vertex(tx, vid)
                if v is not None:
                    out.append({"id": v.id, "label": v.label, "props": dict(v.props)})
            return out
        return list(ids)

    # -- writes --------------------------------------------------------------

    def write(self, fn: Callable[[Transaction], Any], retries: int = 10) -> WriteResult:
        """Run ``fn(tx)`` in a maintained read-write transaction, retrying on conflict."""
        for attempt in range(1, retries + 1):
            tx = self.begin_write()
            try:
                value = fn(tx)
                version = tx.commit()
                return WriteResult(value, tx.annotations.get("impact", []), attempt, version)
            except Conflict:
                self.stats["write_conflicts"] += 1
                if attempt == retries:
                    raise
            finally:
                tx.close()

    def execute_rmw(self, program: Callable[[Transaction, "QueryEngine"], Any], retries: int = 10) -> WriteResult:
        """Run a read-modify-write program; its reads go to the graph, never the cache."""
        return self.write(lambda tx: program(tx, self), retries)

    def delete_vertex(self, vid: int, threshold: int = SUPERNODE_THRESHOLD, batch: int = 500) -> int:
        """Delete a vertex, batching a supernode's edges over several transactions."""
        return delete_vertex_batched(self.kv, self.graph, vid, threshold, batch, begin=self.begin_write)

    # -- populate ------------------------------------------------------------

    def cp_drain(self) -> PopulateStats:
        return self.populator.drain()

    def hit_rate(self, name: str | None = None) -> float:
        if name is None:
            h, m = sum(self.hits.values()), sum(self.misses.values())
        else:
            h, m = self.hits[name], self.misses[name]
        return h / (h + m) if h + m else 0.0

    def op_counts(self) -> dict[str, int]:
        """Storage-level operation counters, for instrumentation tests."""
        return {
            "cache_reads": self.cache.counters["reads"],
            "adjacency_scans": self.graph.counters["adjacency_scans"],
            "vertex_reads": self.graph.counters["vertex_reads"],
        }

    def reset_counters(self) -> None:
        self.cache.counters.clear()
        self.graph.counters.clear()
