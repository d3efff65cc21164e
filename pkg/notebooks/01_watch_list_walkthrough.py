"""
A watch-list, its cache entries, and what writes do to them
===========================================================

Run with ``python3 notebooks/01_watch_list_walkthrough.py``.
"""

# %%
# The fixture graph: watch-list 10 includes 50 listings. 30 of the edges are
# active, and 25 of those lead to a listing with Status 0.
from hopcache.harness.fixtures import FIG1_IDS_QUERY, SQ1, SPARE_LISTING, WATCH_LIST, build_fig1
from hopcache.harness.oracle import cache_keys, oracle_check
from hopcache.queryengine import QueryEngine

f = build_fig1()
engine = QueryEngine(f.kv, cp_mode="deferred")
engine.install(SQ1)
engine.activate_reads("SQ1")
print(FIG1_IDS_QUERY)

# %%
# First run misses; the populate request sits in the queue until drained.
engine.reset_counters()
ids = engine.query(FIG1_IDS_QUERY)
print(len(ids), "ids, counters on a miss:", engine.op_counts())
engine.cp_drain()

engine.reset_counters()
engine.query(FIG1_IDS_QUERY)
print("counters on a hit:", engine.op_counts())

# %%
# Fill every SQ1 instance rooted at the watch-list so all four
# IsActive x Status keys exist.
for active in ("true", "false"):
    for status in (0, 1):
        engine.query(f'g.V(10).outE("includes").has("IsActive",{active}).inV().has("Status",{status}).id()')
engine.cp_drain()
for k in cache_keys(f.kv):
    print(k)

# %%
# Flip one edge to inactive. Under write-around both keys the edge can
# serve are deleted inside the writing transaction.
result = engine.execute_rmw(lambda tx, e: e.graph.set_edge_property(tx, f.edges[15], "IsActive", False))
for change, report in result.impact:
    print(change.kind, sorted(map(str, report.keys_deleted)))
print("left:", cache_keys(f.kv))

# %%
# The same write under write-through edits the values instead.
f2 = build_fig1()
wt = QueryEngine(f2.kv, policy="write-through", cp_mode="deferred")
wt.install(SQ1)
wt.activate_reads("SQ1")
wt.query(FIG1_IDS_QUERY)
wt.cp_drain()
wt.execute_rmw(lambda tx, e: e.graph.add_edge(tx, WATCH_LIST, SPARE_LISTING, "includes", {"IsActive": True}))
print(wt.query(FIG1_IDS_QUERY)[-3:], "hits:", wt.hits["SQ1"])

# %%
# Whatever the policy, the brute-force oracle agrees with every entry.
print("violations:", oracle_check(f.kv, [SQ1]), oracle_check(f2.kv, [SQ1]))
