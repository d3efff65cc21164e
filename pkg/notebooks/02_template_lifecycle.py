"""
Enabling and disabling a template over a lossy network
======================================================

Run with ``python3 notebooks/02_template_lifecycle.py``.
"""

# %%
from hopcache.coordinator import (
    Coordinator, model_check, node_receive_unversioned, random_loss,
)
from hopcache.harness.fixtures import FIG1_IDS_QUERY, SQ1, build_fig1
from hopcache.harness.oracle import cache_keys
from hopcache.queryengine import QueryEngine

f = build_fig1()
nodes = [QueryEngine(f.kv, cp_mode="deferred") for _ in range(3)]
coord = Coordinator(f.kv, nodes, random_loss(0.3, seed=2))
coord.register_template(SQ1)

# %%
# Enable with 30% message loss. The coordinator keeps resending until
# every node acknowledges each phase.
print(coord.enable_template("SQ1"), "after", coord.tick, "ticks", dict(coord.stats))
for name, old, new in coord.transitions:
    print(f"  {name}: {old} -> {new}")

# %%
nodes[1].query(FIG1_IDS_QUERY)
nodes[1].cp_drain()
print("cached keys:", cache_keys(f.kv))

# %%
# Disabling stops reads first, then maintenance, then clears the prefix.
print(coord.disable_template("SQ1"), cache_keys(f.kv), [t.name for t in coord.removed])

# %%
# Exhaustive check over every delivery order, drop and resend for three
# nodes with up to two lost messages per link.
report = model_check(3, 2, 1, name="SQ1")
print(report.states, "states,", len(report.violations), "unsafe,", len(report.stuck), "stuck")

# %%
# Without epochs, a duplicated activate-reads that arrives late turns reads
# back on after maintenance stopped. The checker finds the schedule.
bad = model_check(1, 1, 2, name="SQ1", rule=node_receive_unversioned, stop_on_violation=True)
for step in bad.path(bad.violations[0]):
    print(" ", step)
