"""
Desk-scale latency: cache and rewrites on and off
=================================================

Numbers depend on the machine. The injected per-operation delay stands in
for the network round trip to the store.

Run with ``python3 notebooks/03_desk_benchmark.py``.
"""

# %%
import copy
import json

import numpy as np

from hopcache.graphstore import GraphStore, load_jsonl
from hopcache.harness.fixtures import default_templates, desk_graph_records
from hopcache.harness.report import report
from hopcache.harness.runner import Deployment, RunConfig, run
from hopcache.harness.workload import PRESETS, Universe, generate, mix
from hopcache.kvstore import KVStore
from hopcache.queryengine import amdahl_speedup

records = desk_graph_records(0)
base = KVStore()
aliases = load_jsonl(GraphStore(base), [json.dumps(r) for r in records])
universe = Universe.from_records(records)
print(sum(r["t"] == "v" for r in records), "vertices,", sum(r["t"] == "e" for r in records), "edges")

# %%
CONFIGS = {
    "C+Q+": dict(cache=True, rewrite=True),
    "C+Q-": dict(cache=True, rewrite=False),
    "C-Q+": dict(cache=False, rewrite=True),
    "C-Q-": dict(cache=False, rewrite=False),
}


def measure(spec, label, ops=800, delay=50e-6):
    trace = generate(spec.with_(duration_ops=ops), universe)
    dep = Deployment(copy.deepcopy(base), dict(aliases), default_templates(),
                     RunConfig(warm=True, op_delay=delay, **CONFIGS[label]))
    try:
        return run(trace, dep, spec.name)
    finally:
        dep.close()


# %%
results = {}
for name, spec in PRESETS.items():
    print(name, mix(generate(spec.with_(duration_ops=800), universe)))
    for label in CONFIGS:
        results[name, label] = measure(spec, label)

# %%
for name in PRESETS:
    print()
    print(report(results[name, "C+Q+"], results[name, "C-Q-"]).to_text())
    m = results[name, "C+Q+"]
    print("hit rate", {t: round(m.hit_rate(t), 3) for t in sorted(m.hits)})

# %%
# The percentile helper uses nearest rank; numpy's "inverted_cdf" method is
# the same definition.
lat = results["R-hat", "C-Q-"].latencies_us["read"]
print(results["R-hat", "C-Q-"].percentiles("read")["p95"], np.percentile(lat, 95, method="inverted_cdf"))

# %%
# How much of a read-heavy run can the cache speed up at most?
for f in (0.1, 0.5, 0.9):
    print(f"f={f}: {amdahl_speedup(f, 10):.2f}x")
