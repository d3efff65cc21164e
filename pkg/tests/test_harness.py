import copy
import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from hopcache.errors import InvalidWorkload
from hopcache.harness.cli import main
from hopcache.harness.fixtures import SQ1, build_fig1, default_templates, desk_graph_jsonl, templates_jsonl
from hopcache.harness.metrics import RunMetrics, percentile
from hopcache.harness.oracle import cache_keys, corrupt, oracle_check
from hopcache.harness.report import report
from hopcache.harness.runner import Deployment, RunConfig, run
from hopcache.harness.workload import (
    DELETE_EDGES, LAST_SEEN, MUTATION, UPSERT, R_HAT, W_HAT, Universe, WorkloadSpec, generate, mix, preset,
)

from conftest import SMALL_EDGES, SMALL_LABELS


@pytest.fixture
def universe(small_desk):
    recs, kv, aliases, templates = small_desk
    return Universe.from_records(recs)


# -- workloads -----------------------------------------------------------------------

def test_r_hat_mix(universe):
    m = mix(generate(R_HAT.with_(duration_ops=10_000), universe))
    writes = sum(v for k, v in m.items() if k.startswith("write:"))
    assert abs(writes - 100) <= 50  # five binomial standard deviations
    assert sum(m.values()) == 10_000


def test_w_hat_write_shares(universe):
    m = mix(generate(W_HAT.with_(duration_ops=10_000), universe))
    writes = {k.split(":")[1]: v for k, v in m.items() if k.startswith("write:")}
    total = sum(writes.values())
    assert abs(total / 10_000 - 0.38) < 0.03
    for kind, share in ((UPSERT, 0.4485), (LAST_SEEN, 0.4394), (DELETE_EDGES, 0.1122)):
        assert abs(writes[kind] / total - share) < 0.03


def test_trace_is_deterministic(universe):
    spec = W_HAT.with_(duration_ops=500, seed=3)
    assert generate(spec, universe) == generate(spec, universe)
    assert generate(spec, universe) != generate(spec.with_(seed=4), universe)
    json.dumps(generate(spec, universe))  # traces are plain JSON


@pytest.mark.parametrize("changes", [
    {"read_fraction": 1.5},
    {"duration_ops": -1},
    {"write_shares": {UPSERT: 0.5, LAST_SEEN: 0.4}},
    {"write_shares": {"truncate": 1.0}},
    {"queries": {}},
    {"zipf_s": -1.0},
])
def test_invalid_workloads(changes):
    with pytest.raises(InvalidWorkload):
        WorkloadSpec(**changes)


def test_workload_json(tmp_path):
    p = tmp_path / "w.json"
    p.write_text(json.dumps({"preset": "W-hat", "duration_ops": 20, "seed": 9}))
    spec = WorkloadSpec.load(p)
    assert (spec.name, spec.read_fraction, spec.duration_ops, spec.seed) == ("W-hat", 0.62, 20, 9)
    assert WorkloadSpec.from_json(spec.to_json()) == spec
    with pytest.raises(InvalidWorkload):
        WorkloadSpec.from_json({"bogus": 1})
    with pytest.raises(InvalidWorkload):
        preset("nope")


def test_mutation_share_generates_all_sub_kinds(universe):
    spec = WorkloadSpec(read_fraction=0.0, duration_ops=2000, write_shares={MUTATION: 1.0})
    kinds = {op["args"]["m"] for op in generate(spec, universe)}
    assert kinds == {"vertex-prop", "edge-prop", "add-edge", "delete-edge", "add-vertex", "delete-vertex"}


# -- metrics -------------------------------------------------------------------------

def test_percentile_of_identical_values():
    assert percentile([7.0] * 100, 99) == 7.0


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=200))
def test_p95_monotone_under_outlier(xs):
    assert percentile(xs + [max(xs) * 2 + 1], 95) >= percentile(xs, 95)


def test_nearest_rank():
    xs = list(range(1, 101))
    assert (percentile(xs, 50), percentile(xs, 95), percentile(xs, 100)) == (50, 95, 100)
    with pytest.raises(ValueError):
        percentile([], 50)
    with pytest.raises(ValueError):
        percentile([1], 0)


def test_metrics_json_round_trip(tmp_path):
    m = RunMetrics("w", {"label": "C+Q+"})
    for x in (1.0, 2.0, 3.0):
        m.record("read", x)
    m.hits["SQ1"] += 3
    m.record_impact(UPSERT, 2)
    m.save(tmp_path / "m.json")
    back = RunMetrics.load(tmp_path / "m.json")
    assert back.summary("read") == m.summary("read")
    assert back.hit_rate() == 1.0 and back.impacted_keys == {UPSERT: {2: 1}}


# -- oracle ----------------------------------------------------------------------------

def test_oracle_fresh_store_is_clean():
    f = build_fig1()
    assert oracle_check(f.kv, [SQ1]) == []


def test_oracle_flags_one_corrupted_entry():
    f = build_fig1()
    corrupt(f.kv, "SQ1:10:IsActive=true&Status=0", [11, 12])
    [v] = oracle_check(f.kv, [SQ1])
    assert v.key == "SQ1:10:IsActive=true&Status=0" and v.kind == "stale"
    assert v.expected[:2] == [11, 12] and len(v.expected) == 25


def test_oracle_other_violation_kinds():
    f = build_fig1()
    corrupt(f.kv, "SQ1:15:IsActive=true&Status=0", [1])       # listing root fails the root predicate
    corrupt(f.kv, "SQX:10:", [1])                              # template not enabled
    corrupt(f.kv, "SQ1:10:color=red&Status=0", [1])            # bindings do not fit the template
    kinds = {v.key: v.kind for v in oracle_check(f.kv, [SQ1])}
    assert kinds == {"SQ1:15:IsActive=true&Status=0": "orphan", "SQX:10:": "unknown-template",
                     "SQ1:10:color=red&Status=0": "bad-key"}


# -- runner ----------------------------------------------------------------------------

def deployment(small_desk, **config):
    recs, kv, aliases, templates = small_desk
    return Deployment(copy.deepcopy(kv), dict(aliases), templates, RunConfig(**config))


def test_repeated_query_reaches_full_hit_rate(small_desk):
    q = 'g.V("W0").outE("includes").has("IsActive",true).inV().has("Status",0).id()'
    trace = [{"op": "read", "kind": "q1", "query": q}] * 20
    dep = deployment(small_desk, warm=True)
    m = run(trace, dep)
    assert m.hit_rate("SQ1") == 1.0 and m.ops == 20


@pytest.mark.parametrize("policy", ["write-around", "write-through:lazy", "write-through:proactive"])
def test_cached_and_uncached_agree(small_desk, universe, policy):
    spec = W_HAT.with_(duration_ops=400, seed=5, write_shares={UPSERT: 0.3, LAST_SEEN: 0.2, DELETE_EDGES: 0.1,
                                                               MUTATION: 0.4})
    dep = deployment(small_desk, policy=policy, verify=True, oracle=True, oracle_every=100, nodes=2,
                     drain_every=3, race_every=4)
    m = run(generate(spec, universe), dep)
    assert m.diffs == 0, m.diff_examples
    assert m.errors["oracle"] == 0 and m.oracle_checks == 5
    assert m.errors["impact_bound"] == 0
    assert sum(m.hits.values()) > 0


def test_cache_off_never_touches_cache(small_desk, universe):
    dep = deployment(small_desk, cache=False, rewrite=False)
    m = run(generate(R_HAT.with_(duration_ops=200), universe), dep)
    assert m.hit_rate() is None and cache_keys(dep.kv) == []
    assert m.counters["cache_reads"] == 0


def test_op_budget_counts_timeouts(small_desk, universe):
    dep = deployment(small_desk, op_budget=3)
    m = run(generate(R_HAT.with_(duration_ops=100), universe), dep)
    assert m.errors["timeout"] > 0


# -- report ----------------------------------------------------------------------------

def test_report_against_itself():
    m = RunMetrics("w", {"label": "C+Q+"})
    for x in range(1, 50):
        m.record("read", float(x))
        m.record("write", float(2 * x))
    cmp = report(m, m)
    assert cmp.rows and all(r["factor"] == 1.0 for r in cmp.rows)
    assert "1.00x" in cmp.to_text()


def test_report_needs_baseline():
    with pytest.raises(ValueError):
        report(RunMetrics(), None)


def test_report_direction(small_desk, universe):
    trace = generate(R_HAT.with_(duration_ops=300, seed=2), universe)
    fast = run(trace, deployment(small_desk, warm=True, op_delay=50e-6))
    slow = run(trace, deployment(small_desk, cache=False, rewrite=False, op_delay=50e-6))
    factor = report(fast, slow).factor("p95", "read")
    assert factor is not None and factor > 1


# -- command line ------------------------------------------------------------------------

def cli(capsys, *argv):
    rc = main(list(argv))
    out, err = capsys.readouterr()
    return rc, out, err


def test_cli_end_to_end(tmp_path, capsys, monkeypatch):
    state = tmp_path / "state.pkl"
    monkeypatch.setenv("HOPCACHE_STATE", str(state))
    small = {"label_counts": SMALL_LABELS, "edge_counts": SMALL_EDGES}
    (tmp_path / "g.jsonl").write_text(desk_graph_jsonl(1, **small))
    (tmp_path / "t.jsonl").write_text(templates_jsonl())
    (tmp_path / "w.json").write_text(json.dumps({"preset": "R-hat", "duration_ops": 150}))

    rc, out, _ = cli(capsys, "load", str(tmp_path / "g.jsonl"))
    assert rc == 0 and json.loads(out)["vertices"] == sum(SMALL_LABELS.values())
    rc, out, _ = cli(capsys, "template", "register", str(tmp_path / "t.jsonl"))
    assert rc == 0 and len(json.loads(out)) == 6
    for t in default_templates():
        rc, out, _ = cli(capsys, "template", "enable", t.name, "--loss", "0.2", "--seed", "1")
        assert rc == 0 and json.loads(out)["state"] == "enabled"
    rc, out, err = cli(capsys, "template", "register", str(tmp_path / "t.jsonl"))
    assert rc == 1 and "already registered" in json.loads(err)["error"]

    for label, flags in (("on", ["--cache", "on"]), ("off", ["--cache", "off", "--rewrite", "off"])):
        rc, out, _ = cli(capsys, "run", "--workload", str(tmp_path / "w.json"), *flags, "--verify", "--oracle",
                         "--out", str(tmp_path / f"{label}.json"), "--raw")
        body = json.loads(out)
        assert rc == 0 and body["diffs"] == 0 and body["errors"].get("oracle", 0) == 0
    rc, out, _ = cli(capsys, "oracle")
    assert rc == 0 and json.loads(out)["count"] == 0
    rc, out, _ = cli(capsys, "report", str(tmp_path / "on.json"), str(tmp_path / "off.json"), "--text")
    assert rc == 0 and "p95" in out

    rc, out, _ = cli(capsys, "template", "disable", "SQ6")
    assert rc == 0 and json.loads(out)["state"] == "removed"
    rc, out, _ = cli(capsys, "template", "status")
    states = {r["template"]: r["state"] for r in json.loads(out)}
    assert states["SQ6"] == "removed" and states["SQ1"] == "enabled"


def test_cli_errors(tmp_path, capsys):
    rc, _, err = cli(capsys, "--state", str(tmp_path / "none.pkl"), "oracle")
    assert rc == 1 and "no state" in json.loads(err)["error"]
    rc, _, err = cli(capsys, "--state", str(tmp_path / "none.pkl"), "template", "enable")
    assert rc == 2
