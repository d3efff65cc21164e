import pytest

from hopcache.cache import CacheStore
from hopcache.coordinator import (
    ACTIVATE_READS, DEACTIVATE_INVALIDATION, DEACTIVATE_READS, ENABLED, INSTALL, INSTALLED, LEGAL, REGISTERED,
    REMOVED, Coordinator, Message, NodeFlags, drop_all, drop_first, model_check, node_receive,
    node_receive_unversioned, random_loss, replay,
)
from hopcache.errors import DuplicateTemplate, LifecycleError
from hopcache.harness.fixtures import ACTIVE_STATUS0, FIG1_IDS_QUERY, SQ1, build_fig1
from hopcache.harness.oracle import cache_keys, corrupt, oracle_check
from hopcache.queryengine import QueryEngine


@pytest.fixture
def cluster():
    f = build_fig1()
    nodes = [QueryEngine(f.kv, cp_mode="deferred") for _ in range(3)]
    yield f, nodes, Coordinator(f.kv, nodes)
    for n in nodes:
        n.close()


def deliver_all(c, kind=None, ack=None):
    for m in list(c.inflight):
        if (kind is None or m.kind == kind) and (ack is None or m.ack == ack):
            c.deliver(m)


def test_register(cluster):
    f, nodes, c = cluster
    assert c.register_template(SQ1) == REGISTERED
    with pytest.raises(DuplicateTemplate):
        c.register_template(SQ1)
    # registered only: the query runs without the cache
    assert nodes[0].query(FIG1_IDS_QUERY) == list(ACTIVE_STATUS0)
    assert sum(nodes[0].misses.values()) == 0 and cache_keys(f.kv) == []


def test_enable_without_faults(cluster):
    f, nodes, c = cluster
    c.register_template(SQ1)
    assert c.enable_template("SQ1") == ENABLED
    assert [(a, b) for _, a, b in c.transitions] == [(REGISTERED, INSTALLED), (INSTALLED, ENABLED)]
    assert all(fl["SQ1"].invalidate_active and fl["SQ1"].read_active for fl in c.flags)
    assert all(n.slots["SQ1"].read_active for n in nodes)
    # two phases, each one round trip: four ticks
    assert c.tick == 4 and c.stats["resent"] == 0


def test_dropped_install_is_resent(cluster):
    f, nodes, c = cluster
    c.fault = drop_first(1, lambda m: m.kind == INSTALL and m.node == 1 and not m.ack)
    c.register_template(SQ1)
    assert c.enable_template("SQ1") == ENABLED
    assert c.stats["dropped"] == 1 and c.stats["resent"] >= 1


def test_read_between_phases_is_uncached(cluster):
    f, nodes, c = cluster
    c.register_template(SQ1)
    c.start_enable("SQ1")
    deliver_all(c, INSTALL, ack=False)
    deliver_all(c, INSTALL, ack=True)
    assert c.state("SQ1") == INSTALLED
    # plant a wrong entry; a node still waiting for activate-reads must not read it
    corrupt(f.kv, "SQ1:10:IsActive=true&Status=0", [999])
    node = nodes[2]
    assert node.query(FIG1_IDS_QUERY) == list(ACTIVE_STATUS0)
    assert node.hits["SQ1"] == node.misses["SQ1"] == 0


def test_disable_clears_prefix(cluster):
    f, nodes, c = cluster
    c.register_template(SQ1)
    c.enable_template("SQ1")
    nodes[0].query(FIG1_IDS_QUERY)
    nodes[0].cp_drain()
    assert cache_keys(f.kv, "SQ1:")
    assert c.disable_template("SQ1") == REMOVED
    assert cache_keys(f.kv, "SQ1:") == [] and list(f.kv.items(b"C/SQ1:")) == []
    assert c.state("SQ1") == REMOVED and c.removed == [SQ1]
    assert all("SQ1" not in n.slots for n in nodes)
    assert [(a, b) for _, a, b in c.transitions][-2:] == [(ENABLED, INSTALLED), (INSTALLED, REMOVED)]


def test_write_between_disable_phases_still_invalidates(cluster):
    f, nodes, c = cluster
    c.register_template(SQ1)
    c.enable_template("SQ1")
    nodes[0].query(FIG1_IDS_QUERY)
    nodes[0].cp_drain()
    c.start_disable("SQ1")
    deliver_all(c, DEACTIVATE_READS, ack=False)
    deliver_all(c, DEACTIVATE_READS, ack=True)
    assert c.registry["SQ1"].sc.phase == DEACTIVATE_INVALIDATION
    nodes[1].execute_rmw(lambda tx, e: e.graph.delete_vertex(tx, 15))
    assert "SQ1:10:IsActive=true&Status=0" not in cache_keys(f.kv)
    assert oracle_check(f.kv, [SQ1]) == []


def test_disable_never_enabled_is_an_error(cluster):
    f, nodes, c = cluster
    c.register_template(SQ1)
    with pytest.raises(LifecycleError):
        c.disable_template("SQ1")
    with pytest.raises(LifecycleError):
        c.enable_template("nope")


def test_enable_twice_is_an_error(cluster):
    f, nodes, c = cluster
    c.register_template(SQ1)
    c.enable_template("SQ1")
    with pytest.raises(LifecycleError):
        c.start_enable("SQ1")


def test_drop_everything_never_advances(cluster):
    f, nodes, c = cluster
    c.fault = drop_all
    c.register_template(SQ1)
    assert c.enable_template("SQ1", max_ticks=50) == REGISTERED
    assert all(not fl.get("SQ1", NodeFlags()).invalidate_active for fl in c.flags)


@pytest.mark.parametrize("seed", range(10))
def test_random_loss_is_safe_and_live(seed):
    f = build_fig1()
    nodes = [QueryEngine(f.kv, cp_mode="deferred") for _ in range(3)]
    c = Coordinator(f.kv, nodes, random_loss(0.2, seed))
    c.register_template(SQ1)
    c.start_enable("SQ1")
    while c.state("SQ1") != ENABLED:
        c.simulate_step()
        assert all(fl.get("SQ1", NodeFlags()).safe for fl in c.flags)
        for i, n in enumerate(nodes):
            slot = n.slots.get("SQ1")
            assert slot is None or not slot.read_active or slot.invalidate_active
        assert c.tick < 1000
    assert c.disable_template("SQ1") == REMOVED
    assert not c.safety_violations
    assert all((a, b) in LEGAL for _, a, b in c.transitions)


def test_determinism_given_seed():
    def trace(seed):
        f = build_fig1()
        c = Coordinator(f.kv, [QueryEngine(f.kv, cp_mode="deferred") for _ in range(3)], random_loss(0.3, seed))
        c.register_template(SQ1)
        c.enable_template("SQ1")
        return c.tick, dict(c.stats)

    assert trace(4) == trace(4)


# -- node rule ------------------------------------------------------------------

@pytest.mark.parametrize("kind", [INSTALL, ACTIVATE_READS, DEACTIVATE_READS, DEACTIVATE_INVALIDATION])
def test_duplicate_delivery_is_idempotent(kind):
    start = NodeFlags(True, kind == DEACTIVATE_READS, 0)
    msg = Message(kind, "SQ1", 1, 0)
    once, ack1 = node_receive(start, msg)
    twice, ack2 = node_receive(once, msg)
    assert twice == once and ack1 == ack2 and ack1.ack


def test_stale_message_is_ignored():
    flags = NodeFlags(True, False, 3)
    assert node_receive(flags, Message(ACTIVATE_READS, "SQ1", 2, 0)) == (flags, None)


def test_node_rule_does_not_mask_protocol_errors():
    # an out-of-protocol activate-reads is applied as sent, so the checker can see it
    flags, _ = node_receive(NodeFlags(), Message(ACTIVATE_READS, "SQ1", 2, 0))
    assert not flags.safe


# -- model checking ---------------------------------------------------------------

def test_model_check_small_cluster():
    r = model_check(3, 1, 1, name="SQ1")
    assert r.safe and not r.stuck and r.terminal


def test_model_check_with_duplicates():
    r = model_check(1, 1, 2, name="SQ1")
    assert r.safe and not r.stuck


def test_checker_finds_the_unversioned_bug():
    r = model_check(1, 1, 2, name="SQ1", rule=node_receive_unversioned, stop_on_violation=True)
    assert not r.safe
    path = r.path(r.violations[0])
    assert path and any(kind == "resend" for kind, _ in path)


def test_witness_replay_leaves_no_entries():
    report = model_check(2, 1, 1, name="SQ1")
    for path in list(report.witnesses.values())[:4]:
        f = build_fig1()
        nodes = [QueryEngine(f.kv, cp_mode="deferred") for _ in range(2)]
        c = Coordinator(f.kv, nodes)
        c.register_template(SQ1)
        c.start_enable("SQ1")

        def warm():
            nodes[0].query(FIG1_IDS_QUERY)
            nodes[0].cp_drain()
            assert cache_keys(f.kv, "SQ1:")

        replay(c, "SQ1", path, on_enabled=warm)
        assert c.state("SQ1") == REMOVED
        assert cache_keys(f.kv, "SQ1:") == []
