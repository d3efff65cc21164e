import pickle
import random

import pytest

from hopcache.errors import NotFound
from hopcache.graphstore import (
    ADD_EDGE, ADD_VERTEX, BOTH, DELETE_EDGE, DELETE_VERTEX, EDGE_PROP, IN, OUT, VERTEX_PROP,
    GraphStore, apply_change, decode_record, encode_record, load_jsonl, snapshot,
)
from hopcache.harness.fixtures import ACTIVE_STATUS0, WATCH_LIST
from hopcache.kvstore import READ_ONLY, KVStore


class Recorder:
    def __init__(self, graph):
        self.events = []
        graph.subscribe(self)

    def __call__(self, tx, change):
        self.events.append(change)


@pytest.fixture
def g(kv):
    return GraphStore(kv)


def test_add_vertex_fresh_ids_and_event(kv, g):
    rec = Recorder(g)
    tx = kv.begin()
    a = g.add_vertex(tx, "watch-list", {"name": "BF To-Buys"})
    b = g.add_vertex(tx, "listing")
    tx.commit()
    assert a != b
    assert [e.kind for e in rec.events] == [ADD_VERTEX, ADD_VERTEX]
    with kv.begin(READ_ONLY) as r:
        assert g.vertex(r, a).props == {"name": "BF To-Buys"}


def test_aborted_add_leaves_nothing(kv, g):
    tx = kv.begin()
    vid = g.add_vertex(tx, "x")
    tx.close()
    with kv.begin(READ_ONLY) as r:
        assert g.get_vertex(r, vid) is None


def test_delete_watch_list_emits_51_events(fig1):
    rec = Recorder(fig1.graph)
    tx = fig1.kv.begin()
    fig1.graph.delete_vertex(tx, WATCH_LIST)
    tx.commit()
    kinds = [e.kind for e in rec.events]
    assert len(kinds) == 51
    assert kinds.count(DELETE_EDGE) == 50 and kinds[-1] == DELETE_VERTEX
    assert len(rec.events[-1].incident_edges) == 50


def test_delete_isolated_and_absent(kv, g):
    rec = Recorder(g)
    tx = kv.begin()
    v = g.add_vertex(tx, "x")
    rec.events.clear()
    g.delete_vertex(tx, v)
    assert len(rec.events) == 1
    with pytest.raises(NotFound):
        g.delete_vertex(tx, 999_999)


def test_edges_self_loop_and_missing_endpoint(kv, g):
    tx = kv.begin()
    v = g.add_vertex(tx, "x")
    e = g.add_edge(tx, v, v, "self")
    assert g.edges(tx, v, BOTH) == [e]
    assert g.neighbors(tx, v, BOTH) == [v]
    w = g.add_vertex(tx, "x")
    g.delete_vertex(tx, w)
    with pytest.raises(NotFound):
        g.add_edge(tx, v, w, "to-deleted")


def test_property_changes_carry_old_and_new(fig1):
    rec = Recorder(fig1.graph)
    tx = fig1.kv.begin()
    assert fig1.graph.set_vertex_property(tx, 15, "Status", 1)
    assert fig1.graph.set_edge_property(tx, fig1.edges[16], "IsActive", False)
    assert not fig1.graph.set_vertex_property(tx, 15, "absent", None)
    tx.commit()
    vp, ep = rec.events
    assert (vp.kind, vp.prop_name, vp.old_value, vp.new_value) == (VERTEX_PROP, "Status", 0, 1)
    assert (ep.kind, ep.prop_name, ep.old_value, ep.new_value) == (EDGE_PROP, "IsActive", True, False)


def test_add_and_delete_property_taxonomy(kv, g):
    rec = Recorder(g)
    tx = kv.begin()
    v = g.add_vertex(tx, "x")
    g.set_vertex_property(tx, v, "p", 1)
    g.set_vertex_property(tx, v, "p", None)
    added, deleted = rec.events[1:]
    assert (added.old_value, added.new_value) == (None, 1)
    assert (deleted.old_value, deleted.new_value) == (1, None)


def test_fig1_neighbors(fig1):
    with fig1.kv.begin(READ_ONLY) as tx:
        ids = fig1.graph.neighbors(
            tx, WATCH_LIST, OUT, "includes",
            lambda e: e.props.get("IsActive") is True,
            lambda v: v.props.get("Status") == 0,
        )
        assert ids == list(ACTIVE_STATUS0)
        assert fig1.graph.neighbors(tx, 105, OUT) == []
        with pytest.raises(NotFound):
            fig1.graph.neighbors(tx, 424242, OUT)


def random_graph(seed, n=40, m=160):
    rng = random.Random(seed)
    kv = KVStore()
    g = GraphStore(kv)
    tx = kv.begin()
    vs = [g.add_vertex(tx, rng.choice("ab"), {"k": rng.randrange(3)}) for _ in range(n)]
    for _ in range(m):
        g.add_edge(tx, rng.choice(vs), rng.choice(vs), rng.choice(["r", "s"]), {"w": rng.randrange(3)})
    tx.commit()
    return kv, g, vs


@pytest.mark.parametrize("seed", range(5))
def test_neighbors_matches_brute_force(seed):
    kv, g, vs = random_graph(seed)
    with kv.begin(READ_ONLY) as tx:
        edges = g.all_edges(tx)
        verts = {v.id: v for v in g.vertices(tx)}
        for v in vs:
            for d in (OUT, IN, BOTH):
                got = g.neighbors(tx, v, d, "r", lambda e: e.props["w"] > 0, lambda x: x.label == "a")
                want = set()
                for e in edges:
                    if e.label != "r" or e.props["w"] == 0:
                        continue
                    if d in (OUT, BOTH) and e.out_v == v and verts[e.in_v].label == "a":
                        want.add(e.in_v)
                    if d in (IN, BOTH) and e.in_v == v and verts[e.out_v].label == "a":
                        want.add(e.out_v)
                assert got == sorted(want)


@pytest.mark.parametrize("seed", range(4))
def test_change_stream_replays_to_post_state(seed):
    kv, g, vs = random_graph(seed)
    rng = random.Random(100 + seed)
    with kv.begin(READ_ONLY) as tx:
        vertices, edges = snapshot(g, tx)
    rec = Recorder(g)
    tx = kv.begin()
    live = list(vs)
    for _ in range(120):
        r = rng.random()
        if r < 0.2:
            live.append(g.add_vertex(tx, "a", {"k": 1}))
        elif r < 0.3 and len(live) > 2:
            v = live.pop(rng.randrange(len(live)))
            g.delete_vertex(tx, v)
        elif r < 0.55:
            g.add_edge(tx, rng.choice(live), rng.choice(live), "r", {"w": 1})
        elif r < 0.7:
            es = g.all_edges(tx)
            if es:
                g.delete_edge(tx, rng.choice(es).id)
        elif r < 0.85:
            g.set_vertex_property(tx, rng.choice(live), rng.choice("kq"), rng.choice([None, 0, 1, "x", True]))
        else:
            es = g.all_edges(tx)
            if es:
                g.set_edge_property(tx, rng.choice(es).id, "w", rng.choice([None, 0, 5]))
    tx.commit()
    for change in rec.events:
        apply_change(vertices, edges, change)
    with kv.begin(READ_ONLY) as tx:
        v2, e2 = snapshot(g, tx)
        assert vertices == v2 and edges == e2
        # referential integrity
        assert all(e.out_v in v2 and e.in_v in v2 for e in e2.values())


def test_listener_writes_commit_with_the_change(kv, g):
    def listener(tx, change):
        tx.set(b"audit/" + change.kind.encode(), b"1")

    g.subscribe(listener)
    tx = kv.begin()
    g.add_vertex(tx, "x")
    tx.close()
    assert kv.begin(READ_ONLY).get(b"audit/add-vertex") is None
    tx = kv.begin()
    g.add_vertex(tx, "x")
    tx.commit()
    assert kv.begin(READ_ONLY).get(b"audit/add-vertex") == b"1"


def test_ids_never_reused_even_across_pickle(kv, g):
    tx = kv.begin()
    a = g.add_vertex(tx, "x")
    b = g.add_vertex(tx, "x")
    g.delete_vertex(tx, b)
    tx.commit()
    kv2 = pickle.loads(pickle.dumps(kv))
    g2 = GraphStore(kv2)
    tx = kv2.begin()
    c = g2.add_vertex(tx, "x")
    assert c not in (a, b) and c > b


def test_record_roundtrip():
    props = {"s": "café:&", "i": -7, "b": False, "t": True, "n": 2**62}
    label, back = decode_record(encode_record("lbl", props))
    assert label == "lbl" and back == props
    assert type(back["b"]) is bool and type(back["i"]) is int


def test_load_jsonl_aliases(kv, g):
    lines = [
        '{"t":"v","id":10,"label":"watch-list","props":{"name":"BF To-Buys"}}',
        '{"t":"v","id":15,"label":"listing","props":{"Status":0}}',
        '{"t":"e","out":10,"in":15,"label":"includes","props":{"IsActive":true}}',
    ]
    aliases = load_jsonl(g, lines)
    assert set(aliases) == {"10", "15"}
    with kv.begin(READ_ONLY) as tx:
        assert g.neighbors(tx, aliases["10"], OUT) == [aliases["15"]]
    with pytest.raises(NotFound):
        load_jsonl(g, ['{"t":"e","out":1,"in":2,"label":"x"}'])


def test_edges_between_direction(kv, g):
    tx = kv.begin()
    a, b = g.add_vertex(tx, "x"), g.add_vertex(tx, "x")
    e = g.add_edge(tx, a, b, "r")
    assert g.edges_between(tx, a, b, OUT) == [e]
    assert g.edges_between(tx, b, a, IN) == [e]
    assert g.edges_between(tx, b, a, OUT) == []
    assert g.edges_between(tx, b, a, BOTH) == [e]


def test_add_edge_event(kv, g):
    rec = Recorder(g)
    tx = kv.begin()
    a = g.add_vertex(tx, "x")
    e = g.add_edge(tx, a, a, "r", {"w": 1})
    assert rec.events[-1].kind == ADD_EDGE and rec.events[-1].edge == e
