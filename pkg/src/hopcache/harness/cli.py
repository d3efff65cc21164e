"""Command line front end.

State (the store, alias table and template registry) lives in a pickle
file between invocations, ``.hopcache/state.pkl`` by default. Every
command prints JSON on stdout.
"""
from __future__ import annotations

import argparse
import copy
import json
import os
import pickle
import sys
from pathlib import Path

from ..coordinator import ENABLED, REGISTERED, REMOVED, Coordinator, NodeFlags, SCState, random_loss
from ..errors import HopcacheError
from ..graphstore import GraphStore, load_jsonl
from ..kvstore import KVStore
from ..queryengine import QueryEngine
from ..templates import SubQueryTemplate
from .metrics import RunMetrics
from .oracle import oracle_check
from .report import report
from .runner import Deployment, RunConfig, run
from .workload import Universe, WorkloadSpec, generate

DEFAULT_STATE = Path(".hopcache") / "state.pkl"


# -- state file --------------------------------------------------------------------

def _state_path(args) -> Path:
    return Path(args.state or os.environ.get("HOPCACHE_STATE") or DEFAULT_STATE)


def load_state(path: Path) -> dict:
    if not path.exists():
        raise HopcacheError(f"no state at {path}; run `load <graph.jsonl>` first")
    with path.open("rb") as f:
        return pickle.load(f)


def save_state(path: Path, state: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    with tmp.open("wb") as f:
        pickle.dump(state, f, protocol=pickle.HIGHEST_PROTOCOL)
    tmp.replace(path)


def read_template_file(path: str | Path) -> list[SubQueryTemplate]:
    """JSON lines, or ``NAME __.traversal`` lines; ``#`` starts a comment."""
    out = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("{"):
            out.append(SubQueryTemplate.from_json(json.loads(line)))
        else:
            name, _, text = line.partition(" ")
            out.append(SubQueryTemplate.parse(name, text.strip()))
    return out


def _enabled(state: dict) -> list[SubQueryTemplate]:
    return [SubQueryTemplate.from_json(r["template"]) for r in state["templates"].values() if r["state"] == ENABLED]


# -- commands ----------------------------------------------------------------------

def cmd_load(args) -> dict:
    kv = KVStore()
    graph = GraphStore(kv)
    with open(args.graph) as f:
        aliases = load_jsonl(graph, f)
    with kv.begin("read-only") as tx:
        nv, ne = len(graph.vertices(tx)), len(graph.all_edges(tx))
    save_state(_state_path(args), {"kv": kv, "aliases": aliases, "templates": {}, "removed": [], "last": None})
    return {"vertices": nv, "edges": ne, "state": str(_state_path(args))}


def _cluster(state: dict, args) -> tuple[Coordinator, list[QueryEngine]]:
    kv = state["kv"]
    nodes = [QueryEngine(kv, cp_mode="deferred", aliases=state["aliases"], node_id=i) for i in range(args.nodes)]
    fault = random_loss(args.loss, args.seed) if args.loss else None
    coord = Coordinator(kv, nodes, fault)
    for name, rec in state["templates"].items():
        t = SubQueryTemplate.from_json(rec["template"])
        coord.register_template(t)
        if rec["state"] == ENABLED:
            coord.registry[name].sc = SCState(ENABLED, None, rec.get("epoch", 0))
            for i, e in enumerate(nodes):
                e.register(t)
                coord.flags[i][name] = NodeFlags(True, True, rec.get("epoch", 0))
    return coord, nodes


def _sync(state: dict, coord: Coordinator) -> None:
    for name, rec in list(state["templates"].items()):
        if name in coord.registry:
            rec["state"] = coord.registry[name].sc.state
            rec["epoch"] = coord.registry[name].sc.epoch
        elif coord.state(name) == REMOVED:
            state["removed"].append(rec["template"])
            del state["templates"][name]


def cmd_template(args) -> dict | list:
    path = _state_path(args)
    state = load_state(path)
    if args.verb == "status":
        coord, _ = _cluster(state, args)
        rows = coord.status()
        rows += [{"template": t["name"], "state": REMOVED} for t in state["removed"]]
        return rows
    coord, _ = _cluster(state, args)
    if args.verb == "register":
        out = []
        for t in read_template_file(args.target):
            coord.register_template(t)
            state["templates"][t.name] = {"template": t.to_json(), "state": REGISTERED, "epoch": 0}
            out.append({"template": t.name, "state": REGISTERED})
        save_state(path, state)
        return out
    name = args.target
    if args.verb == "enable":
        final = coord.enable_template(name, args.max_ticks)
    else:
        final = coord.disable_template(name, args.max_ticks)
    _sync(state, coord)
    save_state(path, state)
    return {"template": name, "state": final, "ticks": coord.tick, "transitions": coord.transitions,
            "messages": dict(coord.stats), "safety_violations": len(coord.safety_violations)}


def _on(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected on or off")
    return value == "on"


def cmd_run(args) -> dict:
    path = _state_path(args)
    state = load_state(path)
    spec = WorkloadSpec.load(args.workload)
    if args.seed is not None:
        spec = spec.with_(seed=args.seed)
    kv = copy.deepcopy(state["kv"])  # every run starts from the loaded graph
    aliases = dict(state["aliases"])
    trace = generate(spec, Universe.from_graph(kv, aliases))
    config = RunConfig(cache=args.cache, rewrite=args.rewrite, policy=args.policy, nodes=args.nodes,
                       drain_every=args.drain_every, warm=args.warm, verify=args.verify, oracle=args.oracle,
                       op_delay=args.op_delay_us * 1e-6, op_budget=args.op_budget)
    templates = _enabled(state)
    dep = Deployment(kv, aliases, templates, config)
    try:
        metrics = run(trace, dep, spec.name)
    finally:
        dep.close()
    if args.out:
        metrics.save(args.out, raw=args.raw)
    state["last"] = {"kv": kv, "templates": [t.to_json() for t in dep.active_templates]}
    save_state(path, state)
    return metrics.to_json()


def cmd_oracle(args) -> dict:
    state = load_state(_state_path(args))
    last = state.get("last")
    if last is not None:
        kv, templates = last["kv"], [SubQueryTemplate.from_json(t) for t in last["templates"]]
    else:
        kv, templates = state["kv"], _enabled(state)
    violations = oracle_check(kv, templates)
    return {"checked": "last-run" if last else "loaded", "violations": [v.to_json() for v in violations],
            "count": len(violations)}


def cmd_report(args) -> dict | str:
    a = RunMetrics.load(args.a)
    b = RunMetrics.load(args.b)
    cmp = report(a, b)
    return cmp.to_text() if args.text else cmp.to_json()


# -- argument parsing --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hopcache", description="One-hop sub-query cache harness.")
    p.add_argument("--state", help=f"state file (default $HOPCACHE_STATE or {DEFAULT_STATE})")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("load", help="load a graph from JSON lines")
    s.add_argument("graph")
    s.set_defaults(fn=cmd_load)

    s = sub.add_parser("template", help="register, enable, disable or list templates")
    s.add_argument("verb", choices=("register", "enable", "disable", "status"))
    s.add_argument("target", nargs="?")
    s.add_argument("--nodes", type=int, default=3, help="simulated query-processor nodes")
    s.add_argument("--loss", type=float, default=0.0, help="control-message loss probability")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--max-ticks", type=int, default=10_000)
    s.set_defaults(fn=cmd_template)

    s = sub.add_parser("run", help="generate and run a workload")
    s.add_argument("--workload", required=True, help="workload spec JSON")
    s.add_argument("--cache", type=_on, default=True)
    s.add_argument("--rewrite", type=_on, default=True)
    s.add_argument("--policy", default="write-around")
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.add_argument("--nodes", type=int, default=1)
    s.add_argument("--drain-every", type=int, default=1)
    s.add_argument("--warm", action="store_true", help="warm the cache with the trace's reads first")
    s.add_argument("--verify", action="store_true", help="diff every read against an uncached run")
    s.add_argument("--oracle", action="store_true", help="run the oracle after the trace")
    s.add_argument("--op-delay-us", type=float, default=0.0)
    s.add_argument("--op-budget", type=int)
    s.add_argument("--raw", action="store_true", help="include raw latencies in --out")
    s.set_defaults(fn=cmd_run)

    s = sub.add_parser("oracle", help="check the cache of the last run (or the loaded store)")
    s.set_defaults(fn=cmd_oracle)

    s = sub.add_parser("report", help="compare a run against a baseline run")
    s.add_argument("a", help="candidate metrics JSON")
    s.add_argument("b", help="baseline metrics JSON")
    s.add_argument("--text", action="store_true")
    s.set_defaults(fn=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "template" and args.verb != "status" and not args.target:
        print(json.dumps({"error": f"template {args.verb} needs an argument"}), file=sys.stderr)
        return 2
    try:
        out = args.fn(args)
    except (HopcacheError, OSError, ValueError) as exc:
        print(json.dumps({"error": str(exc), "type": type(exc).__name__}), file=sys.stderr)
        return 1
    if isinstance(out, str):
        print(out)
    else:
        print(json.dumps(out, indent=2, default=str))
    if args.command == "oracle" and out["count"]:
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
