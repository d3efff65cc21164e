"""Template life-cycle coordination across query-processor nodes.

A template moves ``registered -> installed -> enabled -> installed ->
removed``. Enabling runs two phases: first every node starts maintaining
the template's cache on writes (``install``), and only after all nodes
acknowledge does any node start using it on reads (``activate-reads``).
Disabling reverses this: reads stop everywhere (``deactivate-reads``),
then maintenance stops everywhere (``deactivate-invalidation``), and
finally the template's key prefix is cleared in one transaction.

Messages can be lost, delayed and duplicated. The coordinator resends a
phase's request to a node until it acknowledges. Every request carries the
phase's epoch; a node ignores requests older than the newest epoch it has
seen, so a stale ``activate-reads`` can never turn reads back on.

The transition rules are pure functions (:func:`node_receive`,
:func:`sc_start`, :func:`sc_receive_ack`). :class:`Coordinator` drives real
:class:`~hopcache.queryengine.QueryEngine` nodes with them, and
:func:`model_check` explores every interleaving of a small cluster with
the same functions.
"""
from __future__ import annotations

import random
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from .cache import CACHE_PREFIX
from .errors import DuplicateTemplate, LifecycleError
from .kvstore import KVStore
from .templates import SubQueryTemplate, template_prefix

REGISTERED = "registered"
INSTALLED = "installed"
ENABLED = "enabled"
REMOVED = "removed"

LEGAL = {
    (REGISTERED, INSTALLED),
    (INSTALLED, ENABLED),
    (ENABLED, INSTALLED),
    (INSTALLED, REMOVED),
}

INSTALL = "install"
ACTIVATE_READS = "activate-reads"
DEACTIVATE_READS = "deactivate-reads"
DEACTIVATE_INVALIDATION = "deactivate-invalidation"


@dataclass(frozen=True, order=True)
class Message:
    kind: str
    template: str
    epoch: int
    node: int
    ack: bool = False


@dataclass(frozen=True)
class NodeFlags:
    invalidate_active: bool = False
    read_active: bool = False
    epoch: int = 0

    @property
    def safe(self) -> bool:
        return self.invalidate_active or not self.read_active


@dataclass(frozen=True)
class SCState:
    """Coordinator view of one template."""

    state: str = REGISTERED
    phase: str | None = None  # message kind being broadcast, if any
    epoch: int = 0
    acked: frozenset = frozenset()
    clear_pending: bool = False  # set when the final clear-range must run


# -- pure transition rules ---------------------------------------------------------

def node_receive(flags: NodeFlags, msg: Message) -> tuple[NodeFlags, Message | None]:
    """A node handling a request; returns its new flags and the ack to send (if any)."""
    if msg.epoch < flags.epoch:
        return flags, None  # stale: a newer phase has already reached this node
    if msg.epoch == flags.epoch:
        return flags, replace(msg, ack=True)  # duplicate: already applied, re-ack
    inval, read = flags.invalidate_active, flags.read_active
    if msg.kind == INSTALL:
        inval = True
    elif msg.kind == ACTIVATE_READS:
        read = True
    elif msg.kind == DEACTIVATE_READS:
        read = False
    elif msg.kind == DEACTIVATE_INVALIDATION:
        inval = False
    else:
        raise ValueError(msg.kind)
    return NodeFlags(inval, read, msg.epoch), replace(msg, ack=True)


def node_receive_unversioned(flags: NodeFlags, msg: Message) -> tuple[NodeFlags, Message | None]:
    """A node that ignores epochs; unsafe once messages can be duplicated."""
    return node_receive(replace(flags, epoch=msg.epoch - 1), msg)


def sc_start(sc: SCState, op: str) -> SCState:
    """Begin ``enable`` or ``disable``; the caller broadcasts ``sc.phase``."""
    if op == "enable":
        if sc.state == REGISTERED:
            return replace(sc, phase=INSTALL, epoch=sc.epoch + 1, acked=frozenset())
        if sc.state == INSTALLED and sc.phase is None:
            return replace(sc, phase=ACTIVATE_READS, epoch=sc.epoch + 1, acked=frozenset())
        raise LifecycleError(f"cannot enable a template that is {sc.state}")
    if op == "disable":
        if sc.state != ENABLED or sc.phase is not None:
            raise LifecycleError(f"cannot disable a template that is {sc.state}")
        return replace(sc, phase=DEACTIVATE_READS, epoch=sc.epoch + 1, acked=frozenset())
    raise ValueError(op)


def sc_receive_ack(sc: SCState, ack: Message, n_nodes: int) -> SCState:
    """Record an ack; when a phase completes, move to the next state (and phase)."""
    if sc.phase is None or ack.epoch != sc.epoch or ack.kind != sc.phase:
        return sc
    acked = sc.acked | {ack.node}
    if len(acked) < n_nodes:
        return replace(sc, acked=acked)
    nxt = sc.epoch + 1
    if sc.phase == INSTALL:
        return SCState(INSTALLED, ACTIVATE_READS, nxt, frozenset())
    if sc.phase == ACTIVATE_READS:
        return SCState(ENABLED, None, sc.epoch, frozenset())
    if sc.phase == DEACTIVATE_READS:
        return SCState(INSTALLED, DEACTIVATE_INVALIDATION, nxt, frozenset())
    return SCState(INSTALLED, None, sc.epoch, frozenset(), clear_pending=True)


def sc_finish_clear(sc: SCState) -> SCState:
    return SCState(REMOVED, None, sc.epoch, frozenset())


def phase_requests(sc: SCState, name: str, nodes: Iterable[int]) -> list[Message]:
    if sc.phase is None:
        return []
    return [Message(sc.phase, name, sc.epoch, n) for n in nodes if n not in sc.acked]


# -- the simulated deployment ------------------------------------------------------

@dataclass
class TemplateRecord:
    template: SubQueryTemplate
    sc: SCState = field(default_factory=SCState)


FaultSchedule = Callable[[int, Message], bool]  # (tick, message) -> drop?


def random_loss(p: float, seed: int = 0) -> FaultSchedule:
    rng = random.Random(seed)
    return lambda tick, msg: rng.random() < p


def drop_first(n: int, match: Callable[[Message], bool]) -> FaultSchedule:
    """Drop the first ``n`` messages satisfying ``match``."""
    left = [n]

    def schedule(tick: int, msg: Message) -> bool:
        if left[0] > 0 and match(msg):
            left[0] -= 1
            return True
        return False

    return schedule


def drop_all(tick: int, msg: Message) -> bool:
    return True


class Coordinator:
    """Service coordinator plus an in-process message network.

    ``nodes`` are query engines sharing ``kv``. Node flags are applied to
    the engines between transactions, which is where control messages are
    delivered in this single-threaded simulation.
    """

    def __init__(self, kv: KVStore, nodes: Sequence, fault: FaultSchedule | None = None):
        self.kv = kv
        self.nodes = list(nodes)
        self.fault = fault
        self.registry: dict[str, TemplateRecord] = {}
        self.removed: list[SubQueryTemplate] = []
        self.flags: list[dict[str, NodeFlags]] = [{} for _ in self.nodes]
        self.inflight: list[Message] = []
        self.transitions: list[tuple[str, str, str]] = []
        self.tick = 0
        self.stats: Counter[str] = Counter()
        self.safety_violations: list[tuple[int, int, str]] = []

    # -- admin verbs ---------------------------------------------------------

    def register_template(self, template: SubQueryTemplate) -> str:
        if template.name in self.registry:
            raise DuplicateTemplate(f"template {template.name!r} is already registered")
        self.registry[template.name] = TemplateRecord(template)
        return REGISTERED

    def state(self, name: str) -> str:
        if name in self.registry:
            return self.registry[name].sc.state
        if any(t.name == name for t in self.removed):
            return REMOVED
        raise LifecycleError(f"unknown template {name!r}")

    def start_enable(self, name: str) -> None:
        self._start(name, "enable")

    def start_disable(self, name: str) -> None:
        self._start(name, "disable")

    def enable_template(self, name: str, max_ticks: int = 1000) -> str:
        self.start_enable(name)
        self.run(lambda: self.state(name) == ENABLED, max_ticks)
        return self.state(name)

    def disable_template(self, name: str, max_ticks: int = 1000) -> str:
        self.start_disable(name)
        self.run(lambda: self.state(name) == REMOVED, max_ticks)
        return self.state(name)

    def status(self) -> list[dict]:
        rows = []
        for name, rec in self.registry.items():
            rows.append({
                "template": name,
                "state": rec.sc.state,
                "phase": rec.sc.phase,
                "nodes": [
                    {"node": i, "invalidate_active": f.get(name, NodeFlags()).invalidate_active,
                     "read_active": f.get(name, NodeFlags()).read_active}
                    for i, f in enumerate(self.flags)
                ],
            })
        for t in self.removed:
            rows.append({"template": t.name, "state": REMOVED, "phase": None, "nodes": []})
        return rows

    # -- message handling ----------------------------------------------------

    def _start(self, name: str, op: str) -> None:
        rec = self.registry.get(name)
        if rec is None:
            raise LifecycleError(f"unknown or removed template {name!r}")
        self._set(rec, sc_start(rec.sc, op))

    def _set(self, rec: TemplateRecord, sc: SCState) -> None:
        old = rec.sc
        if sc.state != old.state:
            if (old.state, sc.state) not in LEGAL:
                raise LifecycleError(f"illegal transition {old.state} -> {sc.state}")
            self.transitions.append((rec.template.name, old.state, sc.state))
        rec.sc = sc
        if sc.phase is not None and (sc.phase, sc.epoch) != (old.phase, old.epoch):
            self.inflight.extend(phase_requests(sc, rec.template.name, range(len(self.nodes))))
        if sc.clear_pending:
            self._clear(rec)

    def _clear(self, rec: TemplateRecord) -> None:
        name = rec.template.name
        tx = self.kv.begin()
        tx.clear_range(CACHE_PREFIX + template_prefix(name).encode())
        tx.commit()
        rec.sc = sc_finish_clear(rec.sc)
        self.transitions.append((name, INSTALLED, REMOVED))
        del self.registry[name]
        self.removed.append(rec.template)

    def deliver(self, msg: Message) -> None:
        self.inflight.remove(msg)
        self.stats["delivered"] += 1
        if msg.ack:
            rec = self.registry.get(msg.template)
            if rec is not None:
                self._set(rec, sc_receive_ack(rec.sc, msg, len(self.nodes)))
            return
        node = msg.node
        flags = self.flags[node].get(msg.template, NodeFlags())
        new, ack = node_receive(flags, msg)
        if new != flags:
            self._apply(node, msg.template, flags, new)
            self.flags[node][msg.template] = new
            if not new.safe:
                self.safety_violations.append((self.tick, node, msg.template))
        if ack is not None:
            self.inflight.append(ack)

    def _apply(self, node: int, name: str, old: NodeFlags, new: NodeFlags) -> None:
        engine = self.nodes[node]
        if new.invalidate_active and not old.invalidate_active:
            engine.install(self._template(name))
        if new.read_active and not old.read_active:
            engine.activate_reads(name)
        if old.read_active and not new.read_active:
            engine.deactivate_reads(name)
        if old.invalidate_active and not new.invalidate_active:
            engine.deactivate_invalidation(name)

    def _template(self, name: str) -> SubQueryTemplate:
        return self.registry[name].template

    def drop(self, msg: Message) -> None:
        self.inflight.remove(msg)
        self.stats["dropped"] += 1

    def resend(self, name: str, node: int) -> None:
        """Timeout at the coordinator: re-send the current phase request to ``node``."""
        sc = self.registry[name].sc
        if sc.phase is not None and node not in sc.acked:
            self.inflight.append(Message(sc.phase, name, sc.epoch, node))
            self.stats["resent"] += 1

    def simulate_step(self, fault: FaultSchedule | None = None) -> list[dict]:
        """One tick: every in-flight message is delivered or dropped, then timeouts fire."""
        fault = fault or self.fault
        for msg in list(self.inflight):
            if fault is not None and fault(self.tick, msg):
                self.drop(msg)
            else:
                self.deliver(msg)
        # messages produced during this tick (acks, next-phase requests) stay in flight
        for name, rec in list(self.registry.items()):
            sc = rec.sc
            if sc.phase is None:
                continue
            waiting = {m.node for m in self.inflight if m.template == name and m.epoch == sc.epoch}
            for node in range(len(self.nodes)):
                if node not in sc.acked and node not in waiting:
                    self.resend(name, node)
        self.tick += 1
        return self.status()

    def run(self, done: Callable[[], bool], max_ticks: int = 1000) -> bool:
        for _ in range(max_ticks):
            if done():
                return True
            self.simulate_step()
        return done()


# -- exhaustive exploration --------------------------------------------------------

@dataclass(frozen=True)
class ModelState:
    sc: SCState
    nodes: tuple[NodeFlags, ...]
    inflight: tuple[Message, ...]  # sorted multiset
    drops: tuple[int, ...]


@dataclass
class ModelReport:
    states: int
    transitions: int
    violations: list[ModelState]
    terminal: list[ModelState]
    stuck: list[ModelState]
    parent: dict = field(repr=False, default_factory=dict)

    @property
    def safe(self) -> bool:
        return not self.violations

    def path(self, state: ModelState) -> list[tuple]:
        """Actions leading from the initial state to ``state``."""
        out = []
        while self.parent[state] is not None:
            state, action = self.parent[state]
            out.append(action)
        return out[::-1]

    @property
    def witnesses(self) -> dict[ModelState, list[tuple]]:
        return {t: self.path(t) for t in self.terminal}


def _model_actions(s: ModelState, max_drops: int, max_copies: int, name: str) -> Iterable[tuple]:
    seen = set()
    for m in s.inflight:
        if m in seen:
            continue
        seen.add(m)
        yield ("deliver", m)
        if s.drops[m.node] < max_drops:
            yield ("drop", m)
    sc = s.sc
    if sc.phase is not None:
        for node in range(len(s.nodes)):
            if node in sc.acked:
                continue
            copies = sum(1 for m in s.inflight if m.node == node and m.epoch == sc.epoch)
            if copies < max_copies:
                yield ("resend", node)


def _model_apply(s: ModelState, action: tuple, name: str, rule=node_receive) -> ModelState:
    kind, arg = action
    inflight = list(s.inflight)
    nodes = list(s.nodes)
    drops = list(s.drops)
    sc = s.sc
    if kind == "drop":
        inflight.remove(arg)
        drops[arg.node] += 1
    elif kind == "resend":
        inflight.append(Message(sc.phase, name, sc.epoch, arg))
    else:
        inflight.remove(arg)
        if arg.ack:
            new_sc = sc_receive_ack(sc, arg, len(nodes))
            if new_sc.state == ENABLED and sc.state != ENABLED:
                new_sc = sc_start(new_sc, "disable")  # the scenario disables right after enabling
            if new_sc.clear_pending:
                new_sc = sc_finish_clear(new_sc)
            if new_sc.phase is not None and (new_sc.phase, new_sc.epoch) != (sc.phase, sc.epoch):
                inflight.extend(phase_requests(new_sc, name, range(len(nodes))))
            sc = new_sc
        else:
            flags, ack = rule(nodes[arg.node], arg)
            nodes[arg.node] = flags
            if ack is not None:
                inflight.append(ack)
    return ModelState(sc, tuple(nodes), tuple(sorted(inflight)), tuple(drops))


def model_initial(n_nodes: int, name: str = "SQ") -> ModelState:
    sc = sc_start(SCState(), "enable")
    return ModelState(sc, (NodeFlags(),) * n_nodes, tuple(sorted(phase_requests(sc, name, range(n_nodes)))),
                      (0,) * n_nodes)


def model_check(n_nodes: int = 3, max_drops: int = 2, max_copies: int = 1, name: str = "SQ",
                max_states: int = 5_000_000, rule=node_receive,
                stop_on_violation: bool = False) -> ModelReport:
    """Breadth-first search over every interleaving of enable-then-disable.

    Messages may be delivered in any order or dropped (at most ``max_drops``
    per node link); the coordinator re-sends to a node when fewer than
    ``max_copies`` of the current phase's messages for it are in flight.
    With ``max_copies > 1`` duplicates exist and can outlive their phase.
    ``rule`` is the node's message handler, swappable to test the checker.
    """
    start = model_initial(n_nodes, name)
    parent: dict[ModelState, tuple[ModelState, tuple] | None] = {start: None}
    queue = deque([start])
    violations, terminal, stuck = [], [], []
    edges = 0
    while queue:
        s = queue.popleft()
        if not all(f.safe for f in s.nodes):
            violations.append(s)
            if stop_on_violation:
                break
        succ = 0
        for action in _model_actions(s, max_drops, max_copies, name):
            t = _model_apply(s, action, name, rule)
            edges += 1
            succ += 1
            if t not in parent:
                parent[t] = (s, action)
                queue.append(t)
                if len(parent) > max_states:
                    raise RuntimeError("state space exceeds max_states")
        if succ == 0:
            (terminal if s.sc.state == REMOVED else stuck).append(s)
    return ModelReport(len(parent), edges, violations, terminal, stuck, parent)


def replay(coordinator: Coordinator, name: str, actions: Sequence[tuple],
           on_enabled: Callable[[], None] | None = None) -> None:
    """Drive a real coordinator through a model-checker path.

    The coordinator must have ``name`` registered and enable started.
    ``on_enabled`` runs once the template is enabled (e.g. to populate the
    cache), just before the disable begins.
    """
    for kind, arg in actions:
        if kind == "resend":
            coordinator.resend(name, arg)
            continue
        msg = next(m for m in coordinator.inflight if m == arg)
        if kind == "drop":
            coordinator.drop(msg)
            continue
        before = coordinator.state(name)
        coordinator.deliver(msg)
        if before != ENABLED and coordinator.state(name) == ENABLED:
            if on_enabled is not None:
                on_enabled()
            coordinator.start_disable(name)
