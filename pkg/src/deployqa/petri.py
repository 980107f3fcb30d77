"""Deployment workflows as 1-safe Petri nets.

Each node template contributes a create → configure → start lifecycle
chain; a bound playbook replaces the configure step with one transition per
task (conditionals and rescue blocks become choices, handler notification
uses dedicated notified-places).  A dependency A → B becomes a test arc:
``t_create_A`` additionally requires a token on ``p_started_B`` without
consuming it.

Markings are sets of places (capacity 1, set-valued merge), which keeps the
state space finite and lets plain BFS enumerate it.  Deadlocks are dead
markings that are not success states (W101); transitions never fired
anywhere in the graph are dead steps (W102).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .catalog import Catalog, builtin_catalog
from .errors import IncompleteGraph, StateSpaceExceeded, UnboundPlaybook
from .model import (
    Finding,
    PlaybookModel,
    SourceSpan,
    TaskNode,
    TopologyModel,
    finalize_findings,
)
from .verifier import dependency_graph

Marking = frozenset


@dataclass(frozen=True)
class Place:
    pid: str
    label: str


@dataclass(frozen=True)
class Transition:
    tid: str
    label: str
    subject: str
    span: SourceSpan


@dataclass(frozen=True)
class Arc:
    src: str
    dst: str
    kind: str = "normal"  # "normal" | "test" (test: place required, not consumed)


@dataclass
class PetriNet:
    places: dict[str, Place] = field(default_factory=dict)
    transitions: dict[str, Transition] = field(default_factory=dict)
    arcs: tuple[Arc, ...] = ()
    initial: Marking = frozenset()
    terminal: Marking = frozenset()
    origin_span: SourceSpan = SourceSpan("<net>", 0, 0)
    #: node name -> {"ready"/"created"/"configured"/"started": place id}
    lifecycle: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        self._consume: dict[str, frozenset] = {}
        self._test: dict[str, frozenset] = {}
        self._produce: dict[str, frozenset] = {}
        for tid in self.transitions:
            self._consume[tid] = frozenset(
                a.src for a in self.arcs
                if a.dst == tid and a.kind == "normal")
            self._test[tid] = frozenset(
                a.src for a in self.arcs if a.dst == tid and a.kind == "test")
            self._produce[tid] = frozenset(
                a.dst for a in self.arcs if a.src == tid)

    # -- firing rule --------------------------------------------------------

    def is_enabled(self, marking: Marking, tid: str) -> bool:
        return (self._consume[tid] | self._test[tid]) <= marking

    def enabled(self, marking: Marking) -> list[str]:
        """Enabled transitions in ascending tid order (the exploration and
        witness tie-break order)."""
        return [tid for tid in sorted(self.transitions)
                if self.is_enabled(marking, tid)]

    def fire(self, marking: Marking, tid: str) -> tuple[Marking, frozenset]:
        """Successor marking plus the set of places where a token merged
        (produced onto an already-marked place)."""
        after_consume = marking - self._consume[tid]
        produced = self._produce[tid]
        merged = frozenset(after_consume & produced)
        return frozenset(after_consume | produced), merged


@dataclass
class ReachabilityGraph:
    initial: Marking
    vertices: tuple[Marking, ...]           # discovery (BFS) order
    edges: tuple[tuple[Marking, str, Marking], ...]
    complete: bool
    parents: dict = field(default_factory=dict, repr=False)
    merges: tuple[tuple[str, str], ...] = ()  # (tid, place) merge events

    @property
    def visited(self) -> int:
        return len(self.vertices)

    def witness_path(self, marking: Marking) -> list[str]:
        """Shortest firing sequence from the initial marking, as fixed by
        BFS discovery with tid-ordered tie-breaking."""
        path: list[str] = []
        current = marking
        while True:
            parent = self.parents.get(current)
            if parent is None:
                break
            current, tid = parent
            path.append(tid)
        path.reverse()
        return path


def reachability_graph(net: PetriNet,
                       max_markings: int = 1_000_000) -> ReachabilityGraph:
    """BFS enumeration of every reachable marking.

    Raises StateSpaceExceeded once more than ``max_markings`` distinct
    markings would be recorded; the partial graph rides along on the error.
    """
    initial = net.initial
    order: list[Marking] = [initial]
    seen: set[Marking] = {initial}
    parents: dict = {initial: None}
    edges: list[tuple[Marking, str, Marking]] = []
    merges: list[tuple[str, str]] = []
    queue_at = 0

    while queue_at < len(order):
        marking = order[queue_at]
        queue_at += 1
        for tid in net.enabled(marking):
            nxt, merged = net.fire(marking, tid)
            for place in sorted(merged):
                merges.append((tid, place))
            edges.append((marking, tid, nxt))
            if nxt not in seen:
                if len(order) >= max_markings:
                    partial = ReachabilityGraph(
                        initial=initial, vertices=tuple(order),
                        edges=tuple(edges), complete=False, parents=parents,
                        merges=tuple(merges))
                    raise StateSpaceExceeded(max_markings, graph=partial)
                seen.add(nxt)
                parents[nxt] = (marking, tid)
                order.append(nxt)

    return ReachabilityGraph(
        initial=initial, vertices=tuple(order), edges=tuple(edges),
        complete=True, parents=parents, merges=tuple(merges))


# ----- analyses ------------------------------------------------------------


def detect_deadlocks(graph: ReachabilityGraph, net: PetriNet,
                     catalog: Catalog | None = None) -> list[Finding]:
    """W101 per reachable dead marking that is not a success state."""
    if not graph.complete:
        raise IncompleteGraph("deadlock analysis needs a complete graph")
    cat = catalog or builtin_catalog()
    has_out: set[Marking] = {src for src, _tid, _dst in graph.edges}
    findings: list[Finding] = []
    for marking in graph.vertices:
        if marking in has_out:
            continue
        if net.terminal <= marking:
            continue  # finished successfully; quiescence is the goal
        witness = graph.witness_path(marking)
        stuck = ", ".join(sorted(marking)) or "(empty marking)"
        findings.append(cat.finding(
            "W101",
            f"deployment can deadlock: stuck with tokens on [{stuck}]; "
            f"firing sequence: {' -> '.join(witness) if witness else '(initial)'}",
            net.origin_span,
            "workflow/deadlock/" + "+".join(sorted(marking)),
            data={"marking": sorted(marking), "witness": witness}))
    return finalize_findings(findings)


def dead_transitions(net: PetriNet, graph: ReachabilityGraph,
                     catalog: Catalog | None = None) -> list[Finding]:
    """W102 per transition that no reachable marking ever fires."""
    if not graph.complete:
        raise IncompleteGraph("dead-step analysis needs a complete graph")
    cat = catalog or builtin_catalog()
    fired = {tid for _src, tid, _dst in graph.edges}
    findings: list[Finding] = []
    for tid, transition in net.transitions.items():
        if tid in fired:
            continue
        findings.append(cat.finding(
            "W102",
            f"workflow step {transition.label!r} ({tid}) can never execute",
            transition.span,
            f"workflow/dead/{tid}",
            data={"transition": tid}))
    return finalize_findings(findings)


# ----- construction --------------------------------------------------------


_ID_SAFE = re.compile(r"[^A-Za-z0-9_]")


class _NetBuilder:
    def __init__(self, origin_span: SourceSpan):
        self.places: dict[str, Place] = {}
        self.transitions: dict[str, Transition] = {}
        self.arcs: list[Arc] = []
        self.origin_span = origin_span
        self._minted: set[str] = set()
        self._fresh = 0

    def mint(self, base: str) -> str:
        safe = _ID_SAFE.sub("_", base)
        candidate = safe
        n = 1
        while candidate in self._minted:
            n += 1
            candidate = f"{safe}_{n}"
        self._minted.add(candidate)
        return candidate

    def place(self, base: str, label: str | None = None) -> str:
        pid = self.mint(base)
        self.places[pid] = Place(pid=pid, label=label or pid)
        return pid

    def fresh_place(self, prefix: str) -> str:
        self._fresh += 1
        return self.place(f"{prefix}_{self._fresh}")

    def transition(self, base: str, label: str, subject: str,
                   span: SourceSpan, pre: list[str], post: list[str],
                   test: list[str] = ()) -> str:
        tid = self.mint(base)
        self.transitions[tid] = Transition(
            tid=tid, label=label, subject=subject, span=span)
        for p in pre:
            self.arcs.append(Arc(src=p, dst=tid))
        for p in test:
            self.arcs.append(Arc(src=p, dst=tid, kind="test"))
        for p in post:
            self.arcs.append(Arc(src=tid, dst=p))
        return tid

    def build(self, initial, terminal, lifecycle) -> PetriNet:
        return PetriNet(
            places=self.places,
            transitions=self.transitions,
            arcs=tuple(self.arcs),
            initial=frozenset(initial),
            terminal=frozenset(terminal),
            origin_span=self.origin_span,
            lifecycle=lifecycle,
        )


def build_workflow_net(topology: TopologyModel,
                       playbooks: dict[str, PlaybookModel] | None = None
                       ) -> PetriNet:
    """Assemble the workflow net for a topology.

    ``playbooks`` binds node names to their configure playbooks; nodes
    without one get a single opaque configure transition.
    """
    playbooks = playbooks or {}
    templates = topology.node_templates
    for bound in playbooks:
        if bound not in templates:
            raise UnboundPlaybook(
                f"playbook bound to undeclared node {bound!r}")

    b = _NetBuilder(origin_span=topology.span)
    lifecycle: dict[str, dict[str, str]] = {}
    create_tids: dict[str, str] = {}
    initial: list[str] = []
    terminal: list[str] = []

    for name, template in templates.items():
        safe = _ID_SAFE.sub("_", name)
        subject = f"node_templates/{name}"
        ready = b.place(f"p_ready_{safe}")
        created = b.place(f"p_created_{safe}")
        configured = b.place(f"p_configured_{safe}")
        started = b.place(f"p_started_{safe}")
        lifecycle[name] = {
            "ready": ready, "created": created,
            "configured": configured, "started": started,
        }
        initial.append(ready)
        terminal.append(started)

        create_tids[name] = b.transition(
            f"t_create_{safe}", f"create {name}", subject,
            template.span, pre=[ready], post=[created])

        playbook = playbooks.get(name)
        if playbook is None or not playbook.plays:
            b.transition(f"t_configure_{safe}", f"configure {name}", subject,
                         template.span, pre=[created], post=[configured])
        else:
            _expand_playbook(b, safe, playbook, created, configured)

        b.transition(f"t_start_{safe}", f"start {name}", subject,
                     template.span, pre=[configured], post=[started])

    # dependency A -> B: creating A additionally requires B to be started
    graph = dependency_graph(topology)
    for a, target in graph.edges:
        p_started = lifecycle[target]["started"]
        b.arcs.append(Arc(src=p_started, dst=create_tids[a], kind="test"))

    net = b.build(initial=initial, terminal=terminal, lifecycle=lifecycle)
    return net


def _expand_playbook(b: _NetBuilder, node: str, playbook: PlaybookModel,
                     entry: str, exit_place: str) -> None:
    current = entry
    last = len(playbook.plays) - 1
    for p, play in enumerate(playbook.plays):
        notified: dict[str, str] = {}  # handler name -> notified place
        handler_places: list[tuple[int, TaskNode, str]] = []
        for h, handler in enumerate(play.handlers):
            pid = b.place(f"p_notified_{node}__plays_{p}_handlers_{h}")
            handler_places.append((h, handler, pid))
            if handler.name and handler.name not in notified:
                notified[handler.name] = pid

        # the play's task chain
        if play.tasks:
            ends_net = p == last and not handler_places
            tasks_exit = exit_place if ends_net else b.fresh_place(f"p_{node}")
            _chain(b, node, play.tasks, ("plays", p, "tasks"),
                   current, tasks_exit, notified)
            current = tasks_exit
        # end of play: flush-or-not choice per handler, in handler order
        for h, handler, pid in handler_places:
            nxt = exit_place if (p == last and h == len(handler_places) - 1) \
                else b.fresh_place(f"p_{node}")
            path = ("plays", p, "handlers", h)
            base = f"{node}__plays_{p}_handlers_{h}"
            label = handler.name or handler.module or "handler"
            b.transition(f"t_flush_{base}", f"flush {label}",
                         _subject(path), handler.span,
                         pre=[current, pid], post=[nxt])
            b.transition(f"t_noflush_{base}", f"skip {label}",
                         _subject(path), handler.span,
                         pre=[current], post=[nxt])
            current = nxt
    if current != exit_place:
        # no task or handler produced the final hop; glue the chain shut
        b.transition(f"t_configure_{node}", f"configure {node}",
                     f"node_templates/{node}", b.origin_span,
                     pre=[current], post=[exit_place])


def _subject(path: tuple) -> str:
    return "/".join(str(seg) for seg in path)


def _chain(b: _NetBuilder, node: str, tasks, prefix: tuple,
           entry: str, exit_place: str, notified: dict[str, str]) -> None:
    """Lay ``tasks`` out sequentially between two places."""
    if not tasks:
        b.transition(f"t_noop_{node}", "noop", _subject(prefix),
                     b.origin_span, pre=[entry], post=[exit_place])
        return
    current = entry
    for i, task in enumerate(tasks):
        out = exit_place if i == len(tasks) - 1 \
            else b.fresh_place(f"p_{node}")
        _task_segment(b, node, task, prefix + (i,), current, out, notified)
        current = out


def _task_segment(b: _NetBuilder, node: str, task: TaskNode, path: tuple,
                  entry: str, exit_place: str,
                  notified: dict[str, str]) -> None:
    subject = _subject(path)
    base = f"{node}__" + "_".join(str(seg) for seg in path)
    notify_places = [notified[n] for n in task.notify if n in notified]

    if task.kind == "block":
        if task.rescue:
            body_exit = b.fresh_place(f"p_{node}")
            conv = exit_place if not task.always else b.fresh_place(f"p_{node}")
            _chain(b, node, task.children, path + ("block",),
                   entry, body_exit, notified)
            b.transition(f"t_ok_{base}", f"ok {task.name or 'block'}",
                         subject, task.span, pre=[body_exit], post=[conv])
            rescue_entry = b.fresh_place(f"p_{node}")
            b.transition(f"t_fail_{base}", f"fail {task.name or 'block'}",
                         subject, task.span,
                         pre=[body_exit], post=[rescue_entry])
            _chain(b, node, task.rescue, path + ("rescue",),
                   rescue_entry, conv, notified)
            after = conv
        else:
            after = exit_place if not task.always else b.fresh_place(f"p_{node}")
            _chain(b, node, task.children, path + ("block",),
                   entry, after, notified)
        if task.always:
            _chain(b, node, task.always, path + ("always",),
                   after, exit_place, notified)
        if task.when_expr is not None:
            b.transition(f"t_skip_{base}", f"skip {task.name or 'block'}",
                         subject, task.span, pre=[entry], post=[exit_place])
        return

    label = task.name or task.module or "task"
    if task.when_expr is not None:
        b.transition(f"t_exec_{base}", label, subject, task.span,
                     pre=[entry], post=[exit_place] + notify_places)
        b.transition(f"t_skip_{base}", f"skip {label}", subject, task.span,
                     pre=[entry], post=[exit_place])
    else:
        b.transition(f"t_task_{base}", label, subject, task.span,
                     pre=[entry], post=[exit_place] + notify_places)


# ----- export --------------------------------------------------------------


def to_dot(net: PetriNet) -> str:
    """GraphViz rendering: places as ellipses (initial marked with a
    bullet, terminal double-lined), transitions as boxes, test arcs
    dashed."""
    lines = ["digraph workflow {", "  rankdir=LR;"]
    for pid, place in net.places.items():
        label = _dot_escape(place.label)
        if pid in net.initial:
            label += "\\n\u25cf"
        shape = "doublecircle" if pid in net.terminal else "ellipse"
        lines.append(f'  "{pid}" [shape={shape}, label="{label}"];')
    for tid, transition in net.transitions.items():
        lines.append(
            f'  "{tid}" [shape=box, label="{_dot_escape(transition.label)}"];')
    for arc in net.arcs:
        style = ' [style=dashed, dir=both, arrowtail=odot]' \
            if arc.kind == "test" else ""
        lines.append(f'  "{arc.src}" -> "{arc.dst}"{style};')
    lines.append("}")
    return "\n".join(lines) + "\n"


def _dot_escape(text: str) -> str:
    return text.replace("\\", "\\\\").replace('"', '\\"')


def to_pnml(net: PetriNet) -> str:
    """Place/transition PNML.  Test arcs have no PNML encoding, so each one
    is lowered to a pair of opposing normal arcs (noted in a comment)."""
    import xml.etree.ElementTree as ET

    ns = "http://www.pnml.org/version-2009/grammar/pnml"
    ET.register_namespace("", ns)
    root = ET.Element(f"{{{ns}}}pnml")
    net_el = ET.SubElement(root, f"{{{ns}}}net", {
        "id": "workflow",
        "type": "http://www.pnml.org/version-2009/grammar/ptnet",
    })
    page = ET.SubElement(net_el, f"{{{ns}}}page", {"id": "page0"})

    def add_name(parent, text):
        name_el = ET.SubElement(parent, f"{{{ns}}}name")
        ET.SubElement(name_el, f"{{{ns}}}text").text = text

    for pid, place in net.places.items():
        el = ET.SubElement(page, f"{{{ns}}}place", {"id": pid})
        add_name(el, place.label)
        if pid in net.initial:
            marking = ET.SubElement(el, f"{{{ns}}}initialMarking")
            ET.SubElement(marking, f"{{{ns}}}text").text = "1"
    for tid, transition in net.transitions.items():
        el = ET.SubElement(page, f"{{{ns}}}transition", {"id": tid})
        add_name(el, transition.label)

    arc_no = 0
    for arc in net.arcs:
        if arc.kind == "test":
            page.append(ET.Comment(
                f" test arc {arc.src} <-> {arc.dst} lowered to two "
                "opposing arcs "))
            pairs = [(arc.src, arc.dst), (arc.dst, arc.src)]
        else:
            pairs = [(arc.src, arc.dst)]
        for src, dst in pairs:
            ET.SubElement(page, f"{{{ns}}}arc", {
                "id": f"a{arc_no}", "source": src, "target": dst})
            arc_no += 1

    ET.indent(root)
    return ET.tostring(root, encoding="unicode", xml_declaration=True) + "\n"


def export_net(net: PetriNet, fmt: str) -> str:
    if fmt == "dot":
        return to_dot(net)
    if fmt == "pnml":
        return to_pnml(net)
    raise ValueError(f"unknown export format {fmt!r}")
