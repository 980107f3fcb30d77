"""Structural verification of topology models.

Checks the constraints a blueprint must satisfy before any deployment is
attempted: every reference resolves, capability demands are met by the
target's type (nominal subtyping along derived_from), required properties
are present and within their declared constraints, names are unambiguous,
and the dependency graph is acyclic.

Rules: E001 dangling requirement target, E002 capability type mismatch,
E003 undefined type reference, E003a cyclic type inheritance, E004 missing
required property, E005 property constraint violation, E006 dependency
cycle, E007 duplicate template name.
"""

from __future__ import annotations

import re
from collections import deque
from dataclasses import dataclass

from .catalog import Catalog, builtin_catalog
from .model import (
    Finding,
    NodeTemplate,
    TopologyModel,
    TypeDef,
    Value,
    finalize_findings,
    plain,
)

# ----- built-in type prelude ----------------------------------------------
# Well-known normative types are accepted by name so realistic blueprints do
# not have to re-declare the standard hierarchy.  Document-local declarations
# always win over these.


def _prelude(pairs: dict[str, str | None],
             caps: dict[str, dict[str, str]] | None = None) -> dict[str, TypeDef]:
    caps = caps or {}
    return {
        name: TypeDef(name=name, derived_from=parent,
                      capability_defs=caps.get(name, {}))
        for name, parent in pairs.items()
    }


BUILTIN_CAPABILITY_TYPES: dict[str, TypeDef] = _prelude({
    "tosca.capabilities.Root": None,
    "tosca.capabilities.Node": "tosca.capabilities.Root",
    "tosca.capabilities.Container": "tosca.capabilities.Root",
    "tosca.capabilities.Compute": "tosca.capabilities.Container",
    "tosca.capabilities.Network": "tosca.capabilities.Root",
    "tosca.capabilities.Storage": "tosca.capabilities.Root",
    "tosca.capabilities.Endpoint": "tosca.capabilities.Root",
    "tosca.capabilities.Endpoint.Public": "tosca.capabilities.Endpoint",
    "tosca.capabilities.Endpoint.Admin": "tosca.capabilities.Endpoint",
    "tosca.capabilities.Endpoint.Database": "tosca.capabilities.Endpoint",
    "tosca.capabilities.Attachment": "tosca.capabilities.Root",
    "tosca.capabilities.OperatingSystem": "tosca.capabilities.Root",
    "tosca.capabilities.Scalable": "tosca.capabilities.Root",
    "tosca.capabilities.network.Bindable": "tosca.capabilities.Node",
})

BUILTIN_NODE_TYPES: dict[str, TypeDef] = _prelude(
    {
        "tosca.nodes.Root": None,
        "tosca.nodes.Compute": "tosca.nodes.Root",
        "tosca.nodes.SoftwareComponent": "tosca.nodes.Root",
        "tosca.nodes.WebServer": "tosca.nodes.SoftwareComponent",
        "tosca.nodes.WebApplication": "tosca.nodes.Root",
        "tosca.nodes.DBMS": "tosca.nodes.SoftwareComponent",
        "tosca.nodes.Database": "tosca.nodes.Root",
        "tosca.nodes.LoadBalancer": "tosca.nodes.Root",
        "tosca.nodes.Container.Runtime": "tosca.nodes.SoftwareComponent",
        "tosca.nodes.Container.Application": "tosca.nodes.Root",
    },
    caps={
        "tosca.nodes.Root": {"feature": "tosca.capabilities.Node"},
        "tosca.nodes.Compute": {
            "host": "tosca.capabilities.Compute",
            "os": "tosca.capabilities.OperatingSystem",
            "endpoint": "tosca.capabilities.Endpoint.Admin",
            "scalable": "tosca.capabilities.Scalable",
            "binding": "tosca.capabilities.network.Bindable",
        },
        "tosca.nodes.WebServer": {
            "host": "tosca.capabilities.Container",
            "data_endpoint": "tosca.capabilities.Endpoint",
            "admin_endpoint": "tosca.capabilities.Endpoint.Admin",
        },
        "tosca.nodes.WebApplication": {
            "app_endpoint": "tosca.capabilities.Endpoint",
        },
        "tosca.nodes.DBMS": {"host": "tosca.capabilities.Container"},
        "tosca.nodes.Database": {
            "database_endpoint": "tosca.capabilities.Endpoint.Database",
        },
        "tosca.nodes.LoadBalancer": {
            "client": "tosca.capabilities.Endpoint.Public",
        },
        "tosca.nodes.Container.Runtime": {
            "host": "tosca.capabilities.Container",
            "scalable": "tosca.capabilities.Scalable",
        },
    },
)


# ----- dependency graph ----------------------------------------------------


@dataclass(frozen=True)
class DependencyGraph:
    """Directed graph over template names: edge (A, B) when A requires B.

    Requirements to undeclared nodes contribute no edge (E001 covers them);
    parallel requirements collapse to one edge.
    """

    vertices: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def successors(self, name: str) -> list[str]:
        return [b for a, b in self.edges if a == name]


def dependency_graph(topology: TopologyModel) -> DependencyGraph:
    names = list(topology.node_templates)
    declared = set(names)
    edges: list[tuple[str, str]] = []
    for template in topology.templates:
        for req in template.requirements:
            if req.target_node in declared:
                edge = (template.name, req.target_node)
                if edge not in edges and template.name in declared:
                    edges.append(edge)
    return DependencyGraph(vertices=tuple(names), edges=tuple(edges))


def detect_cycles(graph: DependencyGraph) -> list[tuple[str, ...]]:
    """One witness cycle per strongly connected component that has any.

    Each witness is rotated to start at its lexicographically smallest
    vertex; the result is sorted by that starting vertex.
    """
    components = _sccs(graph)
    adjacency: dict[str, list[str]] = {v: [] for v in graph.vertices}
    for a, b in graph.edges:
        adjacency[a].append(b)
    for neighbors in adjacency.values():
        neighbors.sort()

    cycles: list[tuple[str, ...]] = []
    for comp in components:
        members = set(comp)
        if len(comp) == 1:
            v = comp[0]
            if v in adjacency[v]:
                cycles.append((v,))
            continue
        start = min(comp)
        cycle = _shortest_cycle_through(start, adjacency, members)
        if cycle:
            cycles.append(tuple(cycle))
    return sorted(cycles)


def _sccs(graph: DependencyGraph) -> list[list[str]]:
    # Tarjan, iterative so deep chains cannot blow the stack.
    adjacency: dict[str, list[str]] = {v: [] for v in graph.vertices}
    for a, b in graph.edges:
        adjacency[a].append(b)
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = 0
    result: list[list[str]] = []

    for root in graph.vertices:
        if root in index:
            continue
        work: list[tuple[str, int]] = [(root, 0)]
        while work:
            vertex, child_i = work.pop()
            if child_i == 0:
                index[vertex] = low[vertex] = counter
                counter += 1
                stack.append(vertex)
                on_stack.add(vertex)
            advanced = False
            for i in range(child_i, len(adjacency[vertex])):
                succ = adjacency[vertex][i]
                if succ not in index:
                    work.append((vertex, i + 1))
                    work.append((succ, 0))
                    advanced = True
                    break
                if succ in on_stack:
                    low[vertex] = min(low[vertex], index[succ])
            if advanced:
                continue
            if low[vertex] == index[vertex]:
                comp: list[str] = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == vertex:
                        break
                result.append(sorted(comp))
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[vertex])
    return result


def _shortest_cycle_through(start: str, adjacency: dict[str, list[str]],
                            members: set[str]) -> list[str] | None:
    # BFS back to the start, restricted to the component.
    parent: dict[str, str] = {}
    queue = deque([start])
    seen = {start}
    while queue:
        vertex = queue.popleft()
        for succ in adjacency[vertex]:
            if succ not in members:
                continue
            if succ == start:
                path = [vertex]
                while path[-1] != start:
                    path.append(parent[path[-1]])
                path.reverse()
                return path
            if succ not in seen:
                seen.add(succ)
                parent[succ] = vertex
                queue.append(succ)
    return None


# ----- verification --------------------------------------------------------


def verify_topology(topology: TopologyModel,
                    catalog: Catalog | None = None) -> list[Finding]:
    """Run every structural rule; findings are sorted and de-duplicated."""
    cat = catalog or builtin_catalog()
    findings: list[Finding] = []

    node_types = dict(BUILTIN_NODE_TYPES)
    node_types.update(topology.node_types)
    capability_types = dict(BUILTIN_CAPABILITY_TYPES)
    capability_types.update(topology.capability_types)

    # E003a: cycles in either inheritance hierarchy
    cyclic_types: set[str] = set()
    for table, section in ((node_types, "node_types"),
                           (capability_types, "capability_types")):
        for cycle in _inheritance_cycles(table):
            cyclic_types.update(cycle)
            head = cycle[0]
            chain = " -> ".join(cycle + (head,))
            declared = topology.node_types.get(head) \
                or topology.capability_types.get(head)
            span = declared.span if declared else topology.span
            findings.append(cat.finding(
                "E003a", f"type inheritance cycle: {chain}", span,
                f"{section}/{head}", data={"cycle": list(cycle)}))

    # E003: unresolved derived_from / capability types on declared types
    for section, declared_table, table in (
            ("node_types", topology.node_types, node_types),
            ("capability_types", topology.capability_types, capability_types)):
        for name, tdef in declared_table.items():
            if tdef.derived_from and tdef.derived_from not in table:
                findings.append(cat.finding(
                    "E003",
                    f"type {name} derives from undefined type "
                    f"{tdef.derived_from}",
                    tdef.span, f"{section}/{name}/derived_from",
                    data={"missing": tdef.derived_from}))
            for cap_name, cap_type in tdef.capability_defs.items():
                if cap_type not in capability_types:
                    findings.append(cat.finding(
                        "E003",
                        f"capability {cap_name} of type {name} uses "
                        f"undefined capability type {cap_type}",
                        tdef.span, f"{section}/{name}/capabilities/{cap_name}",
                        data={"missing": cap_type}))

    # E007: duplicate template names
    first_seen: dict[str, NodeTemplate] = {}
    for template in topology.templates:
        if template.name in first_seen:
            findings.append(cat.finding(
                "E007",
                f"node template {template.name} is declared more than once",
                template.span, f"node_templates/{template.name}",
                data={"name": template.name}))
        else:
            first_seen[template.name] = template

    declared_names = set(first_seen)

    for template in topology.templates:
        subject_base = f"node_templates/{template.name}"

        # E003: template type must resolve
        type_known = template.type_name in node_types
        if not type_known:
            findings.append(cat.finding(
                "E003",
                f"node template {template.name} uses undefined type "
                f"{template.type_name}",
                template.span, f"{subject_base}/type",
                data={"missing": template.type_name}))

        chain = _type_chain(template.type_name, node_types, cyclic_types)

        # E001 / E002 per requirement
        for i, req in enumerate(template.requirements):
            subject = f"{subject_base}/requirements/{i}"
            if req.target_node is not None \
                    and req.target_node not in declared_names:
                findings.append(cat.finding(
                    "E001",
                    f"requirement {req.name} of {template.name} targets "
                    f"undeclared node {req.target_node}",
                    req.span, subject, data={"target": req.target_node}))
                continue
            if req.target_node is None or req.capability_name is None:
                continue
            target = first_seen[req.target_node]
            offered = _offered_capabilities(
                target, node_types, cyclic_types)
            if req.capability_name in offered:
                continue
            if any(_is_capability_subtype(cap_type, req.capability_name,
                                          capability_types, cyclic_types)
                   for cap_type in offered.values()):
                continue
            findings.append(cat.finding(
                "E002",
                f"requirement {req.name} of {template.name} needs "
                f"capability {req.capability_name}, but {req.target_node} "
                f"offers [{', '.join(sorted(set(offered.values())))}]",
                req.span, subject,
                data={"expected": req.capability_name,
                      "found": sorted(set(offered.values()))}))

        # E004 / E005 against the governing property schemas
        schemas = _effective_properties(chain)
        for prop_name, schema in schemas.items():
            if schema.required and prop_name not in template.properties:
                findings.append(cat.finding(
                    "E004",
                    f"node {template.name} misses required property "
                    f"{prop_name}",
                    template.span, f"{subject_base}/properties/{prop_name}",
                    data={"property": prop_name}))
        for prop_name, value in template.properties.items():
            schema = schemas.get(prop_name)
            if schema is None or value.is_opaque():
                continue
            problem = _constraint_problem(value, schema)
            if problem is not None:
                findings.append(cat.finding(
                    "E005",
                    f"property {prop_name} of {template.name} {problem}",
                    value.span, f"{subject_base}/properties/{prop_name}",
                    data={"property": prop_name, "problem": problem}))

    # E006: dependency cycles
    graph = dependency_graph(topology)
    for cycle in detect_cycles(graph):
        head = cycle[0]
        chain_text = " -> ".join(cycle + (head,))
        template = first_seen.get(head)
        findings.append(cat.finding(
            "E006",
            f"dependency cycle: {chain_text}",
            template.span if template else topology.span,
            f"node_templates/{head}",
            data={"cycle": list(cycle)}))

    return finalize_findings(findings)


# ----- helpers -------------------------------------------------------------


def _inheritance_cycles(table: dict[str, TypeDef]) -> list[tuple[str, ...]]:
    cycles: list[tuple[str, ...]] = []
    claimed: set[str] = set()
    for name in table:
        if name in claimed:
            continue
        seen: list[str] = []
        current: str | None = name
        while current is not None and current in table:
            if current in seen:
                cycle = seen[seen.index(current):]
                smallest = min(cycle)
                at = cycle.index(smallest)
                rotated = tuple(cycle[at:] + cycle[:at])
                if not claimed & set(rotated):
                    cycles.append(rotated)
                    claimed.update(rotated)
                break
            if current in claimed:
                break
            seen.append(current)
            current = table[current].derived_from
    return sorted(cycles)


def _type_chain(name: str, table: dict[str, TypeDef],
                cyclic: set[str]) -> list[TypeDef]:
    chain: list[TypeDef] = []
    visited: set[str] = set()
    current: str | None = name
    while current is not None and current in table and current not in visited:
        if current in cyclic:
            break
        visited.add(current)
        tdef = table[current]
        chain.append(tdef)
        current = tdef.derived_from
    return chain


def _effective_properties(chain: list[TypeDef]):
    # nearest declaration wins: walk from the concrete type upward
    merged: dict = {}
    for tdef in chain:
        for prop_name, schema in tdef.properties.items():
            merged.setdefault(prop_name, schema)
    return merged


def _offered_capabilities(template: NodeTemplate,
                          node_types: dict[str, TypeDef],
                          cyclic: set[str]) -> dict[str, str]:
    offered: dict[str, str] = {}
    for tdef in _type_chain(template.type_name, node_types, cyclic):
        for cap_name, cap_type in tdef.capability_defs.items():
            offered.setdefault(cap_name, cap_type)
    return offered


def _is_capability_subtype(cap_type: str, base: str,
                           capability_types: dict[str, TypeDef],
                           cyclic: set[str]) -> bool:
    current: str | None = cap_type
    visited: set[str] = set()
    while current is not None and current not in visited:
        if current == base:
            return True
        visited.add(current)
        if current in cyclic or current not in capability_types:
            return False
        current = capability_types[current].derived_from
    return False


_KIND_CHECKS = {
    "string": lambda v: isinstance(v, str),
    "integer": lambda v: isinstance(v, int) and not isinstance(v, bool),
    "float": lambda v: isinstance(v, (int, float))
    and not isinstance(v, bool),
    "boolean": lambda v: isinstance(v, bool),
    "list": lambda v: isinstance(v, tuple),
    "map": lambda v: isinstance(v, dict),
}


def _constraint_problem(value: Value, schema) -> str | None:
    """First violated check for a property value, or None when clean."""
    data = plain(value.data)
    if schema.kind is not None:
        if not _KIND_CHECKS[schema.kind](data):
            return (f"has kind {_kind_name(data)}, expected {schema.kind}")
    numeric = isinstance(data, (int, float)) and not isinstance(data, bool)
    for constraint in schema.constraints:
        if constraint.min is not None and numeric and data < constraint.min:
            return f"is below the minimum {constraint.min}"
        if constraint.max is not None and numeric and data > constraint.max:
            return f"is above the maximum {constraint.max}"
        if constraint.enum is not None and data not in constraint.enum:
            allowed = ", ".join(repr(v) for v in constraint.enum)
            return f"is not one of [{allowed}]"
        if constraint.pattern is not None and isinstance(data, str) \
                and re.fullmatch(constraint.pattern, data) is None:
            return f"does not match pattern {constraint.pattern!r}"
    return None


def _kind_name(data: object) -> str:
    if isinstance(data, bool):
        return "boolean"
    if isinstance(data, int):
        return "integer"
    if isinstance(data, float):
        return "float"
    if isinstance(data, str):
        return "string"
    if isinstance(data, tuple):
        return "list"
    if isinstance(data, dict):
        return "map"
    return type(data).__name__
