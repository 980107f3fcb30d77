"""Load deployment packages into the IR.

A package is either an exploded directory or a zip archive (CSAR layout):
``TOSCA-Metadata/TOSCA.meta`` names the entry blueprint via its
``Entry-Definitions`` key; without metadata, exactly one top-level YAML file
that defines a topology must exist.  IaC artifacts are the files referenced
from node templates plus anything under ``playbooks/``.

No network access happens here, ever: remote imports and registry lookups
are out of scope by design.
"""

from __future__ import annotations

import glob
import os
import posixpath
import re
import tempfile
import zipfile
from dataclasses import dataclass, field

import yaml

from .errors import (
    MetadataMalformed,
    MissingEntryBlueprint,
    NotAnArchive,
    SchemaShape,
)
from .model import (
    ArtifactRef,
    Constraint,
    NodeTemplate,
    Play,
    PlaybookModel,
    PropertySchema,
    Requirement,
    SourceSpan,
    TaskNode,
    TopologyModel,
    TypeDef,
    Value,
)
from .yamlio import (
    SourceText,
    compose,
    key_text,
    mapping_items,
    scalar_value,
    walk_value,
)

META_PATH = "TOSCA-Metadata/TOSCA.meta"

#: task keys that are orchestration keywords, not module names
TASK_KEYWORDS = frozenset({
    "name", "when", "notify", "ignore_errors", "block", "rescue", "always",
    "vars", "register", "loop", "become", "become_user", "become_method",
    "tags", "args", "with_items", "with_dict", "with_fileglob", "until",
    "retries", "delay", "delegate_to", "run_once", "changed_when",
    "failed_when", "environment", "no_log", "any_errors_fatal", "throttle",
    "listen", "connection", "remote_user",
})

#: play keys whose values we materialize; everything else stays unread
_PLAY_TASK_SECTIONS = ("tasks", "handlers")

_PROPERTY_KINDS = frozenset({
    "string", "integer", "float", "boolean", "list", "map"})

_FREE_FORM_KV = re.compile(r"^([A-Za-z_][A-Za-z0-9_]*)=(.*)$", re.S)


# ----- archive -------------------------------------------------------------


@dataclass
class IacArtifact:
    """One analyzable IaC file inside the package."""

    path: str  # posix-style, relative to the archive root
    source: SourceText
    playbook: PlaybookModel | None
    referenced_by: tuple[str, ...] = ()


@dataclass
class CsarArchive:
    root: str
    entry_path: str
    entry_source: SourceText
    topology: TopologyModel
    artifacts: tuple[IacArtifact, ...] = ()
    goals_path: str | None = None
    extracted_to: str | None = field(default=None, repr=False)

    def playbook_bindings(self) -> dict[str, PlaybookModel]:
        """First parseable playbook artifact per node, for workflow builds."""
        by_path = {a.path: a for a in self.artifacts}
        bindings: dict[str, PlaybookModel] = {}
        for template in self.topology.templates:
            for ref in template.artifacts:
                art = by_path.get(ref.path)
                if ref.kind == "ansible_playbook" and art and art.playbook:
                    bindings.setdefault(template.name, art.playbook)
                    break
        return bindings


def load_csar(path: str) -> CsarArchive:
    """Load a package from ``path`` (directory or zip archive)."""
    extracted = None
    if os.path.isdir(path):
        root = path
    elif os.path.isfile(path) and zipfile.is_zipfile(path):
        extracted = tempfile.mkdtemp(prefix="qa-csar-")
        _safe_extract(path, extracted)
        root = extracted
    else:
        raise NotAnArchive(f"{path} is neither a directory nor a zip archive")

    entry_path = _find_entry(root)
    entry_source = _read(root, entry_path)
    topology = parse_tosca(entry_source)

    artifact_paths: list[str] = []
    referrers: dict[str, list[str]] = {}
    entry_dir = posixpath.dirname(entry_path)
    for template in topology.templates:
        for ref in template.artifacts:
            rel = _normalize(posixpath.join(entry_dir, ref.path))
            if rel is None or not os.path.isfile(os.path.join(root, rel)):
                continue
            if rel not in artifact_paths:
                artifact_paths.append(rel)
            referrers.setdefault(rel, []).append(template.name)
    for pattern in ("playbooks/**/*.yml", "playbooks/**/*.yaml"):
        for hit in glob.glob(os.path.join(root, pattern), recursive=True):
            rel = _normalize(os.path.relpath(hit, root).replace(os.sep, "/"))
            if rel is not None and rel not in artifact_paths:
                artifact_paths.append(rel)

    artifacts = []
    for rel in sorted(artifact_paths):
        source = _read(root, rel)
        playbook = None
        if rel.endswith((".yml", ".yaml")):
            try:
                playbook = parse_playbook(source)
            except SchemaShape:
                playbook = None  # a vars file or similar; not a play list
        artifacts.append(IacArtifact(
            path=rel,
            source=source,
            playbook=playbook,
            referenced_by=tuple(sorted(set(referrers.get(rel, ())))),
        ))

    goals_path = None
    if os.path.isfile(os.path.join(root, "goals.yaml")):
        goals_path = "goals.yaml"

    return CsarArchive(
        root=root,
        entry_path=entry_path,
        entry_source=entry_source,
        topology=topology,
        artifacts=tuple(artifacts),
        goals_path=goals_path,
        extracted_to=extracted,
    )


def _safe_extract(zip_path: str, dest: str) -> None:
    with zipfile.ZipFile(zip_path) as zf:
        for member in zf.namelist():
            norm = _normalize(member)
            if norm is None:
                continue
            zf.extract(member, dest)


def _normalize(rel: str) -> str | None:
    """Collapse a relative posix path; None if it escapes the root."""
    parts: list[str] = []
    for part in rel.split("/"):
        if part in ("", "."):
            continue
        if part == "..":
            if not parts:
                return None
            parts.pop()
        else:
            parts.append(part)
    if not parts or rel.startswith("/"):
        return None
    return "/".join(parts)


def _read(root: str, rel: str) -> SourceText:
    with open(os.path.join(root, rel), "rb") as fh:
        return SourceText.from_bytes(fh.read(), rel)


def _find_entry(root: str) -> str:
    meta_file = os.path.join(root, META_PATH)
    if os.path.isfile(meta_file):
        with open(meta_file, "rb") as fh:
            meta = parse_meta(SourceText.from_bytes(fh.read(), META_PATH).text)
        entry = meta.get("Entry-Definitions")
        if not entry:
            raise MissingEntryBlueprint(
                f"{META_PATH} has no Entry-Definitions key")
        entry = _normalize(entry)
        if entry is None or not os.path.isfile(os.path.join(root, entry)):
            raise MissingEntryBlueprint(
                f"Entry-Definitions points at a missing file")
        return entry

    candidates = []
    for name in sorted(os.listdir(root)):
        if not name.endswith((".yml", ".yaml")):
            continue
        full = os.path.join(root, name)
        if not os.path.isfile(full):
            continue
        try:
            root_node = compose(_read(root, name))
        except Exception:
            continue
        if isinstance(root_node, yaml.MappingNode):
            keys = {key_text(k) for k, _v in root_node.value}
            if "topology_template" in keys or "node_templates" in keys:
                candidates.append(name)
    if len(candidates) == 1:
        return candidates[0]
    if not candidates:
        raise MissingEntryBlueprint(
            "no TOSCA-Metadata and no top-level topology document")
    raise MissingEntryBlueprint(
        "ambiguous entry blueprint: " + ", ".join(candidates))


def parse_meta(text: str) -> dict[str, str]:
    """Parse the key/value block format of TOSCA.meta.

    Lines are ``Name: value``; a line starting with a single space continues
    the previous value; blank lines separate sections (all sections are
    merged into one mapping, first occurrence wins).
    """
    result: dict[str, str] = {}
    last_key: str | None = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            last_key = None
            continue
        if line.startswith(" ") and last_key is not None:
            result[last_key] += line[1:]
            continue
        match = re.match(r"^([A-Za-z][A-Za-z0-9_-]*):\s?(.*)$", line)
        if not match:
            raise MetadataMalformed(f"unparseable metadata line {line!r}", lineno)
        key, value = match.group(1), match.group(2).strip()
        result.setdefault(key, value)
        last_key = key
    return result


# ----- blueprint parsing ---------------------------------------------------


def parse_tosca(st: SourceText) -> TopologyModel:
    """Parse one blueprint document into a TopologyModel."""
    root = compose(st)
    if root is None:
        raise SchemaShape(f"{st.file}: empty document, expected a mapping",
                          expected="mapping", found="nothing")
    if not isinstance(root, yaml.MappingNode):
        raise SchemaShape(
            f"{st.file}: blueprint root must be a mapping",
            span=st.node_span(root), expected="mapping",
            found=_shape_name(root))

    sections = {key: node for key, _k, node in mapping_items(root)}

    node_types = _parse_types(sections.get("node_types"), st)
    capability_types = _parse_types(sections.get("capability_types"), st)

    templates_node = None
    inputs_node = None
    topo = sections.get("topology_template")
    if isinstance(topo, yaml.MappingNode):
        inner = {key: node for key, _k, node in mapping_items(topo)}
        templates_node = inner.get("node_templates")
        inputs_node = inner.get("inputs")
    if templates_node is None:
        templates_node = sections.get("node_templates")

    inputs: dict[str, Value] = {}
    if isinstance(inputs_node, yaml.MappingNode):
        for key, _k, node in mapping_items(inputs_node):
            inputs.setdefault(key, walk_value(node, st))

    templates: list[NodeTemplate] = []
    if templates_node is not None:
        if not isinstance(templates_node, yaml.MappingNode):
            raise SchemaShape(
                f"{st.file}: node_templates must be a mapping of templates",
                span=st.node_span(templates_node), expected="mapping",
                found=_shape_name(templates_node))
        for name, _k, node in mapping_items(templates_node):
            templates.append(_parse_template(name, node, st))

    return TopologyModel(
        file=st.file,
        inputs=inputs,
        node_types=node_types,
        capability_types=capability_types,
        templates=tuple(templates),
        span=st.whole_span(),
    )


def _shape_name(node: yaml.Node) -> str:
    if isinstance(node, yaml.SequenceNode):
        return "list"
    if isinstance(node, yaml.MappingNode):
        return "mapping"
    return "scalar"


def _parse_types(section: yaml.Node | None, st: SourceText) -> dict[str, TypeDef]:
    types: dict[str, TypeDef] = {}
    if not isinstance(section, yaml.MappingNode):
        return types
    for name, _k, node in mapping_items(section):
        if not isinstance(node, yaml.MappingNode):
            continue
        body = {key: vn for key, _kn, vn in mapping_items(node)}
        derived = None
        if isinstance(body.get("derived_from"), yaml.ScalarNode):
            derived = str(scalar_value(body["derived_from"]))
        properties: dict[str, PropertySchema] = {}
        props_node = body.get("properties")
        if isinstance(props_node, yaml.MappingNode):
            for pname, _pk, pnode in mapping_items(props_node):
                properties.setdefault(pname, _parse_property_schema(pnode))
        capability_defs: dict[str, str] = {}
        caps_node = body.get("capabilities")
        if isinstance(caps_node, yaml.MappingNode):
            for cname, _ck, cnode in mapping_items(caps_node):
                if isinstance(cnode, yaml.ScalarNode):
                    capability_defs.setdefault(cname, str(scalar_value(cnode)))
                elif isinstance(cnode, yaml.MappingNode):
                    for key, _kk, vnode in mapping_items(cnode):
                        if key == "type" and isinstance(vnode, yaml.ScalarNode):
                            capability_defs.setdefault(
                                cname, str(scalar_value(vnode)))
        types.setdefault(name, TypeDef(
            name=name,
            derived_from=derived,
            properties=properties,
            capability_defs=capability_defs,
            span=st.node_span(node),
        ))
    return types


def _parse_property_schema(node: yaml.Node) -> PropertySchema:
    if isinstance(node, yaml.ScalarNode):  # shorthand: prop: string
        kind = str(scalar_value(node))
        return PropertySchema(kind=kind if kind in _PROPERTY_KINDS else None)
    if not isinstance(node, yaml.MappingNode):
        return PropertySchema(kind=None)
    kind = None
    required = True
    constraints: list[Constraint] = []
    for key, _k, vn in mapping_items(node):
        if key == "type" and isinstance(vn, yaml.ScalarNode):
            declared = str(scalar_value(vn))
            kind = declared if declared in _PROPERTY_KINDS else None
        elif key == "required" and isinstance(vn, yaml.ScalarNode):
            required = scalar_value(vn) is True
        elif key == "constraints" and isinstance(vn, yaml.SequenceNode):
            for item in vn.value:
                parsed = _parse_constraint(item)
                if parsed is not None:
                    constraints.append(parsed)
    return PropertySchema(kind=kind, required=required,
                          constraints=tuple(constraints))


def _parse_constraint(node: yaml.Node) -> Constraint | None:
    if not isinstance(node, yaml.MappingNode) or len(node.value) != 1:
        return None
    key = key_text(node.value[0][0])
    vn = node.value[0][1]
    value = scalar_value(vn) if isinstance(vn, yaml.ScalarNode) else None
    if key in ("min", "greater_or_equal"):
        return Constraint(min=value)
    if key in ("max", "less_or_equal"):
        return Constraint(max=value)
    if key == "in_range" and isinstance(vn, yaml.SequenceNode) \
            and len(vn.value) == 2:
        lo, hi = (scalar_value(n) if isinstance(n, yaml.ScalarNode) else None
                  for n in vn.value)
        return Constraint(min=lo, max=hi)
    if key in ("enum", "valid_values") and isinstance(vn, yaml.SequenceNode):
        return Constraint(enum=tuple(
            scalar_value(n) if isinstance(n, yaml.ScalarNode) else None
            for n in vn.value))
    if key == "pattern" and value is not None:
        return Constraint(pattern=str(value))
    return None  # operators we do not model are left unchecked


def _parse_template(name: str, node: yaml.Node, st: SourceText) -> NodeTemplate:
    span = st.node_span(node)
    if not isinstance(node, yaml.MappingNode):
        raise SchemaShape(
            f"{st.file}: node template {name!r} must be a mapping",
            span=span, expected="mapping", found=_shape_name(node))
    body = {key: vn for key, _k, vn in mapping_items(node)}

    type_node = body.get("type")
    if not isinstance(type_node, yaml.ScalarNode):
        raise SchemaShape(
            f"{st.file}: node template {name!r} has no type",
            span=span, expected="type key", found="nothing")
    type_name = str(scalar_value(type_node))

    properties: dict[str, Value] = {}
    props = body.get("properties")
    if isinstance(props, yaml.MappingNode):
        for pname, _pk, pnode in mapping_items(props):
            properties.setdefault(pname, walk_value(pnode, st))

    requirements: list[Requirement] = []
    reqs = body.get("requirements")
    if isinstance(reqs, yaml.SequenceNode):
        for item in reqs.value:
            requirements.append(_parse_requirement(item, st))

    capabilities: dict[str, Value] = {}
    caps = body.get("capabilities")
    if isinstance(caps, yaml.MappingNode):
        for cname, _ck, cnode in mapping_items(caps):
            capabilities.setdefault(cname, walk_value(cnode, st))

    artifacts: list[ArtifactRef] = []
    arts = body.get("artifacts")
    if isinstance(arts, yaml.MappingNode):
        for aname, _ak, anode in mapping_items(arts):
            ref = _parse_artifact(aname, anode, st)
            if ref is not None:
                artifacts.append(ref)

    return NodeTemplate(
        name=name,
        type_name=type_name,
        properties=properties,
        requirements=tuple(requirements),
        capabilities=capabilities,
        artifacts=tuple(artifacts),
        span=span,
    )


def _parse_requirement(item: yaml.Node, st: SourceText) -> Requirement:
    span = st.node_span(item)
    if not isinstance(item, yaml.MappingNode) or len(item.value) != 1:
        raise SchemaShape(
            f"{st.file}: requirement entries must be single-key mappings",
            span=span, expected="single-key mapping", found=_shape_name(item))
    req_name = key_text(item.value[0][0])
    vn = item.value[0][1]
    target = None
    capability = None
    if isinstance(vn, yaml.ScalarNode):
        value = scalar_value(vn)
        target = str(value) if value is not None else None
    elif isinstance(vn, yaml.MappingNode):
        for key, _k, inner in mapping_items(vn):
            if not isinstance(inner, yaml.ScalarNode):
                continue
            if key == "node":
                target = str(scalar_value(inner))
            elif key == "capability":
                capability = str(scalar_value(inner))
    return Requirement(name=req_name, target_node=target,
                       capability_name=capability, span=span)


def _parse_artifact(name: str, node: yaml.Node, st: SourceText) -> ArtifactRef | None:
    span = st.node_span(node)
    path = None
    if isinstance(node, yaml.ScalarNode):
        value = scalar_value(node)
        path = str(value) if value is not None else None
    elif isinstance(node, yaml.MappingNode):
        for key, _k, vn in mapping_items(node):
            if key == "file" and isinstance(vn, yaml.ScalarNode):
                path = str(scalar_value(vn))
    if path is None:
        return None
    kind = "ansible_playbook" if path.endswith((".yml", ".yaml")) else "other"
    return ArtifactRef(name=name, path=path, kind=kind, span=span)


# ----- playbook parsing ----------------------------------------------------


def parse_playbook(st: SourceText) -> PlaybookModel:
    """Parse one playbook document into a PlaybookModel."""
    root = compose(st)
    if root is None:
        raise SchemaShape(f"{st.file}: empty document, expected a play list",
                          expected="list", found="nothing")
    if not isinstance(root, yaml.SequenceNode):
        raise SchemaShape(
            f"{st.file}: playbook root must be a list of plays",
            span=st.node_span(root), expected="list",
            found=_shape_name(root))

    plays = tuple(_parse_play(item, st) for item in root.value)
    return PlaybookModel(
        file=st.file,
        plays=plays,
        span=st.whole_span(),
        source_lines=len(st.text.splitlines()),
    )


def _parse_play(node: yaml.Node, st: SourceText) -> Play:
    span = st.node_span(node)
    if not isinstance(node, yaml.MappingNode):
        raise SchemaShape(f"{st.file}: each play must be a mapping",
                          span=span, expected="mapping",
                          found=_shape_name(node))
    body = {key: vn for key, _k, vn in mapping_items(node)}

    name = None
    if isinstance(body.get("name"), yaml.ScalarNode):
        raw = scalar_value(body["name"])
        name = None if raw is None else str(raw)
    hosts = None
    hosts_node = body.get("hosts")
    if isinstance(hosts_node, yaml.ScalarNode):
        raw = scalar_value(hosts_node)
        hosts = None if raw is None else str(raw)
    elif isinstance(hosts_node, yaml.SequenceNode):
        hosts = ",".join(
            str(scalar_value(n)) for n in hosts_node.value
            if isinstance(n, yaml.ScalarNode))

    sections: dict[str, tuple[TaskNode, ...]] = {}
    for section in _PLAY_TASK_SECTIONS:
        sec_node = body.get(section)
        tasks: list[TaskNode] = []
        if isinstance(sec_node, yaml.SequenceNode):
            for item in sec_node.value:
                tasks.append(_parse_task(item, st))
        sections[section] = tuple(tasks)

    play_vars: dict[str, Value] = {}
    vars_node = body.get("vars")
    if isinstance(vars_node, yaml.MappingNode):
        for vname, _vk, vn in mapping_items(vars_node):
            play_vars.setdefault(vname, walk_value(vn, st))

    return Play(
        name=name,
        hosts=hosts,
        tasks=sections["tasks"],
        handlers=sections["handlers"],
        vars=play_vars,
        span=span,
    )


def _parse_task(node: yaml.Node, st: SourceText) -> TaskNode:
    span = st.node_span(node)
    if not isinstance(node, yaml.MappingNode):
        raise SchemaShape(f"{st.file}: each task must be a mapping",
                          span=span, expected="mapping",
                          found=_shape_name(node))

    name = None
    module = None
    module_node = None
    args: dict[str, Value] = {}
    keyword_args: dict[str, Value] = {}
    when_expr = None
    notify: tuple[str, ...] = ()
    ignore_errors = False
    children: tuple[TaskNode, ...] = ()
    rescue: tuple[TaskNode, ...] = ()
    always: tuple[TaskNode, ...] = ()
    is_block = False

    for key, _k, vn in mapping_items(node):
        if key == "name":
            raw = scalar_value(vn) if isinstance(vn, yaml.ScalarNode) else None
            name = None if raw is None else str(raw)
        elif key == "block":
            is_block = True
            if isinstance(vn, yaml.SequenceNode):
                children = tuple(_parse_task(t, st) for t in vn.value)
        elif key == "rescue" and isinstance(vn, yaml.SequenceNode):
            rescue = tuple(_parse_task(t, st) for t in vn.value)
        elif key == "always" and isinstance(vn, yaml.SequenceNode):
            always = tuple(_parse_task(t, st) for t in vn.value)
        elif key == "when":
            when_expr = _when_text(vn)
        elif key == "notify":
            if isinstance(vn, yaml.ScalarNode):
                notify = (str(scalar_value(vn)),)
            elif isinstance(vn, yaml.SequenceNode):
                notify = tuple(
                    str(scalar_value(n)) for n in vn.value
                    if isinstance(n, yaml.ScalarNode))
        elif key == "ignore_errors" and isinstance(vn, yaml.ScalarNode):
            ignore_errors = scalar_value(vn) is True
        elif key == "args" and isinstance(vn, yaml.MappingNode):
            for aname, _ak, an in mapping_items(vn):
                keyword_args.setdefault(aname, walk_value(an, st))
        elif key in TASK_KEYWORDS:
            continue
        elif module is None:
            module = key
            module_node = vn

    if is_block:
        return TaskNode(kind="block", name=name, module=None,
                        when_expr=when_expr, notify=notify,
                        ignore_errors=ignore_errors, children=children,
                        rescue=rescue, always=always, span=span)

    if module is None:
        raise SchemaShape(
            f"{st.file}: task has neither a module nor a block",
            span=span, expected="module key or block", found="nothing")

    args = dict(keyword_args)
    if isinstance(module_node, yaml.MappingNode):
        for aname, _ak, an in mapping_items(module_node):
            args[aname] = walk_value(an, st)
    elif isinstance(module_node, yaml.ScalarNode):
        raw = scalar_value(module_node)
        if raw is not None:
            args.update(_free_form_args(str(raw), st.node_span(module_node)))
    elif isinstance(module_node, yaml.SequenceNode):
        args["_raw_params"] = walk_value(module_node, st)

    return TaskNode(kind="task", name=name, module=module, args=args,
                    when_expr=when_expr, notify=notify,
                    ignore_errors=ignore_errors, span=span)


def _when_text(node: yaml.Node) -> str | None:
    if isinstance(node, yaml.ScalarNode):
        raw = scalar_value(node)
        return None if raw is None else str(raw)
    if isinstance(node, yaml.SequenceNode):
        parts = [str(scalar_value(n)) for n in node.value
                 if isinstance(n, yaml.ScalarNode)]
        return " and ".join(parts) if parts else None
    return None


def _free_form_args(text: str, span: SourceSpan) -> dict[str, Value]:
    """Normalize ``module: src=a dest=b rest of line`` into an args map.

    ``key=value`` tokens become named args; remaining words are joined under
    ``_raw_params``.  Every derived arg shares the scalar's span.
    """
    import shlex

    try:
        tokens = shlex.split(text)
    except ValueError:
        tokens = [text]
    args: dict[str, Value] = {}
    free: list[str] = []
    for token in tokens:
        match = _FREE_FORM_KV.match(token)
        if match:
            args[match.group(1)] = Value(match.group(2), span)
        else:
            free.append(token)
    if free or not args:
        args["_raw_params"] = Value(" ".join(free) if free else text, span)
    return args
