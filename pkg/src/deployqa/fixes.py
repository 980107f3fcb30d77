"""Recommend and apply fixes as span-based text edits.

Fix templates from the catalog are lowered onto the original source text by
navigating the composed YAML with the finding's subject path, so the
surrounding formatting and comments survive untouched.  A patch pins the
digest of the text it was computed for; applying it to anything else is
refused (StaleSource) rather than silently mangling the file.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import yaml

from .catalog import Catalog, DefectEntry, Resolution
from .errors import (
    NotAutoFixable,
    OverlappingEdits,
    StaleSource,
    TemplateError,
)
from .loader import TASK_KEYWORDS
from .model import Finding
from .yamlio import SourceText, compose, key_text

_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")


@dataclass(frozen=True)
class Edit:
    """Replace bytes [start_byte, end_byte) with ``replacement``."""

    start_byte: int
    end_byte: int
    replacement: str


@dataclass(frozen=True)
class Patch:
    file: str
    base_digest: str
    edits: tuple[Edit, ...]


@dataclass
class FixPlan:
    """One applicable resolution for one finding, with parameter values."""

    finding: Finding
    entry: DefectEntry
    resolution: Resolution
    bindings: dict[str, str] = field(default_factory=dict)

    @property
    def auto_fixable(self) -> bool:
        return self.resolution.auto_fixable

    def unbound(self) -> set[str]:
        if self.resolution.template is None:
            return set()
        bound = set(self.bindings)
        bound.update(p.name for p in self.resolution.parameters
                     if p.default is not None)
        return self.resolution.template.placeholders() - bound


def recommend(catalog: Catalog, finding: Finding) -> list[FixPlan]:
    """Every known resolution for the finding's rule, parameters bound from
    the finding where the detector recorded them."""
    entry = catalog.get(finding.rule_id)
    plans = []
    for resolution in entry.resolutions:
        bindings: dict[str, str] = {}
        for p in resolution.parameters:
            if p.default is not None:
                bindings[p.name] = str(p.default)
            value = finding.data.get(p.name)
            if isinstance(value, (str, int, float)) \
                    and not isinstance(value, bool):
                bindings[p.name] = str(value)
        extra = _AUTO_BINDERS.get(finding.rule_id)
        if extra is not None:
            for name, value in extra(finding).items():
                bindings.setdefault(name, value)
        plans.append(FixPlan(finding=finding, entry=entry,
                             resolution=resolution, bindings=bindings))
    return plans


def _bind_task_name(finding: Finding) -> dict[str, str]:
    module = finding.data.get("module") or "task"
    return {"task_name": f"{module} task"}


_AUTO_BINDERS = {
    "I001": _bind_task_name,
}


# ----- rendering -----------------------------------------------------------


def render_patch(plan: FixPlan, source: SourceText) -> Patch:
    """Lower the plan's template into concrete byte edits on ``source``."""
    resolution = plan.resolution
    if not resolution.auto_fixable or resolution.template is None:
        raise NotAutoFixable(
            f"{plan.finding.rule_id} has no automatic template")

    pinned = plan.finding.data.get("source_digest")
    if pinned is not None and pinned != source.digest():
        raise StaleSource(
            f"{source.file} changed since the finding was computed")

    unbound = plan.unbound()
    if unbound:
        raise TemplateError(
            f"{plan.finding.rule_id}: unbound parameters "
            f"{sorted(unbound)}")
    bindings = dict(plan.bindings)
    for p in resolution.parameters:
        bindings.setdefault(p.name, str(p.default))

    root = compose(source)
    if root is None:
        raise TemplateError(f"{source.file} is empty")
    subject_segs = [s for s in plan.finding.subject.split("/") if s]

    edits: list[Edit] = []
    for directive in resolution.template.directives:
        rendered = {key: _substitute(value, bindings)
                    for key, value in directive.fields}
        rel_segs = [s for s in rendered.get("path", "").split("/") if s]
        if directive.op == "set_key":
            edits.append(_edit_set_key(
                source, root, subject_segs, rel_segs, rendered["value"]))
        elif directive.op == "remove_key":
            edits.append(_edit_remove_key(
                source, root, subject_segs, rel_segs))
        elif directive.op == "rename_key":
            edits.append(_edit_rename_key(
                source, root, subject_segs, rel_segs, rendered["new"]))
        elif directive.op == "insert_sibling":
            edits.append(_edit_insert_sibling(
                source, root, subject_segs, rel_segs, rendered["node"]))
        else:  # pragma: no cover - validate_catalog refuses unknown ops
            raise TemplateError(f"unknown directive {directive.op!r}")

    ordered = tuple(sorted(edits, key=lambda e: (e.start_byte, e.end_byte)))
    _check_disjoint(ordered)
    return Patch(file=source.file, base_digest=source.digest(), edits=ordered)


def _substitute(template: str, bindings: dict[str, str]) -> str:
    return _PLACEHOLDER_RE.sub(
        lambda m: bindings.get(m.group(1), m.group(0)), template)


def _check_disjoint(edits: tuple[Edit, ...]) -> None:
    for prev, cur in zip(edits, edits[1:]):
        if cur.start_byte < prev.end_byte:
            raise OverlappingEdits(
                f"edits [{prev.start_byte},{prev.end_byte}) and "
                f"[{cur.start_byte},{cur.end_byte}) intersect")


def merge_patches(patches: list[Patch]) -> Patch:
    """Combine patches against one file/digest into a single patch;
    identical edits collapse, intersecting ones are refused."""
    if not patches:
        raise ValueError("nothing to merge")
    first = patches[0]
    for p in patches[1:]:
        if p.file != first.file or p.base_digest != first.base_digest:
            raise StaleSource("patches disagree about the base file")
    unique = sorted({e for p in patches for e in p.edits},
                    key=lambda e: (e.start_byte, e.end_byte))
    merged = tuple(unique)
    _check_disjoint(merged)
    return Patch(file=first.file, base_digest=first.base_digest, edits=merged)


# ----- applying ------------------------------------------------------------


def apply_patch(text: str, patch: Patch) -> str:
    """Apply edits right-to-left; the text must match the pinned digest."""
    digest = hashlib.sha256(text.encode("utf-8")).hexdigest()
    if digest != patch.base_digest:
        raise StaleSource(f"{patch.file} does not match the patch digest")
    ordered = sorted(patch.edits, key=lambda e: (e.start_byte, e.end_byte))
    _check_disjoint(tuple(ordered))
    data = text.encode("utf-8")
    for edit in reversed(ordered):
        if edit.end_byte > len(data):
            raise OverlappingEdits(
                f"edit [{edit.start_byte},{edit.end_byte}) is out of bounds")
        data = (data[:edit.start_byte] + edit.replacement.encode("utf-8")
                + data[edit.end_byte:])
    return data.decode("utf-8")


# ----- YAML navigation -----------------------------------------------------


def _resolve(root: yaml.Node, segs: list[str],
             st: SourceText) -> yaml.Node:
    nodes = [root]
    for seg in segs:
        nodes = _step(nodes, seg)
        if not nodes:
            raise TemplateError(
                f"{st.file}: cannot resolve path segment {seg!r}")
    return nodes[0]


def _step(nodes: list[yaml.Node], seg: str) -> list[yaml.Node]:
    out: list[yaml.Node] = []
    for node in nodes:
        if isinstance(node, yaml.SequenceNode):
            if seg in ("plays",):
                out.append(node)
            elif seg.isdigit() and int(seg) < len(node.value):
                out.append(node.value[int(seg)])
        elif isinstance(node, yaml.MappingNode):
            if seg == "plays":
                continue  # a play list subject against a mapping: no match
            if seg == "playbook":
                out.append(node)
                continue
            if seg == "args":
                out.extend(_args_candidates(node))
                continue
            if seg == "node_templates":
                for key, _k, value in _iter_map(node):
                    if key == "node_templates":
                        out.append(value)
                    elif key == "topology_template" \
                            and isinstance(value, yaml.MappingNode):
                        for ikey, _ik, ivalue in _iter_map(value):
                            if ikey == "node_templates":
                                out.append(ivalue)
                continue
            for key, _k, value in _iter_map(node):
                if key == seg:
                    out.append(value)
                    break
    return out


def _iter_map(node: yaml.MappingNode):
    for key_node, value_node in node.value:
        yield key_text(key_node), key_node, value_node


def _args_candidates(task_node: yaml.MappingNode) -> list[yaml.Node]:
    """Where a task keeps its module args: the module key's mapping value
    and/or the args keyword.  Free-form scalars are not navigable."""
    candidates: list[yaml.Node] = []
    module_value = None
    args_value = None
    for key, _k, value in _iter_map(task_node):
        if key == "args":
            args_value = value
        elif key not in TASK_KEYWORDS and module_value is None:
            module_value = value
    for value in (module_value, args_value):
        if isinstance(value, yaml.MappingNode):
            candidates.append(value)
    return candidates


def _find_pair(mapping: yaml.MappingNode, key: str):
    for key_node, value_node in mapping.value:
        if key_text(key_node) == key:
            return key_node, value_node
    return None


# ----- directive lowering --------------------------------------------------


def _edit_set_key(st: SourceText, root, subject_segs, rel_segs,
                  value_text: str) -> Edit:
    if not rel_segs:
        # replace the subject's own value
        node = _resolve(root, subject_segs, st)
        span = st.node_span(node)
        return Edit(span.start_byte, span.end_byte, _scalar_text(value_text))
    *parent_rel, key = rel_segs
    parent = _resolve_mapping(root, subject_segs + parent_rel, st)
    pair = _find_pair(parent, key)
    if pair is not None:
        span = st.node_span(pair[1])
        return Edit(span.start_byte, span.end_byte, _scalar_text(value_text))
    # no such key: insert a new line after the mapping's last child
    last_value = parent.value[-1][1]
    end = st.node_span(last_value).end_byte
    insert_at = _line_end(st, end)
    indent = parent.value[0][0].start_mark.column
    line = "\n" + " " * indent + f"{key}: {_scalar_text(value_text)}"
    return Edit(insert_at, insert_at, line)


def _edit_remove_key(st: SourceText, root, subject_segs, rel_segs) -> Edit:
    if not rel_segs:
        raise TemplateError("remove_key needs a key path")
    *parent_rel, key = rel_segs
    parent = _resolve_mapping(root, subject_segs + parent_rel, st)
    pair = _find_pair(parent, key)
    if pair is None:
        raise TemplateError(f"key {key!r} not present")
    key_node, value_node = pair
    start = _line_start(st, st.node_span(key_node).start_byte)
    if st.text.encode("utf-8")[start:st.node_span(key_node).start_byte] \
            .strip():
        raise TemplateError(
            f"key {key!r} does not start its line; cannot remove")
    end = _line_end(st, st.node_span(value_node).end_byte)
    data = st.text.encode("utf-8")
    if end < len(data):
        end += 1  # its newline goes with it
    return Edit(start, end, "")


def _edit_rename_key(st: SourceText, root, subject_segs, rel_segs,
                     new_name: str) -> Edit:
    if not rel_segs:
        raise TemplateError("rename_key needs a key path")
    *parent_rel, key = rel_segs
    parent = _resolve_mapping(root, subject_segs + parent_rel, st)
    pair = _find_pair(parent, key)
    if pair is None:
        raise TemplateError(f"key {key!r} not present")
    span = st.node_span(pair[0])
    return Edit(span.start_byte, span.end_byte, _scalar_text(new_name))


def _edit_insert_sibling(st: SourceText, root, subject_segs, rel_segs,
                         rendered: str) -> Edit:
    node = _resolve(root, subject_segs + rel_segs, st)
    span = st.node_span(node)
    start = _line_start(st, span.start_byte)
    data = st.text.encode("utf-8")
    indent_bytes = data[start:span.start_byte]
    indent = len(indent_bytes) - len(indent_bytes.lstrip(b" "))
    insert_at = _line_end(st, span.end_byte)
    lines = rendered.splitlines() or [""]
    text = "".join("\n" + " " * indent + line for line in lines)
    return Edit(insert_at, insert_at, text)


def _resolve_mapping(root, segs, st) -> yaml.MappingNode:
    node = _resolve(root, segs, st)
    if not isinstance(node, yaml.MappingNode):
        raise TemplateError(
            f"{st.file}: path {'/'.join(segs)} is not a mapping")
    return node


def _line_start(st: SourceText, byte_pos: int) -> int:
    data = st.text.encode("utf-8")
    return data.rfind(b"\n", 0, byte_pos) + 1


def _line_end(st: SourceText, byte_pos: int) -> int:
    data = st.text.encode("utf-8")
    at = data.find(b"\n", byte_pos)
    return len(data) if at < 0 else at


# ----- scalar quoting ------------------------------------------------------


_PLAIN_SAFE_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_ ./:@%+()<>=-]*$")
_RESERVED = frozenset({
    "true", "false", "yes", "no", "on", "off", "null", "none", "~"})


def _scalar_text(value: str) -> str:
    """Quote a replacement scalar only when YAML would misread it plain."""
    if _PLAIN_SAFE_RE.match(value) and value.lower() not in _RESERVED \
            and ": " not in value and " #" not in value \
            and not value.endswith(":") and value == value.strip():
        return value
    return json.dumps(value)
