"""Shared intermediate representation for deployment blueprints.

Everything downstream (verification, smell detection, workflow analysis,
fixes) works off the types in this module rather than raw YAML.  The IR is
fully materialized and immutable after construction: dataclasses are frozen,
sequences are tuples, and the loader never hands out half-built objects.

Two rules hold throughout:

* every element carries exactly one :class:`SourceSpan` pointing back into
  the file it was parsed from (byte offsets, 1-based line/column), and
* template expressions such as ``get_input`` are kept opaque — they are
  wrapped in :class:`OpaqueRef` and never evaluated.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator


# ----- source locations ----------------------------------------------------


@dataclass(frozen=True, order=True)
class SourceSpan:
    """Half-open byte range ``[start_byte, end_byte)`` in ``file``.

    ``start_line`` / ``start_col`` are 1-based and describe the first byte.
    Invariant: ``start_byte <= end_byte``.
    """

    file: str
    start_byte: int
    end_byte: int
    start_line: int = 1
    start_col: int = 1

    def __post_init__(self):
        if self.start_byte > self.end_byte:
            raise ValueError(
                f"span start {self.start_byte} past end {self.end_byte}")

    @classmethod
    def whole_file(cls, file: str, size: int = 0) -> SourceSpan:
        return cls(file, 0, size, 1, 1)


@dataclass(frozen=True)
class OpaqueRef:
    """An unevaluated intrinsic call such as ``{get_input: db_name}``."""

    function: str
    arguments: tuple


@dataclass(frozen=True)
class Value:
    """A parsed YAML value plus the span of its source text.

    ``data`` is a plain scalar, a tuple (for sequences), a dict (for
    mappings, with nested :class:`Value` leaves), or an :class:`OpaqueRef`.
    """

    data: object
    span: SourceSpan

    def is_opaque(self) -> bool:
        return isinstance(self.data, OpaqueRef)


def plain(value: object) -> object:
    """Strip Value/span wrappers recursively, leaving raw Python data."""
    if isinstance(value, Value):
        return plain(value.data)
    if isinstance(value, dict):
        return {k: plain(v) for k, v in value.items()}
    if isinstance(value, tuple):
        return tuple(plain(v) for v in value)
    return value


# ----- topology ------------------------------------------------------------


@dataclass(frozen=True)
class Constraint:
    """Bounds admitted for a property value; unset members are unchecked."""

    min: object = None
    max: object = None
    enum: tuple | None = None
    pattern: str | None = None


@dataclass(frozen=True)
class PropertySchema:
    """Declared shape of a node property.

    ``kind`` is one of string/integer/float/boolean/list/map, or None when
    the declaration used a type this checker does not model (left unchecked).
    """

    kind: str | None
    required: bool = True
    constraints: tuple[Constraint, ...] = ()


@dataclass(frozen=True)
class TypeDef:
    """A node or capability type declaration."""

    name: str
    derived_from: str | None
    properties: dict[str, PropertySchema] = field(default_factory=dict)
    capability_defs: dict[str, str] = field(default_factory=dict)
    span: SourceSpan = SourceSpan("<builtin>", 0, 0)


@dataclass(frozen=True)
class Requirement:
    """One entry of a node template's requirements list."""

    name: str
    target_node: str | None
    capability_name: str | None
    span: SourceSpan


@dataclass(frozen=True)
class ArtifactRef:
    """File attached to a node template; ``kind`` is ansible_playbook for
    YAML playbooks, other for everything else."""

    name: str
    path: str
    kind: str
    span: SourceSpan


@dataclass(frozen=True)
class NodeTemplate:
    name: str
    type_name: str
    properties: dict[str, Value] = field(default_factory=dict)
    requirements: tuple[Requirement, ...] = ()
    capabilities: dict[str, Value] = field(default_factory=dict)
    artifacts: tuple[ArtifactRef, ...] = ()
    span: SourceSpan = SourceSpan("<none>", 0, 0)


@dataclass(frozen=True)
class TopologyModel:
    """A parsed blueprint document.

    ``templates`` preserves every occurrence in source order, duplicates
    included, so duplicate-name checks can see them all;
    :attr:`node_templates` maps each name to its first occurrence.
    """

    file: str
    inputs: dict[str, Value] = field(default_factory=dict)
    node_types: dict[str, TypeDef] = field(default_factory=dict)
    capability_types: dict[str, TypeDef] = field(default_factory=dict)
    templates: tuple[NodeTemplate, ...] = ()
    span: SourceSpan = SourceSpan("<none>", 0, 0)

    @property
    def node_templates(self) -> dict[str, NodeTemplate]:
        mapping: dict[str, NodeTemplate] = {}
        for t in self.templates:
            mapping.setdefault(t.name, t)
        return mapping

    def resolve_node(self, name: str) -> NodeTemplate | None:
        """First template with ``name`` in source order, or None."""
        for t in self.templates:
            if t.name == name:
                return t
        return None


# ----- playbooks -----------------------------------------------------------


@dataclass(frozen=True)
class TaskNode:
    """A task or a block.  Blocks carry children/rescue/always; plain tasks
    carry a module and its args (free-form args normalized under
    ``_raw_params``)."""

    kind: str  # "task" | "block"
    name: str | None
    module: str | None
    args: dict[str, Value] = field(default_factory=dict)
    when_expr: str | None = None
    notify: tuple[str, ...] = ()
    ignore_errors: bool = False
    children: tuple[TaskNode, ...] = ()
    rescue: tuple[TaskNode, ...] = ()
    always: tuple[TaskNode, ...] = ()
    span: SourceSpan = SourceSpan("<none>", 0, 0)


@dataclass(frozen=True)
class Play:
    name: str | None
    hosts: str | None
    tasks: tuple[TaskNode, ...] = ()
    handlers: tuple[TaskNode, ...] = ()
    vars: dict[str, Value] = field(default_factory=dict)
    span: SourceSpan = SourceSpan("<none>", 0, 0)


@dataclass(frozen=True)
class PlaybookModel:
    file: str
    plays: tuple[Play, ...] = ()
    span: SourceSpan = SourceSpan("<none>", 0, 0)
    source_lines: int = 0


TaskPath = tuple  # e.g. ("plays", 0, "tasks", 2, "rescue", 1)


def _walk(tasks, prefix) -> Iterator[tuple[TaskNode, TaskPath]]:
    for i, t in enumerate(tasks):
        path = prefix + (i,)
        yield t, path
        yield from _walk(t.children, path + ("block",))
        yield from _walk(t.rescue, path + ("rescue",))
        yield from _walk(t.always, path + ("always",))


def iter_tasks(playbook: PlaybookModel) -> Iterator[tuple[TaskNode, TaskPath]]:
    """Depth-first traversal of every TaskNode with its addressable path.

    Order: per play, the tasks section before handlers; within a block,
    children then rescue then always.  Each node is visited exactly once,
    blocks included.
    """
    for p, play in enumerate(playbook.plays):
        yield from _walk(play.tasks, ("plays", p, "tasks"))
        yield from _walk(play.handlers, ("plays", p, "handlers"))


def subject_of(path: TaskPath) -> str:
    return "/".join(str(seg) for seg in path)


# ----- findings ------------------------------------------------------------


class Severity(enum.Enum):
    """Report severities, orderable by weight (error is the heaviest)."""

    ERROR = "error"
    HIGH = "high"
    MEDIUM = "medium"
    LOW = "low"
    INFO = "info"

    @property
    def weight(self) -> int:
        return _SEVERITY_WEIGHT[self]

    @classmethod
    def parse(cls, text: str) -> Severity:
        try:
            return cls(text)
        except ValueError:
            raise ValueError(f"unknown severity {text!r}") from None


_SEVERITY_WEIGHT = {
    Severity.ERROR: 4,
    Severity.HIGH: 3,
    Severity.MEDIUM: 2,
    Severity.LOW: 1,
    Severity.INFO: 0,
}


@dataclass(frozen=True)
class Finding:
    """One detected defect, the unit every analysis reports in.

    ``klass`` is serialized as ``class`` (error/smell/bug); ``subject`` is a
    stable element path such as ``node_templates/A/requirements/0`` used for
    de-duplication; ``data`` holds detector-specific values.
    """

    rule_id: str
    klass: str
    category: str
    severity: Severity
    message: str
    span: SourceSpan
    subject: str
    data: dict = field(default_factory=dict)

    def sort_key(self):
        return (self.span.file, self.span.start_byte, self.rule_id)


def finalize_findings(findings: list[Finding]) -> list[Finding]:
    """Stable report order: sort by (file, start_byte, rule_id) and collapse
    duplicates — at most one finding per (rule_id, subject)."""
    seen: set[tuple[str, str]] = set()
    out: list[Finding] = []
    for f in sorted(findings, key=Finding.sort_key):
        key = (f.rule_id, f.subject)
        if key in seen:
            continue
        seen.add(key)
        out.append(f)
    return out
