"""Span-aware YAML plumbing.

PyYAML's compose tree keeps precise marks for every node, but they are
character offsets and (for block collections) overshoot into trailing
whitespace and comments.  This module turns composed nodes into byte-exact
:class:`~deployqa.model.SourceSpan`s, and walks them into ``Value`` trees
with intrinsic calls (``get_input`` …) kept opaque.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import yaml

from .errors import YamlSyntax
from .model import OpaqueRef, SourceSpan, Value

#: mapping keys that mark a value as an unevaluated intrinsic call
OPAQUE_FUNCTIONS = (
    "get_input",
    "get_property",
    "get_attribute",
    "get_artifact",
    "get_operation_output",
    "concat",
)


@dataclass
class SourceText:
    """One loaded file: decoded text plus byte-offset bookkeeping."""

    file: str
    text: str
    _byte_index: list[int] | None = field(default=None, repr=False)

    @classmethod
    def of(cls, text: str, file: str) -> SourceText:
        return cls(file=file, text=text)

    @classmethod
    def from_bytes(cls, data: bytes, file: str) -> SourceText:
        try:
            return cls(file=file, text=data.decode("utf-8"))
        except UnicodeDecodeError as exc:
            span = SourceSpan(file, exc.start, exc.start)
            raise YamlSyntax(f"{file}: not valid UTF-8 at byte {exc.start}", span)

    # -- offsets ------------------------------------------------------------

    def byte_of(self, char_index: int) -> int:
        """Byte offset of ``char_index``; identity for pure-ASCII text."""
        if self.text.isascii():
            return char_index
        if self._byte_index is None:
            offsets = [0]
            for ch in self.text:
                offsets.append(offsets[-1] + len(ch.encode("utf-8")))
            self._byte_index = offsets
        return self._byte_index[char_index]

    def digest(self) -> str:
        return hashlib.sha256(self.text.encode("utf-8")).hexdigest()

    # -- spans --------------------------------------------------------------

    def char_span(self, start: int, end: int, line0: int, col0: int) -> SourceSpan:
        return SourceSpan(
            self.file,
            self.byte_of(start),
            self.byte_of(end),
            line0 + 1,
            col0 + 1,
        )

    def node_span(self, node: yaml.Node) -> SourceSpan:
        """Span of a composed node, trimmed so block collections do not
        swallow trailing blank/comment lines before the next sibling."""
        start = node.start_mark.index
        end = node.end_mark.index
        if not isinstance(node, yaml.ScalarNode):
            end = start + _trimmed_len(self.text[start:end])
            end = max(end, start)
        return self.char_span(
            start, end, node.start_mark.line, node.start_mark.column)

    def whole_span(self) -> SourceSpan:
        return SourceSpan(self.file, 0, self.byte_of(len(self.text)), 1, 1)


def _trimmed_len(fragment: str) -> int:
    lines = fragment.splitlines(keepends=True)
    while lines:
        stripped = lines[-1].strip()
        if stripped == "" or stripped.startswith("#"):
            lines.pop()
        else:
            break
    return len("".join(lines).rstrip())


# ----- composing -----------------------------------------------------------


def compose(st: SourceText) -> yaml.Node | None:
    """Compose the single document in ``st``; None for an empty stream."""
    try:
        return yaml.compose(st.text)
    except yaml.YAMLError as exc:
        span = None
        mark = getattr(exc, "problem_mark", None)
        if mark is not None:
            span = st.char_span(mark.index, mark.index, mark.line, mark.column)
        raise YamlSyntax(f"{st.file}: {exc}", span)


def scalar_value(node: yaml.ScalarNode) -> object:
    """Python value of a scalar node, using the standard resolution rules
    (ints, floats, booleans, null, strings)."""
    try:
        return yaml.constructor.SafeConstructor().construct_object(node, deep=True)
    except yaml.YAMLError:
        return node.value


def key_text(key_node: yaml.Node) -> str:
    """Mapping key as the literal text written in the source (so ``yes``
    stays ``"yes"`` rather than resolving to a boolean)."""
    if isinstance(key_node, yaml.ScalarNode):
        return key_node.value
    return str(scalar_value(key_node))


def mapping_items(node: yaml.MappingNode):
    """Yield (key text, key node, value node) triples in source order."""
    for key_node, value_node in node.value:
        yield key_text(key_node), key_node, value_node


def walk_value(node: yaml.Node, st: SourceText) -> Value:
    """Recursively convert a node into a Value tree with spans.

    A single-entry mapping whose key names an intrinsic function becomes an
    :class:`OpaqueRef`; duplicate mapping keys keep the first occurrence.
    """
    span = st.node_span(node)
    if isinstance(node, yaml.ScalarNode):
        return Value(scalar_value(node), span)
    if isinstance(node, yaml.SequenceNode):
        return Value(tuple(walk_value(item, st) for item in node.value), span)
    if isinstance(node, yaml.MappingNode):
        if len(node.value) == 1:
            key = key_text(node.value[0][0])
            if key in OPAQUE_FUNCTIONS:
                raw = _raw_value(node.value[0][1])
                args = raw if isinstance(raw, tuple) else (raw,)
                return Value(OpaqueRef(key, args), span)
        data: dict[str, Value] = {}
        for key, _k, value_node in mapping_items(node):
            data.setdefault(key, walk_value(value_node, st))
        return Value(data, span)
    raise YamlSyntax(f"{st.file}: unsupported YAML node {node!r}", span)


def _raw_value(node: yaml.Node) -> object:
    if isinstance(node, yaml.ScalarNode):
        return scalar_value(node)
    if isinstance(node, yaml.SequenceNode):
        return tuple(_raw_value(item) for item in node.value)
    return tuple(
        (key, _raw_value(value)) for key, _k, value in mapping_items(node))


# ----- raw-source comments -------------------------------------------------


def iter_comments(st: SourceText):
    """Yield (comment text, SourceSpan) for every ``#`` comment.

    A comment starts at a ``#`` that sits at the start of a line or after
    whitespace, outside single/double quotes.  The span runs from the ``#``
    to the end of the line, trailing whitespace trimmed.
    """
    char_pos = 0
    for line_no, line in enumerate(st.text.splitlines(keepends=True)):
        body = line.rstrip("\r\n")
        quote: str | None = None
        for col, ch in enumerate(body):
            if quote:
                if ch == quote:
                    quote = None
                continue
            if ch in "'\"":
                quote = ch
            elif ch == "#" and (col == 0 or body[col - 1] in " \t"):
                text = body[col:].rstrip()
                start = char_pos + col
                yield text, st.char_span(start, start + len(text), line_no, col)
                break
        char_pos += len(line)
