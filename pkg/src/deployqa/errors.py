"""Exception types shared across the package.

Every error that corresponds to a malformed input carries enough position
information (a :class:`~deployqa.model.SourceSpan` or a line/row number) for
the CLI to print a useful diagnostic and exit with the documented code.
"""

from __future__ import annotations


class QaError(Exception):
    """Base class for all errors raised by this package."""


# ----- archive / parsing ---------------------------------------------------


class NotAnArchive(QaError):
    """Input path is neither a directory nor a zip archive."""


class MissingEntryBlueprint(QaError):
    """No (or more than one) entry blueprint could be determined."""


class MetadataMalformed(QaError):
    """TOSCA-Metadata/TOSCA.meta does not follow the key: value line format."""

    def __init__(self, message: str, line: int):
        super().__init__(f"{message} (line {line})")
        self.line = line


class YamlSyntax(QaError):
    """A YAML document failed to scan/parse, or was not valid UTF-8."""

    def __init__(self, message: str, span=None):
        super().__init__(message)
        self.span = span


class SchemaShape(QaError):
    """A parsed document has the wrong overall shape (e.g. mapping where a
    list was required)."""

    def __init__(self, message: str, span=None, expected: str = "", found: str = ""):
        super().__init__(message)
        self.span = span
        self.expected = expected
        self.found = found


# ----- catalog -------------------------------------------------------------


class CatalogSyntax(QaError):
    """Rule catalog file is not valid YAML or lacks the top-level shape."""


class CatalogInvalid(QaError):
    """Catalog content violates a structural invariant.

    ``violations`` lists every problem found, one string each.
    """

    def __init__(self, violations: list[str]):
        super().__init__("invalid catalog: " + "; ".join(violations))
        self.violations = list(violations)


class UnknownRule(QaError):
    """A rule id was referenced that the loaded catalog does not define."""


class ConfigInvalid(QaError):
    """Run configuration references unknown rules or undeclared
    parameters."""


# ----- workflow nets -------------------------------------------------------


class UnboundPlaybook(QaError):
    """A playbook was supplied for a node that the topology does not define."""


class StateSpaceExceeded(QaError):
    """Reachability exploration hit the marking budget.

    The partially explored graph is attached as ``graph`` (flagged
    incomplete) so callers can still report how far exploration got.
    """

    def __init__(self, max_markings: int, graph=None):
        super().__init__(f"state space exceeded {max_markings} markings")
        self.max_markings = max_markings
        self.graph = graph


class IncompleteGraph(QaError):
    """A verdict was requested from a reachability graph that was cut short."""


# ----- fixes ---------------------------------------------------------------


class NotAutoFixable(QaError):
    """render_patch was called for a plan without an automatic template."""


class StaleSource(QaError):
    """Source text no longer matches the digest a patch was computed for."""


class TemplateError(QaError):
    """A fix template could not be rendered (unbound parameter, or the
    directive path does not resolve in the document)."""


class OverlappingEdits(QaError):
    """Two edits in one patch touch intersecting byte ranges."""


# ----- performance model ---------------------------------------------------


class CsvSyntax(QaError):
    """Benchmark CSV is malformed; ``row`` is the 1-based offending row."""

    def __init__(self, message: str, row: int):
        super().__init__(f"{message} (row {row})")
        self.row = row


class EmptyData(QaError):
    """Benchmark CSV contains a header but no data rows."""


class InsufficientData(QaError):
    """Fewer samples than coefficients to estimate."""


class IllConditioned(QaError):
    """Normal equations are numerically singular (pivot below threshold)."""


class NameMismatch(QaError):
    """A goal references a response the fitted model does not describe."""
