"""The defect catalog: rule metadata, detection bindings, resolutions.

Analyses never invent classifications on the fly — every finding's class,
category, and severity come from the loaded catalog, and the fix engine
renders patches only from catalog templates.  Catalogs are plain YAML and
round-trip cleanly: ``load ∘ serialize ∘ load`` is a fixpoint.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources

import yaml

from .errors import CatalogInvalid, CatalogSyntax, UnknownRule
from .model import Finding, Severity, SourceSpan

RULE_ID_RE = re.compile(r"^[EISWDP][0-9]{3}[a-z]?$")
_PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

CLASSES = frozenset({"error", "smell", "bug"})
CATEGORIES = frozenset({"implementation", "design", "security"})
TARGETS = frozenset({"tosca", "ansible", "workflow", "perf"})
PARAM_KINDS = frozenset({"string", "integer", "float", "boolean"})

#: every builtin detection routine a catalog entry may bind to
KNOWN_DETECTORS = frozenset({
    # topology structure
    "dangling_requirement_target", "capability_type_mismatch",
    "undefined_type_reference", "cyclic_type_inheritance",
    "missing_required_property", "property_constraint_violation",
    "dependency_cycle", "duplicate_template_name",
    # workflow
    "workflow_deadlock", "dead_transition",
    # smells
    "hardcoded_secret", "empty_secret", "default_admin_user",
    "unrestricted_bind_address", "http_without_tls", "suspicious_comment",
    "download_without_checksum", "weak_crypto_algorithm", "unnamed_task",
    "command_instead_of_module", "ignore_errors_enabled",
    "deprecated_module", "literal_bool_comparison", "long_play",
    "duplicate_task", "monolithic_playbook", "god_node",
    # performance
    "perf_goal_violation",
})

_DIRECTIVE_OPS = {
    "set_key": ("path", "value"),
    "remove_key": ("path",),
    "insert_sibling": ("path", "node"),
    "rename_key": ("path", "new"),
}


@dataclass(frozen=True)
class FixDirective:
    """One edit instruction; ``fields`` holds the op's named arguments,
    whose string values may contain ``{parameter}`` placeholders."""

    op: str
    fields: tuple[tuple[str, str], ...]

    def get(self, name: str) -> str:
        for key, value in self.fields:
            if key == name:
                return value
        raise KeyError(name)

    def placeholders(self) -> set[str]:
        names: set[str] = set()
        for _key, value in self.fields:
            names.update(_PLACEHOLDER_RE.findall(value))
        return names


@dataclass(frozen=True)
class FixTemplate:
    directives: tuple[FixDirective, ...]

    def placeholders(self) -> set[str]:
        names: set[str] = set()
        for d in self.directives:
            names.update(d.placeholders())
        return names


@dataclass(frozen=True)
class Parameter:
    name: str
    kind: str = "string"
    default: object = None


@dataclass(frozen=True)
class Resolution:
    description: str
    auto_fixable: bool = False
    parameters: tuple[Parameter, ...] = ()
    template: FixTemplate | None = None


@dataclass(frozen=True)
class Detection:
    rule: str
    params: tuple[tuple[str, object], ...] = ()

    def param_map(self) -> dict:
        """Detection parameters with mappings/lists restored from their
        frozen (hashable) form."""
        return {k: _thaw(v) for k, v in self.params}


@dataclass(frozen=True)
class DefectEntry:
    rule_id: str
    klass: str
    category: str
    targets: frozenset[str]
    severity: Severity
    title: str
    description: str
    detection: Detection
    resolutions: tuple[Resolution, ...] = ()


@dataclass(frozen=True)
class Catalog:
    version: str
    entries: tuple[DefectEntry, ...]

    def __post_init__(self):
        object.__setattr__(
            self, "_by_id", {e.rule_id: e for e in self.entries})

    def get(self, rule_id: str) -> DefectEntry:
        try:
            return self._by_id[rule_id]
        except KeyError:
            raise UnknownRule(f"rule {rule_id} is not in the catalog") from None

    def __contains__(self, rule_id: str) -> bool:
        return rule_id in self._by_id

    def for_target(self, target: str) -> list[DefectEntry]:
        return [e for e in self.entries if target in e.targets]

    def finding(self, rule_id: str, message: str, span: SourceSpan,
                subject: str, data: dict | None = None) -> Finding:
        """Build a Finding whose class/category/severity come from here."""
        entry = self.get(rule_id)
        return Finding(
            rule_id=rule_id,
            klass=entry.klass,
            category=entry.category,
            severity=entry.severity,
            message=message,
            span=span,
            subject=subject,
            data=data or {},
        )


# ----- loading -------------------------------------------------------------


def load_catalog(path: str) -> Catalog:
    with open(path, "rb") as fh:
        return parse_catalog(fh.read().decode("utf-8"), origin=path)


def load_builtin_catalog() -> Catalog:
    text = resources.files("deployqa").joinpath("data/catalog.yaml") \
        .read_text(encoding="utf-8")
    return parse_catalog(text, origin="<builtin>")


@lru_cache(maxsize=1)
def builtin_catalog() -> Catalog:
    """The packaged catalog, parsed once per process."""
    return load_builtin_catalog()


def parse_catalog(text: str, origin: str = "<catalog>") -> Catalog:
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise CatalogSyntax(f"{origin}: {exc}")
    if not isinstance(doc, dict) or "rules" not in doc:
        raise CatalogSyntax(
            f"{origin}: catalog must be a mapping with a rules list")
    rules = doc["rules"]
    if not isinstance(rules, list):
        raise CatalogSyntax(f"{origin}: rules must be a list")

    violations: list[str] = []
    entries: list[DefectEntry] = []
    version = doc.get("version")
    if not isinstance(version, str) or not version:
        violations.append("catalog version missing")
        version = ""
    for i, raw in enumerate(rules):
        if not isinstance(raw, dict):
            violations.append(f"rules[{i}] is not a mapping")
            continue
        entries.append(_parse_entry(raw, i, violations))
    catalog = Catalog(version=version, entries=tuple(entries))
    violations.extend(validate_catalog(catalog))
    if violations:
        raise CatalogInvalid(sorted(set(violations)))
    return catalog


def _parse_entry(raw: dict, index: int, violations: list[str]) -> DefectEntry:
    rule_id = str(raw.get("id", f"<rules[{index}]>"))

    def text_field(key: str) -> str:
        value = raw.get(key)
        return value if isinstance(value, str) else ""

    severity_text = text_field("severity")
    try:
        severity = Severity.parse(severity_text)
    except ValueError:
        violations.append(f"{rule_id}: unknown severity {severity_text!r}")
        severity = Severity.INFO

    targets_raw = raw.get("target", [])
    if isinstance(targets_raw, str):
        targets_raw = [targets_raw]
    targets = frozenset(str(t) for t in targets_raw) \
        if isinstance(targets_raw, list) else frozenset()

    detection_raw = raw.get("detection")
    if isinstance(detection_raw, str):
        detection = Detection(rule=detection_raw)
    elif isinstance(detection_raw, dict):
        params = detection_raw.get("params") or {}
        if not isinstance(params, dict):
            violations.append(f"{rule_id}: detection params must be a mapping")
            params = {}
        detection = Detection(
            rule=str(detection_raw.get("rule", "")),
            params=tuple(sorted((str(k), _freeze(v)) for k, v in params.items())),
        )
    else:
        violations.append(f"{rule_id}: detection binding missing")
        detection = Detection(rule="")

    resolutions: list[Resolution] = []
    for j, res in enumerate(raw.get("resolutions") or []):
        if not isinstance(res, dict):
            violations.append(f"{rule_id}: resolutions[{j}] is not a mapping")
            continue
        resolutions.append(_parse_resolution(res, rule_id, j, violations))

    return DefectEntry(
        rule_id=rule_id,
        klass=text_field("class"),
        category=text_field("category"),
        targets=targets,
        severity=severity,
        title=text_field("title"),
        description=text_field("description").strip(),
        detection=detection,
        resolutions=tuple(resolutions),
    )


def _parse_resolution(res: dict, rule_id: str, index: int,
                      violations: list[str]) -> Resolution:
    parameters: list[Parameter] = []
    for p in res.get("parameters") or []:
        if isinstance(p, dict) and "name" in p:
            parameters.append(Parameter(
                name=str(p["name"]),
                kind=str(p.get("kind", "string")),
                default=_freeze(p.get("default")),
            ))
        else:
            violations.append(
                f"{rule_id}: resolutions[{index}] has a nameless parameter")

    template = None
    tmpl_raw = res.get("template")
    if isinstance(tmpl_raw, dict):
        directives: list[FixDirective] = []
        for d in tmpl_raw.get("directives") or []:
            if not isinstance(d, dict) or len(d) != 1:
                violations.append(
                    f"{rule_id}: directives must be single-op mappings")
                continue
            (op, body), = d.items()
            if op not in _DIRECTIVE_OPS:
                violations.append(f"{rule_id}: unknown directive op {op!r}")
                continue
            if not isinstance(body, dict):
                violations.append(f"{rule_id}: directive {op} needs a mapping")
                continue
            fields = tuple(sorted(
                (str(k), str(v if v is not None else ""))
                for k, v in body.items()))
            keys = {k for k, _v in fields}
            missing = set(_DIRECTIVE_OPS[op]) - keys
            if missing:
                violations.append(
                    f"{rule_id}: directive {op} missing {sorted(missing)}")
            directives.append(FixDirective(op=op, fields=fields))
        template = FixTemplate(directives=tuple(directives))

    return Resolution(
        description=str(res.get("description", "")).strip(),
        auto_fixable=res.get("auto_fixable") is True,
        parameters=tuple(parameters),
        template=template,
    )


def _freeze(value):
    if isinstance(value, dict):
        return tuple(sorted((str(k), _freeze(v)) for k, v in value.items()))
    if isinstance(value, list):
        return tuple(_freeze(v) for v in value)
    return value


def _thaw(value):
    if isinstance(value, tuple) and all(
            isinstance(v, tuple) and len(v) == 2 and isinstance(v[0], str)
            for v in value) and value:
        return {k: _thaw(v) for k, v in value}
    if isinstance(value, tuple):
        return [_thaw(v) for v in value]
    return value


# ----- validation ----------------------------------------------------------


def validate_catalog(catalog: Catalog) -> list[str]:
    """Structural invariant check; returns human-readable violations."""
    problems: list[str] = []
    seen: set[str] = set()
    for entry in catalog.entries:
        rid = entry.rule_id
        if not RULE_ID_RE.match(rid):
            problems.append(f"{rid}: id does not match the rule id pattern")
        if rid in seen:
            problems.append(f"{rid}: duplicate rule id")
        seen.add(rid)
        if entry.klass not in CLASSES:
            problems.append(f"{rid}: class {entry.klass!r} not in "
                            f"{sorted(CLASSES)}")
        if entry.category not in CATEGORIES:
            problems.append(f"{rid}: category {entry.category!r} not in "
                            f"{sorted(CATEGORIES)}")
        if not entry.targets:
            problems.append(f"{rid}: target missing")
        elif not entry.targets <= TARGETS:
            problems.append(f"{rid}: target {sorted(entry.targets - TARGETS)} "
                            "unknown")
        if entry.klass == "error" and entry.severity is not Severity.ERROR:
            problems.append(f"{rid}: class=error requires severity=error")
        if entry.detection.rule not in KNOWN_DETECTORS:
            problems.append(
                f"{rid}: unknown detector {entry.detection.rule!r}")
        for j, res in enumerate(entry.resolutions):
            declared = {p.name for p in res.parameters}
            for p in res.parameters:
                if p.kind not in PARAM_KINDS:
                    problems.append(
                        f"{rid}: parameter {p.name} has unknown kind "
                        f"{p.kind!r}")
            if res.auto_fixable != (res.template is not None):
                problems.append(
                    f"{rid}: resolutions[{j}] auto_fixable must match the "
                    "presence of a template")
            if res.template is not None:
                unbound = res.template.placeholders() - declared
                if unbound:
                    problems.append(
                        f"{rid}: template references undeclared "
                        f"parameters {sorted(unbound)}")
    return problems


# ----- convenience lookups -------------------------------------------------


def lookup_resolutions(catalog: Catalog, rule_id: str) -> tuple[Resolution, ...]:
    return catalog.get(rule_id).resolutions


def category_of(catalog: Catalog, rule_id: str) -> str:
    return catalog.get(rule_id).category


# ----- serialization -------------------------------------------------------


def serialize_catalog(catalog: Catalog) -> str:
    """Render the catalog back to YAML (stable field order)."""
    rules = []
    for e in catalog.entries:
        raw: dict = {
            "id": e.rule_id,
            "class": e.klass,
            "category": e.category,
            "target": sorted(e.targets),
            "severity": e.severity.value,
            "title": e.title,
            "description": e.description,
        }
        detection: dict = {"rule": e.detection.rule}
        if e.detection.params:
            detection["params"] = {k: _thaw(v) for k, v in e.detection.params}
        raw["detection"] = detection
        resolutions = []
        for r in e.resolutions:
            res_raw: dict = {
                "description": r.description,
                "auto_fixable": r.auto_fixable,
            }
            if r.parameters:
                res_raw["parameters"] = [
                    {"name": p.name, "kind": p.kind} |
                    ({} if p.default is None else {"default": _thaw(p.default)})
                    for p in r.parameters]
            if r.template is not None:
                res_raw["template"] = {"directives": [
                    {d.op: {k: v for k, v in d.fields}}
                    for d in r.template.directives]}
            resolutions.append(res_raw)
        if resolutions:
            raw["resolutions"] = resolutions
        rules.append(raw)
    return yaml.safe_dump(
        {"version": catalog.version, "rules": rules},
        sort_keys=False, allow_unicode=True, width=78)
