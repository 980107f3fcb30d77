"""Smell detection over playbooks and topology properties.

Every active catalog entry whose target matches the artifact is applied;
what fires is decided entirely by the detector routines here, parameterized
by the entry's detection params (with config overrides).  Template
expressions and opaque intrinsic references are never treated as literal
values, so secrets pulled from vaults or inputs do not trip the literal
checks.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .catalog import Catalog, DefectEntry
from .errors import ConfigInvalid
from .model import (
    Finding,
    PlaybookModel,
    Play,
    TaskNode,
    TopologyModel,
    Value,
    finalize_findings,
    iter_tasks,
    subject_of,
)
from .yamlio import SourceText, iter_comments

# S001/S002: keys that smell like credentials
SECRET_KEY_RE = re.compile(r"(?i)^(password|passwd|secret|token|.*_key)$")
# S008: settings that select a crypto algorithm
CRYPTO_KEY_RE = re.compile(r"(?i)^.*(algorithm|cipher|digest|hash|crypt).*$")
WEAK_ALG_RE = re.compile(r"(?i)\b(md5|sha1)\b")
# S005: plain-http URL, capturing the host part
HTTP_URL_RE = re.compile(r"http://([^/:\s'\"]+)")
LOOPBACK_RE = re.compile(r"(?i)^(localhost|127(\.\d{1,3}){3}|::1)$")
# S006: markers of unfinished work in comments
MARKER_RE = re.compile(r"\b(TODO|FIXME|HACK)\b")
# I005: comparison against a boolean literal
BOOL_COMPARE_RE = re.compile(r"==\s*(true|false)\b", re.IGNORECASE)
BOOL_SUFFIX_RE = re.compile(r"^(.*?)\s*==\s*(true|false)\s*$",
                            re.IGNORECASE | re.DOTALL)

# S003: modules that create accounts, and the args naming the account
ACCOUNT_MODULES = frozenset({"user", "win_user"})
ACCOUNT_NAME_ARGS = ("name", "user", "owner")
ADMIN_NAMES = frozenset({"root", "admin"})
# S003 on topologies: property names that select the service identity
ADMIN_PROPERTY_KEYS = frozenset({"user", "admin_user", "owner"})

# S007: modules that fetch remote files
DOWNLOAD_MODULES = frozenset({"get_url", "uri"})
# I002: raw command execution
COMMAND_MODULES = frozenset({"command", "shell"})

UNRESTRICTED_ADDR = "0.0.0.0"


def _module_base(module: str | None) -> str:
    return (module or "").rsplit(".", 1)[-1]


# ----- rule context --------------------------------------------------------


@dataclass
class RuleContext:
    """Catalog plus per-run configuration for the detectors."""

    catalog: Catalog
    disabled: frozenset[str] = frozenset()
    overrides: dict[str, dict] = field(default_factory=dict)

    def __post_init__(self):
        problems = validate_overrides(self.catalog, self.overrides)
        problems += [r for r in self.disabled if r not in self.catalog]
        if problems:
            raise ConfigInvalid("bad rule configuration: "
                                + "; ".join(sorted(problems)))

    def active_entries(self, target: str) -> list[DefectEntry]:
        return [e for e in self.catalog.for_target(target)
                if e.rule_id not in self.disabled]

    def params(self, entry: DefectEntry) -> dict:
        merged = entry.detection.param_map()
        merged.update(self.overrides.get(entry.rule_id, {}))
        return merged


def validate_overrides(catalog: Catalog, overrides: dict) -> list[str]:
    """Overrides may only touch parameters the catalog entry declares."""
    problems = []
    for rule_id, params in overrides.items():
        if rule_id not in catalog:
            problems.append(f"unknown rule {rule_id}")
            continue
        declared = set(catalog.get(rule_id).detection.param_map())
        for name in params:
            if name not in declared:
                problems.append(
                    f"{rule_id} does not declare parameter {name!r}")
    return problems


class _Run:
    """Per-file detector state: emits findings stamped with the source
    digest (the fix engine pins patches to it)."""

    def __init__(self, ctx: RuleContext, source: SourceText):
        self.ctx = ctx
        self.digest = source.digest()
        self.findings: list[Finding] = []

    def emit(self, rule_id, message, span, subject, **data):
        data["source_digest"] = self.digest
        self.findings.append(self.ctx.catalog.finding(
            rule_id, message, span, subject, data=data))


# ----- value walking -------------------------------------------------------


def _walk_scalars(args: dict[str, Value], prefix: tuple):
    """Yield (key, path, Value) for every scalar leaf under an args map,
    skipping opaque references.  List elements keep their parent key."""
    for key, value in args.items():
        yield from _walk_one(key, value, prefix + (key,))


def _walk_one(key: str, value: Value, path: tuple):
    if value.is_opaque():
        return
    data = value.data
    if isinstance(data, dict):
        for sub_key, sub in data.items():
            yield from _walk_one(sub_key, sub, path + (sub_key,))
    elif isinstance(data, tuple):
        for i, item in enumerate(data):
            if isinstance(item, Value):
                yield from _walk_one(key, item, path + (i,))
    else:
        yield key, path, value


def _is_literal_text(data: object) -> bool:
    return isinstance(data, str) and "{{" not in data


# ----- playbook detectors --------------------------------------------------


def detect_playbook_smells(playbook: PlaybookModel, source: SourceText,
                           ctx: RuleContext) -> list[Finding]:
    """Apply every active ansible-targeted rule to one playbook."""
    run = _Run(ctx, source)
    for entry in ctx.active_entries("ansible"):
        detector = _PLAYBOOK_DETECTORS.get(entry.detection.rule)
        if detector is not None:
            detector(entry, ctx.params(entry), playbook, source, run)
    return finalize_findings(run.findings)


def _scalar_sites(playbook: PlaybookModel):
    """Every (key, path, scalar Value) in task args and play vars."""
    for task, path in iter_tasks(playbook):
        yield from _walk_scalars(task.args, path + ("args",))
    for p, play in enumerate(playbook.plays):
        yield from _walk_scalars(play.vars, ("plays", p, "vars"))


def _d_hardcoded_secret(entry, params, playbook, source, run):
    # S001: secret-like key assigned a literal (non-template) string
    for key, path, value in _scalar_sites(playbook):
        if SECRET_KEY_RE.match(key) and _is_literal_text(value.data) \
                and value.data != "":
            run.emit(entry.rule_id,
                     f"{key} is assigned a hardcoded value",
                     value.span, subject_of(path), key=key)


def _d_empty_secret(entry, params, playbook, source, run):
    # S002: secret-like key assigned the empty string
    for key, path, value in _scalar_sites(playbook):
        if SECRET_KEY_RE.match(key) and value.data == "":
            run.emit(entry.rule_id, f"{key} is empty",
                     value.span, subject_of(path), key=key)


def _d_default_admin_user(entry, params, playbook, source, run):
    # S003: account-creating module with a privileged default identity
    for task, path in iter_tasks(playbook):
        if task.kind != "task" \
                or _module_base(task.module) not in ACCOUNT_MODULES:
            continue
        for arg in ACCOUNT_NAME_ARGS:
            value = task.args.get(arg)
            if value is None or value.is_opaque():
                continue
            if isinstance(value.data, str) \
                    and value.data.lower() in ADMIN_NAMES:
                run.emit(entry.rule_id,
                         f"account {value.data!r} is created by default",
                         value.span, subject_of(path + ("args", arg)),
                         account=value.data)


def _d_unrestricted_bind_address(entry, params, playbook, source, run):
    # S004: any scalar equal to the all-interfaces address
    for _key, path, value in _scalar_sites(playbook):
        if value.data == UNRESTRICTED_ADDR:
            run.emit(entry.rule_id,
                     f"bound to {UNRESTRICTED_ADDR} (all interfaces)",
                     value.span, subject_of(path))


def _d_http_without_tls(entry, params, playbook, source, run):
    # S005: non-loopback http:// URL
    for _key, path, value in _scalar_sites(playbook):
        url = _insecure_url(value.data)
        if url is not None:
            run.emit(entry.rule_id, f"{url} uses unencrypted http",
                     value.span, subject_of(path),
                     url=url, https_url=url.replace("http://", "https://", 1))


def _insecure_url(data: object) -> str | None:
    if not isinstance(data, str):
        return None
    match = HTTP_URL_RE.search(data)
    if match and not LOOPBACK_RE.match(match.group(1)):
        return data
    return None


def _d_suspicious_comment(entry, params, playbook, source, run):
    # S006: TODO/FIXME/HACK in a comment (raw source, not the IR)
    for text, span in iter_comments(source):
        match = MARKER_RE.search(text)
        if match:
            run.emit(entry.rule_id,
                     f"comment contains {match.group(1)}",
                     span, f"comments/{span.start_line}",
                     marker=match.group(1))


def _d_download_without_checksum(entry, params, playbook, source, run):
    # S007: remote fetch with no integrity pin
    for task, path in iter_tasks(playbook):
        if task.kind != "task":
            continue
        base = _module_base(task.module)
        if base not in DOWNLOAD_MODULES:
            continue
        if base == "uri" and "dest" not in task.args:
            continue  # not a download
        if "checksum" in task.args:
            continue
        run.emit(entry.rule_id,
                 f"{task.module} downloads without a checksum",
                 task.span, subject_of(path), module=task.module)


def _d_weak_crypto_algorithm(entry, params, playbook, source, run):
    # S008: md5/sha1 selected in a crypto-related setting
    for key, path, value in _scalar_sites(playbook):
        if not CRYPTO_KEY_RE.match(key) or not isinstance(value.data, str):
            continue
        match = WEAK_ALG_RE.search(value.data)
        if match:
            run.emit(entry.rule_id,
                     f"{key} uses weak algorithm {match.group(1)}",
                     value.span, subject_of(path),
                     algorithm=match.group(1).lower())


def _d_unnamed_task(entry, params, playbook, source, run):
    # I001: task with no name
    for task, path in iter_tasks(playbook):
        if task.kind == "task" and (task.name is None or not task.name.strip()):
            run.emit(entry.rule_id,
                     f"task ({task.module}) has no name",
                     task.span, subject_of(path), module=task.module or "")


def _d_command_instead_of_module(entry, params, playbook, source, run):
    # I002: command/shell without an idempotence guard
    exempt = tuple(params.get("exempt_args") or ())
    for task, path in iter_tasks(playbook):
        if task.kind != "task" \
                or _module_base(task.module) not in COMMAND_MODULES:
            continue
        if any(arg in task.args for arg in exempt):
            continue
        run.emit(entry.rule_id,
                 f"{task.module} used where a module would be idempotent",
                 task.span, subject_of(path), module=task.module)


def _d_ignore_errors_enabled(entry, params, playbook, source, run):
    # I003: failures silenced wholesale
    for task, path in iter_tasks(playbook):
        if task.ignore_errors:
            run.emit(entry.rule_id, "ignore_errors silences all failures",
                     task.span, subject_of(path))


def _d_deprecated_module(entry, params, playbook, source, run):
    # I004: module with a maintained replacement
    deprecated = params.get("deprecated") or {}
    for task, path in iter_tasks(playbook):
        if task.kind != "task" or task.module not in deprecated:
            continue
        replacement = deprecated[task.module]
        run.emit(entry.rule_id,
                 f"module {task.module} is deprecated; use {replacement}",
                 task.span, subject_of(path),
                 module=task.module, replacement=replacement)


def _d_literal_bool_comparison(entry, params, playbook, source, run):
    # I005: when compares against a literal boolean
    for task, path in iter_tasks(playbook):
        expr = task.when_expr
        if expr is None or not BOOL_COMPARE_RE.search(expr):
            continue
        data = {}
        suffix = BOOL_SUFFIX_RE.match(expr)
        if suffix:
            lhs = suffix.group(1).strip()
            if suffix.group(2).lower() == "true":
                data["simplified"] = lhs
            else:
                needs_parens = re.search(r"\s", lhs) is not None
                data["simplified"] = f"not ({lhs})" if needs_parens \
                    else f"not {lhs}"
        run.emit(entry.rule_id,
                 f"when: {expr!r} compares against a boolean literal",
                 task.span, subject_of(path), **data)


def _count_tasks(tasks: tuple[TaskNode, ...]) -> int:
    total = 0
    for t in tasks:
        if t.kind == "task":
            total += 1
        total += _count_tasks(t.children) + _count_tasks(t.rescue) \
            + _count_tasks(t.always)
    return total


def _d_long_play(entry, params, playbook, source, run):
    # D001: play with more tasks than the limit
    limit = int(params.get("max_tasks", 20))
    for p, play in enumerate(playbook.plays):
        count = _count_tasks(play.tasks)
        if count > limit:
            run.emit(entry.rule_id,
                     f"play runs {count} tasks (limit {limit})",
                     play.span, f"plays/{p}", count=count, limit=limit)


def _canon(data: object):
    if isinstance(data, Value):
        return _canon(data.data)
    if isinstance(data, dict):
        return tuple(sorted((k, _canon(v)) for k, v in data.items()))
    if isinstance(data, tuple):
        return tuple(_canon(v) for v in data)
    return data


def _d_duplicate_task(entry, params, playbook, source, run):
    # D002: same module with identical args twice in one play
    for p, play in enumerate(playbook.plays):
        seen: dict = {}
        for task, path in _play_tasks(play, p):
            if task.kind != "task":
                continue
            key = (task.module, _canon(task.args))
            if key in seen:
                run.emit(entry.rule_id,
                         f"duplicate of the {task.module} task at "
                         f"{seen[key]}",
                         task.span, subject_of(path), first=seen[key])
            else:
                seen[key] = subject_of(path)


def _play_tasks(play: Play, p: int):
    def walk(tasks, prefix):
        for i, t in enumerate(tasks):
            path = prefix + (i,)
            yield t, path
            yield from walk(t.children, path + ("block",))
            yield from walk(t.rescue, path + ("rescue",))
            yield from walk(t.always, path + ("always",))
    yield from walk(play.tasks, ("plays", p, "tasks"))


def _d_monolithic_playbook(entry, params, playbook, source, run):
    # D003: too many plays and too many lines at once
    max_plays = int(params.get("max_plays", 3))
    max_lines = int(params.get("max_lines", 200))
    if len(playbook.plays) > max_plays and playbook.source_lines > max_lines:
        run.emit(entry.rule_id,
                 f"{len(playbook.plays)} plays over "
                 f"{playbook.source_lines} lines; split into roles",
                 playbook.span, "playbook",
                 plays=len(playbook.plays), lines=playbook.source_lines)


_PLAYBOOK_DETECTORS = {
    "hardcoded_secret": _d_hardcoded_secret,
    "empty_secret": _d_empty_secret,
    "default_admin_user": _d_default_admin_user,
    "unrestricted_bind_address": _d_unrestricted_bind_address,
    "http_without_tls": _d_http_without_tls,
    "suspicious_comment": _d_suspicious_comment,
    "download_without_checksum": _d_download_without_checksum,
    "weak_crypto_algorithm": _d_weak_crypto_algorithm,
    "unnamed_task": _d_unnamed_task,
    "command_instead_of_module": _d_command_instead_of_module,
    "ignore_errors_enabled": _d_ignore_errors_enabled,
    "deprecated_module": _d_deprecated_module,
    "literal_bool_comparison": _d_literal_bool_comparison,
    "long_play": _d_long_play,
    "duplicate_task": _d_duplicate_task,
    "monolithic_playbook": _d_monolithic_playbook,
}


# ----- topology detectors --------------------------------------------------


def detect_topology_smells(topology: TopologyModel, source: SourceText,
                           ctx: RuleContext) -> list[Finding]:
    """Apply every active tosca-targeted smell rule to node properties."""
    run = _Run(ctx, source)
    for entry in ctx.active_entries("tosca"):
        if entry.klass != "smell":
            continue  # structure errors belong to the verifier
        detector = _TOPOLOGY_DETECTORS.get(entry.detection.rule)
        if detector is not None:
            detector(entry, ctx.params(entry), topology, run)
    return finalize_findings(run.findings)


def _property_sites(topology: TopologyModel):
    for template in topology.templates:
        prefix = ("node_templates", template.name, "properties")
        yield from _walk_scalars(template.properties, prefix)


def _t_hardcoded_secret(entry, params, topology, run):
    for key, path, value in _property_sites(topology):
        if SECRET_KEY_RE.match(key) and _is_literal_text(value.data) \
                and value.data != "":
            run.emit(entry.rule_id,
                     f"{key} is assigned a hardcoded value",
                     value.span, subject_of(path), key=key)


def _t_empty_secret(entry, params, topology, run):
    for key, path, value in _property_sites(topology):
        if SECRET_KEY_RE.match(key) and value.data == "":
            run.emit(entry.rule_id, f"{key} is empty",
                     value.span, subject_of(path), key=key)


def _t_default_admin_user(entry, params, topology, run):
    for key, path, value in _property_sites(topology):
        if key in ADMIN_PROPERTY_KEYS and isinstance(value.data, str) \
                and value.data.lower() in ADMIN_NAMES:
            run.emit(entry.rule_id,
                     f"{key} defaults to privileged account {value.data!r}",
                     value.span, subject_of(path), account=value.data)


def _t_unrestricted_bind_address(entry, params, topology, run):
    for _key, path, value in _property_sites(topology):
        if value.data == UNRESTRICTED_ADDR:
            run.emit(entry.rule_id,
                     f"bound to {UNRESTRICTED_ADDR} (all interfaces)",
                     value.span, subject_of(path))


def _t_http_without_tls(entry, params, topology, run):
    for _key, path, value in _property_sites(topology):
        url = _insecure_url(value.data)
        if url is not None:
            run.emit(entry.rule_id, f"{url} uses unencrypted http",
                     value.span, subject_of(path),
                     url=url, https_url=url.replace("http://", "https://", 1))


def _t_weak_crypto_algorithm(entry, params, topology, run):
    for key, path, value in _property_sites(topology):
        if not CRYPTO_KEY_RE.match(key) or not isinstance(value.data, str):
            continue
        match = WEAK_ALG_RE.search(value.data)
        if match:
            run.emit(entry.rule_id,
                     f"{key} uses weak algorithm {match.group(1)}",
                     value.span, subject_of(path),
                     algorithm=match.group(1).lower())


def _t_god_node(entry, params, topology, run):
    # D010: one node coupling to everything
    limit = int(params.get("max_requirements", 10))
    for template in topology.node_templates.values():
        count = len(template.requirements)
        if count > limit:
            run.emit(entry.rule_id,
                     f"node {template.name} declares {count} requirements "
                     f"(limit {limit})",
                     template.span, f"node_templates/{template.name}",
                     count=count, limit=limit)


_TOPOLOGY_DETECTORS = {
    "hardcoded_secret": _t_hardcoded_secret,
    "empty_secret": _t_empty_secret,
    "default_admin_user": _t_default_admin_user,
    "unrestricted_bind_address": _t_unrestricted_bind_address,
    "http_without_tls": _t_http_without_tls,
    "weak_crypto_algorithm": _t_weak_crypto_algorithm,
    "god_node": _t_god_node,
}
