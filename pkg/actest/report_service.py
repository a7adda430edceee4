"""
Report Service
Aggregates impact tuples, triages the aggregates and renders the impact report
"""

import json
import logging
import posixpath
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from django.conf import settings

from .errors import ImpactError, RuleParseError
from .impact_service import Direction, ImpactTuple

logger = logging.getLogger(__name__)

MIN_DIRECTORY_MEMBERS = 2
SAMPLE_SIZE = 5
NO_SUFFIX = "(none)"


class KeyKind(str, Enum):
    DIRECTORY = "Directory"
    SUFFIX = "Suffix"
    SUBJECT_GROUP = "SubjectGroup"
    ACTION = "Action"


class Severity(str, Enum):
    DANGEROUS = "DANGEROUS"
    LESS_DANGEROUS = "LESS_DANGEROUS"


def object_suffix(path: str) -> str:
    """Compound suffix of the base name: 'light.sql.gz' -> '.sql.gz'"""
    name = posixpath.basename(path).lstrip(".")
    if "." not in name:
        return NO_SUFFIX
    return "." + name.split(".", 1)[1]


def parent_directories(path: str) -> List[str]:
    """Every proper ancestor directory of a path, deepest last"""
    parts = path.strip("/").split("/")[:-1]
    return ["/"] + ["/" + "/".join(parts[:i]) for i in range(1, len(parts) + 1)]


@dataclass(frozen=True)
class AggregateEntry:
    kind: KeyKind
    value: str
    direction: Direction
    count: int
    objects: Tuple[str, ...] = ()
    actions: Tuple[str, ...] = ()
    sample: Tuple[ImpactTuple, ...] = ()
    suffixes: Tuple[str, ...] = ()
    members: Tuple[ImpactTuple, ...] = field(default=(), compare=False, repr=False)

    @classmethod
    def of(cls, kind: KeyKind, value: str, direction: Direction, members: Sequence[ImpactTuple], suffixes=()):
        members = tuple(sorted(members, key=ImpactTuple.sort_key))
        return cls(
            kind=kind,
            value=value,
            direction=direction,
            count=len(members),
            objects=tuple(sorted({m.object for m in members})),
            actions=tuple(sorted({m.action for m in members})),
            sample=members[:SAMPLE_SIZE],
            suffixes=tuple(sorted(suffixes)),
            members=members,
        )

    @property
    def label(self) -> str:
        return f"{self.kind.value}({self.value})"

    def sort_key(self):
        order = list(KeyKind)
        return (0 if self.direction is Direction.DENY_TO_ALLOW else 1, order.index(self.kind), self.value)

    def to_dict(self) -> Dict[str, Any]:
        data = {
            "key": {"kind": self.kind.value, "value": self.value},
            "direction": self.direction.value,
            "members": {"count": self.count, "sample": [m.to_dict() for m in self.sample]},
            "objects": list(self.objects),
            "actions": list(self.actions),
        }
        if self.kind is KeyKind.DIRECTORY:
            data["suffixes"] = list(self.suffixes)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "AggregateEntry":
        try:
            return cls(
                kind=KeyKind(data["key"]["kind"]),
                value=data["key"]["value"],
                direction=Direction(data["direction"]),
                count=int(data["members"]["count"]),
                objects=tuple(data.get("objects") or ()),
                actions=tuple(data.get("actions") or ()),
                sample=tuple(ImpactTuple.from_dict(item) for item in data["members"].get("sample", [])),
                suffixes=tuple(data.get("suffixes") or ()),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ImpactError(f"Malformed aggregate entry: {e}") from e


def _collapse_directories(impacts: Sequence[ImpactTuple], tested: Iterable[str]) -> List[Tuple[str, Direction]]:
    """
    Highest directories whose tested objects all flipped in one direction

    An object counts as flipped in a direction when it has impacts and all of
    them go that way.
    """
    directions = defaultdict(set)
    for impact in impacts:
        directions[impact.object].add(impact.direction)

    tested_under = defaultdict(set)
    for obj in set(tested) | set(directions):
        for directory in parent_directories(obj):
            tested_under[directory].add(obj)

    picked: List[Tuple[str, Direction]] = []
    for directory in sorted(tested_under, key=lambda d: (d.count("/") if d != "/" else 0, d)):
        if any(directory == p or directory.startswith(p.rstrip("/") + "/") for p, _ in picked):
            continue
        objects = tested_under[directory]
        if len(objects) < MIN_DIRECTORY_MEMBERS:
            continue
        # the deepest directory holding the same objects names them best
        prefix = directory.rstrip("/") + "/"
        if any(other.startswith(prefix) and tested_under[other] == objects for other in tested_under):
            continue
        seen = set()
        for obj in objects:
            seen |= directions.get(obj, {None})
        if len(seen) == 1 and None not in seen:
            picked.append((directory, seen.pop()))
    return picked


def aggregate(impacts: Sequence[ImpactTuple], tested: Optional[Iterable[str]] = None) -> List[AggregateEntry]:
    """
    Collapse impacts into aggregate entries

    Directories collapse first (maximal, all tested children flipped the same
    way); the remaining impacts are grouped by suffix, subject group and action.

    Args:
        impacts: impact tuples
        tested: every object the corpus tested (defaults to the impacted objects)
    """
    impacts = list(impacts)
    tested = set(tested) if tested is not None else {impact.object for impact in impacts}
    entries: List[AggregateEntry] = []

    covered = set()
    for directory, direction in _collapse_directories(impacts, tested):
        prefix = directory.rstrip("/") + "/"
        members = [i for i in impacts if i.object.startswith(prefix)]
        covered.update(id(m) for m in members)
        suffixes = {object_suffix(m.object) for m in members}
        entries.append(AggregateEntry.of(KeyKind.DIRECTORY, directory, direction, members, suffixes))

    remainder = [i for i in impacts if id(i) not in covered]
    groups = defaultdict(list)
    for impact in remainder:
        groups[(KeyKind.SUFFIX, object_suffix(impact.object), impact.direction)].append(impact)
        for group in impact.subject.groups:
            groups[(KeyKind.SUBJECT_GROUP, group, impact.direction)].append(impact)
        groups[(KeyKind.ACTION, impact.action, impact.direction)].append(impact)
    for (kind, value, direction), members in groups.items():
        entries.append(AggregateEntry.of(kind, value, direction, members))

    entries.sort(key=AggregateEntry.sort_key)
    logger.info(f"Aggregated {len(impacts)} impacts into {len(entries)} entries")
    return entries


# ========================
# TRIAGE
# ========================
@dataclass(frozen=True)
class RuleSet:
    """Rules flagging an aggregate as dangerous"""
    dot_prefix: bool = True
    suffixes: Tuple[str, ...] = ()
    substrings: Tuple[str, ...] = ()
    methods: Tuple[str, ...] = ()

    @classmethod
    def from_dict(cls, data: Any) -> "RuleSet":
        from .serializers import RuleSetSerializer

        serializer = RuleSetSerializer(data=data)
        if not serializer.is_valid():
            raise RuleParseError(f"Invalid rule set: {serializer.errors}")
        return serializer.save()

    @classmethod
    def load(cls, path) -> "RuleSet":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise RuleParseError(f"Cannot read rule set {path}: {e}") from e
        return cls.from_dict(raw)

    @classmethod
    def default(cls) -> "RuleSet":
        return cls.load(settings.ACTEST_DEFAULT_RULES)

    def reasons(self, entry: AggregateEntry) -> List[str]:
        """
        Every rule the entry matches, as readable reasons

        Object rules apply to Directory and Suffix entries, method rules to
        Directory and Action entries. Directory members never reach the other
        buckets, so each exposed impact is counted by one entry per rule kind.
        SubjectGroup entries match no rule.
        """
        found = []
        objects = []
        if entry.kind in (KeyKind.DIRECTORY, KeyKind.SUFFIX):
            objects = list(entry.objects)
        if entry.kind is KeyKind.DIRECTORY:
            objects.append(entry.value)
        for obj in objects:
            segments = [s for s in obj.split("/") if s]
            if self.dot_prefix and any(s.startswith(".") for s in segments):
                found.append(f"dot-prefixed name {obj}")
            base = segments[-1] if segments else ""
            for suffix in self.suffixes:
                if base.endswith(suffix):
                    found.append(f"suffix {suffix} in {obj}")
            for needle in self.substrings:
                if needle in obj:
                    found.append(f"substring {needle!r} in {obj}")
        if entry.kind in (KeyKind.DIRECTORY, KeyKind.ACTION):
            for method in self.methods:
                if method.upper() in entry.actions:
                    found.append(f"dangerous method {method.upper()}")
        return sorted(set(found))

    def to_dict(self) -> Dict[str, Any]:
        return {
            "dot_prefix": self.dot_prefix,
            "suffixes": list(self.suffixes),
            "substrings": list(self.substrings),
            "methods": list(self.methods),
        }


class Triaged(NamedTuple):
    entry: AggregateEntry
    severity: Severity
    reasons: Tuple[str, ...] = ()


def triage(entries: Iterable[AggregateEntry], rules: RuleSet) -> List[Triaged]:
    results = []
    for entry in entries:
        reasons = tuple(rules.reasons(entry))
        severity = Severity.DANGEROUS if reasons else Severity.LESS_DANGEROUS
        results.append(Triaged(entry, severity, reasons))
        logger.debug(f"Triaged {entry.label} {entry.direction.value}: {severity.value}")
    return results


# ========================
# REPORT
# ========================
@dataclass
class ImpactReport:
    impacts: List[ImpactTuple]
    aggregates: List[AggregateEntry]
    triage: List[Triaged]
    meta: Dict[str, Any] = field(default_factory=dict)

    @property
    def dangerous(self) -> List[Triaged]:
        return [t for t in self.triage if t.severity is Severity.DANGEROUS]

    def count(self, direction: Direction) -> int:
        return sum(1 for impact in self.impacts if impact.direction is direction)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "meta": self.meta,
            "summary": {
                "impacts": len(self.impacts),
                "deny_to_allow": self.count(Direction.DENY_TO_ALLOW),
                "allow_to_deny": self.count(Direction.ALLOW_TO_DENY),
                "aggregates": len(self.aggregates),
                "dangerous": len(self.dangerous),
            },
            "impacts": [impact.to_dict() for impact in self.impacts],
            "aggregates": [entry.to_dict() for entry in self.aggregates],
            "triage": [
                {"entry": t.entry.to_dict(), "severity": t.severity.value, "reasons": list(t.reasons)}
                for t in self.triage
            ],
        }


def build_report(
    impacts: Sequence[ImpactTuple],
    rules: RuleSet,
    tested: Optional[Iterable[str]] = None,
    meta: Optional[Dict[str, Any]] = None,
) -> ImpactReport:
    impacts = sorted(impacts, key=ImpactTuple.sort_key)
    aggregates = aggregate(impacts, tested)
    return ImpactReport(impacts, aggregates, triage(aggregates, rules), dict(meta or {}))


def report_from_dict(data: Dict[str, Any], rules: RuleSet) -> ImpactReport:
    """Rebuild a stored report and triage its aggregates again with new rules"""
    try:
        impacts = [ImpactTuple.from_dict(item) for item in data["impacts"]]
        aggregates = [AggregateEntry.from_dict(item) for item in data["aggregates"]]
    except (KeyError, TypeError, ValueError) as e:
        raise ImpactError(f"Malformed impact report: {e}") from e
    return ImpactReport(impacts, aggregates, triage(aggregates, rules), dict(data.get("meta") or {}))


def render_json(report: ImpactReport) -> str:
    return json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n"


def render_text(report: ImpactReport) -> str:
    """Aligned text table, DENY->ALLOW entries first"""
    summary = report.to_dict()["summary"]
    lines = [
        "Access-control change impact",
        f"  impacts: {summary['impacts']} "
        f"(DENY->ALLOW {summary['deny_to_allow']}, ALLOW->DENY {summary['allow_to_deny']})",
        f"  aggregates: {summary['aggregates']}, dangerous: {summary['dangerous']}",
        "",
    ]
    if not report.triage:
        lines.append("No decisions changed.")
        return "\n".join(lines) + "\n"

    rows = [("SEVERITY", "DIRECTION", "KEY", "MEMBERS", "EXAMPLE")]
    for item in sorted(report.triage, key=lambda t: t.entry.sort_key()):
        entry = item.entry
        arrow = "DENY->ALLOW" if entry.direction is Direction.DENY_TO_ALLOW else "ALLOW->DENY"
        example = entry.sample[0] if entry.sample else None
        example_text = f"{example.subject.name} {example.action} {example.object}" if example else ""
        rows.append((item.severity.value, arrow, entry.label, str(entry.count), example_text))

    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]) - 1)]
    for row in rows:
        cells = [cell.ljust(width) for cell, width in zip(row, widths)]
        lines.append("  ".join(cells + [row[-1]]).rstrip())
    return "\n".join(lines) + "\n"
