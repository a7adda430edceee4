"""
Test-input generation

Two sources of requests:
- replay: historical access logs in Common Log Format (optionally Combined)
- synthesis: the Cartesian product subjects x objects x actions x source IPs
"""
import itertools
import json
import logging
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple
from urllib.parse import unquote, urlsplit

from .acdl import cidr_representatives
from .datastate import OverlayStore
from .domain import ACTIONS, ANONYMOUS, Request, Subject, normalize_path, sorted_requests
from .errors import AllRejected, EmptySource, ManifestError, RequestGenError, UnknownTable

logger = logging.getLogger(__name__)

DEFAULT_IP = "127.0.0.1"
USERS_TABLE = "users"

# ip [ident] user [timestamp] "VERB path [HTTP/x.y]" status [size "referrer" "agent"]
_CLF_RE = re.compile(
    r'''
        ^
        (?P<ip>\S+)
        \s+
        (?:(?P<ident>\S+)\s+)?
        (?P<user>\S+)
        \s+
        \[(?P<timestamp>[^\]]*)\]
        \s+
        "(?P<verb>[A-Za-z]+)\ (?P<path>[^\s"]+)(?:\ (?P<protocol>[A-Za-z]+/[\d.]+))?"
        \s+
        (?P<status>\d{3})
        (?:\s+.*)?
        $
    ''',
    re.VERBOSE,
)


def _dash_empty(value: str) -> Optional[str]:
    return None if value in ("-", "") else value


def subject_directory(store: OverlayStore, table: str = USERS_TABLE) -> Dict[str, Subject]:
    """Subjects by name from a user table, empty when the table is missing"""
    try:
        rows = store.query(table)
    except UnknownTable:
        logger.warning(f"No {table!r} table, replayed subjects get no groups")
        return {}
    return {subject.name: subject for subject in map(Subject.from_row, rows)}


def parse_log_line(line: str, subjects: Optional[Mapping[str, Subject]] = None) -> Request:
    """
    Parse one access log line into a Request

    Users found in `subjects` keep their groups; unknown users get none.

    Raises:
        ValueError: the line is not a well-formed log entry
    """
    match = _CLF_RE.match(line.strip())
    if not match:
        raise ValueError("not a Common Log Format line")
    groups = match.groupdict()

    user = _dash_empty(groups["user"])
    if user and user != ANONYMOUS:
        subject = (subjects or {}).get(user) or Subject(user)
    else:
        subject = Subject.anonymous()
    ip = _dash_empty(groups["ip"]) or DEFAULT_IP
    target = unquote(urlsplit(groups["path"]).path)
    return Request(subject, target, groups["verb"], ip)


def parse_access_log(
    lines: Iterable[str], subjects: Optional[Mapping[str, Subject]] = None,
) -> Tuple[List[Request], List[Tuple[int, str]]]:
    """
    Parse access log lines; malformed lines are collected, never fatal

    Returns:
        (requests in log order, rejected (line number, line) pairs)

    Raises:
        AllRejected: no line parsed
    """
    requests = []
    rejected = []
    for lineno, line in enumerate(lines, start=1):
        line = line.rstrip("\n")
        if not line.strip():
            continue
        try:
            requests.append(parse_log_line(line, subjects))
        except ValueError as e:
            logger.warning(f"Rejected access log line {lineno}: {e}")
            rejected.append((lineno, line))

    if not requests:
        raise AllRejected(rejected)
    logger.info(f"Parsed {len(requests)} requests from access log, {len(rejected)} lines rejected")
    return requests, rejected


def read_access_log(
    path, subjects: Optional[Mapping[str, Subject]] = None,
) -> Tuple[List[Request], List[Tuple[int, str]]]:
    path = Path(path)
    try:
        with path.open(encoding="utf-8", errors="replace") as handle:
            return parse_access_log(handle, subjects)
    except OSError as e:
        raise RequestGenError(f"Cannot read access log {path}: {e}") from e


# ========================
# SYNTHESIS
# ========================
class Scope(str, Enum):
    ALL = "ALL"
    CHANGE_RELATED = "CHANGE_RELATED"


@dataclass(frozen=True)
class SynthesisSpec:
    """Where subjects, objects, actions and source IPs come from"""
    subjects: Tuple[Subject, ...] = ()
    subjects_table: Optional[str] = None
    include_anonymous: bool = False
    objects: Tuple[str, ...] = ()
    objects_root: Optional[str] = None
    actions: Tuple[str, ...] = ("GET",)
    ips: Tuple[str, ...] = ()
    scope: Scope = Scope.ALL

    @classmethod
    def from_dict(cls, data: dict) -> "SynthesisSpec":
        """
        Build a spec from validated JSON:
            {"subjects": {"table": "users"} | ["alice", {"name": .., "groups": [..]}],
             "include_anonymous": bool, "objects": {"root": "/"} | ["/a", ...],
             "actions": [...], "ips": [...], "scope": "ALL" | "CHANGE_RELATED"}
        """
        from .serializers import SynthesisSpecSerializer

        serializer = SynthesisSpecSerializer(data=data)
        if not serializer.is_valid():
            raise ManifestError(f"Invalid synthesis spec: {serializer.errors}")
        return serializer.save()


def load_synthesis_spec(path) -> SynthesisSpec:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"Cannot read synthesis spec {path}: {e}") from e
    return SynthesisSpec.from_dict(raw)


def _resolve_subjects(spec: SynthesisSpec, store: OverlayStore) -> List[Subject]:
    subjects = list(spec.subjects)
    if spec.subjects_table:
        try:
            subjects.extend(Subject.from_row(row) for row in store.query(spec.subjects_table))
        except UnknownTable as e:
            raise EmptySource(f"Subject table {spec.subjects_table!r} does not exist") from e
    if spec.include_anonymous:
        subjects.append(Subject.anonymous())

    # one subject per name, the first listing wins
    unique = {}
    for subject in subjects:
        kept = unique.setdefault(subject.name, subject)
        if kept.groups != subject.groups:
            logger.warning(
                f"Subject {subject.name!r} listed with groups {sorted(subject.groups)}, "
                f"keeping {sorted(kept.groups)}"
            )
    if not unique:
        raise EmptySource("No subjects to synthesize requests for")
    return [unique[name] for name in sorted(unique)]


def _resolve_objects(spec: SynthesisSpec, store: OverlayStore, change) -> List[str]:
    objects = {normalize_path(obj) for obj in spec.objects}
    if spec.objects_root:
        objects.update(store.list_paths(spec.objects_root))
        if change is not None:
            root = normalize_path(spec.objects_root)
            objects.update(
                path for path in change.added_paths()
                if root == "/" or path == root or path.startswith(root + "/")
            )

    if spec.scope is Scope.CHANGE_RELATED:
        if change is None:
            raise RequestGenError("Change-related synthesis needs a change")
        objects = {obj for obj in objects if change.is_related(obj)}

    if not objects:
        raise EmptySource("No objects to synthesize requests for")
    return sorted(objects)


def _resolve_actions(spec: SynthesisSpec) -> List[str]:
    actions = []
    for action in spec.actions:
        verb = action.upper()
        if verb not in ACTIONS:
            raise RequestGenError(f"Unsupported action {action!r}")
        if verb not in actions:
            actions.append(verb)
    if not actions:
        raise EmptySource("No actions to synthesize requests for")
    return actions


def _resolve_ips(spec: SynthesisSpec, change) -> List[str]:
    if spec.ips:
        return sorted(set(spec.ips), key=lambda ip: tuple(int(p) for p in ip.split(".")))
    if change is None:
        return [DEFAULT_IP]
    ips = []
    for cfg in change.configs():
        for ip in cidr_representatives(cfg):
            if ip not in ips:
                ips.append(ip)
    return ips or [DEFAULT_IP]


def synthesize(spec: SynthesisSpec, store: OverlayStore, change=None) -> List[Request]:
    """
    Deduplicated product of subjects x objects x actions x IPs, sorted

    With a change, objects the change adds are included under the objects
    root, and the IP axis defaults to representatives of the CIDR rules of
    both configs. CHANGE_RELATED keeps only objects under paths the change
    touches.

    Raises:
        EmptySource: a source resolves to nothing
    """
    subjects = _resolve_subjects(spec, store)
    objects = _resolve_objects(spec, store, change)
    actions = _resolve_actions(spec)
    ips = _resolve_ips(spec, change)

    requests = {
        Request(subject, obj, action, ip)
        for subject, obj, action, ip in itertools.product(subjects, objects, actions, ips)
    }
    logger.info(
        f"Synthesized {len(requests)} requests: {len(subjects)} subjects x {len(objects)} objects "
        f"x {len(actions)} actions x {len(ips)} ips ({spec.scope.value})"
    )
    return sorted_requests(requests)


# ========================
# CORPUS FILES
# ========================
def dump_requests(requests: Sequence[Request], path) -> None:
    payload = {"requests": [req.to_dict() for req in requests]}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(requests)} requests to {path}")


def load_requests(path) -> List[Request]:
    """Load a request corpus: {"requests": [...]} or a bare list"""
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"Cannot read request corpus {path}: {e}") from e
    items = raw.get("requests", []) if isinstance(raw, dict) else raw
    try:
        return [Request.from_dict(item) for item in items]
    except (KeyError, TypeError, ValueError, AttributeError) as e:
        raise ManifestError(f"Invalid request in {path}: {e}") from e
