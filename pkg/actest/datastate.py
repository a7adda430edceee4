"""
Production data for access-control tests

A read-only DataState (file tree with permissions plus simple tables) wrapped
in a copy-on-write OverlayStore. Test runs read production data through the
overlay; every write lands in the overlay's upper layer, so the lower layer
stays bit-identical.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Tuple, Union

from .domain import Decision, Subject, normalize_path
from .errors import DataStateError, ManifestError, UnknownTable

logger = logging.getLogger(__name__)


class Access(str, Enum):
    READ = "READ"
    WRITE = "WRITE"


_ACCESS_BITS = {Access.READ: 0o4, Access.WRITE: 0o2}


@dataclass(frozen=True)
class FileEntry:
    """Metadata for one file; bodies are represented by size and digest only"""
    owner: str
    group: str
    perms: int = 0o644
    size: int = 0
    digest: str = ""

    def __post_init__(self):
        if not 0 <= self.perms <= 0o777:
            raise ValueError(f"Permission bits out of range: {oct(self.perms)}")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "owner": self.owner,
            "group": self.group,
            "perms": format(self.perms, "04o"),
            "size": self.size,
            "digest": self.digest,
        }


class _Whiteout:
    """Upper-layer marker hiding a lower-layer file"""

    def __repr__(self):
        return "WHITEOUT"


WHITEOUT = _Whiteout()

Row = Dict[str, Any]
Predicate = Union[Callable[[Row], bool], Mapping[str, Any], None]


@dataclass(frozen=True)
class DataState:
    """Immutable snapshot of production files and tables"""
    files: Mapping[str, FileEntry] = field(default_factory=dict)
    tables: Mapping[str, Tuple[Row, ...]] = field(default_factory=dict)

    def __post_init__(self):
        files = {normalize_path(path): entry for path, entry in dict(self.files).items()}
        tables = {
            name: tuple(MappingProxyType(dict(row)) for row in rows)
            for name, rows in dict(self.tables).items()
        }
        object.__setattr__(self, "files", MappingProxyType(files))
        object.__setattr__(self, "tables", MappingProxyType(tables))

    def digest(self) -> str:
        """SHA-256 over a canonical rendering of files and tables"""
        canonical = {
            "files": {path: entry.to_dict() for path, entry in sorted(self.files.items())},
            "tables": {
                name: [dict(row) for row in rows] for name, rows in sorted(self.tables.items())
            },
        }
        payload = json.dumps(canonical, sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()

    def paths(self) -> List[str]:
        return sorted(self.files)


@dataclass
class TableDelta:
    """Per-run table changes: rows appended, or the whole table overwritten"""
    overwrite: Optional[List[Row]] = None
    appended: List[Row] = field(default_factory=list)


class OverlayStore:
    """
    Copy-on-write view over a DataState

    read(path) = upper[path] unless it is a whiteout (then absent), else lower[path].
    """

    def __init__(self, lower: DataState):
        self.lower = lower
        self.upper: Dict[str, Union[FileEntry, _Whiteout]] = {}
        self.upper_tables: Dict[str, TableDelta] = {}

    def __repr__(self):
        return f"OverlayStore(lower={len(self.lower.files)} files, upper={len(self.upper)} entries)"

    # Files
    def read(self, path: str) -> Optional[FileEntry]:
        return overlay_read(self, path)

    def write(self, path: str, entry: FileEntry) -> None:
        overlay_write(self, path, entry)

    def remove(self, path: str) -> None:
        overlay_write(self, path, WHITEOUT)

    def exists(self, path: str) -> bool:
        return self.read(path) is not None

    def list_paths(self, prefix: str = "/") -> List[str]:
        """Visible paths under a directory prefix, sorted"""
        prefix = normalize_path(prefix)
        visible = set(self.lower.files)
        for path, entry in self.upper.items():
            if entry is WHITEOUT:
                visible.discard(path)
            else:
                visible.add(path)
        if prefix == "/":
            return sorted(visible)
        return sorted(p for p in visible if p == prefix or p.startswith(prefix + "/"))

    # Tables
    def table_insert(self, table: str, row: Row) -> None:
        self.upper_tables.setdefault(table, TableDelta()).appended.append(dict(row))

    def table_overwrite(self, table: str, rows: Iterable[Row]) -> None:
        self.upper_tables[table] = TableDelta(overwrite=[dict(row) for row in rows])

    def query(self, table: str, predicate: Predicate = None) -> List[Row]:
        return table_query(self, table, predicate)

    def reset(self) -> None:
        reset_overlay(self)

    def snapshot(self) -> DataState:
        """Materialise the merged view as a new immutable DataState"""
        files = {path: self.read(path) for path in self.list_paths("/")}
        names = set(self.lower.tables) | set(self.upper_tables)
        tables = {name: tuple(self.query(name)) for name in sorted(names)}
        return DataState(files, tables)


def overlay_read(store: OverlayStore, path: str) -> Optional[FileEntry]:
    path = normalize_path(path)
    if path in store.upper:
        entry = store.upper[path]
        return None if entry is WHITEOUT else entry
    return store.lower.files.get(path)


def overlay_write(store: OverlayStore, path: str, entry: Union[FileEntry, _Whiteout]) -> None:
    path = normalize_path(path)
    store.upper[path] = entry
    logger.debug(f"Overlay copy-up {path} -> {entry!r}")


def table_query(store: OverlayStore, table: str, predicate: Predicate = None) -> List[Row]:
    """Read-only merge of the lower table and the run's delta"""
    delta = store.upper_tables.get(table)
    if table not in store.lower.tables and delta is None:
        raise UnknownTable(f"Unknown table: {table}")

    if delta is not None and delta.overwrite is not None:
        rows = [dict(row) for row in delta.overwrite]
    else:
        rows = [dict(row) for row in store.lower.tables.get(table, ())]
    if delta is not None:
        rows.extend(dict(row) for row in delta.appended)

    if predicate is None:
        return rows
    if callable(predicate):
        return [row for row in rows if predicate(row)]
    return [row for row in rows if all(row.get(k) == v for k, v in predicate.items())]


def reset_overlay(store: OverlayStore) -> None:
    store.upper.clear()
    store.upper_tables.clear()


def file_perm_check(store: OverlayStore, path: str, subject: Subject, need: Access) -> Decision:
    """
    Unix-style permission check: the owner, group or other triple of the file
    decides, depending on who the subject is. Absent files are denied.
    """
    entry = overlay_read(store, path)
    if entry is None:
        return Decision.DENY
    if not subject.is_anonymous and subject.name == entry.owner:
        shift = 6
    elif entry.group in subject.groups:
        shift = 3
    else:
        shift = 0
    bits = (entry.perms >> shift) & 0o7
    return Decision.ALLOW if bits & _ACCESS_BITS[Access(need)] else Decision.DENY


# ========================
# MANIFESTS
# ========================
def entry_from_manifest(item: Mapping[str, Any]) -> Tuple[str, FileEntry]:
    perms = item.get("perms", "0644")
    try:
        perms = int(perms, 8) if isinstance(perms, str) else int(perms)
        entry = FileEntry(
            owner=str(item.get("owner", "root")),
            group=str(item.get("group", "root")),
            perms=perms,
            size=int(item.get("size", 0)),
            digest=str(item.get("digest", "")),
        )
    except ValueError as exc:
        raise ManifestError(f"Bad file entry {item.get('path')!r}: {exc}") from exc
    return normalize_path(item["path"]), entry


def load_manifest(path) -> DataState:
    """
    Load a directory snapshot manifest:
        {"files": [{path, owner, group, perms, size, digest}, ...],
         "tables": {"users": "users.json" | [rows...]}}
    """
    from .serializers import DataManifestSerializer

    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataStateError(f"Cannot read data manifest {path}: {exc}") from exc

    serializer = DataManifestSerializer(data=raw)
    if not serializer.is_valid():
        raise ManifestError(f"Invalid data manifest {path}: {serializer.errors}")
    data = serializer.validated_data

    files = dict(entry_from_manifest(item) for item in data.get("files", []))
    tables = {}
    for name, source in (data.get("tables") or {}).items():
        if isinstance(source, str):
            table_path = path.parent / source
            try:
                rows = json.loads(table_path.read_text(encoding="utf-8"))
            except (OSError, json.JSONDecodeError) as exc:
                raise DataStateError(f"Cannot read table {name} from {table_path}: {exc}") from exc
        else:
            rows = source
        if not isinstance(rows, list) or not all(isinstance(row, dict) for row in rows):
            raise ManifestError(f"Table {name} must be a JSON array of flat objects")
        tables[name] = rows

    state = DataState(files, tables)
    logger.info(f"Loaded data manifest {path}: {len(state.files)} files, {len(state.tables)} tables")
    return state
