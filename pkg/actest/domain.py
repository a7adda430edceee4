"""
Shared value types: decisions, subjects and access requests
"""
import ipaddress
import re
import posixpath
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, FrozenSet, Iterable, Tuple


class Decision(str, Enum):
    """Outcome of an access-control evaluation"""
    ALLOW = "ALLOW"
    DENY = "DENY"

    def flipped(self) -> "Decision":
        return Decision.DENY if self is Decision.ALLOW else Decision.ALLOW


ACTIONS = ("GET", "PUT", "POST", "DELETE", "TRACE", "EDIT")

ANONYMOUS = "anonymous"

_SLASHES = re.compile(r"/+")


def normalize_path(path: str) -> str:
    """Normalize an object path: leading slash, no dot segments, single separators"""
    path = _SLASHES.sub("/", "/" + (path or "").strip())
    normalized = posixpath.normpath(path)
    # normpath keeps a leading double slash on POSIX
    return _SLASHES.sub("/", normalized)


def validate_ip(value: str) -> str:
    """Return the canonical IPv4 text or raise ValueError"""
    return str(ipaddress.IPv4Address(value.strip()))


@dataclass(frozen=True)
class Subject:
    """The requester of an access (a user, or anonymous)"""
    name: str = ANONYMOUS
    groups: FrozenSet[str] = field(default_factory=frozenset)

    def __post_init__(self):
        object.__setattr__(self, "groups", frozenset(self.groups))
        if self.name == ANONYMOUS and self.groups:
            raise ValueError("The anonymous subject cannot belong to groups")

    @classmethod
    def anonymous(cls) -> "Subject":
        return cls(ANONYMOUS)

    @classmethod
    def from_row(cls, row: Dict[str, Any]) -> "Subject":
        """Build a subject from a table row with columns {name, groups}"""
        name = str(row.get("name") or ANONYMOUS)
        groups = row.get("groups") or ""
        if isinstance(groups, str):
            groups = [g.strip() for g in groups.split(",") if g.strip()]
        return cls(name, frozenset(groups))

    @property
    def is_anonymous(self) -> bool:
        return self.name == ANONYMOUS

    def to_dict(self) -> Dict[str, Any]:
        return {"name": self.name, "groups": sorted(self.groups)}


@dataclass(frozen=True)
class Request:
    """One access request: subject, object, action and source address"""
    subject: Subject
    object: str
    action: str
    source_ip: str = "127.0.0.1"

    def __post_init__(self):
        object.__setattr__(self, "object", normalize_path(self.object))
        action = self.action.upper()
        if action not in ACTIONS:
            raise ValueError(f"Unsupported action {self.action!r}")
        object.__setattr__(self, "action", action)
        object.__setattr__(self, "source_ip", validate_ip(self.source_ip))

    @property
    def key(self) -> Tuple[str, str]:
        """Dependency key: requests sharing it must run in order"""
        return (self.subject.name, self.source_ip)

    def sort_key(self) -> Tuple[str, str, str, Tuple[int, ...], Tuple[str, ...]]:
        return (
            self.subject.name,
            self.object,
            self.action,
            tuple(int(part) for part in self.source_ip.split(".")),
            tuple(sorted(self.subject.groups)),
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subject": self.subject.to_dict(),
            "object": self.object,
            "action": self.action,
            "source_ip": self.source_ip,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Request":
        subject = data.get("subject") or {}
        if isinstance(subject, str):
            subject = {"name": subject}
        return cls(
            subject=Subject(subject.get("name") or ANONYMOUS, frozenset(subject.get("groups") or ())),
            object=data["object"],
            action=data["action"],
            source_ip=data.get("source_ip") or "127.0.0.1",
        )


def sorted_requests(requests: Iterable[Request]) -> list:
    return sorted(requests, key=Request.sort_key)
