"""
Impact Service
Runs request corpora under the old and new environments and diffs the decisions
"""

import json
import logging
import random
import re
import threading
from collections import OrderedDict
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

from django.conf import settings

from .acdl import (
    AcConfig, Block, Directive, MatchKind, Selector, SelectorKind, changed_blocks, referenced_paths,
)
from .datastate import DataState, FileEntry, OverlayStore, entry_from_manifest
from .domain import Decision, Request, Subject, normalize_path
from .errors import ACTestError, ImpactError, ManifestError
from .hir import IrProgram
from .interpreter import interpret

logger = logging.getLogger(__name__)

DEFAULT_WORKERS = 4


# ========================
# CHANGES
# ========================
@dataclass(frozen=True)
class AddFile:
    path: str
    entry: FileEntry

    def __post_init__(self):
        object.__setattr__(self, "path", normalize_path(self.path))


@dataclass(frozen=True)
class RemoveFile:
    path: str

    def __post_init__(self):
        object.__setattr__(self, "path", normalize_path(self.path))


@dataclass(frozen=True)
class Chmod:
    path: str
    perms: int

    def __post_init__(self):
        object.__setattr__(self, "path", normalize_path(self.path))
        if not 0 <= self.perms <= 0o777:
            raise ValueError(f"Permission bits out of range: {oct(self.perms)}")


DeltaOp = Union[AddFile, RemoveFile, Chmod]


@dataclass(frozen=True)
class ChangeSpec:
    """A configuration change plus the data changes that ship with it"""
    config_old: AcConfig
    config_new: AcConfig
    data_delta: Tuple[DeltaOp, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "data_delta", tuple(self.data_delta))

    def configs(self) -> Tuple[AcConfig, AcConfig]:
        return (self.config_old, self.config_new)

    @property
    def is_identity(self) -> bool:
        return not self.data_delta and not changed_blocks(self.config_old, self.config_new) \
            and self.config_old.default_policy is self.config_new.default_policy

    def reversed(self) -> "ChangeSpec":
        if self.data_delta:
            raise ImpactError("Only configuration-only changes can be reversed")
        return ChangeSpec(self.config_new, self.config_old)

    def validate(self, lower: DataState) -> None:
        """Chmod targets must exist in the old data"""
        for op in self.data_delta:
            if isinstance(op, Chmod) and op.path not in lower.files:
                raise ImpactError(f"Chmod target {op.path} does not exist in the production data")

    def apply_delta(self, store: OverlayStore) -> None:
        for op in self.data_delta:
            if isinstance(op, AddFile):
                store.write(op.path, op.entry)
            elif isinstance(op, RemoveFile):
                store.remove(op.path)
            else:
                current = store.read(op.path)
                if current is None:
                    raise ImpactError(f"Chmod target {op.path} does not exist")
                store.write(op.path, replace(current, perms=op.perms))

    def post_change_state(self, lower: DataState) -> DataState:
        """The lower layer with the data delta applied, as a new snapshot"""
        if not self.data_delta:
            return lower
        store = OverlayStore(lower)
        self.apply_delta(store)
        return store.snapshot()

    def added_paths(self) -> List[str]:
        return sorted({op.path for op in self.data_delta if isinstance(op, AddFile)})

    def delta_paths(self) -> List[str]:
        return sorted({op.path for op in self.data_delta})

    def referenced_paths(self) -> List[str]:
        """Location prefixes and literal files of the changed blocks, plus delta paths"""
        changed = AcConfig(tuple(changed_blocks(self.config_old, self.config_new)))
        return sorted(set(referenced_paths(changed)) | set(self.delta_paths()))

    def is_related(self, path: str) -> bool:
        """Whether a path lies under something the change syntactically touches"""
        path = normalize_path(path)
        if self.config_old.default_policy is not self.config_new.default_policy:
            return True
        for block in changed_blocks(self.config_old, self.config_new):
            if block.selector.kind is SelectorKind.ROOT:
                return True
            if block.selector.kind is SelectorKind.FILES and block.selector.matches(path):
                return True
        for prefix in self.referenced_paths():
            if prefix == "/" or path == prefix or path.startswith(prefix + "/"):
                return True
        return False


def delta_from_dicts(items: Iterable[Dict[str, Any]]) -> Tuple[DeltaOp, ...]:
    ops = []
    for item in items:
        op = item.get("op")
        try:
            if op == "add":
                path, entry = entry_from_manifest(item)
                ops.append(AddFile(path, entry))
            elif op == "remove":
                ops.append(RemoveFile(item["path"]))
            elif op == "chmod":
                perms = item["perms"]
                ops.append(Chmod(item["path"], int(perms, 8) if isinstance(perms, str) else int(perms)))
            else:
                raise ManifestError(f"Unknown data delta op {op!r}")
        except (KeyError, ValueError) as e:
            raise ManifestError(f"Bad data delta entry {item!r}: {e}") from e
    return tuple(ops)


def load_data_delta(path) -> Tuple[DeltaOp, ...]:
    """
    Load a data delta file:
        [{"op": "add", "path", "owner", "group", "perms", "size"},
         {"op": "remove", "path"}, {"op": "chmod", "path", "perms"}]
    """
    from .serializers import DataDeltaSerializer

    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise ManifestError(f"Cannot read data delta {path}: {e}") from e
    serializer = DataDeltaSerializer(data=raw, many=True)
    if not serializer.is_valid():
        raise ManifestError(f"Invalid data delta {path}: {serializer.errors}")
    return delta_from_dicts(serializer.validated_data)


# ========================
# IMPACT TUPLES
# ========================
class Direction(str, Enum):
    DENY_TO_ALLOW = "DENY_TO_ALLOW"
    ALLOW_TO_DENY = "ALLOW_TO_DENY"


@dataclass(frozen=True)
class ImpactTuple:
    """A request whose decision differs before and after a change"""
    subject: Subject
    object: str
    action: str
    source_ip: str
    r_old: Decision
    r_new: Decision
    object_new: bool = False

    def __post_init__(self):
        if self.r_old is self.r_new:
            raise ValueError(f"Impact tuple for {self.object} does not change its decision")

    @classmethod
    def of(cls, req: Request, r_old: Decision, r_new: Decision, object_new: bool = False) -> "ImpactTuple":
        return cls(req.subject, req.object, req.action, req.source_ip, r_old, r_new, object_new)

    @property
    def request(self) -> Request:
        return Request(self.subject, self.object, self.action, self.source_ip)

    @property
    def direction(self) -> Direction:
        return Direction.DENY_TO_ALLOW if self.r_new is Decision.ALLOW else Direction.ALLOW_TO_DENY

    @property
    def identity(self) -> Tuple:
        return (self.subject.name, self.object, self.action, self.source_ip, self.r_old, self.r_new)

    def sort_key(self):
        return (0 if self.direction is Direction.DENY_TO_ALLOW else 1,) + self.request.sort_key()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "subject": self.subject.to_dict(),
            "object": self.object,
            "action": self.action,
            "source_ip": self.source_ip,
            "r_old": self.r_old.value,
            "r_new": self.r_new.value,
            "object_new": self.object_new,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ImpactTuple":
        req = Request.from_dict(data)
        return cls.of(req, Decision(data["r_old"]), Decision(data["r_new"]), bool(data.get("object_new")))


# ========================
# CORPUS RUNS
# ========================
@dataclass
class CorpusStats:
    """Side information about a corpus run"""
    cost: int = 0
    errors: Dict[Request, str] = field(default_factory=dict)
    schedule: List[Tuple[int, Tuple[str, str], int]] = field(default_factory=list)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def record(self, key: Tuple[str, str], position: int) -> None:
        with self._lock:
            self.schedule.append((len(self.schedule), key, position))


class ImpactService:
    """Service for change-impact analysis"""

    @staticmethod
    def partition(requests: Sequence[Request]) -> "OrderedDict[Tuple[str, str], List[Tuple[int, Request]]]":
        """Group requests by (subject, source_ip), keeping submission order in each group"""
        partitions: "OrderedDict[Tuple[str, str], List[Tuple[int, Request]]]" = OrderedDict()
        for position, req in enumerate(requests):
            partitions.setdefault(req.key, []).append((position, req))
        return partitions

    @staticmethod
    def run_corpus(
        prog: IrProgram,
        cfg: AcConfig,
        lower: Union[DataState, OverlayStore],
        requests: Sequence[Request],
        workers: Optional[int] = None,
        stats: Optional[CorpusStats] = None,
    ) -> Dict[Request, Decision]:
        """
        Run every request and collect its decision

        Requests sharing a (subject, source_ip) key run in submission order on
        one worker against one overlay; different keys run in parallel on
        separate overlays over the shared lower layer. Interpreter errors are
        recorded per request and the request is left out of the result.

        Returns:
            request -> decision, in submission order
        """
        if isinstance(lower, OverlayStore):
            lower = lower.snapshot()
        if workers is None:
            workers = getattr(settings, "ACTEST_WORKERS", DEFAULT_WORKERS)
        workers = max(1, int(workers))
        stats = stats if stats is not None else CorpusStats()
        requests = list(requests)
        if not requests:
            return {}

        def run_partition(key, items):
            store = OverlayStore(lower)
            results = []
            cost = 0
            for position, req in items:
                stats.record(key, position)
                try:
                    run = interpret(prog, req, cfg, store)
                except ACTestError as e:
                    results.append((position, req, None, str(e)))
                    continue
                cost += run.cost
                results.append((position, req, run.decision, None))
            return results, cost

        partitions = ImpactService.partition(requests)
        collected = []
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = {
                executor.submit(run_partition, key, items): key
                for key, items in partitions.items()
            }
            for future in as_completed(futures):
                results, cost = future.result()
                collected.extend(results)
                stats.cost += cost

        decisions: Dict[Request, Decision] = {}
        for position, req, decision, error in sorted(collected, key=lambda item: item[0]):
            if error is not None:
                logger.warning(f"Request {req.action} {req.object} by {req.subject.name} failed: {error}")
                stats.errors[req] = error
                continue
            decisions.setdefault(req, decision)

        logger.info(
            f"Corpus run finished: {len(decisions)} decisions, {len(stats.errors)} errors, "
            f"{len(partitions)} partitions on {workers} workers"
        )
        return decisions

    @staticmethod
    def compute_impact(
        prog: IrProgram,
        change: ChangeSpec,
        lower: DataState,
        requests: Sequence[Request],
        workers: Optional[int] = None,
        stats: Optional[Tuple[CorpusStats, CorpusStats]] = None,
    ) -> List[ImpactTuple]:
        """
        Requests whose decision differs between (config_old, data) and
        (config_new, data + delta), sorted DENY->ALLOW first
        """
        change.validate(lower)
        new_lower = change.post_change_state(lower)
        old_stats, new_stats = stats if stats is not None else (None, None)

        before = ImpactService.run_corpus(prog, change.config_old, lower, requests, workers, old_stats)
        after = ImpactService.run_corpus(prog, change.config_new, new_lower, requests, workers, new_stats)

        impacts = []
        for req, r_old in before.items():
            r_new = after.get(req)
            if r_new is None or r_new is r_old:
                continue
            object_new = req.object not in lower.files and req.object in new_lower.files
            impacts.append(ImpactTuple.of(req, r_old, r_new, object_new))

        impacts.sort(key=ImpactTuple.sort_key)
        logger.info(f"Change impact: {len(impacts)} of {len(before)} requests flipped")
        return impacts

    @staticmethod
    def confirm_impacts(
        prog_full: IrProgram,
        impacts: Sequence[ImpactTuple],
        change: ChangeSpec,
        lower: DataState,
        workers: Optional[int] = None,
    ) -> List[ImpactTuple]:
        """Re-run impacted requests on the untrimmed program and keep the ones that reproduce"""
        if not impacts:
            return []
        requests = [impact.request for impact in impacts]
        recomputed = {
            impact.identity for impact in ImpactService.compute_impact(prog_full, change, lower, requests, workers)
        }
        confirmed = [impact for impact in impacts if impact.identity in recomputed]
        dropped = len(impacts) - len(confirmed)
        if dropped:
            logger.warning(f"Dropped {dropped} unconfirmed impacts of {len(impacts)}")
        return confirmed

    @staticmethod
    def detection_rate(reference: Iterable[ImpactTuple], observed: Iterable[ImpactTuple]) -> float:
        """Share of the reference impacts an observed run also found"""
        expected = {impact.identity for impact in reference}
        if not expected:
            return 1.0
        found = expected & {impact.identity for impact in observed}
        return len(found) / len(expected)

    @staticmethod
    def inject_changes(
        cfg: AcConfig,
        lower: DataState,
        fraction: float = 0.1,
        seed: int = 0,
        kinds: Sequence[str] = ("config", "chmod"),
        paths: Optional[Sequence[str]] = None,
    ) -> ChangeSpec:
        """
        Flip a fraction of resources: deny-all blocks in the new config and
        chmods toggling the world-read bit, alternating over the picked paths
        """
        if not 0 < fraction <= 1:
            raise ImpactError(f"Injection fraction must be in (0, 1], got {fraction}")
        candidates = sorted(paths) if paths is not None else lower.paths()
        if not candidates:
            raise ImpactError("No resources to inject changes into")
        kinds = list(kinds)
        if not kinds or set(kinds) - {"config", "chmod"}:
            raise ImpactError(f"Unknown injection kinds {kinds}")

        rng = random.Random(seed)
        count = max(1, round(fraction * len(candidates)))
        picked = sorted(rng.sample(candidates, count))

        blocks = list(cfg.blocks)
        delta = []
        for index, path in enumerate(picked):
            kind = kinds[index % len(kinds)]
            if kind == "config":
                selector = Selector.files("^" + re.escape(path) + "$")
                blocks.append(Block(selector, (Directive(Decision.DENY, MatchKind.FROM_ALL),)))
            else:
                entry = lower.files.get(normalize_path(path))
                if entry is None:
                    raise ImpactError(f"Cannot chmod missing resource {path}")
                delta.append(Chmod(path, entry.perms ^ 0o004))

        config_new = AcConfig(tuple(blocks), cfg.default_policy)
        logger.info(f"Injected {len(picked)} changes (seed {seed}, kinds {kinds})")
        return ChangeSpec(cfg, config_new, tuple(delta))
