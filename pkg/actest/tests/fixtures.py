"""
Shared builders for the test suite
"""
import itertools
import random
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

from actest.acdl import AcConfig, load_config, parse_config
from actest.datastate import DataState, FileEntry
from actest.domain import Request, Subject
from actest.hir import IrProgram, load_ir, parse_ir
from actest.trimmer import TraceTuple

SAMPLES = Path(__file__).resolve().parent.parent / "samples"

ALLOW_ALL = "allow from all\n"
DENY_ALL = "default deny\ndeny from all\n"

SUBJECTS = (
    Subject("alice", frozenset({"editors"})),
    Subject("bob", frozenset({"admins"})),
    Subject("carol", frozenset({"www-data"})),
)

USERS_TABLE = [
    {"name": "alice", "groups": "editors"},
    {"name": "bob", "groups": "admins"},
    {"name": "carol", "groups": "www-data"},
]


def sample_program(name: str) -> IrProgram:
    return load_ir(SAMPLES / "programs" / f"{name}.ir")


def sample_config(name: str) -> AcConfig:
    return load_config(SAMPLES / "configs" / f"{name}.conf")


def allow_all() -> AcConfig:
    return parse_config(ALLOW_ALL)


def deny_all() -> AcConfig:
    return parse_config(DENY_ALL)


def subject(name: str, *groups: str) -> Subject:
    return Subject(name, frozenset(groups))


def request(name="alice", obj="/docs/page0.html", action="GET", ip="10.0.0.5", groups=()) -> Request:
    return Request(Subject(name, frozenset(groups)), obj, action, ip)


def site_files(count: int = 120) -> Dict[str, FileEntry]:
    """
    A small website: pages spread over a few directories

    Every 7th file is not world-readable and every 10th file belongs to alice.
    """
    directories = ("/docs", "/blog", "/static/css", "/static/img")
    files = {}
    for i in range(count):
        directory = directories[i % len(directories)]
        owner = "alice" if i % 10 == 0 else "www-data"
        perms = 0o640 if i % 7 == 3 else 0o644
        files[f"{directory}/page{i}.html"] = FileEntry(owner, "www-data", perms, 100 + i)
    return files


def site_state(count: int = 120, extra: Dict[str, FileEntry] = None) -> DataState:
    files = site_files(count)
    files.update(extra or {})
    return DataState(files, {"users": USERS_TABLE})


def corpus(
    state: DataState,
    actions: Sequence[str] = ("GET", "PUT", "DELETE"),
    subjects: Sequence[Subject] = SUBJECTS,
    ips: Sequence[str] = ("10.0.0.5",),
) -> List[Request]:
    return [
        Request(s, obj, action, ip)
        for s, obj, action, ip in itertools.product(subjects, state.paths(), actions, ips)
    ]


def trace_tuple(obj="/docs/page0.html", name="alice", groups=("editors",), action="GET") -> TraceTuple:
    return TraceTuple(request(name, obj, action, groups=groups), allow_all(), deny_all())


# ========================
# SYNTHETIC CFG-DIFF PROGRAMS
# ========================
def _detour(lines: List[str], tag: str, rng: random.Random, join: str) -> None:
    """A nondeterministic branch whose arms have one or two blocks each"""
    then_len = rng.randint(1, 2)
    else_len = rng.randint(1, 2)
    lines.append(f"    branch nondet({tag}) then {tag}_t0 else {tag}_e0")
    for arm, length in (("t", then_len), ("e", else_len)):
        for k in range(length):
            lines.append(f"  block {tag}_{arm}{k}")
            lines.append("    io 1")
            target = f"{tag}_{arm}{k + 1}" if k + 1 < length else join
            lines.append(f"    goto {target}")


def synthetic_program(index: int) -> Tuple[IrProgram, str]:
    """
    A program with a known final ACC, a decoy check and one to three
    nondeterministic detours ahead of it

    Returns:
        (program, check id of the final ACC)
    """
    rng = random.Random(1000 + index)
    acc = f"acc_{index}"
    detours = rng.randint(1, 3)
    steps = rng.randint(3, 6)

    lines = ["program entry main", "", "fn main role entry returns int", "  block start", "    io 1"]
    for d in range(detours):
        # the branch terminates the previous join block; both arms meet at j<d>
        _detour(lines, f"n{index}_{d}", rng, f"j{d}")
        lines.append(f"  block j{d}")
        lines.append("    io 1")
    lines.append(f"    check pre_{index} method_is(GET) allow gate deny reject")
    lines.append("  block gate")
    lines.append(f"    check {acc} directive_match as check_access allow task deny reject")
    lines.append("  block task")
    lines.append("    call worker")
    lines.append("    return ret")
    lines.append("  block reject")
    lines.append("    log deny")
    lines.append("    return 403")
    lines.append("end")
    lines.append("")
    lines.append("fn worker role sub returns int")
    for s in range(steps):
        lines.append(f"  block s{s}")
        lines.append(f"    io {rng.randint(1, 20)}")
        lines.append(f"    goto s{s + 1}")
    lines.append(f"  block s{steps}")
    lines.append("    log allow")
    lines.append("    return 200")
    lines.append("end")
    return parse_ir("\n".join(lines) + "\n", source=f"synthetic-{index}"), acc
