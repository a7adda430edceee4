"""
Handler IR: a small program representation of a request-handling server

A program is a set of functions (one entry handler, sub-handlers and helpers)
made of basic blocks. Access-control checks are block terminators, so the
allow and deny successors of every check are explicit.

Grammar (one item per line, '#' comments, indentation is cosmetic):

    program entry <fn>
    fn <name> role entry|sub|helper returns <tag>
      block <label>
        call <fn>
        io <cost> [read|write|delete] [<path-expr>]
        log allow|deny
        goto <label>
        check <id> <predicate>[(<arg>)] [as <fn_tag>] allow <label> deny <label>
        branch <cond>[(<arg>)] then <label> else <label>
        probe <id> <predicate>[(<arg>)] [as <fn_tag>] jump <label>
        return <code>|ret
    end
"""
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Mapping, Optional, Tuple, Union

from .domain import Decision
from .errors import IrError, IrSyntaxError, IrValidationError

logger = logging.getLogger(__name__)


class Role(str, Enum):
    ENTRY = "entry"
    SUB = "sub"
    HELPER = "helper"


CHECK_PREDICATES = ("directive_match", "file_perm", "user_in_table", "ip_in", "method_is")
BRANCH_CONDITIONS = CHECK_PREDICATES + ("exists", "nondet")
IO_MODES = ("read", "write", "delete")
OBJECT_EXPR = "$object"


@dataclass(frozen=True)
class PredicateRef:
    name: str
    arg: str = ""

    def render(self) -> str:
        return f"{self.name}({self.arg})" if self.arg else self.name


# ========================
# STATEMENTS
# ========================
@dataclass(frozen=True)
class Call:
    fn: str


@dataclass(frozen=True)
class Io:
    cost: int
    mode: str = "read"
    path_expr: Optional[str] = None


@dataclass(frozen=True)
class Log:
    decision: Decision


Stmt = Union[Call, Io, Log]


# ========================
# TERMINATORS
# ========================
@dataclass(frozen=True)
class Goto:
    label: str

    def successors(self) -> Tuple[str, ...]:
        return (self.label,)


@dataclass(frozen=True)
class CondCheck:
    """An access-control check: branches on the predicate's decision"""
    check_id: str
    predicate: PredicateRef
    allow_label: str
    deny_label: str
    fn_tag: Optional[str] = None

    @property
    def fn_name_tag(self) -> str:
        return self.fn_tag or self.predicate.name

    def successors(self) -> Tuple[str, ...]:
        return (self.allow_label, self.deny_label)


@dataclass(frozen=True)
class Branch:
    """A non-access-control conditional (routing, caching, nondeterminism)"""
    cond: PredicateRef
    then_label: str
    else_label: str

    def successors(self) -> Tuple[str, ...]:
        return (self.then_label, self.else_label)


@dataclass(frozen=True)
class Probe:
    """A trimmed check: evaluates and logs its predicate, then always jumps"""
    check_id: str
    predicate: PredicateRef
    jump: str
    fn_tag: Optional[str] = None

    @property
    def fn_name_tag(self) -> str:
        return self.fn_tag or self.predicate.name

    def successors(self) -> Tuple[str, ...]:
        return (self.jump,)


@dataclass(frozen=True)
class Return:
    code: Optional[int] = None  # None returns the most recent callee's code

    def successors(self) -> Tuple[str, ...]:
        return ()


Terminator = Union[Goto, CondCheck, Branch, Probe, Return]


@dataclass(frozen=True)
class BasicBlock:
    label: str
    statements: Tuple[Stmt, ...]
    terminator: Terminator


@dataclass(frozen=True)
class IrFunction:
    name: str
    role: Role
    return_type_tag: str
    blocks: Tuple[BasicBlock, ...]
    _index: Mapping[str, BasicBlock] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {block.label: block for block in self.blocks})

    @property
    def entry_block(self) -> BasicBlock:
        return self.blocks[0]

    def block(self, label: str) -> BasicBlock:
        try:
            return self._index[label]
        except KeyError:
            raise IrError(f"Function {self.name} has no block {label!r}") from None

    def has_block(self, label: str) -> bool:
        return label in self._index


@dataclass(frozen=True)
class IrProgram:
    functions: Mapping[str, IrFunction]
    entry: str

    @property
    def roles(self) -> Dict[str, Role]:
        return {name: fn.role for name, fn in self.functions.items()}

    def function(self, name: str) -> IrFunction:
        try:
            return self.functions[name]
        except KeyError:
            raise IrError(f"Unknown function {name!r}") from None

    def checks(self) -> Iterator[Tuple[IrFunction, BasicBlock]]:
        """Every (function, block) whose terminator is an access-control check"""
        for fn in self.functions.values():
            for block in fn.blocks:
                if isinstance(block.terminator, CondCheck):
                    yield fn, block

    def replace_blocks(self, replacements: Mapping[Tuple[str, str], BasicBlock]) -> "IrProgram":
        """A copy of the program with some (function, label) blocks swapped"""
        functions = {}
        for name, fn in self.functions.items():
            blocks = tuple(replacements.get((name, block.label), block) for block in fn.blocks)
            functions[name] = IrFunction(fn.name, fn.role, fn.return_type_tag, blocks)
        return IrProgram(functions, self.entry)


# ========================
# PARSER
# ========================
_PRED_RE = re.compile(r"^(?P<name>[A-Za-z_][A-Za-z0-9_]*)(?:\((?P<arg>[^()]*)\))?$")
_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_.\-]*$")
_BODY_KEYWORDS = ("call", "io", "log", "goto", "check", "branch", "probe", "return")


class _IrParser:

    def __init__(self, text: str, source: Optional[str]):
        self.text = text
        self.source = source
        self.entry: Optional[str] = None
        self.functions: Dict[str, IrFunction] = {}
        self._fn: Optional[dict] = None
        self._block: Optional[dict] = None

    def error(self, lineno: int, message: str) -> IrSyntaxError:
        return IrSyntaxError(lineno, message, self.source)

    def parse(self) -> IrProgram:
        saw_content = False
        for lineno, raw in enumerate(self.text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            saw_content = True
            self.parse_line(lineno, line.split())

        last_line = self.text.count("\n") + 1
        if not saw_content:
            raise self.error(1, "empty program")
        if self._fn is not None:
            raise self.error(last_line, f"function {self._fn['name']} is missing 'end'")
        if self.entry is None:
            raise self.error(last_line, "missing 'program entry <fn>' header")
        return IrProgram(self.functions, self.entry)

    def parse_line(self, lineno: int, words: List[str]):
        keyword = words[0]
        if keyword == "program":
            if len(words) != 3 or words[1] != "entry":
                raise self.error(lineno, "expected 'program entry <fn>'")
            if self.entry is not None:
                raise self.error(lineno, "duplicate program header")
            self.entry = words[2]
        elif keyword == "fn":
            self.start_function(lineno, words)
        elif keyword == "end":
            self.finish_function(lineno)
        elif keyword == "block":
            self.start_block(lineno, words)
        else:
            self.parse_body_line(lineno, words)

    def start_function(self, lineno: int, words: List[str]):
        if self._fn is not None:
            raise self.error(lineno, f"function {self._fn['name']} is missing 'end'")
        if len(words) != 6 or words[2] != "role" or words[4] != "returns":
            raise self.error(lineno, "expected 'fn <name> role <role> returns <tag>'")
        name, role = words[1], words[3]
        if not _NAME_RE.match(name):
            raise self.error(lineno, f"bad function name {name!r}")
        if role not in {r.value for r in Role}:
            raise self.error(lineno, f"unknown role {role!r}")
        if name in self.functions:
            raise IrValidationError(f"Duplicate function {name!r} (line {lineno})")
        self._fn = {"name": name, "role": Role(role), "ret": words[5], "blocks": [], "line": lineno}

    def finish_function(self, lineno: int):
        if self._fn is None:
            raise self.error(lineno, "'end' outside a function")
        self.close_block(lineno)
        if not self._fn["blocks"]:
            raise self.error(lineno, f"function {self._fn['name']} has no blocks")
        fn = IrFunction(self._fn["name"], self._fn["role"], self._fn["ret"], tuple(self._fn["blocks"]))
        self.functions[fn.name] = fn
        self._fn = None

    def start_block(self, lineno: int, words: List[str]):
        if self._fn is None:
            raise self.error(lineno, "block outside a function")
        if len(words) != 2 or not _NAME_RE.match(words[1]):
            raise self.error(lineno, "expected 'block <label>'")
        self.close_block(lineno)
        if any(block.label == words[1] for block in self._fn["blocks"]):
            raise IrValidationError(
                f"Duplicate block label {words[1]!r} in function {self._fn['name']} (line {lineno})"
            )
        self._block = {"label": words[1], "stmts": [], "term": None, "line": lineno}

    def close_block(self, lineno: int):
        if self._block is None:
            return
        if self._block["term"] is None:
            raise self.error(lineno, f"block {self._block['label']} has no terminator")
        self._fn["blocks"].append(
            BasicBlock(self._block["label"], tuple(self._block["stmts"]), self._block["term"])
        )
        self._block = None

    def parse_body_line(self, lineno: int, words: List[str]):
        if self._block is None:
            raise self.error(lineno, f"'{words[0]}' outside a block")
        if self._block["term"] is not None:
            raise self.error(lineno, f"block {self._block['label']} already terminated")
        keyword = words[0]
        if keyword not in _BODY_KEYWORDS:
            raise self.error(lineno, f"unknown statement {keyword!r}")
        item = getattr(self, f"parse_{keyword}")(lineno, words)
        if isinstance(item, (Goto, CondCheck, Branch, Probe, Return)):
            self._block["term"] = item
        else:
            self._block["stmts"].append(item)

    # Statements
    def parse_call(self, lineno, words):
        if len(words) != 2:
            raise self.error(lineno, "expected 'call <fn>'")
        return Call(words[1])

    def parse_io(self, lineno, words):
        if len(words) < 2 or len(words) > 4:
            raise self.error(lineno, "expected 'io <cost> [read|write|delete] [<path>]'")
        try:
            cost = int(words[1])
        except ValueError:
            raise self.error(lineno, f"io cost must be an integer, got {words[1]!r}") from None
        if cost < 0:
            raise self.error(lineno, "io cost must not be negative")
        mode, path = "read", None
        rest = words[2:]
        if rest and rest[0] in IO_MODES:
            mode = rest.pop(0)
        if rest:
            path = rest.pop(0)
        if rest:
            raise self.error(lineno, "unexpected trailing words after io")
        if mode != "read" and path is None:
            raise self.error(lineno, f"io {mode} needs a path")
        return Io(cost, mode, path)

    def parse_log(self, lineno, words):
        if len(words) != 2 or words[1].lower() not in ("allow", "deny"):
            raise self.error(lineno, "expected 'log allow|deny'")
        return Log(Decision(words[1].upper()))

    # Terminators
    def parse_goto(self, lineno, words):
        if len(words) != 2:
            raise self.error(lineno, "expected 'goto <label>'")
        return Goto(words[1])

    def parse_return(self, lineno, words):
        if len(words) != 2:
            raise self.error(lineno, "expected 'return <code>|ret'")
        if words[1] == "ret":
            return Return(None)
        try:
            return Return(int(words[1]))
        except ValueError:
            raise self.error(lineno, f"bad return code {words[1]!r}") from None

    def parse_predicate(self, lineno, text, allowed) -> PredicateRef:
        match = _PRED_RE.match(text)
        if not match or match.group("name") not in allowed:
            raise self.error(lineno, f"unknown predicate {text!r}")
        return PredicateRef(match.group("name"), (match.group("arg") or "").strip())

    def parse_tag(self, lineno, words) -> Tuple[Optional[str], List[str]]:
        if words and words[0] == "as":
            if len(words) < 2:
                raise self.error(lineno, "'as' needs a function tag")
            return words[1], words[2:]
        return None, words

    def parse_check(self, lineno, words):
        # check <id> <pred> [as <tag>] allow <L> deny <L>
        if len(words) < 3:
            raise self.error(lineno, "expected 'check <id> <predicate> allow <L> deny <L>'")
        predicate = self.parse_predicate(lineno, words[2], CHECK_PREDICATES)
        tag, rest = self.parse_tag(lineno, words[3:])
        if len(rest) != 4 or rest[0] != "allow" or rest[2] != "deny":
            raise self.error(lineno, "expected 'allow <label> deny <label>' after check")
        return CondCheck(words[1], predicate, rest[1], rest[3], tag)

    def parse_branch(self, lineno, words):
        if len(words) != 6 or words[2] != "then" or words[4] != "else":
            raise self.error(lineno, "expected 'branch <cond> then <label> else <label>'")
        return Branch(self.parse_predicate(lineno, words[1], BRANCH_CONDITIONS), words[3], words[5])

    def parse_probe(self, lineno, words):
        if len(words) < 3:
            raise self.error(lineno, "expected 'probe <id> <predicate> jump <label>'")
        predicate = self.parse_predicate(lineno, words[2], CHECK_PREDICATES)
        tag, rest = self.parse_tag(lineno, words[3:])
        if len(rest) != 2 or rest[0] != "jump":
            raise self.error(lineno, "expected 'jump <label>' after probe")
        return Probe(words[1], predicate, rest[1], tag)


def validate_program(prog: IrProgram) -> IrProgram:
    """
    Structural validation: one entry function with role ENTRY, every call
    target and branch label exists, check ids are unique.
    """
    entries = [fn.name for fn in prog.functions.values() if fn.role is Role.ENTRY]
    if prog.entry not in prog.functions:
        raise IrValidationError(f"Entry function {prog.entry!r} is not defined")
    if entries != [prog.entry]:
        raise IrValidationError(f"Exactly one entry-role function expected, found {entries}")

    check_ids = set()
    for fn in prog.functions.values():
        for block in fn.blocks:
            for stmt in block.statements:
                if isinstance(stmt, Call) and stmt.fn not in prog.functions:
                    raise IrValidationError(f"{fn.name}/{block.label}: call to undefined function {stmt.fn!r}")
            for label in block.terminator.successors():
                if not fn.has_block(label):
                    raise IrValidationError(f"{fn.name}/{block.label}: jump to unknown block {label!r}")
            if isinstance(block.terminator, (CondCheck, Probe)):
                check_id = block.terminator.check_id
                if check_id in check_ids:
                    raise IrValidationError(f"Duplicate check id {check_id!r}")
                check_ids.add(check_id)
    return prog


def parse_ir(text: str, source: str = None) -> IrProgram:
    """
    Parse and validate handler IR text

    Raises:
        IrSyntaxError: malformed text (including an empty program)
        IrValidationError: dangling calls or labels, missing entry, duplicates
    """
    prog = validate_program(_IrParser(text, source).parse())
    logger.debug(f"Parsed IR {source or '<text>'}: {len(prog.functions)} functions")
    return prog


def load_ir(path) -> IrProgram:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise IrError(f"Cannot read program {path}: {exc}") from exc
    return parse_ir(text, source=str(path))


def _render_stmt(stmt: Stmt) -> str:
    if isinstance(stmt, Call):
        return f"call {stmt.fn}"
    if isinstance(stmt, Io):
        parts = ["io", str(stmt.cost)]
        if stmt.mode != "read":
            parts.append(stmt.mode)
        if stmt.path_expr:
            parts.append(stmt.path_expr)
        return " ".join(parts)
    return f"log {stmt.decision.value.lower()}"


def _render_terminator(term: Terminator) -> str:
    if isinstance(term, Goto):
        return f"goto {term.label}"
    if isinstance(term, CondCheck):
        tag = f" as {term.fn_tag}" if term.fn_tag else ""
        return f"check {term.check_id} {term.predicate.render()}{tag} allow {term.allow_label} deny {term.deny_label}"
    if isinstance(term, Branch):
        return f"branch {term.cond.render()} then {term.then_label} else {term.else_label}"
    if isinstance(term, Probe):
        tag = f" as {term.fn_tag}" if term.fn_tag else ""
        return f"probe {term.check_id} {term.predicate.render()}{tag} jump {term.jump}"
    return "return ret" if term.code is None else f"return {term.code}"


def dump_ir(prog: IrProgram) -> str:
    """Canonical IR text; parse_ir(dump_ir(p)) == p"""
    lines = [f"program entry {prog.entry}", ""]
    for fn in prog.functions.values():
        lines.append(f"fn {fn.name} role {fn.role.value} returns {fn.return_type_tag}")
        for block in fn.blocks:
            lines.append(f"  block {block.label}")
            lines.extend(f"    {_render_stmt(stmt)}" for stmt in block.statements)
            lines.append(f"    {_render_terminator(block.terminator)}")
        lines.append("end")
        lines.append("")
    return "\n".join(lines)
