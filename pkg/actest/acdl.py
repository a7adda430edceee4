"""
ACDL: a small directive-based access-control configuration language

Parsing and evaluation of location/files blocks with allow/deny directives,
in the spirit of httpd and nginx access rules.
"""
import fnmatch
import hashlib
import ipaddress
import logging
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterator, List, Optional, Tuple

from .domain import ACTIONS, Decision, Request, normalize_path
from .errors import ConfigError, ConfigSyntaxError, PatternError

logger = logging.getLogger(__name__)


class SelectorKind(str, Enum):
    ROOT = "root"
    LOCATION = "location"
    FILES = "files"


class MatchKind(str, Enum):
    FROM_ALL = "from_all"
    FROM_IP = "from_ip"
    USER = "user"
    GROUP = "group"
    METHOD = "method"


@dataclass(frozen=True)
class Selector:
    """Which objects a block applies to"""
    kind: SelectorKind
    value: str = ""
    regex: bool = False
    _compiled: Optional[re.Pattern] = field(default=None, compare=False, repr=False)

    @classmethod
    def root(cls) -> "Selector":
        return cls(SelectorKind.ROOT)

    @classmethod
    def location(cls, prefix: str) -> "Selector":
        return cls(SelectorKind.LOCATION, normalize_path(prefix))

    @classmethod
    def files(cls, pattern: str, line: int = 0, col: int = 0) -> "Selector":
        # Anchors select regular-expression mode; anything else is a glob
        if pattern.startswith("^") or pattern.endswith("$"):
            try:
                compiled = re.compile(pattern)
            except re.error as exc:
                raise PatternError(pattern, str(exc), line, col) from exc
            return cls(SelectorKind.FILES, pattern, True, compiled)
        if not pattern or _unbalanced_brackets(pattern):
            raise PatternError(pattern, "unbalanced or empty glob", line, col)
        return cls(SelectorKind.FILES, pattern, False)

    def matches(self, path: str) -> bool:
        if self.kind is SelectorKind.ROOT:
            return True
        if self.kind is SelectorKind.LOCATION:
            if self.value == "/":
                return True
            return path == self.value or path.startswith(self.value + "/")
        if self.regex:
            return self._compiled.search(path) is not None
        target = path if "/" in self.value else path.rsplit("/", 1)[-1]
        return fnmatch.fnmatchcase(target, self.value)

    def rank(self) -> Tuple[int, int]:
        if self.kind is SelectorKind.ROOT:
            return (0, 0)
        if self.kind is SelectorKind.LOCATION:
            return (1, len(self.value))
        return (2, 0)

    def render(self) -> str:
        if self.kind is SelectorKind.LOCATION:
            return f"location {self.value}"
        if self.kind is SelectorKind.FILES:
            escaped = self.value.replace('"', '\\"')
            return f'files "{escaped}"'
        return "root"


def _unbalanced_brackets(pattern: str) -> bool:
    depth = 0
    for char in pattern:
        if char == "[":
            depth += 1
        elif char == "]" and depth:
            depth -= 1
    return depth != 0


@dataclass(frozen=True)
class Directive:
    """A single allow/deny rule inside a block"""
    effect: Decision
    kind: MatchKind
    value: str = ""
    line: int = 0

    def matches(self, req: Request) -> bool:
        if self.kind is MatchKind.FROM_ALL:
            return True
        if self.kind is MatchKind.FROM_IP:
            return ipaddress.IPv4Address(req.source_ip) in ipaddress.IPv4Network(self.value)
        if self.kind is MatchKind.USER:
            return req.subject.name == self.value
        if self.kind is MatchKind.GROUP:
            return self.value in req.subject.groups
        return req.action == self.value

    def render(self) -> str:
        verb = self.effect.value.lower()
        if self.kind is MatchKind.FROM_ALL:
            return f"{verb} from all"
        if self.kind is MatchKind.FROM_IP:
            return f"{verb} from {self.value}"
        return f"{verb} {self.kind.value} {self.value}"


@dataclass(frozen=True)
class Block:
    selector: Selector
    directives: Tuple[Directive, ...] = ()
    line: int = 0


@dataclass(frozen=True)
class AcConfig:
    """An ordered list of blocks plus the policy used when nothing matches"""
    blocks: Tuple[Block, ...] = ()
    default_policy: Decision = Decision.ALLOW
    source: Optional[str] = field(default=None, compare=False)

    @property
    def config_id(self) -> str:
        return config_digest(self)


# ========================
# TOKENIZER
# ========================
_PUNCT = "{};"


@dataclass(frozen=True)
class _Token:
    kind: str  # word, string, punct, newline, eof
    text: str
    line: int
    col: int


def _tokenize(text: str, source: Optional[str]) -> Iterator[_Token]:
    for lineno, raw in enumerate(text.splitlines(), start=1):
        i = 0
        length = len(raw)
        while i < length:
            char = raw[i]
            if char in " \t\r":
                i += 1
            elif char == "#":
                break
            elif char in _PUNCT:
                yield _Token("punct", char, lineno, i + 1)
                i += 1
            elif char == '"':
                start = i
                i += 1
                chunks = []
                while i < length and raw[i] != '"':
                    if raw[i] == "\\" and i + 1 < length and raw[i + 1] == '"':
                        chunks.append('"')
                        i += 2
                        continue
                    chunks.append(raw[i])
                    i += 1
                if i >= length:
                    raise ConfigSyntaxError(lineno, start + 1, "unterminated string", source)
                i += 1
                yield _Token("string", "".join(chunks), lineno, start + 1)
            else:
                start = i
                while i < length and raw[i] not in ' \t\r#"' + _PUNCT:
                    i += 1
                yield _Token("word", raw[start:i], lineno, start + 1)
        yield _Token("newline", "\n", lineno, length + 1)
    yield _Token("eof", "", text.count("\n") + 1, 1)


class _Parser:
    """Recursive-descent parser over the token stream"""

    def __init__(self, text: str, source: Optional[str]):
        self.tokens: List[_Token] = list(_tokenize(text, source))
        self.pos = 0
        self.source = source

    def peek(self) -> _Token:
        return self.tokens[self.pos]

    def advance(self) -> _Token:
        token = self.tokens[self.pos]
        self.pos += 1
        return token

    def error(self, token: _Token, message: str) -> ConfigSyntaxError:
        return ConfigSyntaxError(token.line, token.col, message, self.source)

    def skip_separators(self):
        while self.peek().kind == "newline" or self.peek().text == ";":
            self.advance()

    def parse(self) -> AcConfig:
        blocks: List[Block] = []
        root_directives: List[Directive] = []
        root_index: Optional[int] = None
        root_line = 0
        default = Decision.ALLOW

        while True:
            self.skip_separators()
            token = self.peek()
            if token.kind == "eof":
                break
            if token.kind != "word":
                raise self.error(token, f"unexpected {token.text!r}")
            keyword = token.text.lower()
            if keyword == "location":
                self.advance()
                prefix = self.advance()
                if prefix.kind not in ("word", "string") or not prefix.text.startswith("/"):
                    raise self.error(prefix, "location expects an absolute path prefix")
                blocks.append(Block(Selector.location(prefix.text), self.parse_body(), token.line))
            elif keyword == "files":
                self.advance()
                pattern = self.advance()
                if pattern.kind not in ("word", "string"):
                    raise self.error(pattern, "files expects a pattern")
                selector = Selector.files(pattern.text, pattern.line, pattern.col)
                blocks.append(Block(selector, self.parse_body(), token.line))
            elif keyword == "default":
                self.advance()
                default = self.parse_effect(self.advance())
                self.expect_end()
            elif keyword in ("allow", "deny"):
                if root_index is None:
                    root_index = len(blocks)
                    root_line = token.line
                root_directives.append(self.parse_directive())
            else:
                raise self.error(token, f"unknown keyword {token.text!r}")

        if root_index is not None:
            blocks.insert(root_index, Block(Selector.root(), tuple(root_directives), root_line))
        return AcConfig(tuple(blocks), default, self.source)

    def parse_body(self) -> Tuple[Directive, ...]:
        opening = self.advance()
        if opening.text != "{":
            raise self.error(opening, "expected '{'")
        directives = []
        while True:
            self.skip_separators()
            token = self.peek()
            if token.text == "}":
                self.advance()
                return tuple(directives)
            if token.kind == "eof":
                raise self.error(token, "unterminated block, expected '}'")
            directives.append(self.parse_directive())

    def parse_effect(self, token: _Token) -> Decision:
        word = token.text.lower()
        if token.kind != "word" or word not in ("allow", "deny"):
            raise self.error(token, "expected 'allow' or 'deny'")
        return Decision.ALLOW if word == "allow" else Decision.DENY

    def parse_directive(self) -> Directive:
        head = self.advance()
        effect = self.parse_effect(head)
        kind_token = self.advance()
        kind = kind_token.text.lower()
        operand = self.advance()
        if operand.kind not in ("word", "string"):
            raise self.error(operand, f"'{head.text} {kind_token.text}' needs an operand")

        if kind == "from":
            if operand.text.lower() == "all":
                directive = Directive(effect, MatchKind.FROM_ALL, "", head.line)
            else:
                directive = Directive(effect, MatchKind.FROM_IP, self.parse_cidr(operand), head.line)
        elif kind == "user":
            directive = Directive(effect, MatchKind.USER, operand.text, head.line)
        elif kind == "group":
            directive = Directive(effect, MatchKind.GROUP, operand.text, head.line)
        elif kind == "method":
            verb = operand.text.upper()
            if verb not in ACTIONS:
                raise self.error(operand, f"unknown method {operand.text!r}")
            directive = Directive(effect, MatchKind.METHOD, verb, head.line)
        else:
            raise self.error(kind_token, f"unknown directive form {kind_token.text!r}")
        self.expect_end()
        return directive

    def parse_cidr(self, token: _Token) -> str:
        text = token.text
        if "/" in text:
            _, _, mask = text.partition("/")
            if not mask.isdigit() or not 0 <= int(mask) <= 32:
                raise self.error(token, f"CIDR mask out of range in {text!r}")
        try:
            return str(ipaddress.IPv4Network(text, strict=False))
        except ValueError as exc:
            raise self.error(token, f"invalid address {text!r}: {exc}") from exc

    def expect_end(self):
        token = self.peek()
        if token.kind in ("newline", "eof") or token.text in (";", "}"):
            if token.text == ";":
                self.advance()
            return
        raise self.error(token, f"unexpected {token.text!r} after directive")


# ========================
# PUBLIC API
# ========================
def parse_config(text: str, source: str = None) -> AcConfig:
    """
    Parse ACDL text into an AcConfig

    Raises:
        ConfigSyntaxError: on a malformed directive (with line and column)
        PatternError: on a files pattern that does not compile
    """
    cfg = _Parser(text, source).parse()
    logger.debug(f"Parsed config {source or '<text>'}: {len(cfg.blocks)} blocks")
    return cfg


def load_config(path) -> AcConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"Cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def match_directives(cfg: AcConfig, req: Request) -> Decision:
    """
    Evaluate a request: the most specific matching block wins, and within it
    the last matching directive decides. Falls back to the default policy.
    """
    winner: Optional[Block] = None
    winner_key = None
    for index, block in enumerate(cfg.blocks):
        if not block.selector.matches(req.object):
            continue
        key = (block.selector.rank(), index)
        if winner_key is None or key > winner_key:
            winner, winner_key = block, key

    if winner is None:
        return cfg.default_policy

    decision = None
    for directive in winner.directives:
        if directive.matches(req):
            decision = directive.effect
    return decision if decision is not None else cfg.default_policy


def dump_config(cfg: AcConfig) -> str:
    """Render a config back to canonical ACDL text"""
    lines = []
    if cfg.default_policy is not Decision.ALLOW:
        lines.append(f"default {cfg.default_policy.value.lower()}")
    for block in cfg.blocks:
        if block.selector.kind is SelectorKind.ROOT:
            lines.extend(directive.render() for directive in block.directives)
            continue
        lines.append(f"{block.selector.render()} {{")
        lines.extend(f"    {directive.render()}" for directive in block.directives)
        lines.append("}")
    return "\n".join(lines) + ("\n" if lines else "")


def config_digest(cfg: AcConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode("utf-8")).hexdigest()[:16]


def referenced_paths(cfg: AcConfig) -> List[str]:
    """Location prefixes plus literal file names a config mentions"""
    paths = []
    for block in cfg.blocks:
        if block.selector.kind is SelectorKind.LOCATION:
            paths.append(block.selector.value)
        elif block.selector.kind is SelectorKind.FILES and not block.selector.regex:
            if not any(char in block.selector.value for char in "*?["):
                paths.append(normalize_path(block.selector.value))
    return sorted(set(paths))


def cidr_representatives(cfg: AcConfig) -> List[str]:
    """One address inside every CIDR rule plus one address outside all of them"""
    networks = sorted(
        {
            ipaddress.IPv4Network(d.value)
            for block in cfg.blocks
            for d in block.directives
            if d.kind is MatchKind.FROM_IP
        },
        key=lambda n: (int(n.network_address), n.prefixlen),
    )
    picks = []
    for network in networks:
        hosts = network.hosts() if network.num_addresses > 2 else iter(network)
        picks.append(str(next(hosts)))

    candidate = ipaddress.IPv4Address("198.51.100.7")
    for _ in range(4096):
        if not any(candidate in network for network in networks):
            picks.append(str(candidate))
            break
        candidate = ipaddress.IPv4Address((int(candidate) + 65537) % (2 ** 32))

    seen = []
    for ip in picks:
        if ip not in seen:
            seen.append(ip)
    return seen


def block_signature(block: Block) -> Tuple[str, Tuple[str, ...]]:
    return (block.selector.render(), tuple(d.render() for d in block.directives))


def changed_blocks(old: AcConfig, new: AcConfig) -> List[Block]:
    """Blocks present in only one of the two configs, compared by their rendering"""
    old_sigs = {block_signature(b) for b in old.blocks}
    new_sigs = {block_signature(b) for b in new.blocks}
    removed = [b for b in old.blocks if block_signature(b) not in new_sigs]
    added = [b for b in new.blocks if block_signature(b) not in old_sigs]
    return removed + added
