"""
Interpreter and execution tracer for handler IR programs

One run handles one request against a configuration and an overlay store.
The tracer records every visited (function, block) and turns the visit
sequence into a dynamic CFG.
"""
import hashlib
import ipaddress
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Tuple

import networkx as nx
from django.conf import settings

from .acdl import AcConfig, config_digest, match_directives
from .datastate import Access, FileEntry, OverlayStore, file_perm_check
from .domain import ACTIONS, Decision, Request, normalize_path
from .errors import IrError, NoDecisionLogged, PredicateError, StepBudgetExceeded, UnknownTable
from .hir import (
    OBJECT_EXPR, Branch, Call, CondCheck, Goto, Io, IrProgram, Log, PredicateRef, Probe, Return,
)

logger = logging.getLogger(__name__)

DEFAULT_STEP_BUDGET = 10000
DEFAULT_RETURN_CODE = 200

Node = Tuple[str, str]


@dataclass(frozen=True)
class TraceStep:
    function: str
    block: str
    seq: int


@dataclass(frozen=True)
class RunResult:
    decision: Decision
    return_code: int
    cost: int
    trace: Tuple[TraceStep, ...]
    logs: Tuple[Decision, ...] = ()


def statement_cost(stmt) -> int:
    """Cost model: Io costs its declared units, every other statement costs 1"""
    return stmt.cost if isinstance(stmt, Io) else 1


def expand_path(expr: Optional[str], req: Request) -> Optional[str]:
    if not expr:
        return None
    return normalize_path(expr.replace(OBJECT_EXPR, req.object))


class _Evaluator:
    """Evaluates predicates against one (request, config, store) environment"""

    def __init__(self, req: Request, cfg: AcConfig, store: OverlayStore, nondet_seed: int):
        self.req = req
        self.cfg = cfg
        self.store = store
        self.nondet_seed = nondet_seed

    def check(self, predicate: PredicateRef) -> Decision:
        name, arg = predicate.name, predicate.arg
        if name == "directive_match":
            return match_directives(self.cfg, self.req)
        if name == "file_perm":
            need = (arg or "READ").upper()
            if need not in (Access.READ.value, Access.WRITE.value):
                raise PredicateError(f"file_perm expects READ or WRITE, got {arg!r}")
            return file_perm_check(self.store, self.req.object, self.req.subject, Access(need))
        if name == "user_in_table":
            if not arg:
                raise PredicateError("user_in_table needs a table name")
            try:
                rows = self.store.query(arg, lambda row: row.get("name") == self.req.subject.name)
            except UnknownTable as exc:
                raise PredicateError(f"user_in_table: {exc}") from exc
            return Decision.ALLOW if rows else Decision.DENY
        if name == "ip_in":
            try:
                network = ipaddress.IPv4Network(arg, strict=False)
            except ValueError as exc:
                raise PredicateError(f"ip_in expects a CIDR, got {arg!r}") from exc
            inside = ipaddress.IPv4Address(self.req.source_ip) in network
            return Decision.ALLOW if inside else Decision.DENY
        if name == "method_is":
            verb = arg.upper()
            if verb not in ACTIONS:
                raise PredicateError(f"method_is expects an action verb, got {arg!r}")
            return Decision.ALLOW if self.req.action == verb else Decision.DENY
        raise PredicateError(f"Unknown predicate {name!r}")

    def condition(self, cond: PredicateRef) -> bool:
        if cond.name == "exists":
            path = expand_path(cond.arg or OBJECT_EXPR, self.req)
            return self.store.exists(path)
        if cond.name == "nondet":
            material = f"{self.nondet_seed}:{cond.arg}".encode("utf-8")
            return hashlib.sha256(material).digest()[0] & 1 == 1
        return self.check(cond) is Decision.ALLOW

    def io(self, stmt: Io) -> None:
        path = expand_path(stmt.path_expr, self.req)
        if path is None or stmt.mode == "read":
            return
        if stmt.mode == "delete":
            self.store.remove(path)
            return
        subject = self.req.subject
        current = self.store.read(path)
        if current is not None:
            entry = FileEntry(current.owner, current.group, current.perms, stmt.cost, f"written-by:{subject.name}")
        else:
            group = min(subject.groups) if subject.groups else subject.name
            entry = FileEntry(subject.name, group, 0o644, stmt.cost, f"written-by:{subject.name}")
        self.store.write(path, entry)


@dataclass
class _Frame:
    function: str
    block: str
    index: int = 0


def interpret(
    prog: IrProgram,
    req: Request,
    cfg: AcConfig,
    store: OverlayStore,
    nondet_seed: int = 0,
    step_budget: Optional[int] = None,
) -> RunResult:
    """
    Run the program on one request

    The decision is the last logged decision. Once a probe has logged, later
    log statements no longer change it.

    Raises:
        StepBudgetExceeded: the run did not reach its final return in time
        PredicateError: a predicate has malformed arguments
        NoDecisionLogged: the run finished without logging a decision
    """
    if step_budget is None:
        step_budget = getattr(settings, "ACTEST_STEP_BUDGET", DEFAULT_STEP_BUDGET)
    evaluator = _Evaluator(req, cfg, store, nondet_seed)

    trace: List[TraceStep] = []
    logs: List[Decision] = []
    decision: Optional[Decision] = None
    probed = False
    cost = 0
    steps = 0
    last_code = DEFAULT_RETURN_CODE

    def visit(function: str, block: str):
        trace.append(TraceStep(function, block, len(trace)))

    entry_fn = prog.function(prog.entry)
    frames = [_Frame(entry_fn.name, entry_fn.entry_block.label)]
    visit(entry_fn.name, entry_fn.entry_block.label)

    while frames:
        steps += 1
        if steps > step_budget:
            raise StepBudgetExceeded(f"Run of {req.action} {req.object} exceeded {step_budget} steps")

        frame = frames[-1]
        block = prog.function(frame.function).block(frame.block)

        if frame.index < len(block.statements):
            stmt = block.statements[frame.index]
            frame.index += 1
            cost += statement_cost(stmt)
            if isinstance(stmt, Call):
                callee = prog.function(stmt.fn)
                frames.append(_Frame(callee.name, callee.entry_block.label))
                visit(callee.name, callee.entry_block.label)
            elif isinstance(stmt, Io):
                evaluator.io(stmt)
            elif isinstance(stmt, Log):
                logs.append(stmt.decision)
                if not probed:
                    decision = stmt.decision
            continue

        term = block.terminator
        if isinstance(term, Return):
            code = last_code if term.code is None else term.code
            frames.pop()
            last_code = code
            if frames:
                visit(frames[-1].function, frames[-1].block)
            continue

        if isinstance(term, Goto):
            target = term.label
        elif isinstance(term, CondCheck):
            result = evaluator.check(term.predicate)
            target = term.allow_label if result is Decision.ALLOW else term.deny_label
        elif isinstance(term, Branch):
            target = term.then_label if evaluator.condition(term.cond) else term.else_label
        elif isinstance(term, Probe):
            result = evaluator.check(term.predicate)
            logs.append(result)
            decision = result
            probed = True
            target = term.jump
        else:
            raise IrError(f"Unknown terminator {term!r}")

        frame.block = target
        frame.index = 0
        visit(frame.function, target)

    if decision is None:
        raise NoDecisionLogged(f"Run of {req.action} {req.object} finished without logging a decision")

    return RunResult(decision, last_code, cost, tuple(trace), tuple(logs))


# ========================
# DYNAMIC CFG
# ========================
@dataclass
class DynCfg:
    """Dynamic control-flow graph over visited (function, block) nodes"""
    graph: nx.DiGraph
    request: Optional[Request] = None
    config_id: str = ""
    meta: Dict[str, Any] = field(default_factory=dict)

    @classmethod
    def from_trace(cls, trace, request: Request = None, config_id: str = "") -> "DynCfg":
        graph = nx.DiGraph()
        previous: Optional[Node] = None
        for step in trace:
            node = (step.function, step.block)
            if node not in graph:
                graph.add_node(node, seq=step.seq)
            if previous is not None:
                graph.add_edge(previous, node)
            previous = node
        return cls(graph, request, config_id)

    @property
    def entry(self) -> Node:
        return min(self.graph.nodes, key=lambda n: self.graph.nodes[n]["seq"])

    def seq(self, node: Node) -> int:
        return self.graph.nodes[node]["seq"]

    def ordered_nodes(self) -> List[Node]:
        return sorted(self.graph.nodes, key=self.seq)

    def functions(self) -> set:
        return {fn for fn, _ in self.graph.nodes}

    def same_shape(self, other: "DynCfg") -> bool:
        return set(self.graph.nodes) == set(other.graph.nodes) and set(self.graph.edges) == set(other.graph.edges)

    def to_json(self) -> Dict[str, Any]:
        nodes = self.ordered_nodes()
        index = {node: i for i, node in enumerate(nodes)}
        return {
            "request": self.request.to_dict() if self.request else None,
            "config_id": self.config_id,
            "nodes": [{"fn": fn, "block": block, "seq": self.seq((fn, block))} for fn, block in nodes],
            "edges": sorted([index[a], index[b]] for a, b in self.graph.edges),
        }

    @classmethod
    def from_json(cls, data: Dict[str, Any]) -> "DynCfg":
        graph = nx.DiGraph()
        nodes = []
        for item in data["nodes"]:
            node = (item["fn"], item["block"])
            nodes.append(node)
            graph.add_node(node, seq=int(item["seq"]))
        for a, b in data.get("edges", []):
            graph.add_edge(nodes[a], nodes[b])
        request = Request.from_dict(data["request"]) if data.get("request") else None
        return cls(graph, request, data.get("config_id", ""))

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    def to_dot(self, path) -> None:
        dot = nx.DiGraph()
        for fn, block in self.ordered_nodes():
            dot.add_node(f'"{fn}/{block}"', label=f'"{fn}/{block}\\n#{self.seq((fn, block))}"')
        for (fa, ba), (fb, bb) in self.graph.edges:
            dot.add_edge(f'"{fa}/{ba}"', f'"{fb}/{bb}"')
        nx.drawing.nx_pydot.write_dot(dot, str(path))


def trace_run(
    prog: IrProgram,
    req: Request,
    cfg: AcConfig,
    store: OverlayStore,
    nondet_seed: int = 0,
    step_budget: Optional[int] = None,
) -> Tuple[RunResult, DynCfg]:
    """Interpret the program and build the dynamic CFG of the run"""
    result = interpret(prog, req, cfg, store, nondet_seed=nondet_seed, step_budget=step_budget)
    dyn = DynCfg.from_trace(result.trace, req, config_digest(cfg))
    dyn.meta["decision"] = result.decision.value
    logger.debug(
        f"Traced {req.action} {req.object}: {result.decision.value}, "
        f"{dyn.graph.number_of_nodes()} nodes, {dyn.graph.number_of_edges()} edges"
    )
    return result, dyn


def select_request_cfg(cfgs: List[DynCfg]) -> DynCfg:
    """Pick the request-handling CFG among several per-thread CFGs: the one with most nodes"""
    if not cfgs:
        raise IrError("No CFGs to select from")
    return max(enumerate(cfgs), key=lambda pair: (pair[1].graph.number_of_nodes(), -pair[0]))[1]
