"""
Hybrid trimming of handler programs

1. Dynamic analysis: run each <request, allowing config, denying config>
   tuple twice and build the two dynamic CFGs.
2. CFG-diff: merge the pair, color nodes green (allow only), red (deny only)
   or green-red-mixed, and pick the mixed node with the largest divergence
   as the final access-control check (ACC) of that pair.
3. Static analysis: a forward pass adds the ACCs performed after each final
   ACC (expanding functions the runs never reached), a backward pass removes
   the ACCs performed before one.

The resulting final ACCs are rewritten into probes that log the check result
and always take the deny branch. The strawman rewrite drops sub-handler calls
from the entry handler altogether.
"""
import logging
from collections import defaultdict, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

import networkx as nx

from .acdl import AcConfig, config_digest
from .datastate import OverlayStore
from .domain import Decision, Request
from .errors import (
    DisjointCfgs, EmptyResult, InvalidTuple, IrError, NoAccFound, NoCandidates, UnknownAcc,
)
from .hir import (
    BasicBlock, Call, CondCheck, IrProgram, Log, Probe, Return, Role, validate_program,
)
from .interpreter import DynCfg, Node, trace_run

logger = logging.getLogger(__name__)

MAX_CALL_DEPTH = 16


class Color(str, Enum):
    GREEN = "green"
    RED = "red"
    MIXED = "green-red-mixed"


class BackwardMode(str, Enum):
    PRIOR = "prior"
    LITERAL = "literal"


@dataclass(frozen=True)
class TraceTuple:
    """A request with one config that allows it and a mutation that denies it"""
    request: Request
    cfg_allow: AcConfig
    cfg_deny: AcConfig


@dataclass(frozen=True, order=True)
class AccRef:
    """Reference to an access-control check of a program"""
    function: str
    block: str
    check_id: str
    fn_name_tag: str
    return_type_tag: str

    @classmethod
    def for_block(cls, prog: IrProgram, function: str, block: str) -> "AccRef":
        try:
            fn = prog.function(function)
            term = fn.block(block).terminator
        except IrError as exc:
            raise UnknownAcc(str(exc)) from exc
        if not isinstance(term, CondCheck):
            raise UnknownAcc(f"{function}/{block} does not end in an access-control check")
        return cls(function, block, term.check_id, term.fn_name_tag, fn.return_type_tag)

    @property
    def node(self) -> Node:
        return (self.function, self.block)

    def to_dict(self) -> dict:
        return {
            "function": self.function,
            "block": self.block,
            "check_id": self.check_id,
            "tags": {"fn_name": self.fn_name_tag, "return_type": self.return_type_tag},
        }


@dataclass(frozen=True)
class AccSet:
    finals: FrozenSet[AccRef] = frozenset()

    def __iter__(self):
        return iter(sorted(self.finals))

    def __len__(self):
        return len(self.finals)

    def check_ids(self) -> List[str]:
        return sorted(acc.check_id for acc in self.finals)

    def to_json(self) -> List[dict]:
        return [acc.to_dict() for acc in sorted(self.finals)]


@dataclass(frozen=True)
class AccTags:
    """Check function names and return types learned from identified ACCs"""
    fn_names: FrozenSet[str] = frozenset()
    return_types: FrozenSet[str] = frozenset()

    @classmethod
    def harvest(cls, accs: Iterable[AccRef]) -> "AccTags":
        accs = list(accs)
        return cls(
            frozenset(acc.fn_name_tag for acc in accs),
            frozenset(acc.return_type_tag for acc in accs),
        )

    def is_acc(self, prog: IrProgram, function: str, block: str) -> bool:
        fn = prog.function(function)
        term = fn.block(block).terminator
        if not isinstance(term, CondCheck):
            return False
        return term.fn_name_tag in self.fn_names or fn.return_type_tag in self.return_types


@dataclass
class MergedCfg:
    """Union of an allow-run and a deny-run CFG with three-color labelling"""
    graph: nx.DiGraph
    allow: DynCfg
    deny: DynCfg

    def color(self, node: Node) -> Color:
        return self.graph.nodes[node]["color"]

    def seq(self, node: Node) -> int:
        return self.graph.nodes[node]["seq"]

    def nodes_of(self, color: Color) -> Set[Node]:
        return {n for n, data in self.graph.nodes(data=True) if data["color"] is color}

    def children_of(self, node: Node, color: Color) -> List[Node]:
        return [child for child in self.graph.successors(node) if self.color(child) is color]

    @property
    def key(self) -> Tuple[str, str, Optional[Request]]:
        return (self.allow.config_id, self.deny.config_id, self.allow.request)

    def summary(self) -> Dict[str, int]:
        counts = {color.value: 0 for color in Color}
        for _, data in self.graph.nodes(data=True):
            counts[data["color"].value] += 1
        counts["edges"] = self.graph.number_of_edges()
        return counts

    def to_json(self) -> dict:
        nodes = sorted(self.graph.nodes, key=self.seq)
        return {
            "nodes": [
                {"fn": fn, "block": block, "seq": self.seq((fn, block)), "color": self.color((fn, block)).value}
                for fn, block in nodes
            ],
            "edges": sorted([list(a), list(b)] for a, b in self.graph.edges),
        }

    def to_dot(self, path) -> None:
        """Write the colored graph in DOT format"""
        fill = {Color.GREEN: "palegreen", Color.RED: "salmon", Color.MIXED: "khaki"}
        dot = nx.DiGraph()
        for (fn, block), data in self.graph.nodes(data=True):
            dot.add_node(
                f'"{fn}/{block}"', style="filled", fillcolor=fill[data["color"]], label=f'"{fn}/{block}\\n#{data["seq"]}"'
            )
        for (fa, ba), (fb, bb) in self.graph.edges:
            dot.add_edge(f'"{fa}/{ba}"', f'"{fb}/{bb}"')
        nx.drawing.nx_pydot.write_dot(dot, str(path))


# ========================
# STEP 1: DYNAMIC ANALYSIS
# ========================
def run_pair(
    prog: IrProgram,
    tuple_: TraceTuple,
    store: OverlayStore,
    seeds: Tuple[int, int] = (0, 0),
) -> Tuple[DynCfg, DynCfg]:
    """
    Run the tuple's request under the allowing and the denying config

    Raises:
        InvalidTuple: the configs are identical, or the runs do not allow/deny
    """
    if config_digest(tuple_.cfg_allow) == config_digest(tuple_.cfg_deny):
        raise InvalidTuple(f"Allow and deny configs are identical for {tuple_.request.object}")

    store.reset()
    allowed, cfg_allow = trace_run(prog, tuple_.request, tuple_.cfg_allow, store, nondet_seed=seeds[0])
    store.reset()
    if allowed.decision is not Decision.ALLOW:
        raise InvalidTuple(
            f"Allow config denies {tuple_.request.action} {tuple_.request.object} "
            f"(decision {allowed.decision.value})"
        )
    denied, cfg_deny = trace_run(prog, tuple_.request, tuple_.cfg_deny, store, nondet_seed=seeds[1])
    store.reset()
    if denied.decision is not Decision.DENY:
        raise InvalidTuple(
            f"Deny config allows {tuple_.request.action} {tuple_.request.object} "
            f"(decision {denied.decision.value})"
        )
    return cfg_allow, cfg_deny


# ========================
# STEP 2: CFG-DIFF
# ========================
def diff_cfg(a: DynCfg, d: DynCfg) -> MergedCfg:
    """Merge the allow and deny CFGs and color every node"""
    if a.entry != d.entry:
        raise DisjointCfgs(f"CFG entries differ: {a.entry} vs {d.entry}")

    graph = nx.DiGraph()
    for node in set(a.graph.nodes) | set(d.graph.nodes):
        in_allow = node in a.graph
        in_deny = node in d.graph
        if in_allow and in_deny:
            color = Color.MIXED
        elif in_allow:
            color = Color.GREEN
        else:
            color = Color.RED
        seq = a.seq(node) if in_allow else d.seq(node)
        graph.add_node(node, color=color, seq=seq)
    graph.add_edges_from(a.graph.edges)
    graph.add_edges_from(d.graph.edges)
    return MergedCfg(graph, a, d)


def _pure_region(merged: MergedCfg, start: Iterable[Node], color: Color) -> Set[Node]:
    """Nodes of one color reachable from the start nodes through that color only"""
    region: Set[Node] = set()
    queue = deque(start)
    while queue:
        node = queue.popleft()
        if node in region:
            continue
        region.add(node)
        queue.extend(child for child in merged.children_of(node, color) if child not in region)
    return region


def divergence(merged: MergedCfg, node: Node) -> int:
    green = _pure_region(merged, merged.children_of(node, Color.GREEN), Color.GREEN)
    red = _pure_region(merged, merged.children_of(node, Color.RED), Color.RED)
    return len(green) + len(red)


def find_divergence(a: DynCfg, d: DynCfg) -> Tuple[Node, MergedCfg, Dict[Node, int]]:
    """
    Locate the diverging node of a CFG pair without consulting the program

    Returns:
        (winning node, merged CFG, divergence score of every candidate)
    """
    merged = diff_cfg(a, d)
    candidates = [
        node for node in merged.graph.nodes
        if merged.color(node) is Color.MIXED
        and merged.children_of(node, Color.GREEN)
        and merged.children_of(node, Color.RED)
    ]
    if not candidates:
        raise NoCandidates("The allow and deny CFGs do not diverge")

    scores = {node: divergence(merged, node) for node in candidates}
    winner = max(candidates, key=lambda n: (scores[n], -merged.seq(n)))
    logger.debug(f"CFG-diff candidates: {scores}, winner {winner}")
    return winner, merged, scores


def find_final_acc(a: DynCfg, d: DynCfg, prog: IrProgram) -> Tuple[AccRef, MergedCfg]:
    """
    Find the final ACC of one allow/deny CFG pair

    Raises:
        NoCandidates: the CFGs do not diverge
        NoAccFound: the largest divergence is not at an access-control check
    """
    winner, merged, _ = find_divergence(a, d)
    try:
        acc = AccRef.for_block(prog, *winner)
    except UnknownAcc as exc:
        raise NoAccFound(f"Largest divergence at {winner[0]}/{winner[1]} is not a check: {exc}") from exc
    logger.info(f"Final ACC for {a.request.object if a.request else '?'}: {acc.check_id} in {acc.function}")
    return acc, merged


# ========================
# STEP 3: STATIC ANALYSIS
# ========================
Segment = Tuple[str, str, int]


class FlowGraph:
    """
    Interprocedural control flow of a program at call-segment granularity

    A block with k calls has k + 1 segments; segment i ends with call i, the
    last one ends with the block terminator. Calls enter the callee; returns
    continue at the matching call site, or at every call site when the
    calling context is unknown.
    """

    def __init__(self, prog: IrProgram):
        self.prog = prog
        self.calls: Dict[Node, List[str]] = {}
        self.return_sites: Dict[str, List[Segment]] = defaultdict(list)
        for fn in prog.functions.values():
            for block in fn.blocks:
                callees = [stmt.fn for stmt in block.statements if isinstance(stmt, Call)]
                self.calls[(fn.name, block.label)] = callees
                for index, callee in enumerate(callees):
                    self.return_sites[callee].append((fn.name, block.label, index + 1))
        self._after_cache: Dict[Node, Set[Node]] = {}

    def last_segment(self, node: Node) -> Segment:
        return (node[0], node[1], len(self.calls[node]))

    def _step(self, segment: Segment, stack: Tuple[Segment, ...]):
        function, label, index = segment
        callees = self.calls[(function, label)]
        if index < len(callees):
            callee = self.prog.function(callees[index])
            resume = (function, label, index + 1)
            if len(stack) < MAX_CALL_DEPTH:
                yield (callee.name, callee.entry_block.label, 0), stack + (resume,)
            else:
                yield resume, stack
            return
        term = self.prog.function(function).block(label).terminator
        if isinstance(term, Return):
            if stack:
                yield stack[-1], stack[:-1]
            else:
                for site in self.return_sites.get(function, ()):
                    yield site, ()
            return
        for successor in term.successors():
            yield (function, successor, 0), stack

    def after(self, node: Node) -> Set[Node]:
        """Blocks whose terminators can execute after the terminator of `node`"""
        if node in self._after_cache:
            return self._after_cache[node]
        function, label = node
        term = self.prog.function(function).block(label).terminator
        if isinstance(term, Return):
            starts = [(site, ()) for site in self.return_sites.get(function, ())]
        else:
            starts = [((function, successor, 0), ()) for successor in term.successors()]

        seen = set()
        reached: Set[Node] = set()
        queue = deque(starts)
        while queue:
            state = queue.popleft()
            if state in seen:
                continue
            seen.add(state)
            segment, stack = state
            if segment[2] == len(self.calls[segment[:2]]):
                reached.add(segment[:2])
            queue.extend(self._step(segment, stack))
        self._after_cache[node] = reached
        return reached

    def functions_of(self, nodes: Iterable[Node]) -> Set[str]:
        return {fn for fn, _ in nodes}


@dataclass
class ExpandedCfg:
    """A merged dynamic CFG with statically expanded functions spliced in"""
    merged: MergedCfg
    flow: FlowGraph
    spliced: Set[str] = field(default_factory=set)

    @classmethod
    def of(cls, cfg, prog: IrProgram) -> "ExpandedCfg":
        if isinstance(cfg, ExpandedCfg):
            return cfg
        return cls(cfg, FlowGraph(prog))

    @property
    def key(self):
        return self.merged.key

    @property
    def graph(self) -> nx.DiGraph:
        """The dynamic graph plus the blocks and edges of spliced functions"""
        graph = self.merged.graph.copy()
        for name in sorted(self.spliced):
            fn = self.flow.prog.function(name)
            for block in fn.blocks:
                if (name, block.label) not in graph:
                    graph.add_node((name, block.label), color=None, seq=None, static=True)
                for successor in block.terminator.successors():
                    graph.add_edge((name, block.label), (name, successor))
        return graph

    def static_expand(self, functions: Iterable[str]) -> None:
        dynamic = {fn for fn, _ in self.merged.graph.nodes}
        new = set(functions) - dynamic - self.spliced
        if new:
            logger.debug(f"Statically expanding functions {sorted(new)}")
        self.spliced |= new


def forward_analysis(
    acc: AccRef,
    cfg,
    prog: IrProgram,
    tags: Optional[AccTags] = None,
) -> Tuple[Set[AccRef], ExpandedCfg]:
    """The ACC itself plus every ACC that can execute after it"""
    tags = tags or AccTags.harvest([acc])
    expanded = ExpandedCfg.of(cfg, prog)
    after = expanded.flow.after(acc.node)
    expanded.static_expand(expanded.flow.functions_of(after))

    to_add = {acc}
    for function, block in sorted(after):
        if tags.is_acc(prog, function, block):
            to_add.add(AccRef.for_block(prog, function, block))
    return to_add, expanded


def backward_analysis(
    acc: AccRef,
    cfg,
    prog: IrProgram,
    tags: Optional[AccTags] = None,
    mode: BackwardMode = BackwardMode.PRIOR,
) -> Tuple[Set[AccRef], ExpandedCfg]:
    """
    ACCs to delete because of ACCs performed before `acc`

    PRIOR deletes the earlier ACCs, which cannot be final while `acc`
    follows them. LITERAL deletes `acc` itself as soon as any ACC precedes it.
    """
    tags = tags or AccTags.harvest([acc])
    expanded = ExpandedCfg.of(cfg, prog)

    prior = set()
    for fn, block in prog.checks():
        node = (fn.name, block.label)
        if node == acc.node or not tags.is_acc(prog, *node):
            continue
        if acc.node in expanded.flow.after(node):
            prior.add(AccRef.for_block(prog, *node))
    expanded.static_expand(acc.function for acc in prior)

    if BackwardMode(mode) is BackwardMode.LITERAL:
        return ({acc} if prior else set()), expanded
    return prior, expanded


def find_final_accs(
    pairs: List[Tuple[AccRef, object]],
    prog: IrProgram,
    mode: BackwardMode = BackwardMode.PRIOR,
) -> AccSet:
    """
    Grow the final ACC candidates forward, then prune them backward

    Raises:
        EmptyResult: every candidate got deleted
    """
    tags = AccTags.harvest(acc for acc, _ in pairs)
    work: List[Tuple[AccRef, ExpandedCfg]] = []
    seen = set()

    def enqueue(acc: AccRef, cfg):
        expanded = ExpandedCfg.of(cfg, prog)
        marker = (acc, expanded.key)
        if marker not in seen:
            seen.add(marker)
            work.append((acc, expanded))

    for acc, cfg in pairs:
        enqueue(acc, cfg)

    candidates: Set[AccRef] = set()
    index = 0
    while index < len(work):
        acc, cfg = work[index]
        index += 1
        to_add, expanded = forward_analysis(acc, cfg, prog, tags)
        candidates |= to_add
        for added in sorted(to_add):
            enqueue(added, expanded)

    index = 0
    while index < len(work):
        acc, cfg = work[index]
        index += 1
        to_delete, expanded = backward_analysis(acc, cfg, prog, tags, mode)
        candidates -= to_delete
        for deleted in sorted(to_delete):
            enqueue(deleted, expanded)

    if not candidates:
        raise EmptyResult("Every final ACC candidate was deleted; the trace tuples contradict each other")
    logger.info(f"Final ACCs: {sorted(acc.check_id for acc in candidates)}")
    return AccSet(frozenset(candidates))


# ========================
# REWRITES
# ========================
def trim_advanced(prog: IrProgram, finals: AccSet) -> IrProgram:
    """
    Rewrite every final ACC into a probe that logs the check result and
    always takes the deny branch. Nothing else changes.

    Raises:
        UnknownAcc: a final ACC does not name a check of the program
    """
    replacements = {}
    for acc in finals:
        try:
            block = prog.function(acc.function).block(acc.block)
        except IrError as exc:
            raise UnknownAcc(f"{acc.check_id}: {exc}") from exc
        term = block.terminator
        if not isinstance(term, CondCheck) or term.check_id != acc.check_id:
            raise UnknownAcc(f"{acc.function}/{acc.block} has no check {acc.check_id!r}")
        probe = Probe(term.check_id, term.predicate, term.deny_label, term.fn_tag)
        replacements[acc.node] = BasicBlock(block.label, block.statements, probe)

    if not replacements:
        return prog
    trimmed = validate_program(prog.replace_blocks(replacements))
    logger.info(f"Advanced trim rewrote {len(replacements)} checks into probes")
    return trimmed


def trim_strawman(prog: IrProgram) -> IrProgram:
    """Replace every entry-handler call to a sub-handler with an ALLOW log"""
    roles = prog.roles
    entry = prog.function(prog.entry)
    replacements = {}
    for block in entry.blocks:
        statements = tuple(
            Log(Decision.ALLOW) if isinstance(stmt, Call) and roles[stmt.fn] is Role.SUB else stmt
            for stmt in block.statements
        )
        if statements != block.statements:
            replacements[(entry.name, block.label)] = BasicBlock(block.label, statements, block.terminator)

    if not replacements:
        return prog
    logger.info(f"Strawman trim removed sub-handler calls from {len(replacements)} blocks")
    return validate_program(prog.replace_blocks(replacements))
