"""Impact analysis and incremental maintenance of an established case.

The dataflow graph is built by unfolding the call tree from the top goal.
Every argument position carries the set of *symbols* it depends on: the
top-level input names, or a fresh symbol for each body-local variable of
each rule application. Head parameters alias the caller's symbols, so an
input keeps its identity while it is passed down unchanged; a value that
comes out of a goal's output position is a new symbol produced by that
goal. Walking the tree left to right tells, for every occurrence, which of
its symbols were already bound when it was called (it consumes them) and
which it binds (it produces them).
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Union

from etb.claims import ClaimStatus, ClaimsTable
from etb.engine import CounterExample, Query, Solver
from etb.lang import Rule, Workflow, top_adornment
from etb.terms import ListTerm, Term, Var, is_ground
from etb.toolbus import ToolInvocation, ToolManifest

MAX_OCCURRENCES = 20_000

# A symbolic value: a set of symbols, or a list of symbolic values.
SymVal = Union[frozenset, tuple]


def _syms(v: SymVal) -> frozenset[str]:
    if isinstance(v, frozenset):
        return v
    out: frozenset[str] = frozenset()
    for e in v:
        out |= _syms(e)
    return out


class UnknownVariable(KeyError):
    """A changed variable is not a top-level input."""

    def __str__(self) -> str:
        return f"unknown input variable: {self.args[0]}"


class NoPriorCase(LookupError):
    """The claims table holds no established root claim to maintain."""


@dataclass
class Occurrence:
    id: int
    predicate: str
    args: tuple[SymVal, ...]
    parent: int | None
    depth: int
    consumes: frozenset[str] = frozenset()
    produces: frozenset[str] = frozenset()
    children: list[int] = field(default_factory=list)

    @property
    def symbols(self) -> frozenset[str]:
        out: frozenset[str] = frozenset()
        for a in self.args:
            out |= _syms(a)
        return out


@dataclass(frozen=True)
class Edge:
    producer: int
    variable: str
    consumer: int


@dataclass
class DataflowGraph:
    """Goal occurrences of the unfolded call tree and the value flow
    between them. ``input_edges`` pairs each top-level input with every
    occurrence whose arguments mention it."""

    top: str | None
    inputs: tuple[str, ...]
    nodes: list[Occurrence] = field(default_factory=list)
    edges: list[Edge] = field(default_factory=list)
    input_edges: list[tuple[str, int]] = field(default_factory=list)

    @property
    def goals(self) -> list[str]:
        """Predicates of the call tree, in first-visit order."""
        return list(dict.fromkeys(n.predicate for n in self.nodes))

    def ancestors(self, i: int) -> list[int]:
        out = []
        p = self.nodes[i].parent
        while p is not None:
            out.append(p)
            p = self.nodes[p].parent
        return out

    def named_edges(self) -> set[tuple[str, str, str]]:
        """Edges as (producer predicate, variable name, consumer predicate);
        fresh symbols are shown under their source variable name."""
        return {
            (self.nodes[e.producer].predicate, e.variable.split("#", 1)[0], self.nodes[e.consumer].predicate)
            for e in self.edges
        }

    def named_input_edges(self) -> set[tuple[str, str]]:
        return {(x, self.nodes[i].predicate) for x, i in self.input_edges}


class _Builder:
    def __init__(self, w: Workflow, inputs: Iterable[str]):
        self.w = w
        self.g = DataflowGraph(w.top_goal, tuple(inputs))
        self.intensional = w.intensional

    def symval(self, t: Term, env: dict[str, SymVal], occ: int) -> SymVal:
        if isinstance(t, Var):
            if t.name not in env:
                env[t.name] = frozenset({f"{t.name}#{occ}"})
            return env[t.name]
        if isinstance(t, ListTerm):
            return tuple(self.symval(e, env, occ) for e in t.elements)
        return frozenset()

    def align(self, h: Term, v: SymVal, env: dict[str, SymVal]) -> None:
        if isinstance(h, Var):
            env[h.name] = v if h.name not in env else _syms(env[h.name]) | _syms(v)
        elif isinstance(h, ListTerm):
            if isinstance(v, tuple) and len(v) == len(h.elements):
                for he, ve in zip(h.elements, v):
                    self.align(he, ve, env)
            else:
                for he in h.elements:
                    self.align(he, _syms(v), env)

    def occurrence(self, pred: str, args: tuple[SymVal, ...], parent: int | None, depth: int,
                   bound: set[str]) -> set[str]:
        if len(self.g.nodes) >= MAX_OCCURRENCES:
            raise ValueError("call tree too large for dataflow analysis")
        occ = Occurrence(len(self.g.nodes), pred, args, parent, depth)
        self.g.nodes.append(occ)
        if parent is not None:
            self.g.nodes[parent].children.append(occ.id)
        syms = occ.symbols
        entry = set(bound)
        after = set(bound)
        if pred in self.intensional and depth < 64:
            for rule in self.w.rules_for(pred):
                after |= self.expand(rule, occ, entry)
        else:
            after |= syms
        occ.consumes = frozenset(syms & entry)
        occ.produces = frozenset((syms & after) - entry)
        return after

    def expand(self, rule: Rule, occ: Occurrence, entry: set[str]) -> set[str]:
        env: dict[str, SymVal] = {}
        for h, v in zip(rule.head.args, occ.args):
            self.align(h, v, env)
        bound = set(entry)
        for b in rule.body:
            # ids are assigned on creation, so the next node id is the child's
            args = tuple(self.symval(a, env, len(self.g.nodes)) for a in b.args)
            bound = self.occurrence(b.predicate, args, occ.id, occ.depth + 1, bound)
        return bound


def build_dataflow(w: Workflow, inputs: Iterable[str] | None = None) -> DataflowGraph:
    """Unfold ``w`` from its top goal and connect producers to consumers.

    ``inputs`` names the top-level input variables; by default they are the
    IN positions of the top goal's ``#mode`` declaration, or every head
    variable of the top goal when it has none.
    """
    top = w.top_goal
    if top is None:
        return DataflowGraph(None, ())
    names = w.head_variable_names(top)
    if inputs is None:
        if w.mode_decl(top) is not None:
            inputs = [n for n, is_in in zip(names, top_adornment(w, top)) if is_in]
        else:
            inputs = list(names)
    b = _Builder(w, inputs)
    g = b.g
    b.occurrence(top, tuple(frozenset({n}) for n in names), None, 0, set(g.inputs))

    anc = [set(g.ancestors(i)) for i in range(len(g.nodes))]
    producers: dict[str, list[int]] = {}
    consumers: dict[str, list[int]] = {}
    for n in g.nodes:
        for x in sorted(n.produces):
            producers.setdefault(x, []).append(n.id)
        for x in sorted(n.consumes):
            consumers.setdefault(x, []).append(n.id)
        for x in g.inputs:
            if x in n.symbols:
                g.input_edges.append((x, n.id))
    for x in sorted(producers):
        for p in producers[x]:
            for c in consumers.get(x, ()):
                if p != c and p not in anc[c] and c not in anc[p]:
                    g.edges.append(Edge(p, x, c))
    return g


class ImpactStatus(str, enum.Enum):
    DIRECT = "DIRECT"
    INDIRECT = "INDIRECT"
    UNAFFECTED = "UNAFFECTED"


@dataclass
class ImpactReport:
    changed_inputs: tuple[str, ...]
    direct: set[str]
    indirect: set[str]
    unaffected: set[str]
    order: list[str] = field(default_factory=list)

    def status(self, goal: str) -> ImpactStatus:
        if goal in self.direct:
            return ImpactStatus.DIRECT
        if goal in self.indirect:
            return ImpactStatus.INDIRECT
        return ImpactStatus.UNAFFECTED

    def rows(self) -> list[tuple[str, ImpactStatus]]:
        return [(g, self.status(g)) for g in self.order]

    def to_json(self) -> dict:
        return {
            "changed_inputs": list(self.changed_inputs),
            "goals": [{"goal": g, "status": s.value} for g, s in self.rows()],
            "direct": sorted(self.direct),
            "indirect": sorted(self.indirect),
            "unaffected": sorted(self.unaffected),
        }


def impact(g: DataflowGraph, changed: Iterable[str]) -> ImpactReport:
    """Classify the goals of ``g`` for a change of the given inputs.

    Direct goals mention a changed input among their arguments. Indirect
    goals are reached from an impacted goal along producer-to-consumer
    edges, or are ancestors of an impacted goal.

    Raises:
        UnknownVariable: a name is not a top-level input of ``g``.
    """
    changed = tuple(dict.fromkeys(changed))
    for x in changed:
        if x not in g.inputs:
            raise UnknownVariable(x)
    direct_occ = {n.id for n in g.nodes if n.symbols & set(changed)}
    succ: dict[int, list[int]] = {}
    for e in g.edges:
        succ.setdefault(e.producer, []).append(e.consumer)
    seen = set(direct_occ)
    queue = deque(sorted(direct_occ))
    while queue:
        i = queue.popleft()
        nxt = list(succ.get(i, ()))
        nxt += g.ancestors(i)
        for j in nxt:
            if j not in seen:
                seen.add(j)
                queue.append(j)
    order = g.goals
    direct = {g.nodes[i].predicate for i in direct_occ}
    indirect = {g.nodes[i].predicate for i in seen} - direct
    unaffected = set(order) - direct - indirect
    return ImpactReport(changed, direct, indirect, unaffected, order)


class Outcome(str, enum.Enum):
    UPDATED_CASE = "UPDATED_CASE"
    COUNTEREXAMPLE = "COUNTEREXAMPLE"


@dataclass
class MaintenanceResult:
    outcome: Outcome
    report: ImpactReport
    rerun: list[tuple[str, str]] = field(default_factory=list)
    revalidated: list[str] = field(default_factory=list)
    new_claims: list[str] = field(default_factory=list)
    stale_claims: list[str] = field(default_factory=list)
    invocations: list[ToolInvocation] = field(default_factory=list)
    counterexample: CounterExample | None = None

    @property
    def rerun_goals(self) -> list[str]:
        return list(dict.fromkeys(g for g, _ in self.rerun))

    def to_json(self) -> dict:
        return {
            "outcome": self.outcome.value,
            "rerun": [{"goal": g, "outcome": o} for g, o in self.rerun],
            "revalidated": self.revalidated,
            "new_claims": self.new_claims,
            "stale_claims": self.stale_claims,
            "tool_invocations": [i.predicate for i in self.invocations],
            "counterexample": self.counterexample.to_json() if self.counterexample else None,
        }


def maintain(
    w: Workflow,
    registry: Mapping[str, ToolManifest],
    table: ClaimsTable,
    changed_bindings: Mapping[str, Term],
    workspace: Union[str, Path],
    **solver_options,
) -> MaintenanceResult:
    """Re-establish the case in ``table`` after some inputs changed.

    Directly impacted goals are re-executed. Every other goal reuses its
    claim when the values reaching its inputs are unchanged (claims of
    indirectly impacted goals kept this way become REVALIDATED) and is
    re-run otherwise. On success, claims the new case no longer relies on
    become STALE; on failure the table keeps every claim and the previous
    root.

    Raises:
        NoPriorCase: no live root claim.
        UnknownVariable: a changed name was not an input of the prior run.
    """
    root = table.live(table.root) if table.root else None
    if root is None or table.goal is None:
        raise NoPriorCase("no established assurance case to maintain")
    for name, term in changed_bindings.items():
        if name not in table.input_bindings:
            raise UnknownVariable(name)
        if not is_ground(term):
            raise ValueError(f"binding for {name} is not ground")
    graph = build_dataflow(w, table.input_bindings)
    report = impact(graph, changed_bindings)
    bindings = dict(table.input_bindings)
    bindings.update(changed_bindings)
    before = {c.id for c in table.live_claims()}
    solver = Solver(w, registry, table, workspace, force=frozenset(report.direct), **solver_options)
    result = solver.run(Query(table.goal, bindings))

    rerun = [(table.get(cid).atom.predicate, "ESTABLISHED") for cid in solver.recorded]  # type: ignore[union-attr]
    out = MaintenanceResult(Outcome.UPDATED_CASE, report, rerun=rerun,
                            new_claims=list(solver.recorded), invocations=list(solver.invocations))
    if isinstance(result, CounterExample):
        out.outcome = Outcome.COUNTEREXAMPLE
        out.counterexample = result
        out.rerun.append((result.failed.predicate, result.cause.value))
        out.stale_claims = _superseded(table, before, solver.recorded)
        return out

    rerun_preds = {g for g, _ in rerun}
    revalidated: dict[str, None] = {}
    for cid in solver.reused:
        c = table.get(cid)
        if c is not None and c.atom.predicate in report.indirect:
            table.set_status(cid, ClaimStatus.REVALIDATED)
            if c.atom.predicate not in rerun_preds:
                revalidated[c.atom.predicate] = None
    for c in table.live_claims():
        if c.id not in solver.touched:
            table.set_status(c.id, ClaimStatus.STALE)
    out.revalidated = list(revalidated)
    out.stale_claims = _superseded(table, before, solver.recorded)
    return out


def _superseded(table: ClaimsTable, before: set[str], recorded: Mapping[str, None]) -> list[str]:
    # a re-recorded claim keeps its id; its previous revision is the stale one
    return sorted(cid for cid in before if cid in recorded or table.live(cid) is None)


def changed_inputs(old: Mapping[str, Term], new: Mapping[str, Term]) -> list[str]:
    """Names whose bound value differs between two binding maps."""
    return [k for k in new if old.get(k) != new[k]]
