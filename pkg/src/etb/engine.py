"""Top-down, left-to-right evaluation of assurance workflows.

Intensional goals are expanded with their rules in source order, body goals
are solved strictly left to right, and extensional goals are discharged by
tools (locally or through a peer node). Every goal that succeeds leaves an
ESTABLISHED claim in the claims table; a high-level claim is recorded only
after all of its sub-claims exist. The first complete derivation wins; if
there is none the result is a :class:`CounterExample` naming the first
step that failed.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Mapping, Protocol, Sequence, Union

from etb.claims import (
    Claim,
    ClaimKind,
    ClaimsTable,
    EvidenceStore,
    FactSupport,
    RuleSupport,
    ToolSupport,
    etb_dir,
)
from etb.lang import ModeSpec, Rule, Workflow, extensional_modes, top_adornment
from etb.terms import (
    Atom,
    ListTerm,
    Term,
    Var,
    apply,
    atom_is_ground,
    canonical,
    is_ground,
    rename_atom,
    resolve,
    unify,
    unify_atoms,
)
from etb.toolbus import ToolError, ToolInvocation, ToolManifest, invoke_tool

MAX_DEPTH = 256


class Cause(str, enum.Enum):
    TOOL_FAILURE = "ToolFailure"
    CAPTURE_ERROR = "CaptureError"
    TIMEOUT = "Timeout"
    NO_RULE_APPLIES = "NoRuleApplies"
    MODE_VIOLATION = "ModeViolation"
    NO_PROVIDER_FOUND = "NoProviderFound"
    TRANSPORT_ERROR = "TransportError"
    HASH_MISMATCH = "HashMismatch"


@dataclass
class Query:
    goal: str
    bindings: dict[str, Term] = field(default_factory=dict)


@dataclass
class Derivation:
    atom: Atom
    claim_id: str
    step: str
    children: list["Derivation"] = field(default_factory=list)

    def walk(self) -> Iterator["Derivation"]:
        yield self
        for c in self.children:
            yield from c.walk()

    def claim_ids(self) -> list[str]:
        return [d.claim_id for d in self.walk()]


@dataclass
class CounterExample:
    path: list[Atom]
    cause: Cause
    detail: str = ""

    @property
    def failed(self) -> Atom:
        return self.path[-1]

    def to_json(self) -> dict:
        return {"path": [canonical(a) for a in self.path], "cause": self.cause.value, "detail": self.detail}

    def render(self) -> str:
        lines = [("  " * i) + canonical(a) for i, a in enumerate(self.path)]
        lines.append(f"cause: {self.cause.value}")
        if self.detail:
            lines.append(f"detail: {self.detail}")
        return "\n".join(lines)

    def write(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, ensure_ascii=False) + "\n")


class RemoteError(Exception):
    """A remote discharge failed; ``cause`` says how."""

    def __init__(self, message: str, cause: Cause = Cause.TRANSPORT_ERROR):
        super().__init__(message)
        self.cause = cause


class RemoteResolver(Protocol):
    """Something that discharges an extensional goal on another node."""

    def resolve(self, predicate: str, modes: ModeSpec, in_args: tuple[Term, ...],
                store: EvidenceStore) -> Claim: ...

    def services(self) -> Mapping[str, ModeSpec]: ...


Invoker = Callable[[ToolManifest, Sequence[Term], Path, EvidenceStore], ToolInvocation]


def _display(atom: Atom) -> Atom:
    """Strip the renaming suffixes the solver adds to rule variables."""

    def clean(t: Term) -> Term:
        if isinstance(t, Var):
            return Var(t.name.split("__", 1)[0])
        if isinstance(t, ListTerm):
            return ListTerm(tuple(clean(e) for e in t.elements))
        return t

    return Atom(atom.predicate, tuple(clean(a) for a in atom.args))


def query_atom(w: Workflow, goal: str, ext_modes: Mapping[str, ModeSpec]) -> tuple[Atom, tuple[bool, ...]]:
    """The open atom a query for ``goal`` starts from, and its input positions."""
    names = w.head_variable_names(goal)
    if goal in ext_modes and goal not in w.intensional:
        inputs = tuple(m.value == "+" for m in ext_modes[goal].modes)
        if not names:
            names = [f"Arg{i + 1}" for i in range(ext_modes[goal].arity)]
    else:
        inputs = top_adornment(w, goal)
    return Atom(goal, tuple(Var(n) for n in names)), inputs


class Solver:
    """One evaluation run over a claims table.

    ``force`` names predicates whose goals are re-executed even when a live
    claim could be reused (maintenance uses it for directly impacted goals).
    After :meth:`run`, ``touched`` holds every claim the run relied on or
    produced, ``recorded`` the ones it newly wrote and ``reused`` the ones it
    took over unchanged from the table.
    """

    def __init__(
        self,
        w: Workflow,
        registry: Mapping[str, ToolManifest],
        table: ClaimsTable,
        workspace: Union[str, Path],
        *,
        remote: RemoteResolver | None = None,
        invoker: Invoker = invoke_tool,
        node_id: str = "local",
        force: frozenset[str] | set[str] = frozenset(),
        on_record: Callable[[Claim], None] | None = None,
    ):
        self.w = w
        self.registry = dict(registry)
        self.table = table
        if table.store is None:
            table.store = EvidenceStore(etb_dir(workspace))
        self.store = table.store
        self.workspace = Path(workspace)
        self.workdir = etb_dir(workspace) / "work"
        self.remote = remote
        self.invoker = invoker
        self.node_id = node_id
        self.force = frozenset(force)
        self.on_record = on_record

        remote_specs = list(remote.services().values()) if remote is not None else []
        self.ext_modes = extensional_modes(w, [m.modes for m in self.registry.values()] + remote_specs)
        self.intensional = w.intensional
        self.facts = w.fact_predicates

        self.failure: CounterExample | None = None
        self.invocations: list[ToolInvocation] = []
        self.calls: list[str] = []
        self.touched: dict[str, None] = {}
        self.recorded: dict[str, None] = {}
        self.reused: dict[str, None] = {}
        self._memo: dict[tuple[str, tuple[Term, ...]], Claim | tuple[Cause, str]] = {}
        self._tool_index: dict[str, dict[tuple[Term, ...], Claim]] = {}
        self._counter = 0

    # -- bookkeeping ---------------------------------------------------------

    def _fail(self, path: tuple[Atom, ...], s: Mapping, cause: Cause, detail: str) -> None:
        if self.failure is None:
            atoms = [_display(apply(a, s)) for a in path]
            self.failure = CounterExample(atoms, cause, detail)

    def _touch(self, c: Claim, new: bool) -> None:
        self.touched[c.id] = None
        (self.recorded if new else self.reused)[c.id] = None

    def _record(self, c: Claim) -> Claim:
        self.table.record(c)
        self._touch(c, True)
        if self.on_record is not None:
            self.on_record(c)
        return c

    def _index_for(self, pred: str, modes: ModeSpec) -> dict[tuple[Term, ...], Claim]:
        idx = self._tool_index.get(pred)
        if idx is None:
            idx = {}
            for c in self.table.by_predicate(pred):
                if isinstance(c.provenance, ToolSupport) and c.atom.arity == modes.arity:
                    idx[tuple(c.atom.args[i] for i in modes.in_positions)] = c
            self._tool_index[pred] = idx
        return idx

    # -- resolution ----------------------------------------------------------

    def run(self, q: Query) -> Derivation | CounterExample:
        if q.goal not in self.intensional | self.facts and q.goal not in self.ext_modes:
            return CounterExample([Atom(q.goal)], Cause.NO_RULE_APPLIES, f"{q.goal} is not defined")
        goal, inputs = query_atom(self.w, q.goal, self.ext_modes)
        known = {v.name for v in goal.args if isinstance(v, Var)}
        unknown = set(q.bindings) - known
        if unknown:
            raise ValueError("unknown input variable(s): " + ", ".join(sorted(unknown)))
        for arg, is_in in zip(goal.args, inputs):
            if is_in and isinstance(arg, Var) and arg.name not in q.bindings:
                raise ValueError(f"input variable {arg.name} of {q.goal} is not bound")
        s: dict[Var, Term] = {}
        for name, term in q.bindings.items():
            if not is_ground(term):
                raise ValueError(f"binding for {name} is not ground")
            s[Var(name)] = term
        gen = self._goal(goal, s, (), 0)
        try:
            first = next(gen, None)
        finally:
            gen.close()
        if first is None:
            return self.failure or CounterExample([_display(apply(goal, s))], Cause.NO_RULE_APPLIES, "no derivation")
        _, derivation = first
        self.table.root = derivation.claim_id
        self.table.goal = q.goal
        self.table.input_bindings = dict(q.bindings)
        return derivation

    def _goal(self, goal: Atom, s: dict, path: tuple[Atom, ...], depth: int) -> Iterator[tuple[dict, Derivation]]:
        here = path + (goal,)
        if depth > MAX_DEPTH:
            self._fail(here, s, Cause.NO_RULE_APPLIES, "derivation too deep (recursive workflow?)")
            return
        pred = goal.predicate
        if pred in self.intensional:
            yield from self._intensional(goal, s, here, depth)
        elif pred in self.facts:
            yield from self._fact(goal, s, here)
        else:
            yield from self._extensional(goal, s, here)

    def _body(self, body: Sequence[Atom], i: int, s: dict, path: tuple[Atom, ...], depth: int
              ) -> Iterator[tuple[dict, list[Derivation]]]:
        if i == len(body):
            yield s, []
            return
        for s1, d in self._goal(body[i], s, path, depth + 1):
            for s2, rest in self._body(body, i + 1, s1, path, depth):
                yield s2, [d, *rest]

    def _intensional(self, goal: Atom, s: dict, path: tuple[Atom, ...], depth: int):
        matched = False
        for rule in self.w.rules_for(goal.predicate):
            self._counter += 1
            suffix = str(self._counter)
            head = rename_atom(rule.head, suffix)
            s1 = unify_atoms(goal, head, s)
            if s1 is None:
                continue
            matched = True
            body = [rename_atom(b, suffix) for b in rule.body]
            for s2, subs in self._body(body, 0, s1, path, depth):
                atom = apply(goal, s2)
                if not atom_is_ground(atom) or not subs:
                    self._fail(path, s2, Cause.MODE_VIOLATION, f"{rule.ref} does not ground its head")
                    continue
                claim = self._rule_claim(atom, rule, [d.claim_id for d in subs])
                yield s2, Derivation(atom, claim.id, rule.ref, subs)
        if not matched:
            self._fail(path, s, Cause.NO_RULE_APPLIES, f"no rule for {goal.predicate} matches")

    def _rule_claim(self, atom: Atom, rule: Rule, subs: list[str]) -> Claim:
        support = RuleSupport(rule.ref, tuple(subs))
        existing = self.table.lookup(atom)
        if existing is not None and existing.provenance == support:
            if existing.id in self.recorded:
                return existing
            if atom.predicate not in self.force:
                self._touch(existing, False)
                return existing
        return self._record(Claim(atom, ClaimKind.HIGH_LEVEL, support, node=self.node_id))

    def _fact(self, goal: Atom, s: dict, path: tuple[Atom, ...]):
        matched = False
        for fact in self.w.facts_for(goal.predicate):
            s1 = unify_atoms(goal, fact, s)
            if s1 is None:
                continue
            matched = True
            existing = self.table.lookup(fact)
            if existing is not None and isinstance(existing.provenance, FactSupport):
                if existing.id not in self.recorded:
                    self._touch(existing, False)
                claim = existing
            else:
                claim = self._record(Claim(fact, ClaimKind.LOW_LEVEL, FactSupport(), node=self.node_id))
            yield s1, Derivation(fact, claim.id, "fact")
        if not matched:
            self._fail(path, s, Cause.NO_RULE_APPLIES, f"no fact matches {_display(apply(goal, s))}")

    def _extensional(self, goal: Atom, s: dict, path: tuple[Atom, ...]):
        pred = goal.predicate
        modes = self.ext_modes.get(pred)
        if modes is None:
            self._fail(path, s, Cause.NO_PROVIDER_FOUND, f"no tool provides {pred}")
            return
        in_args = tuple(resolve(goal.args[i], s) for i in modes.in_positions)
        if not all(is_ground(a) for a in in_args):
            self._fail(path, s, Cause.MODE_VIOLATION, f"input of {pred} is not ground at call time")
            return
        claim = self._discharge(pred, modes, in_args, path, s)
        if claim is None:
            return
        s1: dict | None = s
        for i in modes.out_positions:
            s1 = unify(goal.args[i], claim.atom.args[i], s1)
            if s1 is None:
                self._fail(path, s, Cause.NO_RULE_APPLIES,
                           f"output of {canonical(claim.atom)} does not match {_display(apply(goal, s))}")
                return
        step = "tool" if claim.node == self.node_id else f"tool@{claim.node}"
        yield s1, Derivation(claim.atom, claim.id, step)

    def _discharge(self, pred: str, modes: ModeSpec, in_args: tuple[Term, ...],
                   path: tuple[Atom, ...], s: dict) -> Claim | None:
        key = (pred, in_args)
        if key in self._memo:
            c = self._memo[key]
            if isinstance(c, tuple):
                self._fail(path, s, c[0], f"{pred} already failed on these inputs: {c[1]}")
                return None
            return c
        idx = self._index_for(pred, modes)
        if pred not in self.force:
            prior = idx.get(in_args)
            if prior is not None and prior.live:
                self._touch(prior, False)
                self._memo[key] = prior
                return prior
        claim: Claim | None = None
        failed: tuple[Cause, str] = (Cause.NO_PROVIDER_FOUND, f"no tool provides {pred}")
        self.calls.append(pred)
        manifest = self.registry.get(pred)
        try:
            if manifest is not None:
                inv = self.invoker(manifest, in_args, self.workdir, self.store)
                self.invocations.append(inv)
                args: list[Term] = [None] * modes.arity  # type: ignore[list-item]
                for i, t in zip(modes.in_positions, in_args):
                    args[i] = t
                for i, t in zip(modes.out_positions, inv.outputs):
                    args[i] = t
                claim = Claim(Atom(pred, tuple(args)), ClaimKind.LOW_LEVEL,
                              ToolSupport(pred, tuple(inv.produced), inv.meta()), node=self.node_id)
            elif self.remote is not None:
                claim = self.remote.resolve(pred, modes, in_args, self.store)
        except (ToolError, RemoteError) as exc:
            if isinstance(exc, ToolError) and exc.invocation is not None:
                self.invocations.append(exc.invocation)
            failed = (Cause(exc.cause), str(exc))
        if claim is None:
            self._fail(path, s, *failed)
            self._memo[key] = failed
            return None
        claim = self._record(claim)
        idx[in_args] = claim
        self._memo[key] = claim
        return claim


def solve(
    w: Workflow,
    registry: Mapping[str, ToolManifest],
    q: Query,
    table: ClaimsTable,
    workspace: Union[str, Path],
    **options,
) -> Derivation | CounterExample:
    """Establish ``q`` and record its claims in ``table``.

    Tool failures, missing providers and unmatched goals come back as a
    :class:`CounterExample`; only malformed queries raise.
    """
    return Solver(w, registry, table, workspace, **options).run(q)
