"""The workflow dialect: a positive, non-recursive, moded Datalog.

A workflow file holds rules, ground facts and mode pragmas::

    #mode(g7_req_formalisation, "+-").

    %% strategy: argue over validation and formalisation of requirements
    g2_reqs(Reqs, Specs) :-
        g6_req_validation(Reqs),
        g7_req_formalisation(Reqs, Specs).

Rules keep source order, which is also the order in which the engine tries
them. :func:`validate_workflow` performs the static checks that make a
workflow executable: definedness, range restriction, left-to-right
well-modedness and absence of recursion.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Sequence

from etb.graphs import cyclic_components
from etb.terms import (
    ArtifactRef,
    Atom,
    Const,
    ListTerm,
    Term,
    Var,
    atom_is_ground,
    atom_vars,
    term_vars,
)

GRAMMAR_EBNF = r"""(* Workflow dialect, one statement per clause; '%' starts a comment. *)
workflow   = { statement } ;
statement  = pragma | clause ;
pragma     = "#mode" "(" predicate "," string ")" "." ;
clause     = [ strategy ] atom [ ":-" body ] "." ;
strategy   = "%%" "strategy:" text newline { "%%" "strategy:" text newline } ;
body       = atom { "," atom } ;
atom       = predicate [ "(" [ term { "," term } ] ")" ] ;
term       = variable | constant | list ;
list       = "[" [ term { "," term } ] "]" ;
constant   = symbol | string | integer | artifact ;
artifact   = "#" hexdigit * 64 ;  (* sha256 of an evidence artifact *)
predicate  = symbol ;
symbol     = lower { letter | digit | "_" } ;
variable   = upper { letter | digit | "_" } ;
integer    = [ "-" ] digit { digit } ;
string     = '"' { character - '"' | '\"' } '"' ;
(* mode strings contain only '+' (input) and '-' (output), one per argument *)
"""


class Mode(enum.Enum):
    IN = "+"
    OUT = "-"


@dataclass(frozen=True)
class ModeSpec:
    predicate: str
    modes: tuple[Mode, ...]

    @classmethod
    def parse(cls, predicate: str, text: str) -> "ModeSpec":
        bad = set(text) - {"+", "-"}
        if bad:
            raise ValueError(f"mode string {text!r} may only contain '+' and '-'")
        return cls(predicate, tuple(Mode(c) for c in text))

    @property
    def arity(self) -> int:
        return len(self.modes)

    @property
    def text(self) -> str:
        return "".join(m.value for m in self.modes)

    @property
    def in_positions(self) -> tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.modes) if m is Mode.IN)

    @property
    def out_positions(self) -> tuple[int, ...]:
        return tuple(i for i, m in enumerate(self.modes) if m is Mode.OUT)


@dataclass(frozen=True)
class Rule:
    head: Atom
    body: tuple[Atom, ...] = ()
    strategy_note: str | None = None
    ref: str = field(default="", compare=False)
    line: int = field(default=0, compare=False)

    def __str__(self) -> str:
        if not self.body:
            return f"{self.head}."
        return f"{self.head} :- " + ", ".join(str(b) for b in self.body) + "."


@dataclass(frozen=True)
class Workflow:
    rules: tuple[Rule, ...] = ()
    facts: tuple[Atom, ...] = ()
    mode_decls: tuple[ModeSpec, ...] = ()
    top_goal: str | None = None

    def rules_for(self, predicate: str) -> tuple[Rule, ...]:
        return tuple(r for r in self.rules if r.head.predicate == predicate)

    def facts_for(self, predicate: str) -> tuple[Atom, ...]:
        return tuple(f for f in self.facts if f.predicate == predicate)

    @property
    def intensional(self) -> set[str]:
        return {r.head.predicate for r in self.rules}

    @property
    def fact_predicates(self) -> set[str]:
        return {f.predicate for f in self.facts}

    def mode_decl(self, predicate: str) -> ModeSpec | None:
        for m in self.mode_decls:
            if m.predicate == predicate:
                return m
        return None

    def arities(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for r in self.rules:
            for a in (r.head, *r.body):
                out.setdefault(a.predicate, a.arity)
        for f in self.facts:
            out.setdefault(f.predicate, f.arity)
        for m in self.mode_decls:
            out.setdefault(m.predicate, m.arity)
        return out

    def rule_by_ref(self, ref: str) -> Rule | None:
        for r in self.rules:
            if r.ref == ref:
                return r
        return None

    def head_variable_names(self, predicate: str) -> list[str]:
        """Parameter names for ``predicate`` taken from its first rule head
        (positions holding non-variables get ``ArgN``)."""
        rules = self.rules_for(predicate)
        arity = self.arities().get(predicate, 0)
        names = [f"Arg{i + 1}" for i in range(arity)]
        if rules:
            for i, a in enumerate(rules[0].head.args):
                if isinstance(a, Var):
                    names[i] = a.name
        return names


# -- errors ------------------------------------------------------------------


class WorkflowError(Exception):
    """Base class for workflow construction errors."""


class WorkflowSyntaxError(WorkflowError, SyntaxError):
    def __init__(self, message: str, line: int, column: int, expected: Iterable[str] = ()):
        self.line = line
        self.column = column
        self.expected = frozenset(expected)
        text = f"{message} at line {line}, column {column}"
        if self.expected:
            text += " (expected " + " or ".join(sorted(self.expected)) + ")"
        super().__init__(text)
        self.lineno = line
        self.offset = column


class ArityMismatch(WorkflowError):
    def __init__(self, predicate: str, first: int, second: int, line: int = 0):
        self.predicate = predicate
        self.arities = (first, second)
        self.line = line
        super().__init__(f"predicate {predicate} used with arity {first} and {second}")


class ModeConflict(WorkflowError):
    pass


# -- lexer -------------------------------------------------------------------

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<nl>\n)
  | (?P<comment>%[^\n]*)
  | (?P<implies>:-)
  | (?P<hashref>\#[0-9a-f]{64}(?![A-Za-z0-9_]))
  | (?P<pragma>\#[a-z][A-Za-z0-9_]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<int>-?[0-9]+)
  | (?P<var>[A-Z][A-Za-z0-9_]*)
  | (?P<symbol>[a-z][A-Za-z0-9_]*)
  | (?P<punct>[()\[\],.])
    """,
    re.VERBOSE,
)

_STRATEGY_RE = re.compile(r"%%\s*strategy:\s*(.*)$", re.IGNORECASE)

_DESCR = {
    "symbol": "predicate",
    "var": "variable",
    "string": "string",
    "int": "integer",
    "implies": "':-'",
    "pragma": "pragma",
    "hashref": "artifact reference",
    "eof": "end of input",
}


@dataclass
class _Token:
    kind: str
    text: str
    line: int
    col: int
    note: str | None = None  # strategy text attached to the first token of a clause

    def describe(self) -> str:
        if self.kind == "punct":
            return repr(self.text)
        return _DESCR.get(self.kind, self.kind)


def _tokenize(text: str) -> list[_Token]:
    tokens: list[_Token] = []
    pos, line, line_start = 0, 1, 0
    pending: list[str] = []
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        col = pos - line_start + 1
        if m is None:
            raise WorkflowSyntaxError(f"unexpected character {text[pos]!r}", line, col)
        kind = m.lastgroup
        chunk = m.group()
        if kind == "nl":
            line += 1
            line_start = m.end()
        elif kind == "comment":
            sm = _STRATEGY_RE.match(chunk)
            if sm and sm.group(1).strip():
                pending.append(sm.group(1).strip())
        elif kind != "ws":
            tok = _Token(kind, chunk, line, col)
            if pending:
                tok.note = " ".join(pending)
                pending = []
            tokens.append(tok)
        pos = m.end()
    tokens.append(_Token("eof", "", line, pos - line_start + 1))
    return tokens


# -- parser ------------------------------------------------------------------


class _Parser:
    def __init__(self, text: str, allow_artifacts: bool = False):
        self.tokens = _tokenize(text)
        self.i = 0
        self.allow_artifacts = allow_artifacts

    @property
    def tok(self) -> _Token:
        return self.tokens[self.i]

    def fail(self, expected: Iterable[str]) -> WorkflowSyntaxError:
        t = self.tok
        return WorkflowSyntaxError(f"unexpected {t.describe()}", t.line, t.col, expected)

    def punct(self, ch: str) -> bool:
        if self.tok.kind == "punct" and self.tok.text == ch:
            self.i += 1
            return True
        return False

    def expect(self, ch: str, *alternatives: str) -> None:
        if not self.punct(ch):
            raise self.fail([repr(ch), *alternatives])

    def atom(self) -> Atom:
        t = self.tok
        if t.kind != "symbol":
            raise self.fail(["predicate"])
        self.i += 1
        args: list[Term] = []
        if self.punct("("):
            if not self.punct(")"):
                args.append(self.term())
                while self.punct(","):
                    args.append(self.term())
                self.expect(")", "','")
        return Atom(t.text, tuple(args))

    def term(self) -> Term:
        t = self.tok
        if t.kind == "var":
            self.i += 1
            return Var(t.text)
        if t.kind == "symbol":
            self.i += 1
            return Const(t.text)
        if t.kind == "int":
            self.i += 1
            return Const(int(t.text))
        if t.kind == "string":
            self.i += 1
            return Const(_unescape(t.text), quoted=True)
        if t.kind == "hashref" and self.allow_artifacts:
            self.i += 1
            return ArtifactRef(t.text[1:])
        if self.punct("["):
            elems: list[Term] = []
            if not self.punct("]"):
                elems.append(self.term())
                while self.punct(","):
                    elems.append(self.term())
                self.expect("]", "','")
            return ListTerm(tuple(elems))
        raise self.fail(["variable", "constant", "'['"])

    def pragma(self) -> ModeSpec:
        t = self.tok
        if t.text != "#mode":
            raise WorkflowSyntaxError(f"unknown pragma {t.text}", t.line, t.col, ["#mode"])
        self.i += 1
        self.expect("(")
        if self.tok.kind != "symbol":
            raise self.fail(["predicate"])
        pred = self.tok.text
        self.i += 1
        self.expect(",")
        if self.tok.kind != "string":
            raise self.fail(["string"])
        st = self.tok
        self.i += 1
        self.expect(")")
        self.expect(".")
        try:
            return ModeSpec.parse(pred, _unescape(st.text))
        except ValueError as exc:
            raise WorkflowSyntaxError(str(exc), st.line, st.col) from None

    def statements(self) -> Iterator[tuple[str, object, _Token]]:
        while self.tok.kind != "eof":
            start = self.tok
            if start.kind == "pragma":
                yield "mode", self.pragma(), start
                continue
            head = self.atom()
            body: list[Atom] = []
            if self.tok.kind == "implies":
                self.i += 1
                body.append(self.atom())
                while self.punct(","):
                    body.append(self.atom())
                self.expect(".", "','")
            else:
                self.expect(".", "':-'", "'('")
            yield "clause", (head, tuple(body)), start


def _unescape(quoted: str) -> str:
    import json

    return json.loads(quoted)


def parse_workflow(source_text: str) -> Workflow:
    """Parse workflow source text.

    Raises:
        WorkflowSyntaxError: malformed input, with line/column and the set
            of expected tokens.
        ArityMismatch: a predicate is used at two different arities.
        ModeConflict: two different ``#mode`` pragmas for one predicate.
    """
    parser = _Parser(source_text)
    rules: list[Rule] = []
    facts: list[Atom] = []
    modes: dict[str, ModeSpec] = {}
    arity: dict[str, tuple[int, int]] = {}
    counts: dict[str, int] = {}

    def note_arity(pred: str, n: int, line: int) -> None:
        if pred in arity and arity[pred][0] != n:
            raise ArityMismatch(pred, arity[pred][0], n, line)
        arity.setdefault(pred, (n, line))

    for kind, value, tok in parser.statements():
        if kind == "mode":
            spec: ModeSpec = value  # type: ignore[assignment]
            note_arity(spec.predicate, spec.arity, tok.line)
            if spec.predicate in modes and modes[spec.predicate] != spec:
                raise ModeConflict(f"conflicting #mode pragmas for {spec.predicate}")
            modes[spec.predicate] = spec
            continue
        head, body = value  # type: ignore[misc]
        for a in (head, *body):
            note_arity(a.predicate, a.arity, tok.line)
        if not body and atom_is_ground(head):
            facts.append(head)
            continue
        counts[head.predicate] = counts.get(head.predicate, 0) + 1
        ref = f"{head.predicate}/{head.arity}#{counts[head.predicate]}"
        rules.append(Rule(head, body, tok.note, ref=ref, line=tok.line))

    top = None
    for r in rules:
        if r.body:
            top = r.head.predicate
            break
    if top is None and rules:
        top = rules[0].head.predicate
    if top is None and facts:
        top = facts[0].predicate
    return Workflow(tuple(rules), tuple(facts), tuple(modes.values()), top)


def parse_atom(text: str) -> Atom:
    """Parse a single atom in canonical text; artifact references allowed."""
    p = _Parser(text, allow_artifacts=True)
    a = p.atom()
    if p.tok.kind != "eof":
        raise p.fail(["end of input"])
    return a


def parse_term(text: str) -> Term:
    """Parse a single term in canonical text; artifact references allowed."""
    p = _Parser(text, allow_artifacts=True)
    t = p.term()
    if p.tok.kind != "eof":
        raise p.fail(["end of input"])
    return t


def format_workflow(w: Workflow) -> str:
    """Render ``w`` back to source text that parses to an equal workflow."""
    out: list[str] = []
    for m in w.mode_decls:
        out.append(f'#mode({m.predicate}, "{m.text}").')
    if w.mode_decls:
        out.append("")
    for r in w.rules:
        if r.strategy_note:
            out.append(f"%% strategy: {r.strategy_note}")
        if not r.body:
            out.append(f"{r.head}.")
            continue
        out.append(f"{r.head} :-")
        for j, b in enumerate(r.body):
            out.append(f"    {b}" + ("." if j == len(r.body) - 1 else ","))
    for f in w.facts:
        out.append(f"{f}.")
    return "\n".join(out) + "\n"


# -- validation --------------------------------------------------------------


class FindingKind(str, enum.Enum):
    UNDEFINED = "undefined-predicate"
    RANGE = "range-restriction"
    MODE = "not-well-moded"
    RECURSION = "recursion-cycle"
    CATEGORY = "category-conflict"
    MODE_CONFLICT = "mode-conflict"
    NO_TOP = "undefined-top-goal"


@dataclass(frozen=True)
class Finding:
    kind: FindingKind
    message: str
    rule: str | None = None
    predicate: str | None = None
    variable: str | None = None
    cycle: tuple[str, ...] = ()

    def __str__(self) -> str:
        where = f"[{self.rule}] " if self.rule else ""
        return f"{where}{self.kind.value}: {self.message}"


@dataclass
class ValidationReport:
    findings: list[Finding] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.findings

    def __bool__(self) -> bool:
        return bool(self.findings)

    def __len__(self) -> int:
        return len(self.findings)

    def __iter__(self):
        return iter(self.findings)

    def of_kind(self, kind: FindingKind) -> list[Finding]:
        return [f for f in self.findings if f.kind is kind]


class Category(str, enum.Enum):
    INTENSIONAL = "intensional"
    FACT = "fact"
    EXTENSIONAL = "extensional"


def extensional_modes(w: Workflow, known_tools: Iterable[ModeSpec] = ()) -> dict[str, ModeSpec]:
    """Modes of every extensional predicate: workflow pragmas first, then
    tool specs for predicates the workflow leaves undeclared."""
    rules, facts = w.intensional, w.fact_predicates
    out = {m.predicate: m for m in w.mode_decls if m.predicate not in rules | facts}
    for spec in known_tools:
        if spec.predicate not in rules | facts:
            out.setdefault(spec.predicate, spec)
    return out


def categorize(w: Workflow, known_tools: Iterable[ModeSpec] = ()) -> dict[str, Category]:
    cats: dict[str, Category] = {}
    for p in extensional_modes(w, known_tools):
        cats[p] = Category.EXTENSIONAL
    for p in w.fact_predicates:
        cats[p] = Category.FACT
    for p in w.intensional:
        cats[p] = Category.INTENSIONAL
    return cats


def top_adornment(w: Workflow, predicate: str | None = None) -> tuple[bool, ...]:
    """IN positions of the top goal: its ``#mode`` pragma, else none."""
    predicate = predicate or w.top_goal
    if predicate is None:
        return ()
    decl = w.mode_decl(predicate)
    if decl is not None:
        return tuple(m is Mode.IN for m in decl.modes)
    return (False,) * w.arities().get(predicate, 0)


@dataclass(frozen=True)
class BodyCall:
    """One body goal with the positions that are inputs at its call."""

    index: int
    atom: Atom
    category: Category | None
    inputs: tuple[bool, ...]
    unbound_inputs: tuple[tuple[int, str], ...]  # (position, variable) not ground at call


def moded_body(
    rule: Rule,
    head_inputs: Sequence[bool],
    cats: dict[str, Category],
    ext_modes: dict[str, ModeSpec],
    decls: dict[str, ModeSpec],
) -> tuple[list[BodyCall], set[Var]]:
    """Walk ``rule``'s body left to right from the head's input positions.

    Returns one :class:`BodyCall` per body goal and the set of variables bound
    after the whole body.
    """
    bound: set[Var] = set()
    for arg, is_in in zip(rule.head.args, head_inputs):
        if is_in:
            bound.update(term_vars(arg))
    calls: list[BodyCall] = []
    for idx, goal in enumerate(rule.body):
        cat = cats.get(goal.predicate)
        unbound: list[tuple[int, str]] = []
        if cat is Category.EXTENSIONAL:
            inputs = tuple(m is Mode.IN for m in ext_modes[goal.predicate].modes)
            for pos in ext_modes[goal.predicate].in_positions:
                for v in term_vars(goal.args[pos]):
                    if v not in bound:
                        unbound.append((pos, v.name))
        elif cat is Category.INTENSIONAL and goal.predicate in decls:
            inputs = tuple(m is Mode.IN for m in decls[goal.predicate].modes)
            for pos, is_in in enumerate(inputs):
                if is_in:
                    for v in term_vars(goal.args[pos]):
                        if v not in bound:
                            unbound.append((pos, v.name))
        else:
            inputs = tuple(all(v in bound for v in term_vars(a)) for a in goal.args)
        calls.append(BodyCall(idx, goal, cat, inputs, tuple(unbound)))
        bound.update(atom_vars(goal))
    return calls, bound


def recursion_cycles(w: Workflow) -> list[tuple[str, ...]]:
    """Cyclic components of the intensional call graph, each sorted."""
    graph: dict[str, set[str]] = {p: set() for p in w.intensional}
    for r in w.rules:
        for b in r.body:
            if b.predicate in graph:
                graph[r.head.predicate].add(b.predicate)
    return cyclic_components(graph)


def validate_workflow(w: Workflow, known_tools: Iterable[ModeSpec] = ()) -> ValidationReport:
    """Statically check that ``w`` is executable.

    The report is empty exactly when every body predicate is defined, each
    rule is range restricted, every extensional input is ground at its
    call under left-to-right evaluation from the top goal's inputs, and the
    intensional call graph is acyclic.
    """
    known_tools = list(known_tools)
    report = ValidationReport()
    add = report.findings.append
    cats = categorize(w, known_tools)
    ext = extensional_modes(w, known_tools)
    decls = {m.predicate: m for m in w.mode_decls if m.predicate in w.intensional}

    both = w.intensional & w.fact_predicates
    for p in sorted(both):
        add(Finding(FindingKind.CATEGORY, f"{p} has both rules and facts", predicate=p))
    tool_names = {t.predicate for t in known_tools}
    for p in sorted((w.intensional | w.fact_predicates) & tool_names):
        add(Finding(FindingKind.CATEGORY, f"{p} is defined in the workflow and by a tool", predicate=p))
    for spec in known_tools:
        decl = w.mode_decl(spec.predicate)
        if decl is not None and spec.predicate in ext and decl.modes != spec.modes:
            add(Finding(
                FindingKind.MODE_CONFLICT,
                f"{spec.predicate} declared {decl.text} but tool provides {spec.text}",
                predicate=spec.predicate,
            ))

    cycles = recursion_cycles(w)
    for cyc in cycles:
        add(Finding(FindingKind.RECURSION, "recursive predicates " + ", ".join(cyc), cycle=cyc))

    # definedness and plain range restriction, per rule
    for r in w.rules:
        seen: set[str] = set()
        for b in r.body:
            if b.predicate not in cats and b.predicate not in seen:
                seen.add(b.predicate)
                add(Finding(FindingKind.UNDEFINED, f"{b.predicate}/{b.arity} is not defined",
                            rule=r.ref, predicate=b.predicate))
        body_vars = {v for b in r.body for v in atom_vars(b)}
        for v in _unique(atom_vars(r.head)):
            if v not in body_vars:
                add(Finding(FindingKind.RANGE, f"head variable {v.name} never occurs in the body",
                            rule=r.ref, predicate=r.head.predicate, variable=v.name))

    if w.top_goal is not None and w.top_goal not in cats:
        add(Finding(FindingKind.NO_TOP, f"top goal {w.top_goal} is not defined", predicate=w.top_goal))
        return report

    # moded walk from the top goal
    checked: set[tuple[str, tuple[bool, ...]]] = set()
    pending: list[tuple[str, tuple[bool, ...]]] = []
    if w.top_goal in w.intensional:
        pending.append((w.top_goal, top_adornment(w)))
    while pending:
        pred, adorn = pending.pop()
        if (pred, adorn) in checked:
            continue
        checked.add((pred, adorn))
        for r in w.rules_for(pred):
            body_vars = {v for b in r.body for v in atom_vars(b)}
            calls, bound = moded_body(r, adorn, cats, ext, decls)
            for call in calls:
                for pos, name in call.unbound_inputs:
                    add(Finding(
                        FindingKind.MODE,
                        f"input argument {pos + 1} ({name}) of {call.atom.predicate} is not ground at call time",
                        rule=r.ref, predicate=call.atom.predicate, variable=name,
                    ))
                if call.category is Category.INTENSIONAL:
                    pending.append((call.atom.predicate, call.inputs))
            for v in _unique(atom_vars(r.head)):
                if v not in bound and v in body_vars:
                    add(Finding(FindingKind.RANGE, f"head variable {v.name} is never bound",
                                rule=r.ref, predicate=r.head.predicate, variable=v.name))
    return report


def _unique(vs: Iterable[Var]) -> list[Var]:
    seen: dict[Var, None] = {}
    for v in vs:
        seen.setdefault(v)
    return list(seen)
