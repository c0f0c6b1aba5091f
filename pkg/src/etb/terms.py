"""Terms, atoms, substitutions and canonical text.

Everything that flows through a workflow is one of four term shapes:
variables, constants (symbols, quoted strings, integers), lists, and
references to content-addressed artifacts. Terms are immutable and
hashable so they can key dictionaries and live in sets.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass
from typing import Iterator, Mapping, Union

VAR_RE = re.compile(r"[A-Z][A-Za-z0-9_]*\Z")
SYMBOL_RE = re.compile(r"[a-z][A-Za-z0-9_]*\Z")
HASH_RE = re.compile(r"[0-9a-f]{64}\Z")


@dataclass(frozen=True, slots=True)
class Var:
    name: str

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True, slots=True)
class Const:
    """A constant. ``value`` is an ``int`` or a ``str``; ``quoted``
    distinguishes the string ``"abc"`` from the symbol ``abc``."""

    value: Union[str, int]
    quoted: bool = False

    def __post_init__(self) -> None:
        if isinstance(self.value, bool) or not isinstance(self.value, (str, int)):
            raise TypeError(f"bad constant value: {self.value!r}")
        if isinstance(self.value, int):
            object.__setattr__(self, "quoted", False)
        elif not self.quoted and not SYMBOL_RE.match(self.value):
            object.__setattr__(self, "quoted", True)

    def __str__(self) -> str:
        if isinstance(self.value, int):
            return str(self.value)
        if self.quoted:
            return json.dumps(self.value, ensure_ascii=False)
        return self.value


@dataclass(frozen=True, slots=True)
class ListTerm:
    elements: tuple["Term", ...]

    def __str__(self) -> str:
        return "[" + ", ".join(str(e) for e in self.elements) + "]"


@dataclass(frozen=True, slots=True)
class ArtifactRef:
    hash: str

    def __post_init__(self) -> None:
        if not HASH_RE.match(self.hash):
            raise ValueError(f"not a sha256 hex digest: {self.hash!r}")

    def __str__(self) -> str:
        return "#" + self.hash


Term = Union[Var, Const, ListTerm, ArtifactRef]


def sym(name: str) -> Const:
    return Const(name)


@dataclass(frozen=True, slots=True)
class Atom:
    predicate: str
    args: tuple[Term, ...] = ()

    @property
    def arity(self) -> int:
        return len(self.args)

    @property
    def key(self) -> tuple[str, int]:
        return (self.predicate, len(self.args))

    def __str__(self) -> str:
        if not self.args:
            return self.predicate
        return f"{self.predicate}(" + ", ".join(str(a) for a in self.args) + ")"


def canonical(x: Union[Atom, Term]) -> str:
    """Canonical text of an atom or term: ``p(a, [b, C], "s", #<hash>)``."""
    return str(x)


def atom_id(atom: Atom) -> str:
    """Stable identifier of a ground atom (sha256 of its canonical text)."""
    return hashlib.sha256(canonical(atom).encode("utf-8")).hexdigest()


def term_vars(term: Term) -> Iterator[Var]:
    if isinstance(term, Var):
        yield term
    elif isinstance(term, ListTerm):
        for e in term.elements:
            yield from term_vars(e)


def atom_vars(atom: Atom) -> Iterator[Var]:
    for a in atom.args:
        yield from term_vars(a)


def is_ground(term: Term) -> bool:
    return next(term_vars(term), None) is None


def atom_is_ground(atom: Atom) -> bool:
    return next(atom_vars(atom), None) is None


# -- substitutions -----------------------------------------------------------

Subst = Mapping[Var, Term]


def walk(term: Term, s: Subst) -> Term:
    while isinstance(term, Var) and term in s:
        term = s[term]
    return term


def resolve(term: Term, s: Subst) -> Term:
    """Fully apply ``s`` to ``term``."""
    term = walk(term, s)
    if isinstance(term, ListTerm):
        return ListTerm(tuple(resolve(e, s) for e in term.elements))
    return term


def apply(atom: Atom, s: Subst) -> Atom:
    if not s:
        return atom
    return Atom(atom.predicate, tuple(resolve(a, s) for a in atom.args))


def _occurs(v: Var, term: Term, s: Subst) -> bool:
    term = walk(term, s)
    if term == v:
        return True
    if isinstance(term, ListTerm):
        return any(_occurs(v, e, s) for e in term.elements)
    return False


def unify(a: Term, b: Term, s: dict[Var, Term]) -> dict[Var, Term] | None:
    """Syntactic unification with occurs check; returns an extended copy
    of ``s`` or ``None``. ``s`` itself is never mutated."""
    out = dict(s)
    stack = [(a, b)]
    while stack:
        x, y = stack.pop()
        x, y = walk(x, out), walk(y, out)
        if x == y:
            continue
        if isinstance(x, Var):
            if _occurs(x, y, out):
                return None
            out[x] = y
        elif isinstance(y, Var):
            if _occurs(y, x, out):
                return None
            out[y] = x
        elif isinstance(x, ListTerm) and isinstance(y, ListTerm):
            if len(x.elements) != len(y.elements):
                return None
            stack.extend(zip(x.elements, y.elements))
        else:
            return None
    return out


def unify_atoms(a: Atom, b: Atom, s: dict[Var, Term]) -> dict[Var, Term] | None:
    if a.key != b.key:
        return None
    for x, y in zip(a.args, b.args):
        s = unify(x, y, s)
        if s is None:
            return None
    return s


def rename(term: Term, suffix: str) -> Term:
    if isinstance(term, Var):
        return Var(f"{term.name}__{suffix}")
    if isinstance(term, ListTerm):
        return ListTerm(tuple(rename(e, suffix) for e in term.elements))
    return term


def rename_atom(atom: Atom, suffix: str) -> Atom:
    return Atom(atom.predicate, tuple(rename(a, suffix) for a in atom.args))


def artifact_refs(term: Term) -> Iterator[str]:
    if isinstance(term, ArtifactRef):
        yield term.hash
    elif isinstance(term, ListTerm):
        for e in term.elements:
            yield from artifact_refs(e)
