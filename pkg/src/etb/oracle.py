"""Naive bottom-up saturation, used as a test oracle for the engine.

This deliberately shares nothing with the top-down solver beyond the term
classes: it has its own matcher and evaluates every rule against the whole
fact base until nothing new appears.
"""

from __future__ import annotations

from typing import Iterable, Iterator, Mapping, Union

from etb.lang import Workflow
from etb.terms import Atom, ListTerm, Term, Var

Row = tuple[Term, ...]


def _match(pattern: Term, value: Term, env: dict[str, Term]) -> dict[str, Term] | None:
    if isinstance(pattern, Var):
        bound = env.get(pattern.name)
        if bound is None:
            new = dict(env)
            new[pattern.name] = value
            return new
        return env if bound == value else None
    if isinstance(pattern, ListTerm):
        if not isinstance(value, ListTerm) or len(value.elements) != len(pattern.elements):
            return None
        for p, v in zip(pattern.elements, value.elements):
            env = _match(p, v, env)
            if env is None:
                return None
        return env
    return env if pattern == value else None


def _build(term: Term, env: dict[str, Term]) -> Term | None:
    if isinstance(term, Var):
        return env.get(term.name)
    if isinstance(term, ListTerm):
        parts = [_build(e, env) for e in term.elements]
        if any(p is None for p in parts):
            return None
        return ListTerm(tuple(parts))  # type: ignore[arg-type]
    return term


def _joins(body: tuple[Atom, ...], db: Mapping[str, set[Row]]) -> Iterator[dict[str, Term]]:
    envs: list[dict[str, Term]] = [{}]
    for atom in body:
        nxt: list[dict[str, Term]] = []
        rows = db.get(atom.predicate, set())
        for env in envs:
            for row in rows:
                if len(row) != atom.arity:
                    continue
                e: dict[str, Term] | None = env
                for p, v in zip(atom.args, row):
                    e = _match(p, v, e)
                    if e is None:
                        break
                if e is not None:
                    nxt.append(e)
        envs = nxt
        if not envs:
            break
    yield from envs


def oracle_eval(
    w: Workflow,
    stub_outputs: Mapping[str, Iterable[Union[Row, Atom]]] | None = None,
) -> set[Atom]:
    """All ground atoms derivable from ``w``'s facts, its rules and the given
    finite answer tables for extensional predicates."""
    db: dict[str, set[Row]] = {}
    for f in w.facts:
        db.setdefault(f.predicate, set()).add(f.args)
    for pred, rows in (stub_outputs or {}).items():
        for r in rows:
            db.setdefault(pred, set()).add(r.args if isinstance(r, Atom) else tuple(r))
    changed = True
    while changed:
        changed = False
        for rule in w.rules:
            if not rule.body:
                continue
            for env in list(_joins(rule.body, db)):
                args = [_build(a, env) for a in rule.head.args]
                if any(a is None for a in args):
                    continue
                row = tuple(args)
                bucket = db.setdefault(rule.head.predicate, set())
                if row not in bucket:
                    bucket.add(row)  # type: ignore[arg-type]
                    changed = True
    return {Atom(p, row) for p, rows in db.items() for row in rows}
