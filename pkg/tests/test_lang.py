from __future__ import annotations

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etb.lang import (
    ArityMismatch,
    FindingKind,
    Mode,
    ModeConflict,
    ModeSpec,
    WorkflowSyntaxError,
    format_workflow,
    parse_atom,
    parse_term,
    parse_workflow,
    top_adornment,
    validate_workflow,
)
from etb.terms import ArtifactRef, Atom, Const, ListTerm, Var, atom_id, canonical, unify

from support import AVP_DIR, TOP

FIG3 = (AVP_DIR / "workflow.dl").read_text()


# -- terms -------------------------------------------------------------------------


def test_const_normalizes_non_symbols_to_quoted():
    assert Const("hello world").quoted
    assert str(Const("hello world")) == '"hello world"'
    assert str(Const("abc")) == "abc"
    assert str(Const("abc", quoted=True)) == '"abc"'
    with pytest.raises(TypeError):
        Const(True)


def test_artifact_ref_validates_digest():
    h = "a" * 64
    assert str(ArtifactRef(h)) == "#" + h
    with pytest.raises(ValueError):
        ArtifactRef("xyz")


def test_canonical_text_and_id():
    a = Atom("p", (Const("a"), ListTerm((Const("b"), Var("C"))), Const("s t"), Const(3)))
    assert canonical(a) == 'p(a, [b, C], "s t", 3)'
    assert atom_id(Atom("g")) == atom_id(parse_atom("g"))
    assert len(atom_id(a)) == 64


def test_unify_occurs_check():
    x = Var("X")
    assert unify(x, ListTerm((x,)), {}) is None
    s = unify(ListTerm((x, Const("b"))), ListTerm((Const("a"), Var("Y"))), {})
    assert s == {x: Const("a"), Var("Y"): Const("b")}


symbols = st.from_regex(r"[a-z][a-z0-9_]{0,5}", fullmatch=True)
texts = st.text(st.characters(blacklist_categories=("Cs",), blacklist_characters="\n\r"), max_size=8)
leaves = st.one_of(
    symbols.map(Const),
    texts.map(lambda s: Const(s, quoted=True)),
    st.integers(-1000, 1000).map(Const),
    st.from_regex(r"[A-Z][a-z0-9]{0,3}", fullmatch=True).map(Var),
    st.binary(min_size=32, max_size=32).map(lambda b: ArtifactRef(b.hex())),
)
terms = st.recursive(leaves, lambda inner: st.lists(inner, max_size=3).map(lambda xs: ListTerm(tuple(xs))),
                     max_leaves=8)


@settings(max_examples=200, deadline=None)
@given(terms)
def test_term_text_round_trip(t):
    assert parse_term(canonical(t)) == t


# -- parser ------------------------------------------------------------------------


def test_fig3_parses():
    w = parse_workflow(FIG3)
    assert len(w.rules) == 4
    ar = w.arities()
    assert (ar["g1_safe_AVP"], ar["g2_reqs"], ar["g3_safe_components"], ar["g4_safe_system"]) == (12, 2, 7, 7)
    assert len(w.rules_for("g1_safe_AVP")[0].body) == 4
    assert w.top_goal == TOP
    assert w.rules[0].strategy_note.startswith("argue over requirements")
    assert w.rules[1].ref == "g2_reqs/2#1"


def test_syntax_error_reports_expected_tokens():
    with pytest.raises(WorkflowSyntaxError) as exc:
        parse_workflow("g(X) :- t(X)")
    assert exc.value.line == 1
    assert exc.value.expected
    with pytest.raises(WorkflowSyntaxError):
        parse_workflow("g(X :- t(X).")


def test_arity_mismatch():
    with pytest.raises(ArityMismatch):
        parse_workflow("g(X) :- t(X). h(Y) :- t(Y, Y).")


def test_mode_conflict():
    with pytest.raises(ModeConflict):
        parse_workflow('#mode(t, "+-").\n#mode(t, "++").\ng(X) :- t(X, Y).')


def test_mode_spec():
    m = ModeSpec.parse("g11", "+++--")
    assert m.in_positions == (0, 1, 2) and m.out_positions == (3, 4)
    assert m.modes[0] is Mode.IN and m.text == "+++--"
    with pytest.raises(ValueError):
        ModeSpec.parse("g", "+x")


def test_hashref_starting_with_letter_is_not_a_pragma():
    h = "ab" + "0" * 62
    assert parse_atom(f"f(#{h})").args[0] == ArtifactRef(h)
    with pytest.raises(WorkflowSyntaxError):
        parse_workflow(f"f(#{h}).")  # workflows name no artifacts


def test_format_round_trip():
    w = parse_workflow(FIG3)
    again = parse_workflow(format_workflow(w))
    assert again.rules == w.rules
    assert [r.strategy_note for r in again.rules] == [r.strategy_note for r in w.rules]
    assert again.mode_decls == w.mode_decls


def test_facts_and_top_goal_defaults():
    w = parse_workflow("g.")
    assert [str(f) for f in w.facts] == ["g"]
    assert w.top_goal == "g"
    assert parse_workflow("").top_goal is None


# -- validation --------------------------------------------------------------------


def avp_tools():
    from etb.toolbus import load_registry

    return [m.modes for m in load_registry(AVP_DIR / "tools").values()]


def test_fig3_is_valid_with_its_manifests():
    assert validate_workflow(parse_workflow(FIG3), avp_tools()).ok


def test_unbound_input_and_unbound_head_variable():
    w = parse_workflow('#mode(t, "+-").\n#mode(g, "--").\ng(X, Y) :- t(Y, Z).')
    r = validate_workflow(w)
    kinds = sorted(f.kind for f in r)
    assert kinds == sorted([FindingKind.MODE, FindingKind.RANGE])
    assert r.of_kind(FindingKind.MODE)[0].variable == "Y"
    assert r.of_kind(FindingKind.RANGE)[0].variable == "X"


def test_recursion_is_rejected():
    r = validate_workflow(parse_workflow("a(X) :- a(X)."))
    assert [f.kind for f in r.of_kind(FindingKind.RECURSION)] == [FindingKind.RECURSION]
    r = validate_workflow(parse_workflow("a(X) :- b(X). b(X) :- a(X)."))
    assert r.of_kind(FindingKind.RECURSION)[0].cycle == ("a", "b")


def test_undefined_predicate():
    r = validate_workflow(parse_workflow("g(X) :- nowhere(X)."))
    assert r.of_kind(FindingKind.UNDEFINED)


def test_top_adornment_from_pragma():
    w = parse_workflow(FIG3)
    assert top_adornment(w) == (True,) * 4 + (False,) * 8
    assert top_adornment(parse_workflow("g(X) :- f(X). f(a).")) == (False,)


def test_fact_call_binds_variables():
    w = parse_workflow('#mode(g, "-").\ng(X) :- f(X).\nf(a).')
    assert validate_workflow(w).ok
