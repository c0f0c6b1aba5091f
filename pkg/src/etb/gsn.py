"""Render an established case as a GSN-style argument (DOT or JSON).

Every claim becomes a Goal. A high-level claim gets one Strategy between
itself and its sub-claims, labelled with the rule's strategy note. A claim
backed by a tool gets one Solution listing its evidence. Edges point from
the supporting element to the element it supports.
"""

from __future__ import annotations

import enum
import heapq
import json
from dataclasses import dataclass

from etb.claims import ClaimsTable, RuleSupport, ToolSupport
from etb.lang import Workflow
from etb.terms import canonical

LABEL_MAX = 60
HASH_PREFIX = 12


class NotEstablished(ValueError):
    """The requested root claim is missing or STALE."""


class GsnKind(str, enum.Enum):
    GOAL = "GOAL"
    STRATEGY = "STRATEGY"
    SOLUTION = "SOLUTION"


SHAPES = {GsnKind.GOAL: "box", GsnKind.STRATEGY: "parallelogram", GsnKind.SOLUTION: "circle"}


@dataclass(frozen=True)
class GsnNode:
    id: str
    kind: GsnKind
    label: str
    claim: str | None = None


@dataclass
class GsnGraph:
    root: str
    nodes: list[GsnNode]
    edges: list[tuple[str, str]]

    def count(self, kind: GsnKind) -> int:
        return sum(1 for n in self.nodes if n.kind is kind)


def _order(t: ClaimsTable, root: str) -> list[str]:
    """Claims reachable from ``root``, parents before children, ties broken
    by canonical atom text."""
    indeg: dict[str, int] = {}
    seen = {root}
    stack = [root]
    while stack:
        cid = stack.pop()
        for s in t.get(cid).subclaims:  # type: ignore[union-attr]
            indeg[s] = indeg.get(s, 0) + 1
            if s not in seen:
                seen.add(s)
                stack.append(s)
    text = {cid: canonical(t.get(cid).atom) for cid in seen}  # type: ignore[union-attr]
    heap = [(text[root], root)]
    out: list[str] = []
    while heap:
        _, cid = heapq.heappop(heap)
        out.append(cid)
        for s in dict.fromkeys(t.get(cid).subclaims):  # type: ignore[union-attr]
            indeg[s] -= t.get(cid).subclaims.count(s)  # type: ignore[union-attr]
            if indeg[s] == 0:
                heapq.heappush(heap, (text[s], s))
    return out


def build_gsn(t: ClaimsTable, root_claim_id: str | None = None, workflow: Workflow | None = None) -> GsnGraph:
    root = root_claim_id or t.root
    claim = t.live(root) if root else None
    if claim is None:
        raise NotEstablished(f"claim {root} is not established")
    order = _order(t, claim.id)
    goal_id = {cid: f"G{i}" for i, cid in enumerate(order, start=1)}
    nodes: list[GsnNode] = []
    edges: list[tuple[str, str]] = []
    n_strategy = n_solution = 0
    for cid in order:
        c = t.get(cid)
        assert c is not None
        nodes.append(GsnNode(goal_id[cid], GsnKind.GOAL, canonical(c.atom), cid))
        p = c.provenance
        if isinstance(p, RuleSupport):
            n_strategy += 1
            sid = f"S{n_strategy}"
            rule = workflow.rule_by_ref(p.rule) if workflow is not None else None
            note = rule.strategy_note if rule is not None and rule.strategy_note else None
            nodes.append(GsnNode(sid, GsnKind.STRATEGY, note or f"argument over sub-goals of {c.atom.predicate}", cid))
            edges.append((sid, goal_id[cid]))
            for s in dict.fromkeys(p.subclaims):
                edges.append((goal_id[s], sid))
        elif isinstance(p, ToolSupport) and p.evidence:
            n_solution += 1
            parts = []
            for h in p.evidence:
                art = t.store.get(h) if t.store is not None else None
                hint = f" ({art.media_hint})" if art is not None and art.media_hint else ""
                parts.append(h[:HASH_PREFIX] + hint)
            sol = f"Sn{n_solution}"
            nodes.append(GsnNode(sol, GsnKind.SOLUTION, ", ".join(parts), cid))
            edges.append((sol, goal_id[cid]))
    return GsnGraph(goal_id[claim.id], nodes, edges)


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n") + '"'


def _short(text: str) -> str:
    return text if len(text) <= LABEL_MAX else text[: LABEL_MAX - 3] + "..."


def to_dot(g: GsnGraph) -> str:
    lines = ["digraph gsn {", "  rankdir=BT;", '  node [fontname="Helvetica", fontsize=10];']
    for n in g.nodes:
        attrs = [f"shape={SHAPES[n.kind]}", f"label={_quote(_short(n.label))}"]
        if len(n.label) > LABEL_MAX:
            attrs.append(f"tooltip={_quote(n.label)}")
        lines.append(f"  {n.id} [{', '.join(attrs)}];")
    for a, b in g.edges:
        lines.append(f"  {a} -> {b};")
    lines.append("}")
    return "\n".join(lines) + "\n"


def to_json(g: GsnGraph) -> str:
    doc = {
        "root": g.root,
        "nodes": [
            {"id": n.id, "kind": n.kind.value, "label": n.label, **({"claim": n.claim} if n.claim else {})}
            for n in g.nodes
        ],
        "edges": [{"from": a, "to": b} for a, b in g.edges],
    }
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def export_gsn(t: ClaimsTable, root_claim_id: str | None = None, fmt: str = "dot",
               workflow: Workflow | None = None) -> str:
    """The case rooted at ``root_claim_id`` (default: the table's root) as
    DOT or JSON text.

    Raises:
        NotEstablished: the root claim is missing or STALE.
    """
    g = build_gsn(t, root_claim_id, workflow)
    if fmt == "dot":
        return to_dot(g)
    if fmt == "json":
        return to_json(g)
    raise ValueError(f"unknown format {fmt!r} (expected dot or json)")
