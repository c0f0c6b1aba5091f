"""Shared helpers for the test suite: the bundled AVP workspace, in-process
stub tools, and a generator of random well-moded workflows."""

from __future__ import annotations

import hashlib
import random
import shutil
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterator, Mapping, Sequence

from etb.claims import ClaimsTable, EvidenceStore, etb_dir
from etb.engine import Derivation, Query, Solver
from etb.lang import ModeSpec, Workflow, parse_workflow, validate_workflow
from etb.terms import ArtifactRef, Atom, Const, ListTerm, Term, Var, canonical
from etb.toolbus import Capture, CaptureKind, ToolFailure, ToolInvocation, ToolManifest, load_registry

AVP_DIR = Path(str(resources.files("etb") / "data" / "avp"))
TOP = "g1_safe_AVP"
HIGH = {"g1_safe_AVP", "g2_reqs", "g3_safe_components", "g4_safe_system"}
LOW = {
    "subcomponents", "g6_req_validation", "g7_req_formalisation", "g8_safe_perception",
    "g9_safe_planning", "g10_safe_steering", "g11_scenario_based_testing",
    "g12_cyber_security_monitoring", "g13_monitoring_and_enforcement",
}
TOOL_ORDER = [
    "subcomponents", "g6_req_validation", "g7_req_formalisation", "g8_safe_perception",
    "g9_safe_planning", "g10_safe_steering", "g11_scenario_based_testing",
    "g12_cyber_security_monitoring", "g13_monitoring_and_enforcement",
]
INPUT_FILES = {"Reqs": "requirements.txt", "ODD": "odd.txt", "Datasets": "datasets.txt"}


def avp_workspace(dest: Path) -> Path:
    """A fresh copy of the bundled AVP example."""
    shutil.copytree(AVP_DIR, dest, ignore=shutil.ignore_patterns("__pycache__"))
    etb_dir(dest).mkdir(exist_ok=True)
    return dest


def avp_bindings(ws: Path, store: EvidenceStore) -> dict[str, Term]:
    b: dict[str, Term] = {"SUA": Const("avp")}
    for name, f in INPUT_FILES.items():
        b[name] = ArtifactRef(store.register(ws / "inputs" / f).hash)
    return b


@dataclass
class AvpRun:
    ws: Path
    workflow: Workflow
    registry: dict[str, ToolManifest]
    table: ClaimsTable
    bindings: dict[str, Term]
    result: object
    solver: Solver


def run_avp(ws: Path, table: ClaimsTable | None = None, **options) -> AvpRun:
    w = parse_workflow((ws / "workflow.dl").read_text())
    registry = load_registry(ws / "tools")
    store = table.store if table is not None and table.store is not None else EvidenceStore(etb_dir(ws))
    table = table if table is not None else ClaimsTable(store)
    b = avp_bindings(ws, store)
    solver = Solver(w, registry, table, ws, **options)
    res = solver.run(Query(TOP, b))
    return AvpRun(ws, w, registry, table, b, res, solver)


def trace_lines(path: Path) -> list[str]:
    return path.read_text().split() if path.exists() else []


# -- in-process stub tools ---------------------------------------------------------

DOMAIN = tuple(Const(f"c{i}") for i in range(4))


def _digest(*parts: str) -> int:
    return int.from_bytes(hashlib.sha256("\x1f".join(parts).encode()).digest()[:8], "big")


@dataclass
class StubToolkit:
    """Deterministic functional tools: outputs and failure depend only on
    the predicate, the salt and the inputs."""

    salt: str = ""
    fail_mod: int = 0  # 0: never fail
    calls: list[tuple[str, tuple[Term, ...]]] = field(default_factory=list)

    def fails(self, pred: str, inputs: Sequence[Term]) -> bool:
        if not self.fail_mod:
            return False
        return _digest("fail", self.salt, pred, *map(canonical, inputs)) % self.fail_mod == 0

    def outputs(self, pred: str, inputs: Sequence[Term], n_out: int) -> tuple[Term, ...]:
        return tuple(
            DOMAIN[_digest("out", self.salt, pred, str(j), *map(canonical, inputs)) % len(DOMAIN)]
            for j in range(n_out)
        )

    def answer_table(self, spec: ModeSpec, domain: Sequence[Term] = DOMAIN) -> list[tuple[Term, ...]]:
        """Every ground atom (as an argument tuple) the tool can produce."""
        import itertools

        rows = []
        for ins in itertools.product(domain, repeat=len(spec.in_positions)):
            if self.fails(spec.predicate, ins):
                continue
            outs = self.outputs(spec.predicate, ins, len(spec.out_positions))
            args: list[Term] = [None] * spec.arity  # type: ignore[list-item]
            for i, t in zip(spec.in_positions, ins):
                args[i] = t
            for i, t in zip(spec.out_positions, outs):
                args[i] = t
            rows.append(tuple(args))
        return rows

    def __call__(self, m: ToolManifest, inputs: Sequence[Term], workdir: Path, store: EvidenceStore) -> ToolInvocation:
        inputs = tuple(inputs)
        self.calls.append((m.predicate, inputs))
        inv = ToolInvocation(m.predicate, inputs, exit_code=0)
        if self.fails(m.predicate, inputs):
            inv.exit_code = 1
            raise ToolFailure(1, "stub failure", inv)
        inv.outputs = self.outputs(m.predicate, inputs, m.n_outputs)
        report = f"{m.predicate}({', '.join(map(canonical, inputs))}) -> {', '.join(map(canonical, inv.outputs))}\n"
        inv.produced = (store.register(report.encode(), origin=f"tool:{m.predicate}").hash,)
        return inv


def const_manifest(spec: ModeSpec, command: str = "true", tooldir: Path | None = None) -> ToolManifest:
    caps = tuple(Capture(CaptureKind.STDOUT_LINE_AS_CONST) for _ in spec.out_positions)
    return ToolManifest(spec.predicate, spec, command, caps, 60, False, tooldir)


FSTUB = '''\
import hashlib, sys
salt, fail_mod, pred, n_out, *ins = sys.argv[1:]
def d(*p):
    return int.from_bytes(hashlib.sha256("\\x1f".join(p).encode()).digest()[:8], "big")
if int(fail_mod) and d("fail", salt, pred, *ins) % int(fail_mod) == 0:
    sys.exit(1)
for j in range(int(n_out)):
    print("c%d" % (d("out", salt, pred, str(j), *ins) % 4))
'''


def subprocess_registry(specs: Mapping[str, ModeSpec], kit: StubToolkit, tooldir: Path) -> dict[str, ToolManifest]:
    """Manifests running a Python script that computes the same function as
    ``kit`` in a child process."""
    tooldir.mkdir(parents=True, exist_ok=True)
    (tooldir / "fstub.py").write_text(FSTUB)
    out = {}
    for p, spec in specs.items():
        args = " ".join(f"{{arg{i + 1}}}" for i in spec.in_positions)
        cmd = f"python3 {{tooldir}}/fstub.py '{kit.salt}' {kit.fail_mod} {p} {len(spec.out_positions)} {args}"
        out[p] = const_manifest(spec, cmd, tooldir)
    return out


# -- random workflows --------------------------------------------------------------


@dataclass
class Case:
    seed: int
    text: str
    workflow: Workflow
    tools: dict[str, ModeSpec]
    top_inputs: list[str]
    bindings: dict[str, Term]
    kit: StubToolkit

    def registry(self) -> dict[str, ToolManifest]:
        return {p: const_manifest(s) for p, s in self.tools.items()}

    def stub_tables(self) -> dict[str, list[tuple[Term, ...]]]:
        return {p: self.kit.answer_table(s) for p, s in self.tools.items()}


def _modes(rng: random.Random, arity: int, min_in: int) -> str:
    while True:
        m = "".join(rng.choice("+-") for _ in range(arity))
        if m.count("+") >= min_in:
            return m


def random_case(seed: int, max_preds: int = 6, fail_mod: int = 9) -> Case:
    """A validated, non-recursive, well-moded workflow over constants c0..c3.

    Predicates are numbered; rules only call higher-numbered predicates, so
    the workflow cannot recurse. Predicate 0 is the top goal.
    """
    rng = random.Random(seed)
    while True:
        n = rng.randint(2, max_preds)
        n_int = rng.randint(1, max(1, n - 1))
        preds = [f"p{i}" for i in range(n)]
        kinds = ["int"] * n_int + [rng.choice(["tool", "tool", "fact"]) for _ in range(n - n_int)]
        arity = {p: rng.randint(1, 3) for p in preds}
        modes = {p: _modes(rng, arity[p], 1 if i == 0 else 0) for i, p in enumerate(preds)}
        lines = [f'#mode(p0, "{modes["p0"]}").']
        tools: dict[str, ModeSpec] = {}
        for i, p in enumerate(preds):
            if kinds[i] == "tool":
                tools[p] = ModeSpec.parse(p, modes[p])
            elif kinds[i] == "fact":
                for _ in range(rng.randint(1, 3)):
                    args = ", ".join(rng.choice(DOMAIN).value for _ in range(arity[p]))  # type: ignore[misc]
                    lines.append(f"{p}({args}).")
        for i, p in enumerate(preds):
            if kinds[i] != "int":
                continue
            callees = preds[i + 1:]
            if not callees:
                kinds[i] = "fact"
                lines.append(f"{p}({', '.join('c0' for _ in range(arity[p]))}).")
                continue
            for r in range(rng.randint(1, 3)):
                lines.append(_random_rule(rng, p, arity[p], modes[p], callees, kinds, preds, arity, modes))
        text = "\n".join(lines) + "\n"
        w = parse_workflow(text)
        if "p0" not in w.intensional:
            seed = rng.randrange(1 << 30)
            continue
        report = validate_workflow(w, list(tools.values()))
        if not report.ok:
            seed = rng.randrange(1 << 30)
            continue
        names = w.head_variable_names("p0")
        top_inputs = [nm for nm, m in zip(names, modes["p0"]) if m == "+"]
        bindings = {nm: rng.choice(DOMAIN) for nm in top_inputs}
        kit = StubToolkit(salt=str(seed), fail_mod=fail_mod)
        return Case(seed, text, w, tools, top_inputs, bindings, kit)


def _random_rule(rng, p, ar, mode, callees, kinds, preds, arity, modes) -> str:
    head_vars = [f"H{k}" for k in range(ar)]
    bound = [v for v, m in zip(head_vars, mode) if m == "+"]
    body = []
    fresh = 0
    for _ in range(rng.randint(1, 3)):
        q = rng.choice(callees)
        qk = kinds[preds.index(q)]
        args = []
        for pos in range(arity[q]):
            is_in = qk != "fact" and modes[q][pos] == "+"
            if is_in or (qk == "fact" and bound and rng.random() < 0.4):
                if bound and rng.random() < 0.8:
                    args.append(rng.choice(bound))
                else:
                    args.append(rng.choice(DOMAIN).value)
            elif rng.random() < 0.15:
                # output checked against a known value
                args.append(rng.choice(bound) if bound and rng.random() < 0.5 else rng.choice(DOMAIN).value)
            else:
                v = f"V{fresh}"
                fresh += 1
                args.append(v)
        for a in args:
            if a[0].isupper() and a not in bound:
                bound.append(a)
        body.append(f"{q}({', '.join(args)})")
    head = []
    for v, m in zip(head_vars, mode):
        if m == "+":
            head.append(v)
        else:
            head.append(rng.choice(bound) if bound else rng.choice(DOMAIN).value)
    return f"{p}({', '.join(head)}) :- {', '.join(body)}."


def mutate(case: Case, rng: random.Random) -> dict[str, Term]:
    """New values for a non-empty subset of the top-level inputs."""
    k = rng.randint(1, len(case.top_inputs))
    names = rng.sample(case.top_inputs, k)
    return {nm: rng.choice(DOMAIN) for nm in names}


# -- reference traversal for the fuzz comparison ---------------------------------------


def first_answer_atoms(w: Workflow, model: set[Atom], goal: str, bindings: Mapping[str, Term],
                       tools: Mapping[str, ModeSpec]) -> tuple[bool, set[Atom]]:
    """Atoms a first-answer, left-to-right search visits when every goal is
    answered from ``model`` (the bottom-up fixpoint).

    Intensional goals try their rules in order and backtrack; fact goals try
    facts in order; tool goals have at most one answer per input tuple. Each
    answer produced along the way counts as visited, even in branches the
    search later abandons. Returns (success, visited atoms).
    """
    by_pred: dict[str, list[Atom]] = {}
    for a in model:
        by_pred.setdefault(a.predicate, []).append(a)
    visited: set[Atom] = set()
    counter = [0]

    def walk(t: Term, env: dict[str, Term]) -> Term:
        while isinstance(t, Var) and t.name in env:
            t = env[t.name]
        if isinstance(t, ListTerm):
            return ListTerm(tuple(walk(e, env) for e in t.elements))
        return t

    def match(a: Term, b: Term, env: dict[str, Term]) -> dict[str, Term] | None:
        a, b = walk(a, env), walk(b, env)
        if a == b:
            return env
        if isinstance(a, Var):
            return {**env, a.name: b}
        if isinstance(b, Var):
            return {**env, b.name: a}
        if isinstance(a, ListTerm) and isinstance(b, ListTerm) and len(a.elements) == len(b.elements):
            for x, y in zip(a.elements, b.elements):
                env = match(x, y, env)  # type: ignore[assignment]
                if env is None:
                    return None
            return env
        return None

    def rename(t: Term, k: int) -> Term:
        if isinstance(t, Var):
            return Var(f"{t.name}_{k}")
        if isinstance(t, ListTerm):
            return ListTerm(tuple(rename(e, k) for e in t.elements))
        return t

    def ground(a: Atom, env) -> Atom:
        return Atom(a.predicate, tuple(walk(x, env) for x in a.args))

    def solve(a: Atom, env) -> Iterator[dict]:
        pred = a.predicate
        if pred in w.intensional:
            for rule in w.rules_for(pred):
                counter[0] += 1
                k = counter[0]
                head = Atom(pred, tuple(rename(x, k) for x in rule.head.args))
                e = env
                for x, y in zip(a.args, head.args):
                    e = match(x, y, e)
                    if e is None:
                        break
                if e is None:
                    continue
                body = [Atom(b.predicate, tuple(rename(x, k) for x in b.args)) for b in rule.body]
                for e2 in conj(body, 0, e):
                    visited.add(ground(a, e2))
                    yield e2
        elif pred in tools:
            spec = tools[pred]
            ins = tuple(walk(a.args[i], env) for i in spec.in_positions)
            hits = [m for m in by_pred.get(pred, ()) if tuple(m.args[i] for i in spec.in_positions) == ins]
            if not hits:
                return
            (ans,) = hits
            visited.add(ans)
            e = env
            for i in spec.out_positions:
                e = match(a.args[i], ans.args[i], e)
                if e is None:
                    return
            yield e
        else:
            for f in w.facts_for(pred):
                e = env
                for x, y in zip(a.args, f.args):
                    e = match(x, y, e)
                    if e is None:
                        break
                if e is not None:
                    visited.add(f)
                    yield e

    def conj(body: list[Atom], i: int, env) -> Iterator[dict]:
        if i == len(body):
            yield env
            return
        for e in solve(body[i], env):
            yield from conj(body, i + 1, e)

    names = w.head_variable_names(goal)
    top = Atom(goal, tuple(Var(n) for n in names))
    gen = solve(top, dict(bindings))
    ok = next(gen, None) is not None
    gen.close()
    return ok, visited


def claimed_atoms(table: ClaimsTable) -> set[Atom]:
    return {c.atom for c in table.live_claims()}


def claim_signature(table: ClaimsTable) -> set[tuple[str, tuple[str, ...]]]:
    """Live claims as (atom text, evidence hashes); timestamps and nodes masked."""
    return {(canonical(c.atom), tuple(c.evidence)) for c in table.live_claims()}


def solve_case(case: Case, root: Path, bindings: Mapping[str, Term] | None = None,
               invoker=None, registry=None) -> tuple[ClaimsTable, object, Solver]:
    table = ClaimsTable(EvidenceStore(etb_dir(root)))
    solver = Solver(case.workflow, registry or case.registry(), table, root, invoker=invoker or case.kit)
    res = solver.run(Query("p0", dict(bindings or case.bindings)))
    return table, res, solver


def is_derivation(x: object) -> bool:
    return isinstance(x, Derivation)


# -- acceptance reporting ----------------------------------------------------------

ACCEPTANCE: dict[int, str] = {}


def verdict(n: int, title: str, ok: bool, detail: str) -> None:
    """Record and print one acceptance line, then fail the test if needed."""
    line = f"criterion {n} ({title}): {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE[n] = line
    print(line)
    assert ok, line
