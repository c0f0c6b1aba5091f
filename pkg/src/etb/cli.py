"""Command line interface: ``etb <command> [options]``.

Exit codes: 0 success, 1 workflow findings, 2 counter-example or failed
tool, 64 usage error, 66 workspace error, 70 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from importlib import resources
from pathlib import Path
from typing import Any, Sequence

from filelock import Timeout as LockTimeout

from etb.claims import (
    ClaimsTable,
    CorruptStore,
    StoreError,
    etb_dir,
    load,
    open_store,
    persist,
    verify_integrity,
    workspace_lock,
)
from etb.engine import CounterExample, Query, Solver
from etb.gsn import NotEstablished, export_gsn
from etb.lang import Workflow, WorkflowError, parse_term, parse_workflow, validate_workflow
from etb.maintenance import NoPriorCase, UnknownVariable, build_dataflow, impact, maintain
from etb.netnode import NodeConfig, PeerResolver, list_services, serve
from etb.terms import ArtifactRef, Const, Term, canonical
from etb.toolbus import ManifestError, ToolManifest, load_registry

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_COUNTEREXAMPLE = 2
EXIT_USAGE = 64
EXIT_WORKSPACE = 66
EXIT_INTERNAL = 70

LOCK_TIMEOUT_S = 10.0

EXAMPLES = ("avp",)
COLORS = {"DIRECT": "\033[31m", "INDIRECT": "\033[33m", "UNAFFECTED": "\033[32m"}

log = logging.getLogger("etb")


class UsageError(Exception):
    pass


class WorkspaceError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- workspace helpers -----------------------------------------------------------


def _workspace(args: argparse.Namespace) -> Path:
    ws = Path(args.workspace).resolve()
    if not etb_dir(ws).is_dir():
        raise WorkspaceError(f"{ws} is not an etb workspace (run `etb init` first)")
    return ws


def _workflow(ws: Path, path: str | None = None) -> Workflow:
    p = Path(path) if path else ws / "workflow.dl"
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as exc:
        raise WorkspaceError(f"cannot read workflow: {exc}") from None
    return parse_workflow(text)


def _registry(ws: Path) -> dict[str, ToolManifest]:
    return load_registry(ws / "tools")


def _node(ws: Path) -> NodeConfig | None:
    p = ws / "node.json"
    if not p.exists():
        return None
    try:
        return NodeConfig.load(p)
    except (OSError, ValueError) as exc:
        raise WorkspaceError(f"node.json: {exc}") from None


def _load_table(ws: Path) -> ClaimsTable:
    try:
        return load(ws)
    except CorruptStore as exc:
        raise WorkspaceError(str(exc)) from None


def _lock(ws: Path):
    lock = workspace_lock(ws, timeout=LOCK_TIMEOUT_S)
    try:
        lock.acquire()
    except LockTimeout:
        raise WorkspaceError(f"workspace {ws} is locked by another etb process") from None
    return lock


def _term(value: str, ws: Path, base: Path) -> Term:
    """A ``--var`` value: ``@path`` registers a file as an artifact, anything
    else is read as a ground term (falling back to a plain string)."""
    if value.startswith("@"):
        p = Path(value[1:])
        if not p.is_absolute():
            p = base / p
        if not p.is_file():
            raise UsageError(f"input file {p} does not exist")
        store = open_store(ws)
        art = store.register(p, origin=f"input:{p.name}")
        store.flush()
        return ArtifactRef(art.hash)
    try:
        return parse_term(value)
    except WorkflowError:
        return Const(value)


def _split_var(spec: str) -> tuple[str, str]:
    name, sep, value = spec.partition("=")
    if not sep or not name:
        raise UsageError(f"--var expects NAME=VALUE, got {spec!r}")
    return name.strip(), value.strip()


def _bindings(args: argparse.Namespace, ws: Path) -> dict[str, Term]:
    out: dict[str, Term] = {}
    if getattr(args, "vars", None):
        vf = Path(args.vars)
        try:
            lines = vf.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise UsageError(f"cannot read {vf}: {exc}") from None
        for ln in lines:
            ln = ln.strip()
            if ln and not ln.startswith("#"):
                name, value = _split_var(ln)
                out[name] = _term(value, ws, vf.resolve().parent)
    for spec in args.var or []:
        name, value = _split_var(spec)
        out[name] = _term(value, ws, Path.cwd())
    return out


def _emit(obj: Any) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, ensure_ascii=False) + "\n")


def _color(status: str) -> str:
    if sys.stdout.isatty():
        return f"{COLORS.get(status, '')}{status}\033[0m"
    return status


# -- commands ----------------------------------------------------------------------


def cmd_init(args: argparse.Namespace) -> int:
    ws = Path(args.workspace).resolve()
    ws.mkdir(parents=True, exist_ok=True)
    (etb_dir(ws) / "artifacts").mkdir(parents=True, exist_ok=True)
    (ws / "tools").mkdir(exist_ok=True)
    copied = 0
    if args.example:
        src = Path(str(resources.files("etb") / "data" / args.example))
        for f in sorted(src.rglob("*")):
            if f.is_dir() or "__pycache__" in f.parts:
                continue
            dest = ws / f.relative_to(src)
            if not dest.exists():
                dest.parent.mkdir(parents=True, exist_ok=True)
                shutil.copy2(f, dest)
                copied += 1
    wf = ws / "workflow.dl"
    if not wf.exists():
        wf.write_text("% Assurance workflow: rules, facts and #mode declarations.\n")
    print(f"initialized {ws}" + (f" ({copied} example files)" if copied else ""))
    return EXIT_OK


def cmd_check(args: argparse.Namespace) -> int:
    ws = Path(args.workspace).resolve()
    w = _workflow(ws, args.file)
    registry = _registry(ws) if (ws / "tools").is_dir() else {}
    report = validate_workflow(w, [m.modes for m in registry.values()])
    for f in report:
        print(str(f), file=sys.stderr)
    if args.json:
        _emit({"ok": report.ok, "findings": [{"kind": f.kind.value, "message": f.message, "rule": f.rule}
                                             for f in report]})
    elif report.ok:
        print(f"ok: {len(w.rules)} rules, {len(w.facts)} facts")
    return EXIT_OK if report.ok else EXIT_FINDINGS


def _solver_options(ws: Path) -> dict[str, Any]:
    cfg = _node(ws)
    if cfg is None:
        return {}
    opts: dict[str, Any] = {"node_id": cfg.node_id}
    if cfg.peers:
        opts["remote"] = PeerResolver(cfg.peers, cfg.node_id)
    return opts


def _validated(ws: Path) -> tuple[Workflow, dict[str, ToolManifest], dict[str, Any]]:
    w = _workflow(ws)
    registry = _registry(ws)
    opts = _solver_options(ws)
    specs = [m.modes for m in registry.values()]
    if "remote" in opts:
        specs += list(opts["remote"].services().values())
    report = validate_workflow(w, specs)
    if not report.ok:
        for f in report:
            print(str(f), file=sys.stderr)
        raise _Findings()
    return w, registry, opts


class _Findings(Exception):
    pass


def _report_counterexample(ce: CounterExample, ws: Path, as_json: bool) -> None:
    ce.write(ws / "counterexample.json")
    if as_json:
        _emit({"outcome": "COUNTEREXAMPLE", **ce.to_json()})
    else:
        print("counter-example:", file=sys.stderr)
        print(ce.render(), file=sys.stderr)
        print(f"written to {ws / 'counterexample.json'}", file=sys.stderr)


def cmd_run(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    with _lock(ws):
        w, registry, opts = _validated(ws)
        goal = args.goal or w.top_goal
        if goal is None:
            raise UsageError("the workflow has no goal; pass --goal")
        bindings = _bindings(args, ws)
        table = _load_table(ws)
        solver = Solver(w, registry, table, ws, **opts)
        try:
            result = solver.run(Query(goal, bindings))
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        persist(table, ws)
        if isinstance(result, CounterExample):
            _report_counterexample(result, ws, args.json)
            return EXIT_COUNTEREXAMPLE
        stale = ws / "counterexample.json"
        if stale.exists():
            stale.unlink()
        if args.json:
            _emit({"outcome": "ESTABLISHED", "root": result.claim_id, "atom": canonical(result.atom),
                   "claims": len(list(result.walk())), "tool_invocations": len(solver.invocations),
                   "reused": len(solver.reused)})
        else:
            print(f"established {canonical(result.atom)}")
            print(f"root claim {result.claim_id}")
            print(f"{len(list(result.walk()))} claims, {len(solver.invocations)} tool invocations, "
                  f"{len(solver.reused)} reused")
        return EXIT_OK


def cmd_claims(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    table = _load_table(ws)
    claims = table.history if args.all else table.live_claims()
    if args.json:
        _emit({"root": table.root, "goal": table.goal,
               "input_bindings": {k: canonical(v) for k, v in sorted(table.input_bindings.items())},
               "claims": [c.to_json() for c in claims]})
        return EXIT_OK
    for c in claims:
        atom = canonical(c.atom)
        if len(atom) > 100 and not args.wide:
            atom = atom[:97] + "..."
        print(f"{c.id[:12]}  {c.status.value:<11}  {c.kind.value:<10}  {c.node:<8}  {atom}")
    print(f"{len(claims)} claims", file=sys.stderr)
    return EXIT_OK


def cmd_impact(args: argparse.Namespace) -> int:
    ws = Path(args.workspace).resolve()
    w = _workflow(ws, args.file)
    names = [v.partition("=")[0].strip() for v in args.var or []]
    try:
        report = impact(build_dataflow(w), names)
    except UnknownVariable as exc:
        raise UsageError(str(exc)) from None
    if args.json:
        _emit(report.to_json())
        return EXIT_OK
    width = max((len(g) for g in report.order), default=4)
    print(f"{'goal':<{width}}  status")
    for g, st in report.rows():
        print(f"{g:<{width}}  {_color(st.value)}")
    print(f"{len(report.direct)} DIRECT, {len(report.indirect)} INDIRECT, "
          f"{len(report.unaffected)} UNAFFECTED", file=sys.stderr)
    return EXIT_OK


def cmd_maintain(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    with _lock(ws):
        w, registry, opts = _validated(ws)
        changed = _bindings(args, ws)
        if not changed:
            raise UsageError("maintain needs at least one --var NAME=VALUE")
        table = _load_table(ws)
        try:
            result = maintain(w, registry, table, changed, ws, **opts)
        except NoPriorCase as exc:
            raise WorkspaceError(str(exc)) from None
        except UnknownVariable as exc:
            raise UsageError(str(exc)) from None
        persist(table, ws)
        if result.counterexample is not None:
            _report_counterexample(result.counterexample, ws, args.json)
            return EXIT_COUNTEREXAMPLE
        if args.json:
            _emit(result.to_json())
        else:
            print(f"updated case, root claim {table.root}")
            print("re-run: " + (", ".join(result.rerun_goals) or "-"))
            print("revalidated: " + (", ".join(result.revalidated) or "-"))
            print(f"{len(result.invocations)} tool invocations, {len(result.stale_claims)} claims stale")
        return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    table = _load_table(ws)
    try:
        w: Workflow | None = _workflow(ws)
    except (WorkspaceError, WorkflowError):
        w = None
    try:
        text = export_gsn(table, args.root, args.format, workflow=w)
    except NotEstablished as exc:
        raise WorkspaceError(str(exc)) from None
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    ws = _workspace(args)
    report = verify_integrity(ws)
    if args.json:
        _emit({"ok": report.ok, "findings": report.lines()})
    else:
        for ln in report.lines():
            print(ln)
        if report.ok:
            print("store ok")
    return EXIT_OK if report.ok else EXIT_FINDINGS


def cmd_serve(args: argparse.Namespace) -> int:
    try:
        cfg = NodeConfig.load(args.config)
    except (OSError, ValueError) as exc:
        raise WorkspaceError(f"{args.config}: {exc}") from None
    etb_dir(cfg.workspace).mkdir(parents=True, exist_ok=True)

    def ready(address: str) -> None:
        print(f"node {cfg.node_id} listening on {address}", flush=True)

    serve(cfg, ready)
    return EXIT_OK


def cmd_nodes_list(args: argparse.Namespace) -> int:
    from etb.engine import RemoteError

    try:
        node_id, specs = list_services(args.address)
    except (RemoteError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_COUNTEREXAMPLE
    if args.json:
        _emit({"node_id": node_id, "services": [{"predicate": s.predicate, "modes": s.text} for s in specs]})
    else:
        print(f"node {node_id}")
        for s in specs:
            print(f"  {s.predicate}  {s.text}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="etb", description="Build and maintain assurance cases from Datalog workflows.")
    p.add_argument("-C", "--workspace", default=".", help="workspace directory (default: .)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("init", help="create a workspace (idempotent)")
    s.add_argument("--example", choices=EXAMPLES, help="copy a bundled example into the workspace")
    s.set_defaults(func=cmd_init)

    s = sub.add_parser("check", help="parse and validate a workflow")
    s.add_argument("file", nargs="?", help="workflow file (default: workflow.dl)")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_check)

    def var_options(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--var", action="append", metavar="NAME=VALUE",
                        help="bind an input variable; @path registers a file as evidence")
        sp.add_argument("--vars", metavar="FILE", help="file with one NAME=VALUE per line")
        sp.add_argument("--json", action="store_true")

    s = sub.add_parser("run", help="establish a goal")
    s.add_argument("--goal", help="goal predicate (default: the workflow's top goal)")
    var_options(s)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("claims", help="list the claims table")
    s.add_argument("--all", action="store_true", help="include superseded revisions")
    s.add_argument("--wide", action="store_true", help="do not shorten atoms")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_claims)

    s = sub.add_parser("impact", help="goals impacted by changed inputs (no side effects)")
    s.add_argument("--var", action="append", metavar="NAME", help="a changed input variable")
    s.add_argument("--file", help="workflow file (default: workflow.dl)")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_impact)

    s = sub.add_parser("maintain", help="re-establish the case after inputs changed")
    var_options(s)
    s.set_defaults(func=cmd_maintain)

    s = sub.add_parser("export", help="export the case")
    esub = s.add_subparsers(dest="what", required=True, parser_class=_Parser)
    e = esub.add_parser("gsn", help="GSN argument as DOT or JSON")
    e.add_argument("--format", choices=("dot", "json"), default="dot")
    e.add_argument("--root", help="root claim id (default: the case root)")
    e.add_argument("--out", help="output file (default: stdout)")
    e.set_defaults(func=cmd_export)

    s = sub.add_parser("verify", help="check evidence hashes and claim references")
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("serve", help="run a node that offers this workspace's tools")
    s.add_argument("--config", required=True, help="node.json")
    s.set_defaults(func=cmd_serve)

    s = sub.add_parser("nodes", help="inspect peer nodes")
    nsub = s.add_subparsers(dest="what", required=True, parser_class=_Parser)
    n = nsub.add_parser("list", help="services offered by the node at ADDRESS")
    n.add_argument("address", metavar="HOST:PORT")
    n.add_argument("--json", action="store_true")
    n.set_defaults(func=cmd_nodes_list)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"etb: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _Findings:
        return EXIT_FINDINGS
    except WorkflowError as exc:
        print(f"etb: {exc}", file=sys.stderr)
        return EXIT_FINDINGS
    except ManifestError as exc:
        print(f"etb: manifest {exc}", file=sys.stderr)
        return EXIT_WORKSPACE
    except (WorkspaceError, StoreError) as exc:
        print(f"etb: {exc}", file=sys.stderr)
        return EXIT_WORKSPACE
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"etb: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
