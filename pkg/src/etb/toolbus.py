"""Declarative tool manifests and tool invocation.

A manifest describes how an external tool discharges one extensional
predicate: which argument positions are inputs, the command line to run,
and how each output position is read back. Example::

    {
      "predicate": "g11_scenario_based_testing",
      "modes": "+++--",
      "command": "bash interface.sh {arg1} {arg2} {arg3}",
      "capture": ["stdout-file", "stdout-file"],
      "timeout_s": 600,
      "node_local": false
    }

Placeholders: ``{argN}`` is the N-th argument of the atom (inputs only),
``{workspace}`` the invocation's private directory, ``{tooldir}`` the
directory holding the manifest file.
"""

from __future__ import annotations

import enum
import glob
import json
import os
import shlex
import shutil
import string
import subprocess
import tempfile
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Iterable, Sequence, Union

from etb.claims import EvidenceStore, rfc3339, utcnow
from etb.lang import ModeSpec, WorkflowError, parse_term
from etb.terms import ArtifactRef, Const, ListTerm, Term, is_ground

DEFAULT_TIMEOUT_S = 300
ENV_PASSTHROUGH = ("PATH", "HOME", "LANG", "LC_ALL", "LC_CTYPE", "TMPDIR", "SYSTEMROOT")


class ManifestError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


class CaptureKind(str, enum.Enum):
    STDOUT_LINE_AS_FILE = "stdout-file"
    STDOUT_LINE_AS_CONST = "stdout-const"
    FILE_GLOB = "glob"


@dataclass(frozen=True)
class Capture:
    kind: CaptureKind
    pattern: str | None = None

    def to_json(self) -> Any:
        if self.kind is CaptureKind.FILE_GLOB:
            return {"glob": self.pattern}
        return self.kind.value


@dataclass(frozen=True)
class ToolManifest:
    predicate: str
    modes: ModeSpec
    command_template: str
    output_capture: tuple[Capture, ...]
    timeout_s: int = DEFAULT_TIMEOUT_S
    node_local: bool = False
    tooldir: Path | None = field(default=None, compare=False)

    @property
    def n_inputs(self) -> int:
        return len(self.modes.in_positions)

    @property
    def n_outputs(self) -> int:
        return len(self.modes.out_positions)

    def to_json(self) -> dict[str, Any]:
        return {
            "predicate": self.predicate,
            "modes": self.modes.text,
            "command": self.command_template,
            "capture": [c.to_json() for c in self.output_capture],
            "timeout_s": self.timeout_s,
            "node_local": self.node_local,
        }


def _placeholders(template: str) -> list[str]:
    try:
        return [f for _, f, _, _ in string.Formatter().parse(template) if f is not None]
    except ValueError as exc:
        raise ManifestError("command_template", str(exc)) from None


def manifest_from_dict(obj: Any, tooldir: Path | None = None) -> ToolManifest:
    if not isinstance(obj, dict):
        raise ManifestError("manifest", "must be a JSON object")
    pred = obj.get("predicate")
    if not isinstance(pred, str) or not pred or not (pred[0].islower() and pred.replace("_", "a").isalnum()):
        raise ManifestError("predicate", f"not a predicate name: {pred!r}")
    modes_text = obj.get("modes")
    if not isinstance(modes_text, str):
        raise ManifestError("modes", "must be a string of '+' and '-'")
    try:
        modes = ModeSpec.parse(pred, modes_text)
    except ValueError as exc:
        raise ManifestError("modes", str(exc)) from None
    command = obj.get("command")
    if not isinstance(command, str) or not command.strip():
        raise ManifestError("command_template", "must be a non-empty string")
    for name in _placeholders(command):
        if name in ("workspace", "tooldir"):
            continue
        if not name.startswith("arg") or not name[3:].isdigit():
            raise ManifestError("command_template", f"unknown placeholder {{{name}}}")
        pos = int(name[3:])
        if not 1 <= pos <= modes.arity:
            raise ManifestError("command_template", f"{{{name}}} is outside arity {modes.arity}")
        if pos - 1 not in modes.in_positions:
            raise ManifestError("command_template", f"{{{name}}} refers to an output position")
    try:
        shlex.split(command)
    except ValueError as exc:
        raise ManifestError("command_template", str(exc)) from None
    raw_capture = obj.get("capture", [])
    if not isinstance(raw_capture, list):
        raise ManifestError("output_capture", "must be an array")
    captures: list[Capture] = []
    for entry in raw_capture:
        if entry == "stdout-file":
            captures.append(Capture(CaptureKind.STDOUT_LINE_AS_FILE))
        elif entry == "stdout-const":
            captures.append(Capture(CaptureKind.STDOUT_LINE_AS_CONST))
        elif isinstance(entry, dict) and set(entry) == {"glob"} and isinstance(entry["glob"], str):
            captures.append(Capture(CaptureKind.FILE_GLOB, entry["glob"]))
        else:
            raise ManifestError("output_capture", f"unknown capture rule {entry!r}")
    if len(captures) != len(modes.out_positions):
        raise ManifestError(
            "output_capture",
            f"{len(captures)} capture rules for {len(modes.out_positions)} output positions",
        )
    timeout = obj.get("timeout_s", DEFAULT_TIMEOUT_S)
    if isinstance(timeout, bool) or not isinstance(timeout, int) or timeout <= 0:
        raise ManifestError("timeout_s", "must be a positive integer")
    node_local = obj.get("node_local", False)
    if not isinstance(node_local, bool):
        raise ManifestError("node_local", "must be a boolean")
    return ToolManifest(pred, modes, command, tuple(captures), timeout, node_local, tooldir)


def load_manifest(path: Union[str, Path]) -> ToolManifest:
    """Read and validate one manifest file."""
    path = Path(path)
    try:
        obj = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ManifestError("manifest", f"cannot read {path}: {exc}") from None
    except ValueError as exc:
        raise ManifestError("manifest", f"{path} is not valid JSON: {exc}") from None
    return manifest_from_dict(obj, path.parent.resolve())


def load_registry(tools_dir: Union[str, Path]) -> dict[str, ToolManifest]:
    """All ``*.json`` manifests of a ``tools/`` directory, keyed by predicate."""
    registry: dict[str, ToolManifest] = {}
    d = Path(tools_dir)
    if not d.is_dir():
        return registry
    for p in sorted(d.glob("*.json")):
        m = load_manifest(p)
        if m.predicate in registry:
            raise ManifestError("predicate", f"{m.predicate} is provided twice ({p.name})")
        registry[m.predicate] = m
    return registry


# -- invocation --------------------------------------------------------------


@dataclass
class ToolInvocation:
    predicate: str
    inputs: tuple[Term, ...]
    exit_code: int | None = None
    stdout: str = ""
    stderr: str = ""
    started: datetime = field(default_factory=utcnow)
    finished: datetime | None = None
    outputs: tuple[Term, ...] = ()
    produced: tuple[str, ...] = ()
    workdir: str = ""

    def meta(self) -> dict[str, Any]:
        return {
            "inputs": [str(t) for t in self.inputs],
            "outputs": [str(t) for t in self.outputs],
            "exit_code": self.exit_code,
            "stdout": self.stdout,
            "stderr": self.stderr,
            "started": rfc3339(self.started),
            "finished": rfc3339(self.finished) if self.finished else None,
        }


class ToolError(Exception):
    cause = "ToolError"

    def __init__(self, message: str, invocation: ToolInvocation | None = None):
        super().__init__(message)
        self.invocation = invocation


class ToolFailure(ToolError):
    cause = "ToolFailure"

    def __init__(self, exit_code: int, stderr: str, invocation: ToolInvocation | None = None):
        self.exit_code = exit_code
        self.stderr_excerpt = stderr[-500:]
        super().__init__(f"tool exited with status {exit_code}: {self.stderr_excerpt.strip()}", invocation)


class CaptureError(ToolError):
    cause = "CaptureError"

    def __init__(self, position: int, message: str, invocation: ToolInvocation | None = None):
        self.position = position
        super().__init__(f"output {position}: {message}", invocation)


class ToolTimeout(ToolError):
    cause = "Timeout"


def _render_input(term: Term, paths: dict[str, str]) -> str:
    if isinstance(term, ArtifactRef):
        return paths[term.hash]
    if isinstance(term, Const):
        return str(term.value)
    if isinstance(term, ListTerm):
        return "[" + ", ".join(_render_input(e, paths) if not isinstance(e, Const) else str(e)
                               for e in term.elements) + "]"
    raise ValueError(f"input is not ground: {term}")


def _collect_refs(term: Term, out: list[str]) -> None:
    if isinstance(term, ArtifactRef):
        out.append(term.hash)
    elif isinstance(term, ListTerm):
        for e in term.elements:
            _collect_refs(e, out)


def scrubbed_env(workdir: Path) -> dict[str, str]:
    env = {k: v for k, v in os.environ.items() if k in ENV_PASSTHROUGH or k.startswith("ETB_")}
    env["ETB_WORKSPACE"] = str(workdir)
    return env


def invoke_tool(
    m: ToolManifest,
    inputs: Sequence[Term],
    workspace: Union[str, Path],
    store: EvidenceStore,
) -> ToolInvocation:
    """Run ``m`` on ground ``inputs`` inside a fresh subdirectory of
    ``workspace`` and register what it produced in ``store``.

    Raises:
        ToolFailure: nonzero exit status.
        CaptureError: a declared output line or file is missing or malformed.
        ToolTimeout: the tool ran longer than ``m.timeout_s``.
    """
    inputs = tuple(inputs)
    if len(inputs) != m.n_inputs:
        raise ValueError(f"{m.predicate} takes {m.n_inputs} inputs, got {len(inputs)}")
    for t in inputs:
        if not is_ground(t):
            raise ValueError(f"input {t} of {m.predicate} is not ground")
    base = Path(workspace)
    base.mkdir(parents=True, exist_ok=True)
    workdir = Path(tempfile.mkdtemp(prefix=f"{m.predicate}-", dir=base)).resolve()
    inv = ToolInvocation(m.predicate, inputs, workdir=str(workdir))

    refs: list[str] = []
    for t in inputs:
        _collect_refs(t, refs)
    paths: dict[str, str] = {}
    if refs:
        (workdir / "inputs").mkdir()
    for h in refs:
        if h in paths:
            continue
        if h not in store:
            raise ValueError(f"input artifact {h} is not in the evidence store")
        dest = workdir / "inputs" / h
        shutil.copyfile(store.path(h), dest)
        paths[h] = str(dest)

    values: dict[str, str] = {"workspace": str(workdir), "tooldir": str(m.tooldir or workdir)}
    for pos, t in zip(m.modes.in_positions, inputs):
        values[f"arg{pos + 1}"] = _render_input(t, paths)
    argv = [tok.format_map(values) for tok in shlex.split(m.command_template)]

    try:
        proc = subprocess.run(
            argv, cwd=workdir, env=scrubbed_env(workdir), capture_output=True,
            timeout=m.timeout_s, stdin=subprocess.DEVNULL,
        )
    except subprocess.TimeoutExpired as exc:
        inv.finished = utcnow()
        inv.stdout = (exc.stdout or b"").decode("utf-8", "replace")
        inv.stderr = (exc.stderr or b"").decode("utf-8", "replace")
        raise ToolTimeout(f"{m.predicate} timed out after {m.timeout_s}s", inv) from None
    except OSError as exc:
        inv.finished = utcnow()
        inv.exit_code = 127
        inv.stderr = str(exc)
        raise ToolFailure(127, str(exc), inv) from None
    inv.finished = utcnow()
    inv.exit_code = proc.returncode
    inv.stdout = proc.stdout.decode("utf-8", "replace")
    inv.stderr = proc.stderr.decode("utf-8", "replace")
    if proc.returncode != 0:
        raise ToolFailure(proc.returncode, inv.stderr, inv)

    origin = f"tool:{m.predicate}"
    lines = [ln.strip() for ln in inv.stdout.splitlines() if ln.strip()]
    cursor = 0
    outputs: list[Term] = []
    produced: list[str] = []
    for k, cap in enumerate(m.output_capture, start=1):
        if cap.kind is CaptureKind.FILE_GLOB:
            matches = sorted(glob.glob(cap.pattern, root_dir=workdir))  # type: ignore[arg-type]
            files = [workdir / p for p in matches if (workdir / p).is_file()]
            if not files:
                raise CaptureError(k, f"no file matches {cap.pattern!r}", inv)
            found = [store.register(f, origin=origin).hash for f in files]
            produced.extend(found)
            refs_out = [ArtifactRef(h) for h in found]
            outputs.append(refs_out[0] if len(refs_out) == 1 else ListTerm(tuple(refs_out)))
            continue
        if cursor >= len(lines):
            raise CaptureError(k, "tool printed too few lines", inv)
        line = lines[cursor]
        cursor += 1
        if cap.kind is CaptureKind.STDOUT_LINE_AS_FILE:
            p = Path(line)
            if not p.is_absolute():
                p = workdir / p
            if not p.is_file():
                raise CaptureError(k, f"output file {line!r} does not exist", inv)
            h = store.register(p, origin=origin).hash
            produced.append(h)
            outputs.append(ArtifactRef(h))
        else:
            try:
                term = parse_term(line)
            except WorkflowError:
                raise CaptureError(k, f"{line!r} is not a ground term", inv) from None
            if not is_ground(term):
                raise CaptureError(k, f"{line!r} is not a ground term", inv)
            outputs.append(term)
    if not produced:
        produced.append(store.register(proc.stdout, media_hint="stdout", origin=origin).hash)
    inv.outputs = tuple(outputs)
    inv.produced = tuple(produced)
    shutil.rmtree(workdir, ignore_errors=True)
    return inv


def registry_modes(registry: Iterable[ToolManifest]) -> list[ModeSpec]:
    return [m.modes for m in registry]
