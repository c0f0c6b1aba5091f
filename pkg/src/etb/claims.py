"""Claims table and content-addressed evidence store.

On disk a workspace keeps everything under ``.etb/``::

    .etb/claims.json        every claim revision, oldest first
    .etb/state.json         input bindings, root claim and goal of the case
    .etb/evidence.json      artifact metadata (size, media hint, origin)
    .etb/artifacts/<hash>   artifact bytes, named by their sha256

Claims are keyed by the hash of their canonical atom text. Re-recording an
atom supersedes the previous revision (which becomes STALE) rather than
deleting it, so the file is an append-only history of the case.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
import tempfile
import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Iterable, Iterator, Union

from filelock import FileLock

from etb.graphs import cyclic_components
from etb.terms import Atom, Term, atom_id, atom_is_ground, canonical

ETB_DIR = ".etb"


class ClaimKind(str, enum.Enum):
    HIGH_LEVEL = "HIGH_LEVEL"
    LOW_LEVEL = "LOW_LEVEL"


class ClaimStatus(str, enum.Enum):
    ESTABLISHED = "ESTABLISHED"
    STALE = "STALE"
    REVALIDATED = "REVALIDATED"


class StoreError(Exception):
    pass


class IOFailure(StoreError):
    pass


class DanglingReference(StoreError):
    pass


class SupportCycle(StoreError):
    pass


class CorruptStore(StoreError):
    pass


def utcnow() -> datetime:
    return datetime.now(timezone.utc)


def rfc3339(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).isoformat(timespec="microseconds").replace("+00:00", "Z")


def parse_rfc3339(text: str) -> datetime:
    return datetime.fromisoformat(text.replace("Z", "+00:00"))


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- evidence ----------------------------------------------------------------


@dataclass(frozen=True)
class EvidenceArtifact:
    hash: str
    size_bytes: int
    media_hint: str | None = None
    created: datetime = field(default_factory=utcnow, compare=False)
    origin: str = "imported"

    def to_json(self) -> dict[str, Any]:
        return {
            "size_bytes": self.size_bytes,
            "media_hint": self.media_hint,
            "created": rfc3339(self.created),
            "origin": self.origin,
        }


class EvidenceStore:
    """Content-addressed artifacts below ``root`` (normally ``<ws>/.etb``).

    Registration is serialized by an in-process lock; artifact files are
    written atomically so concurrent readers never see partial content.
    """

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.artifacts_dir = self.root / "artifacts"
        self._index_path = self.root / "evidence.json"
        self._lock = threading.RLock()
        self._meta: dict[str, EvidenceArtifact] = {}
        if self._index_path.exists():
            try:
                raw = json.loads(self._index_path.read_text())
                for h, m in raw.items():
                    self._meta[h] = EvidenceArtifact(
                        h, int(m["size_bytes"]), m.get("media_hint"),
                        parse_rfc3339(m["created"]), m.get("origin", "imported"),
                    )
            except (ValueError, KeyError, TypeError) as exc:
                raise CorruptStore(f"unreadable evidence index: {exc}") from exc

    def path(self, h: str) -> Path:
        return self.artifacts_dir / h

    def __contains__(self, h: object) -> bool:
        return isinstance(h, str) and self.path(h).is_file()

    def hashes(self) -> list[str]:
        if not self.artifacts_dir.is_dir():
            return []
        return sorted(p.name for p in self.artifacts_dir.iterdir() if not p.name.startswith("."))

    def read(self, h: str) -> bytes:
        try:
            return self.path(h).read_bytes()
        except OSError as exc:
            raise IOFailure(f"cannot read artifact {h}: {exc}") from exc

    def get(self, h: str) -> EvidenceArtifact | None:
        with self._lock:
            if h in self._meta:
                return self._meta[h]
            p = self.path(h)
            if not p.is_file():
                return None
            st = p.stat()
            art = EvidenceArtifact(h, st.st_size, None, datetime.fromtimestamp(st.st_mtime, timezone.utc))
            self._meta[h] = art
            return art

    def register(
        self,
        content: Union[bytes, str, Path],
        media_hint: str | None = None,
        origin: str = "imported",
    ) -> EvidenceArtifact:
        """Copy ``content`` (bytes or a file path) into the store."""
        if isinstance(content, (str, Path)):
            try:
                data = Path(content).read_bytes()
            except OSError as exc:
                raise IOFailure(f"cannot read {content}: {exc}") from exc
            if media_hint is None:
                media_hint = Path(content).suffix.lstrip(".") or None
        else:
            data = bytes(content)
        h = sha256_hex(data)
        with self._lock:
            target = self.path(h)
            if not target.is_file():
                try:
                    _atomic_write(target, data)
                except OSError as exc:
                    raise IOFailure(f"cannot store artifact {h}: {exc}") from exc
            if h not in self._meta:
                self._meta[h] = EvidenceArtifact(h, len(data), media_hint, utcnow(), origin)
            return self._meta[h]

    def import_bytes(self, h: str, data: bytes, origin: str) -> EvidenceArtifact:
        """Register bytes received from elsewhere, refusing a hash mismatch."""
        if sha256_hex(data) != h:
            raise CorruptStore(f"content does not hash to {h}")
        return self.register(data, origin=origin)

    def flush(self) -> None:
        with self._lock:
            payload = {h: a.to_json() for h, a in sorted(self._meta.items()) if h in self}
            _atomic_write(self._index_path, json.dumps(payload, indent=2).encode())


def register_evidence(
    content: Union[bytes, str, Path], store_root: Union[str, Path], media_hint: str | None = None
) -> EvidenceArtifact:
    store = EvidenceStore(store_root)
    art = store.register(content, media_hint)
    store.flush()
    return art


# -- claims ------------------------------------------------------------------


@dataclass(frozen=True)
class RuleSupport:
    rule: str
    subclaims: tuple[str, ...]


@dataclass(frozen=True)
class ToolSupport:
    tool: str
    evidence: tuple[str, ...]
    invocation: dict = field(default_factory=dict, compare=False, hash=False)


@dataclass(frozen=True)
class FactSupport:
    fact: str = "workflow"


Provenance = Union[RuleSupport, ToolSupport, FactSupport]


@dataclass
class Claim:
    atom: Atom
    kind: ClaimKind
    provenance: Provenance
    status: ClaimStatus = ClaimStatus.ESTABLISHED
    node: str = "local"
    revision: int = 1
    established_at: datetime = field(default_factory=utcnow, compare=False)
    id: str = field(init=False)

    def __post_init__(self) -> None:
        self.id = atom_id(self.atom)

    @property
    def live(self) -> bool:
        return self.status is not ClaimStatus.STALE

    @property
    def subclaims(self) -> tuple[str, ...]:
        return self.provenance.subclaims if isinstance(self.provenance, RuleSupport) else ()

    @property
    def evidence(self) -> tuple[str, ...]:
        return self.provenance.evidence if isinstance(self.provenance, ToolSupport) else ()

    def check(self) -> None:
        if not atom_is_ground(self.atom):
            raise ValueError(f"claim atom is not ground: {self.atom}")
        p = self.provenance
        if self.kind is ClaimKind.HIGH_LEVEL:
            if not isinstance(p, RuleSupport) or not p.subclaims:
                raise ValueError("high-level claims need a rule and at least one sub-claim")
        elif isinstance(p, ToolSupport):
            if not p.evidence:
                raise ValueError("tool-backed claims need at least one evidence hash")
        elif not isinstance(p, FactSupport):
            raise ValueError("low-level claims need evidence or a fact origin")

    def to_json(self) -> dict[str, Any]:
        p = self.provenance
        if isinstance(p, RuleSupport):
            prov: dict[str, Any] = {"rule": p.rule, "subclaims": list(p.subclaims)}
        elif isinstance(p, ToolSupport):
            prov = {"tool": p.tool, "evidence": list(p.evidence), "invocation": p.invocation}
        else:
            prov = {"fact": p.fact}
        return {
            "id": self.id,
            "atom": canonical(self.atom),
            "kind": self.kind.value,
            "status": self.status.value,
            "provenance": prov,
            "established_at": rfc3339(self.established_at),
            "node": self.node,
            "revision": self.revision,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "Claim":
        from etb.lang import parse_atom

        prov = obj["provenance"]
        if "rule" in prov:
            p: Provenance = RuleSupport(str(prov["rule"]), tuple(map(str, prov["subclaims"])))
        elif "tool" in prov:
            p = ToolSupport(str(prov["tool"]), tuple(map(str, prov["evidence"])), dict(prov.get("invocation") or {}))
        elif "fact" in prov:
            p = FactSupport(str(prov["fact"]))
        else:
            raise ValueError("unknown provenance shape")
        c = cls(
            atom=parse_atom(obj["atom"]),
            kind=ClaimKind(obj["kind"]),
            provenance=p,
            status=ClaimStatus(obj["status"]),
            node=str(obj["node"]),
            revision=int(obj.get("revision", 1)),
            established_at=parse_rfc3339(obj["established_at"]),
        )
        if c.id != obj["id"]:
            raise ValueError(f"claim id {obj['id']} does not match its atom")
        return c


class ClaimsTable:
    """Claims indexed by id and predicate, plus the case's input bindings.

    ``history`` keeps every revision in insertion order; lookups by id see
    the latest revision. At most one revision per atom is live (ESTABLISHED
    or REVALIDATED) at any time.
    """

    def __init__(self, store: EvidenceStore | None = None):
        self.store = store
        self.history: list[Claim] = []
        self.input_bindings: dict[str, Term] = {}
        self.root: str | None = None
        self.goal: str | None = None
        self._latest: dict[str, Claim] = {}
        self._by_pred: dict[str, list[str]] = {}

    def __len__(self) -> int:
        return len(self.history)

    def __contains__(self, claim_id: object) -> bool:
        return claim_id in self._latest

    def get(self, claim_id: str) -> Claim | None:
        return self._latest.get(claim_id)

    def live(self, claim_id: str) -> Claim | None:
        c = self._latest.get(claim_id)
        return c if c is not None and c.live else None

    def lookup(self, atom: Atom) -> Claim | None:
        return self.live(atom_id(atom))

    def latest(self) -> Iterator[Claim]:
        return iter(self._latest.values())

    def live_claims(self) -> list[Claim]:
        return [c for c in self._latest.values() if c.live]

    def by_predicate(self, predicate: str, live_only: bool = True) -> list[Claim]:
        out = [self._latest[i] for i in self._by_pred.get(predicate, ())]
        return [c for c in out if c.live] if live_only else out

    def set_status(self, claim_id: str, status: ClaimStatus) -> None:
        self._latest[claim_id].status = status

    def _index(self, c: Claim) -> None:
        if c.id not in self._latest:
            self._by_pred.setdefault(c.atom.predicate, []).append(c.id)
        self._latest[c.id] = c
        self.history.append(c)

    def _reaches(self, start: Iterable[str], target: str) -> bool:
        seen: set[str] = set()
        todo = list(start)
        while todo:
            i = todo.pop()
            if i == target:
                return True
            if i in seen:
                continue
            seen.add(i)
            c = self._latest.get(i)
            if c is not None:
                todo.extend(c.subclaims)
        return False

    def record(self, c: Claim) -> Claim:
        """Insert ``c``; a previous live revision of the same atom goes STALE.

        Raises:
            ValueError: ``c`` violates the claim invariants.
            DanglingReference: a sub-claim id or evidence hash is unknown.
            SupportCycle: the new support edges would close a cycle.
        """
        c.check()
        for sub in c.subclaims:
            if sub not in self._latest:
                raise DanglingReference(f"sub-claim {sub} of {canonical(c.atom)} is unknown")
        if self.store is not None:
            for h in c.evidence:
                if h not in self.store:
                    raise DanglingReference(f"evidence {h} of {canonical(c.atom)} is not stored")
        if c.subclaims and self._reaches(c.subclaims, c.id):
            raise SupportCycle(f"{canonical(c.atom)} would support itself")
        prev = self._latest.get(c.id)
        if prev is not None:
            c.revision = prev.revision + 1
            if prev.live:
                prev.status = ClaimStatus.STALE
        self._index(c)
        return c

    def support_closure(self, root: str) -> list[str]:
        """Ids reachable from ``root`` through sub-claims, root first."""
        out: list[str] = []
        seen: set[str] = set()
        todo = [root]
        while todo:
            i = todo.pop(0)
            if i in seen or i not in self._latest:
                continue
            seen.add(i)
            out.append(i)
            todo.extend(self._latest[i].subclaims)
        return out

    def snapshot(self) -> list[tuple]:
        """Structural view used for equality (timestamps excluded)."""
        return [
            (c.id, canonical(c.atom), c.kind, c.provenance, c.status, c.node, c.revision)
            for c in self.history
        ]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClaimsTable):
            return NotImplemented
        return (
            self.snapshot() == other.snapshot()
            and self.input_bindings == other.input_bindings
            and self.root == other.root
            and self.goal == other.goal
        )


def record_claim(t: ClaimsTable, c: Claim) -> ClaimsTable:
    t.record(c)
    return t


# -- persistence ---------------------------------------------------------------


def etb_dir(root: Union[str, Path]) -> Path:
    return Path(root) / ETB_DIR


def workspace_lock(root: Union[str, Path], timeout: float = 30.0) -> FileLock:
    d = etb_dir(root)
    d.mkdir(parents=True, exist_ok=True)
    return FileLock(str(d / "lock"), timeout=timeout)


def open_store(root: Union[str, Path]) -> EvidenceStore:
    return EvidenceStore(etb_dir(root))


def persist(t: ClaimsTable, root: Union[str, Path]) -> None:
    """Write ``t`` below ``root/.etb`` atomically, file by file."""
    d = etb_dir(root)
    (d / "artifacts").mkdir(parents=True, exist_ok=True)
    if t.store is not None:
        t.store.flush()
    claims = [c.to_json() for c in t.history]
    state = {
        "input_bindings": {k: canonical_term(v) for k, v in sorted(t.input_bindings.items())},
        "root": t.root,
        "goal": t.goal,
    }
    _atomic_write(d / "claims.json", (json.dumps(claims, indent=2, ensure_ascii=False) + "\n").encode())
    _atomic_write(d / "state.json", (json.dumps(state, indent=2, ensure_ascii=False) + "\n").encode())


def canonical_term(t: Term) -> str:
    return str(t)


def load(root: Union[str, Path]) -> ClaimsTable:
    """Read the claims table of workspace ``root``.

    Raises:
        CorruptStore: schema violation, an id that does not hash its atom,
            two live revisions of one atom, or a dangling reference.
    """
    from etb.lang import WorkflowError, parse_term

    d = etb_dir(root)
    store = EvidenceStore(d)
    t = ClaimsTable(store)
    claims_path = d / "claims.json"
    if not claims_path.exists():
        return t
    try:
        raw = json.loads(claims_path.read_text(encoding="utf-8"))
        if not isinstance(raw, list):
            raise ValueError("claims.json must hold a JSON array")
        claims = [Claim.from_json(o) for o in raw]
        state_path = d / "state.json"
        state = json.loads(state_path.read_text(encoding="utf-8")) if state_path.exists() else {}
        bindings = {k: parse_term(v) for k, v in (state.get("input_bindings") or {}).items()}
    except (ValueError, KeyError, TypeError, AttributeError, WorkflowError) as exc:
        raise CorruptStore(f"{claims_path}: {exc}") from exc

    live_seen: set[str] = set()
    for c in claims:
        if c.live:
            if c.id in live_seen:
                raise CorruptStore(f"two live revisions of {canonical(c.atom)}")
            live_seen.add(c.id)
        prev = t._latest.get(c.id)
        if prev is not None and prev.live:
            raise CorruptStore(f"revision {c.revision} of {canonical(c.atom)} follows a live revision")
        t._index(c)
    for c in t.latest():
        for sub in c.subclaims:
            if sub not in t:
                raise CorruptStore(f"dangling sub-claim {sub} in {c.id}")
        for h in c.evidence:
            if h not in store:
                raise CorruptStore(f"dangling evidence {h} in {c.id}")
    t.input_bindings = bindings
    t.root = state.get("root")
    t.goal = state.get("goal")
    if t.root is not None and t.root not in t:
        raise CorruptStore(f"root claim {t.root} is unknown")
    return t


# -- integrity -----------------------------------------------------------------


@dataclass
class IntegrityReport:
    hash_mismatches: list[str] = field(default_factory=list)
    missing_artifacts: list[tuple[str, str]] = field(default_factory=list)
    dangling: list[tuple[str, str]] = field(default_factory=list)
    cycles: list[tuple[str, ...]] = field(default_factory=list)
    errors: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not (self.hash_mismatches or self.missing_artifacts or self.dangling
                    or self.cycles or self.errors)

    def __len__(self) -> int:
        return (len(self.hash_mismatches) + len(self.missing_artifacts) + len(self.dangling)
                + len(self.cycles) + len(self.errors))

    def lines(self) -> list[str]:
        out = [f"hash mismatch: artifact {h}" for h in self.hash_mismatches]
        out += [f"missing artifact {h} referenced by {c}" for c, h in self.missing_artifacts]
        out += [f"dangling sub-claim {s} referenced by {c}" for c, s in self.dangling]
        out += ["support cycle: " + " -> ".join(cyc) for cyc in self.cycles]
        out += self.errors
        return out


def verify_integrity(root: Union[str, Path]) -> IntegrityReport:
    """Re-hash every artifact and check the support graph of ``root``'s store.

    Works on the raw files, so it also reports on stores that :func:`load`
    refuses.
    """
    d = etb_dir(root)
    report = IntegrityReport()
    art_dir = d / "artifacts"
    present: set[str] = set()
    if art_dir.is_dir():
        for p in sorted(art_dir.iterdir()):
            if p.name.startswith("."):
                continue
            present.add(p.name)
            if sha256_hex(p.read_bytes()) != p.name:
                report.hash_mismatches.append(p.name)
    claims_path = d / "claims.json"
    if not claims_path.exists():
        return report
    try:
        raw = json.loads(claims_path.read_text(encoding="utf-8"))
        if not isinstance(raw, list):
            raise ValueError("claims.json must hold a JSON array")
    except ValueError as exc:
        report.errors.append(f"unreadable claims file: {exc}")
        return report
    latest: dict[str, dict] = {}
    for obj in raw:
        if isinstance(obj, dict) and isinstance(obj.get("id"), str):
            latest[obj["id"]] = obj
        else:
            report.errors.append(f"malformed claim entry: {obj!r:.80}")
    graph: dict[str, list[str]] = {}
    for cid, obj in latest.items():
        prov = obj.get("provenance") or {}
        subs = [s for s in prov.get("subclaims", []) if isinstance(s, str)]
        graph[cid] = [s for s in subs if s in latest]
        for s in subs:
            if s not in latest:
                report.dangling.append((cid, s))
        for h in prov.get("evidence", []):
            if h not in present:
                report.missing_artifacts.append((cid, h))
    report.cycles = cyclic_components(graph)
    return report
