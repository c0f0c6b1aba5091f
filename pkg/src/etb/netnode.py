"""Nodes that offer tool services to each other over TCP.

Frames are JSON objects, one per line, with a ``type`` field. A session
starts with a HELLO exchange. The client may then ask for the service list,
send QUERY frames for extensional goals and FETCH artifacts. While serving
a QUERY the provider may FETCH input artifacts it lacks from the client on
the same connection before it answers with RESULT or ERROR. See
``docs/protocol.md`` for the frame schema.
"""

from __future__ import annotations

import base64
import json
import logging
import signal
import socket
import socketserver
import threading
import time
import uuid
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Union

from etb.claims import Claim, ClaimKind, ClaimStatus, EvidenceStore, ToolSupport, etb_dir, sha256_hex
from etb.engine import Cause, RemoteError
from etb.lang import ModeSpec, WorkflowError, parse_term
from etb.terms import Atom, Term, artifact_refs, canonical, is_ground
from etb.toolbus import ToolError, ToolManifest, invoke_tool, load_registry

log = logging.getLogger(__name__)

PROTOCOL_VERSION = 1
MAX_FRAME = 64 * 1024 * 1024
SERVICE_TTL_S = 30.0
RETRIES = 2
DEDUP_SIZE = 1024


class ProtocolError(Exception):
    """A malformed or unexpected frame."""


def encode(frame: Mapping[str, Any]) -> bytes:
    return json.dumps(frame, separators=(",", ":"), sort_keys=True).encode() + b"\n"


class Channel:
    """Newline-delimited JSON frames over a connected socket."""

    def __init__(self, sock: socket.socket):
        self.sock = sock
        self.rfile = sock.makefile("rb")
        self.wlock = threading.Lock()

    def send(self, frame: Mapping[str, Any]) -> None:
        data = encode(frame)
        with self.wlock:
            self.sock.sendall(data)

    def recv(self) -> dict[str, Any] | None:
        line = self.rfile.readline(MAX_FRAME + 1)
        if not line:
            return None
        if len(line) > MAX_FRAME or not line.endswith(b"\n"):
            raise ProtocolError("frame too long or truncated")
        try:
            frame = json.loads(line)
        except ValueError as exc:
            raise ProtocolError(f"not JSON: {exc}") from None
        if not isinstance(frame, dict) or not isinstance(frame.get("type"), str):
            raise ProtocolError("frame must be an object with a type")
        return frame

    def close(self) -> None:
        try:
            self.rfile.close()
        finally:
            self.sock.close()


def blob_frame(h: str, data: bytes) -> dict[str, Any]:
    return {"type": "BLOB", "hash": h, "size": len(data), "bytes": base64.b64encode(data).decode()}


def blob_bytes(frame: Mapping[str, Any], expected: str) -> bytes:
    """Decode a BLOB frame, checking it is the artifact that was asked for."""
    if frame.get("type") != "BLOB" or frame.get("hash") != expected:
        raise ProtocolError(f"expected BLOB {expected}")
    try:
        data = base64.b64decode(frame["bytes"], validate=True)
    except (KeyError, ValueError, TypeError) as exc:
        raise ProtocolError(f"bad BLOB payload: {exc}") from None
    if frame.get("size") != len(data) or sha256_hex(data) != expected:
        raise RemoteError(f"artifact {expected} does not match its hash", Cause.HASH_MISMATCH)
    return data


# -- configuration -------------------------------------------------------------


def parse_address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"not a host:port address: {text!r}")
    return host or "127.0.0.1", int(port)


@dataclass
class NodeConfig:
    node_id: str
    listen: str = "127.0.0.1:0"
    peers: list[str] = field(default_factory=list)
    manifest_dir: Path = Path("tools")
    workspace: Path = Path(".")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NodeConfig":
        """Read ``node.json``; relative paths are taken from its directory."""
        path = Path(path)
        obj = json.loads(path.read_text())
        base = path.parent.resolve()
        if not isinstance(obj.get("node_id"), str) or not obj["node_id"]:
            raise ValueError("node.json: node_id must be a non-empty string")
        peers = obj.get("peers", [])
        if not isinstance(peers, list) or not all(isinstance(p, str) for p in peers):
            raise ValueError("node.json: peers must be a list of host:port strings")
        for p in peers:
            parse_address(p)
        cfg = cls(
            node_id=obj["node_id"],
            listen=str(obj.get("listen", "127.0.0.1:0")),
            peers=peers,
            manifest_dir=base / obj.get("manifest_dir", "tools"),
            workspace=base / obj.get("workspace", "."),
        )
        parse_address(cfg.listen)
        return cfg


# -- provider side -------------------------------------------------------------


class _Handler(socketserver.StreamRequestHandler):
    server: "NodeServer"

    def handle(self) -> None:
        ch = Channel(self.request)
        node = self.server.node
        try:
            hello = ch.recv()
            if hello is None:
                return
            if hello.get("type") != "HELLO":
                raise ProtocolError("session must start with HELLO")
            if hello.get("protocol_version") != PROTOCOL_VERSION:
                ch.send({"type": "ERROR", "request_id": None, "cause": "protocol_version",
                         "detail": f"this node speaks version {PROTOCOL_VERSION}"})
                return
            if hello.get("node_id") == node.node_id:
                log.warning("peer uses this node's id %s", node.node_id)
            ch.send({"type": "HELLO", "node_id": node.node_id, "protocol_version": PROTOCOL_VERSION})
            while True:
                frame = ch.recv()
                if frame is None:
                    return
                kind = frame["type"]
                if kind == "LIST_SERVICES":
                    ch.send({"type": "SERVICES", "services": node.service_list()})
                elif kind == "FETCH":
                    ch.send(node.fetch_frame(frame.get("hash")))
                elif kind == "QUERY":
                    ch.send(node.answer(frame, ch))
                else:
                    raise ProtocolError(f"unexpected frame {kind}")
        except (ProtocolError, OSError) as exc:
            log.info("closing connection: %s", exc)
        finally:
            ch.close()


class NodeServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, node: "ProviderNode", address: tuple[str, int]):
        self.node = node
        super().__init__(address, _Handler)

    @property
    def address(self) -> str:
        host, port = self.server_address[:2]
        return f"{host}:{port}"


class ProviderNode:
    """The serving half of a node: its manifests and evidence store."""

    def __init__(self, cfg: NodeConfig, registry: Mapping[str, ToolManifest] | None = None,
                 invoker: Callable = invoke_tool):
        self.cfg = cfg
        self.node_id = cfg.node_id
        self.registry = dict(registry if registry is not None else load_registry(cfg.manifest_dir))
        self.store = EvidenceStore(etb_dir(cfg.workspace))
        self.workdir = etb_dir(cfg.workspace) / "work"
        self.invoker = invoker
        self._done: OrderedDict[str, dict[str, Any]] = OrderedDict()
        self._running: dict[str, threading.Event] = {}
        self._lock = threading.Lock()
        self.executions = 0

    def service_list(self) -> list[dict[str, str]]:
        return [{"predicate": m.predicate, "modes": m.modes.text}
                for m in sorted(self.registry.values(), key=lambda m: m.predicate) if not m.node_local]

    def fetch_frame(self, h: Any) -> dict[str, Any]:
        if not isinstance(h, str) or h not in self.store:
            return {"type": "ERROR", "request_id": None, "cause": "unknown_artifact", "detail": str(h)}
        return blob_frame(h, self.store.read(h))

    def answer(self, frame: Mapping[str, Any], ch: Channel) -> dict[str, Any]:
        rid = frame.get("request_id")
        if not isinstance(rid, str) or not rid:
            return {"type": "ERROR", "request_id": rid, "cause": "bad_request", "detail": "missing request_id"}
        # a retried request gets the first answer instead of a second run
        while True:
            with self._lock:
                if rid in self._done:
                    return self._done[rid]
                ev = self._running.get(rid)
                if ev is None:
                    ev = self._running[rid] = threading.Event()
                    break
            ev.wait()
        try:
            reply = self._execute(rid, frame, ch)
        except (ProtocolError, OSError):
            with self._lock:
                self._running.pop(rid).set()
            raise
        with self._lock:
            self._done[rid] = reply
            while len(self._done) > DEDUP_SIZE:
                self._done.popitem(last=False)
            self._running.pop(rid).set()
        return reply

    def _execute(self, rid: str, frame: Mapping[str, Any], ch: Channel) -> dict[str, Any]:
        def error(cause: str, detail: str) -> dict[str, Any]:
            return {"type": "ERROR", "request_id": rid, "cause": cause, "detail": detail}

        pred = frame.get("predicate")
        m = self.registry.get(pred) if isinstance(pred, str) else None
        if m is None or m.node_local:
            return error("unknown_service", f"no service {pred}")
        modes = frame.get("modes")
        if modes is not None and modes != m.modes.text:
            return error("unknown_service", f"{pred} is offered with modes {m.modes.text}")
        raw = frame.get("in_args")
        if not isinstance(raw, list) or len(raw) != m.n_inputs:
            return error("bad_request", f"{pred} takes {m.n_inputs} inputs")
        try:
            in_args = tuple(parse_term(str(a)) for a in raw)
        except WorkflowError as exc:
            return error("bad_request", str(exc))
        if not all(is_ground(a) for a in in_args):
            return error("bad_request", "inputs must be ground")
        for h in sorted({r for a in in_args for r in artifact_refs(a)}):
            if h in self.store:
                continue
            ch.send({"type": "FETCH", "hash": h})
            reply = ch.recv()
            if reply is None:
                raise ProtocolError("client went away during FETCH")
            if reply.get("type") == "ERROR":
                return error("unknown_artifact", f"client cannot supply {h}")
            try:
                self.store.import_bytes(h, blob_bytes(reply, h), origin="peer")
            except RemoteError as exc:
                return error("HashMismatch", str(exc))
        try:
            self.executions += 1
            inv = self.invoker(m, in_args, self.workdir, self.store)
        except ToolError as exc:
            return error(exc.cause, str(exc))
        self.store.flush()
        args: list[Term] = [None] * m.modes.arity  # type: ignore[list-item]
        for i, t in zip(m.modes.in_positions, in_args):
            args[i] = t
        for i, t in zip(m.modes.out_positions, inv.outputs):
            args[i] = t
        claim = Claim(Atom(m.predicate, tuple(args)), ClaimKind.LOW_LEVEL,
                      ToolSupport(m.predicate, tuple(inv.produced), inv.meta()), node=self.node_id)
        return {
            "type": "RESULT", "request_id": rid, "status": "ok",
            "out_args": [canonical(t) for t in inv.outputs],
            "claim": claim.to_json(), "invocation_meta": inv.meta(),
        }


def start_server(cfg: NodeConfig, **kwargs) -> tuple[NodeServer, threading.Thread]:
    """Bind ``cfg.listen`` and serve from a background thread."""
    node = ProviderNode(cfg, **kwargs)
    srv = NodeServer(node, parse_address(cfg.listen))
    th = threading.Thread(target=srv.serve_forever, name=f"etb-node-{cfg.node_id}", daemon=True)
    th.start()
    return srv, th


def serve(cfg: NodeConfig, ready: Callable[[str], None] | None = None) -> None:
    """Serve until SIGINT or SIGTERM."""
    node = ProviderNode(cfg)
    srv = NodeServer(node, parse_address(cfg.listen))
    stop = threading.Event()

    def _stop(*_: Any) -> None:
        stop.set()

    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, _stop)
    th = threading.Thread(target=srv.serve_forever, daemon=True)
    th.start()
    if ready is not None:
        ready(srv.address)
    try:
        stop.wait()
    finally:
        srv.shutdown()
        srv.server_close()


# -- client side ---------------------------------------------------------------


class PeerSession:
    """One client connection to a peer, after the HELLO exchange."""

    def __init__(self, address: str, node_id: str, timeout: float = 30.0):
        self.address = address
        try:
            sock = socket.create_connection(parse_address(address), timeout=timeout)
        except OSError as exc:
            raise RemoteError(f"cannot reach {address}: {exc}") from None
        self.ch = Channel(sock)
        self.call({"type": "HELLO", "node_id": node_id, "protocol_version": PROTOCOL_VERSION})
        hello = self._last
        if hello.get("type") != "HELLO":
            self.close()
            raise RemoteError(f"{address} refused the session: {hello.get('detail', hello.get('cause'))}")
        self.peer_id = str(hello.get("node_id"))

    def send(self, frame: Mapping[str, Any]) -> None:
        try:
            self.ch.send(frame)
        except OSError as exc:
            raise RemoteError(f"connection to {self.address} failed: {exc}") from None

    def recv(self) -> dict[str, Any]:
        try:
            frame = self.ch.recv()
        except (OSError, ProtocolError) as exc:
            raise RemoteError(f"connection to {self.address} failed: {exc}") from None
        if frame is None:
            raise RemoteError(f"{self.address} closed the connection")
        return frame

    def call(self, frame: Mapping[str, Any]) -> dict[str, Any]:
        self.send(frame)
        self._last = self.recv()
        return self._last

    def close(self) -> None:
        self.ch.close()

    def __enter__(self) -> "PeerSession":
        return self

    def __exit__(self, *exc: Any) -> None:
        self.close()


def list_services(address: str, node_id: str = "client", timeout: float = 10.0) -> tuple[str, list[ModeSpec]]:
    """The id of the node at ``address`` and the services it advertises."""
    with PeerSession(address, node_id, timeout) as s:
        reply = s.call({"type": "LIST_SERVICES"})
        if reply.get("type") != "SERVICES":
            raise RemoteError(f"{address} answered {reply.get('type')} to LIST_SERVICES")
        return s.peer_id, [ModeSpec.parse(e["predicate"], e["modes"]) for e in reply.get("services", [])]


_ERROR_CAUSES = {
    "unknown_service": Cause.NO_PROVIDER_FOUND,
    "ToolFailure": Cause.TOOL_FAILURE,
    "CaptureError": Cause.CAPTURE_ERROR,
    "Timeout": Cause.TIMEOUT,
    "HashMismatch": Cause.HASH_MISMATCH,
    "unknown_artifact": Cause.NO_PROVIDER_FOUND,
    "bad_request": Cause.NO_PROVIDER_FOUND,
}


class PeerResolver:
    """Discharges extensional goals on the first peer that offers them.

    Service lists are cached for ``ttl`` seconds. A query that fails in
    transport is retried ``retries`` times with the same request id, so the
    provider runs the tool at most once.
    """

    def __init__(self, peers: list[str], node_id: str, *, ttl: float = SERVICE_TTL_S,
                 retries: int = RETRIES, timeout: float = 600.0, clock: Callable[[], float] = time.monotonic):
        self.peers = list(peers)
        self.node_id = node_id
        self.ttl = ttl
        self.retries = retries
        self.timeout = timeout
        self.clock = clock
        self._cache: dict[str, tuple[float, dict[str, ModeSpec]]] = {}
        self.unreachable: dict[str, str] = {}

    def peer_services(self, address: str) -> dict[str, ModeSpec]:
        hit = self._cache.get(address)
        now = self.clock()
        if hit is not None and now - hit[0] < self.ttl:
            return hit[1]
        try:
            _, specs = list_services(address, self.node_id, timeout=min(self.timeout, 10.0))
            self.unreachable.pop(address, None)
        except (RemoteError, ValueError, KeyError) as exc:
            self.unreachable[address] = str(exc)
            specs = []
        table = {s.predicate: s for s in specs}
        self._cache[address] = (now, table)
        return table

    def services(self) -> dict[str, ModeSpec]:
        out: dict[str, ModeSpec] = {}
        for p in self.peers:
            for pred, spec in self.peer_services(p).items():
                out.setdefault(pred, spec)
        return out

    def provider(self, predicate: str, modes: ModeSpec) -> str | None:
        for p in self.peers:
            spec = self.peer_services(p).get(predicate)
            if spec is not None and spec.text == modes.text:
                return p
        return None

    def resolve(self, predicate: str, modes: ModeSpec, in_args: tuple[Term, ...], store: EvidenceStore) -> Claim:
        address = self.provider(predicate, modes)
        if address is None:
            raise RemoteError(f"no peer offers {predicate}({modes.text})", Cause.NO_PROVIDER_FOUND)
        frame = {
            "type": "QUERY", "predicate": predicate, "modes": modes.text,
            "in_args": [canonical(a) for a in in_args], "request_id": uuid.uuid4().hex,
        }
        last: RemoteError | None = None
        for _ in range(self.retries + 1):
            try:
                return self._query(address, frame, modes, in_args, store)
            except RemoteError as exc:
                if exc.cause is not Cause.TRANSPORT_ERROR:
                    raise
                last = exc
        raise RemoteError(f"{predicate} on {address}: {last} (after {self.retries} retries)")

    def _query(self, address: str, frame: dict[str, Any], modes: ModeSpec, in_args: tuple[Term, ...],
               store: EvidenceStore) -> Claim:
        with PeerSession(address, self.node_id, self.timeout) as s:
            s.send(frame)
            while True:
                reply = s.recv()
                kind = reply.get("type")
                if kind == "FETCH":
                    h = reply.get("hash")
                    if isinstance(h, str) and h in store:
                        s.send(blob_frame(h, store.read(h)))
                    else:
                        s.send({"type": "ERROR", "request_id": None, "cause": "unknown_artifact", "detail": str(h)})
                    continue
                if reply.get("request_id") != frame["request_id"]:
                    raise RemoteError(f"{address} answered another request")
                if kind == "ERROR":
                    cause = _ERROR_CAUSES.get(str(reply.get("cause")), Cause.TRANSPORT_ERROR)
                    detail = f"{s.peer_id}: {reply.get('cause')}: {reply.get('detail', '')}"
                    raise RemoteError(detail, cause)
                if kind != "RESULT":
                    raise RemoteError(f"{address} sent {kind} instead of RESULT")
                return self._import(s, reply, frame["predicate"], modes, in_args, store)

    def _import(self, s: PeerSession, reply: Mapping[str, Any], predicate: str, modes: ModeSpec,
                in_args: tuple[Term, ...], store: EvidenceStore) -> Claim:
        try:
            claim = Claim.from_json(reply["claim"])
            outs = tuple(parse_term(str(t)) for t in reply["out_args"])
        except (KeyError, ValueError, TypeError, WorkflowError) as exc:
            raise RemoteError(f"malformed RESULT from {s.address}: {exc}") from None
        atom = claim.atom
        ok = (atom.predicate == predicate and atom.arity == modes.arity
              and tuple(atom.args[i] for i in modes.in_positions) == in_args
              and tuple(atom.args[i] for i in modes.out_positions) == outs
              and isinstance(claim.provenance, ToolSupport) and claim.provenance.evidence)
        if not ok:
            raise RemoteError(f"RESULT from {s.address} does not answer the query", Cause.NO_PROVIDER_FOUND)
        needed = list(dict.fromkeys([*claim.evidence, *(h for t in outs for h in artifact_refs(t))]))
        fetched: dict[str, bytes] = {}
        for h in needed:
            if h in store:
                continue
            blob = s.call({"type": "FETCH", "hash": h})
            if blob.get("type") == "ERROR":
                raise RemoteError(f"{s.peer_id} cannot supply artifact {h}", Cause.NO_PROVIDER_FOUND)
            try:
                fetched[h] = blob_bytes(blob, h)
            except ProtocolError as exc:
                raise RemoteError(str(exc)) from None
        # import only once every artifact has checked out
        for h, data in fetched.items():
            store.import_bytes(h, data, origin=f"peer:{s.peer_id}")
        claim.node = s.peer_id
        claim.status = ClaimStatus.ESTABLISHED
        claim.revision = 1
        return claim


def resolver_for(cfg: NodeConfig) -> PeerResolver | None:
    return PeerResolver(cfg.peers, cfg.node_id) if cfg.peers else None

