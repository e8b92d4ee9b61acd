"""Framed TCP transport: one server process coordinating N client processes.

Frame layout (big-endian header)::

    magic "FFL1" | version u8 | msg_type u8 | payload_len u32 | payload

Payloads are a u32 length-prefixed JSON header optionally followed by a
tensor blob (the shared little-endian float64 codec). Only model parameters,
counts, metrics and configuration are ever serialized; the message classes
have no field that could carry a transaction record.
"""
from __future__ import annotations

import enum
import json
import logging
import socket
import struct
import time
from dataclasses import dataclass, field

from . import nn
from .config import FederationConfig, config_hash
from .fedcore import ClientUpdate, FederationError, SiteWorker, prepare_site
from .datagen import load_site, read_manifest

log = logging.getLogger(__name__)

MAGIC = b"FFL1"
VERSION = 1
HEADER = struct.Struct(">4sBBI")
DEFAULT_MAX_PAYLOAD = 64 * 1024 * 1024
_JSON_LEN = struct.Struct(">I")


class MsgType(enum.IntEnum):
    HELLO = 1
    TASK = 2
    UPDATE = 3
    METRICS = 4
    DONE = 5
    ERROR = 6


class ProtocolError(Exception):
    code = "protocol"


class BadMagic(ProtocolError):
    code = "bad_magic"


class VersionMismatch(ProtocolError):
    code = "version"


class UnknownMessageType(ProtocolError):
    code = "unknown_type"


class TruncatedFrame(ProtocolError):
    code = "truncated"


class OversizeFrame(ProtocolError):
    code = "oversize"


class MalformedPayload(ProtocolError):
    code = "malformed"


class DuplicateSite(ProtocolError):
    code = "duplicate_site"


class UnexpectedSite(ProtocolError):
    code = "unexpected_site"


class StaleRound(ProtocolError):
    code = "stale_round"


class ConnectionLost(ProtocolError):
    code = "connection_lost"


class RemoteError(ProtocolError):
    code = "remote"


# -- frames -------------------------------------------------------------------------

@dataclass(frozen=True)
class Frame:
    msg_type: MsgType
    payload: bytes = b""


def encode_frame(frame: Frame, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    if len(frame.payload) > max_payload:
        raise OversizeFrame(f"payload of {len(frame.payload)} bytes exceeds cap {max_payload}")
    return HEADER.pack(MAGIC, VERSION, int(frame.msg_type), len(frame.payload)) + frame.payload


def _parse_header(buf) -> tuple[MsgType, int]:
    magic, version, mtype, length = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise BadMagic(f"bad magic {bytes(magic)!r}")
    if version != VERSION:
        raise VersionMismatch(f"protocol version {version}, expected {VERSION}")
    try:
        t = MsgType(mtype)
    except ValueError:
        raise UnknownMessageType(f"unknown message type {mtype}") from None
    return t, length


def decode_frame(data: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD) -> tuple[Frame, int]:
    """Decode one frame from the front of ``data``; returns (frame, bytes consumed)."""
    if len(data) < HEADER.size:
        raise TruncatedFrame(f"{len(data)} bytes is shorter than the {HEADER.size}-byte header")
    t, length = _parse_header(data)
    if length > max_payload:
        raise OversizeFrame(f"declared payload {length} exceeds cap {max_payload}")
    end = HEADER.size + length
    if len(data) < end:
        raise TruncatedFrame(f"payload needs {length} bytes, have {len(data) - HEADER.size}")
    return Frame(t, bytes(data[HEADER.size:end])), end


class FrameReader:
    """Incremental decoder: feed arbitrary chunks, pop complete frames."""

    def __init__(self, max_payload: int = DEFAULT_MAX_PAYLOAD):
        self.max_payload = max_payload
        self._buf = bytearray()

    def feed(self, chunk: bytes) -> list:
        self._buf += chunk
        out = []
        while len(self._buf) >= HEADER.size:
            t, length = _parse_header(self._buf)
            if length > self.max_payload:
                raise OversizeFrame(f"declared payload {length} exceeds cap {self.max_payload}")
            end = HEADER.size + length
            if len(self._buf) < end:
                break
            out.append(Frame(t, bytes(self._buf[HEADER.size:end])))
            del self._buf[:end]
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


# -- messages -----------------------------------------------------------------------

def _pack(header: dict, blob: bytes = b"") -> bytes:
    text = json.dumps(header, sort_keys=True).encode()
    return _JSON_LEN.pack(len(text)) + text + blob


def _unpack(payload: bytes) -> tuple[dict, bytes]:
    if len(payload) < _JSON_LEN.size:
        raise MalformedPayload("payload too short for its JSON header")
    (n,) = _JSON_LEN.unpack_from(payload)
    if _JSON_LEN.size + n > len(payload):
        raise MalformedPayload("JSON header runs past the payload")
    try:
        header = json.loads(payload[_JSON_LEN.size:_JSON_LEN.size + n])
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedPayload(f"bad JSON header: {exc}") from None
    if not isinstance(header, dict):
        raise MalformedPayload("JSON header must be an object")
    return header, payload[_JSON_LEN.size + n:]


def _params(blob: bytes) -> nn.ModelParameters:
    try:
        return nn.ModelParameters.from_bytes(blob)
    except ValueError as exc:
        raise MalformedPayload(f"bad tensor blob: {exc}") from None


@dataclass(frozen=True)
class Hello:
    site_id: str
    config: dict | None = None  # server -> client acknowledgement carries the federation config


@dataclass(frozen=True)
class Task:
    round_index: int
    kind: str  # "train" | "evaluate"
    params: nn.ModelParameters = field(compare=False)


@dataclass(frozen=True)
class Update:
    site_id: str
    round_index: int
    n_samples: int
    local_metrics: dict
    privacy: dict | None
    params: nn.ModelParameters = field(compare=False)


@dataclass(frozen=True)
class Metrics:
    site_id: str
    round_index: int
    metrics: dict


@dataclass(frozen=True)
class Done:
    summary: dict = field(default_factory=dict)


@dataclass(frozen=True)
class Error:
    code: str
    message: str


def to_frame(msg) -> Frame:
    if isinstance(msg, Hello):
        return Frame(MsgType.HELLO, _pack({"site_id": msg.site_id, "config": msg.config}))
    if isinstance(msg, Task):
        if msg.kind not in ("train", "evaluate"):
            raise ValueError(f"unknown task kind {msg.kind!r}")
        return Frame(MsgType.TASK, _pack({"round": msg.round_index, "kind": msg.kind}, msg.params.to_bytes()))
    if isinstance(msg, Update):
        head = {"site_id": msg.site_id, "round": msg.round_index, "n_samples": msg.n_samples,
                "local_metrics": msg.local_metrics, "privacy": msg.privacy}
        return Frame(MsgType.UPDATE, _pack(head, msg.params.to_bytes()))
    if isinstance(msg, Metrics):
        return Frame(MsgType.METRICS, _pack({"site_id": msg.site_id, "round": msg.round_index, "metrics": msg.metrics}))
    if isinstance(msg, Done):
        return Frame(MsgType.DONE, _pack({"summary": msg.summary}))
    if isinstance(msg, Error):
        return Frame(MsgType.ERROR, _pack({"code": msg.code, "message": msg.message}))
    raise TypeError(f"not a protocol message: {type(msg).__name__}")


def from_frame(frame: Frame):
    header, blob = _unpack(frame.payload)
    try:
        if frame.msg_type == MsgType.HELLO:
            return Hello(str(header["site_id"]), header.get("config"))
        if frame.msg_type == MsgType.TASK:
            return Task(int(header["round"]), str(header["kind"]), _params(blob))
        if frame.msg_type == MsgType.UPDATE:
            return Update(str(header["site_id"]), int(header["round"]), int(header["n_samples"]),
                          dict(header["local_metrics"]), header.get("privacy"), _params(blob))
        if frame.msg_type == MsgType.METRICS:
            return Metrics(str(header["site_id"]), int(header["round"]), dict(header["metrics"]))
        if frame.msg_type == MsgType.DONE:
            return Done(dict(header.get("summary") or {}))
        return Error(str(header["code"]), str(header["message"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedPayload(f"{frame.msg_type.name}: {exc}") from None


def encode_message(msg, max_payload: int = DEFAULT_MAX_PAYLOAD) -> bytes:
    return encode_frame(to_frame(msg), max_payload)


def decode_message(data: bytes, max_payload: int = DEFAULT_MAX_PAYLOAD):
    frame, used = decode_frame(data, max_payload)
    if used != len(data):
        raise MalformedPayload(f"{len(data) - used} trailing bytes after frame")
    return from_frame(frame)


# -- connections --------------------------------------------------------------------

class Connection:
    """Blocking framed socket with an optional tap recording every frame sent and received."""

    def __init__(self, sock: socket.socket, max_payload: int = DEFAULT_MAX_PAYLOAD, tap: list | None = None):
        self.sock = sock
        self.reader = FrameReader(max_payload)
        self.max_payload = max_payload
        self.tap = tap
        self._queue: list = []

    def send(self, msg) -> None:
        data = encode_message(msg, self.max_payload)
        if self.tap is not None:
            self.tap.append(("out", data))
        try:
            self.sock.sendall(data)
        except OSError as exc:
            raise ConnectionLost(str(exc)) from None

    def recv(self):
        while not self._queue:
            try:
                chunk = self.sock.recv(1 << 16)
            except socket.timeout:
                raise
            except OSError as exc:
                raise ConnectionLost(str(exc)) from None
            if not chunk:
                raise ConnectionLost("peer closed the connection")
            self._queue.extend(self.reader.feed(chunk))
        frame = self._queue.pop(0)
        if self.tap is not None:
            self.tap.append(("in", encode_frame(frame, self.max_payload)))
        msg = from_frame(frame)
        if isinstance(msg, Error):
            raise RemoteError(f"{msg.code}: {msg.message}")
        return msg

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class Session:
    site_id: str
    conn: Connection
    round_cursor: int = 0
    last_seen: float = field(default_factory=time.monotonic)
    status: str = "ready"


def _expect(msg, cls, what: str):
    if not isinstance(msg, cls):
        raise ProtocolError(f"expected {cls.__name__} {what}, got {type(msg).__name__}")
    return msg


class TcpTransport:
    """Server side: accepts one session per expected site and scatters/gathers over them."""

    def __init__(self, config: FederationConfig, host: str = "127.0.0.1", port: int = 0,
                 accept_timeout: float = 60.0, io_timeout: float | None = 600.0,
                 max_payload: int = DEFAULT_MAX_PAYLOAD, tap: list | None = None):
        self.config = config
        self.expected = set(config.site_ids)
        self.accept_timeout = accept_timeout
        self.io_timeout = io_timeout
        self.max_payload = max_payload
        self.tap = tap
        self.sessions: dict[str, Session] = {}
        self.listener = socket.create_server((host, port))
        self.address = self.listener.getsockname()[:2]

    def accept_all(self) -> None:
        """Block until every expected site has said HELLO; reject duplicates and strangers."""
        deadline = time.monotonic() + self.accept_timeout
        ack = to_dict_config(self.config)
        while set(self.sessions) != self.expected:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                missing = sorted(self.expected - set(self.sessions))
                raise ConnectionLost(f"timed out waiting for sites {missing}")
            self.listener.settimeout(remaining)
            try:
                sock, peer = self.listener.accept()
            except socket.timeout:
                continue
            sock.settimeout(self.io_timeout)
            conn = Connection(sock, self.max_payload, self.tap)
            try:
                hello = _expect(conn.recv(), Hello, "as first message")
                if hello.site_id in self.sessions:
                    raise DuplicateSite(f"site {hello.site_id!r} is already connected")
                if hello.site_id not in self.expected:
                    raise UnexpectedSite(f"site {hello.site_id!r} is not part of this federation")
            except ProtocolError as exc:
                log.warning("rejecting %s: %s", peer, exc)
                try:
                    conn.send(Error(exc.code, str(exc)))
                except ProtocolError:
                    pass
                conn.close()
                continue
            conn.send(Hello(hello.site_id, ack))
            self.sessions[hello.site_id] = Session(hello.site_id, conn)
            log.info("site %s connected from %s", hello.site_id, peer)

    @property
    def site_ids(self) -> list:
        return sorted(self.sessions)

    def _scatter(self, round_index: int, kind: str, params: nn.ModelParameters) -> None:
        for s in self.site_ids:
            self.sessions[s].conn.send(Task(round_index, kind, params))

    def _gather(self, round_index: int, cls) -> dict:
        out = {}
        for s in self.site_ids:
            sess = self.sessions[s]
            msg = _expect(sess.conn.recv(), cls, f"from {s}")
            if msg.site_id != s:
                raise ProtocolError(f"session {s} answered as {msg.site_id}")
            if msg.round_index != round_index:
                raise StaleRound(f"{s} answered for round {msg.round_index} during round {round_index}")
            sess.last_seen = time.monotonic()
            out[s] = msg
        return out

    def train_round(self, round_index: int, params: nn.ModelParameters) -> list:
        for s in self.site_ids:
            if round_index <= self.sessions[s].round_cursor:
                raise StaleRound(f"round {round_index} is not after {self.sessions[s].round_cursor}")
        self._scatter(round_index, "train", params)
        got = self._gather(round_index, Update)
        for s in got:
            self.sessions[s].round_cursor = round_index
        return [ClientUpdate(u.site_id, u.params, u.n_samples, u.local_metrics, u.privacy) for u in got.values()]

    def evaluate(self, round_index: int, params: nn.ModelParameters) -> dict:
        self._scatter(round_index, "evaluate", params)
        return {s: m.metrics for s, m in self._gather(round_index, Metrics).items()}

    def abort(self, exc: BaseException) -> None:
        code = getattr(exc, "code", "runtime")
        for sess in self.sessions.values():
            try:
                sess.conn.send(Error(code, str(exc)))
            except ProtocolError:
                pass

    def close(self, summary: dict | None = None) -> None:
        for sess in self.sessions.values():
            try:
                sess.conn.send(Done(summary or {}))
            except ProtocolError:
                pass
            sess.conn.close()
            sess.status = "closed"
        self.listener.close()


def to_dict_config(config: FederationConfig) -> dict:
    from .config import to_dict
    return to_dict(config)


def serve(config: FederationConfig, host: str = "127.0.0.1", port: int = 0, on_listen=None,
          transport: TcpTransport | None = None, **kwargs):
    """Run a whole federation as the server. Returns (history, final params)."""
    from .fedcore import run_federation
    from .features import feature_layout

    tr = transport or TcpTransport(config, host, port, **kwargs)
    if on_listen is not None:
        on_listen(tr.address)
    try:
        tr.accept_all()
        history, params = run_federation(config, tr, len(feature_layout(config.count_transform)))
    except BaseException as exc:
        tr.abort(exc)
        for sess in tr.sessions.values():
            sess.conn.close()
        tr.listener.close()
        raise
    tr.close({"rounds": len(history), "final_params": params.digest()})
    return history, params


def _connect(host: str, port: int, retries: int, delay: float) -> socket.socket:
    last = None
    for attempt in range(retries + 1):
        try:
            return socket.create_connection((host, port), timeout=10.0)
        except OSError as exc:
            last = exc
            log.info("connect attempt %d to %s:%d failed: %s", attempt + 1, host, port, exc)
            time.sleep(delay)
    raise ConnectionLost(f"could not reach {host}:{port} after {retries + 1} attempts: {last}")


def run_client(host: str, port: int, site_id: str, data_dir, retries: int = 10, retry_delay: float = 0.5,
               io_timeout: float | None = None, tap: list | None = None) -> dict:
    """Serve one site: answer TASKs from local data until DONE. Returns the server's summary.

    Connection attempts are retried a bounded number of times; a connection
    lost mid-run raises :class:`ConnectionLost` (rounds are not resumable).
    """
    parts = load_site(data_dir, site_id)
    manifest = read_manifest(data_dir)
    sock = _connect(host, port, retries, retry_delay)
    sock.settimeout(io_timeout)
    conn = Connection(sock, tap=tap)
    try:
        conn.send(Hello(site_id))
        ack = _expect(conn.recv(), Hello, "acknowledgement")
        config = FederationConfig(**ack.config)
        if manifest.get("config_hash") != config_hash(config.data_dict()):
            raise ProtocolError("local dataset was generated from a different configuration")
        worker = SiteWorker(prepare_site(site_id, parts, config.count_transform), config)
        while True:
            msg = conn.recv()
            if isinstance(msg, Done):
                return msg.summary
            task = _expect(msg, Task, "from server")
            try:
                if task.kind == "train":
                    upd = worker.train(task.round_index, task.params)
                    reply = Update(site_id, task.round_index, upd.n_samples, upd.local_metrics, upd.privacy, upd.params)
                else:
                    reply = Metrics(site_id, task.round_index, worker.evaluate(task.params))
            except FederationError as exc:
                conn.send(Error(StaleRound.code if "round" in str(exc) else "runtime", str(exc)))
                raise
            conn.send(reply)
    finally:
        conn.close()
