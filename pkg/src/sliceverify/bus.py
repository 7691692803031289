"""Message transport between the simulated gNB and the xApps.

Wire format is newline-delimited JSON with a fixed key order per message type,
so equal messages encode byte-identically (see docs/bus-protocol.md). Endpoints
come in two flavors: in-process fan-out queues, and a TCP hub that rebroadcasts
every line to all other peers for distributed runs.
"""

from __future__ import annotations

import json
import os
import queue
import socket
import threading
from dataclasses import dataclass

from .domain import SLICES, SchedulerPolicy, SliceAllocation, SliceId, SlicingAction, UserKpi

ENV_BUS_ADDR = "SLICE_VERIFY_BUS_ADDR"
DEFAULT_QUEUE_DEPTH = 1024


class BusDecodeError(ValueError):
    pass


@dataclass(frozen=True)
class KpiReportMsg:
    window_id: int
    users: tuple[UserKpi, ...]

    type = "kpi_report"


@dataclass(frozen=True)
class ControlMsg:
    window_id: int
    action: SlicingAction

    type = "control"


@dataclass(frozen=True)
class VerdictMsg:
    window_id: int
    user_id: int
    predicted_slice: SliceId
    true_slice: SliceId
    drift: bool
    misclass: bool
    conflict: bool
    latency_us: int

    type = "verdict"


@dataclass(frozen=True)
class EscalationMsg:
    reason: str
    window_id: int

    type = "escalation"


BusMessage = KpiReportMsg | ControlMsg | VerdictMsg | EscalationMsg

MESSAGE_TYPES = ("kpi_report", "control", "verdict", "escalation")


def _msg_to_obj(msg: BusMessage) -> dict:
    if isinstance(msg, KpiReportMsg):
        return {
            "type": msg.type,
            "window_id": msg.window_id,
            "users": [
                {
                    "user_id": u.user_id,
                    "slice": u.slice.label,
                    "tx_bitrate_mbps": u.tx_bitrate_mbps,
                    "tx_packets": u.tx_packets,
                    "dl_buffer_bytes": u.dl_buffer_bytes,
                }
                for u in msg.users
            ],
        }
    if isinstance(msg, ControlMsg):
        return {
            "type": msg.type,
            "window_id": msg.window_id,
            "allocations": {
                s.label: {
                    "prbs": msg.action.for_slice(s).prbs,
                    "scheduler": msg.action.for_slice(s).scheduler.value,
                }
                for s in SLICES
            },
        }
    if isinstance(msg, VerdictMsg):
        return {
            "type": msg.type,
            "window_id": msg.window_id,
            "user_id": msg.user_id,
            "predicted_slice": msg.predicted_slice.label,
            "true_slice": msg.true_slice.label,
            "flags": {
                "drift": msg.drift,
                "misclass": msg.misclass,
                "conflict": msg.conflict,
            },
            "latency_us": msg.latency_us,
        }
    if isinstance(msg, EscalationMsg):
        return {"type": msg.type, "reason": msg.reason, "window_id": msg.window_id}
    raise TypeError(f"not a bus message: {type(msg)!r}")


def encode_msg(msg: BusMessage) -> bytes:
    """One '\\n'-terminated JSON line; key order fixed per message type."""
    return (json.dumps(_msg_to_obj(msg), separators=(",", ":")) + "\n").encode("utf-8")


def _require(obj: dict, name: str):
    if name not in obj:
        raise BusDecodeError(f"missing field {name}")
    return obj[name]


def _slice_of(value) -> SliceId:
    try:
        return SliceId.from_label(str(value))
    except ValueError:
        raise BusDecodeError(f"invalid value for slice: {value!r}") from None


def _nonneg(value, name: str, kind=int):
    try:
        v = kind(value)
    except (TypeError, ValueError):
        raise BusDecodeError(f"invalid value for {name}: {value!r}") from None
    if v < 0:
        raise BusDecodeError(f"invalid value for {name}: {value!r}")
    return v


def decode_msg(data: bytes | str) -> BusMessage:
    """Parse one JSON line into a message; unknown fields are ignored."""
    if isinstance(data, bytes):
        data = data.decode("utf-8", errors="strict")
    try:
        obj = json.loads(data)
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise BusDecodeError("parse error") from None
    if not isinstance(obj, dict):
        raise BusDecodeError("parse error")
    mtype = _require(obj, "type")
    if mtype == "kpi_report":
        window_id = _nonneg(_require(obj, "window_id"), "window_id")
        users = []
        for u in _require(obj, "users"):
            users.append(
                UserKpi(
                    user_id=_nonneg(_require(u, "user_id"), "user_id"),
                    slice=_slice_of(_require(u, "slice")),
                    tx_bitrate_mbps=_nonneg(
                        _require(u, "tx_bitrate_mbps"), "tx_bitrate_mbps", float
                    ),
                    tx_packets=_nonneg(_require(u, "tx_packets"), "tx_packets"),
                    dl_buffer_bytes=_nonneg(_require(u, "dl_buffer_bytes"), "dl_buffer_bytes"),
                    window_id=window_id,
                )
            )
        return KpiReportMsg(window_id=window_id, users=tuple(users))
    if mtype == "control":
        allocations = _require(obj, "allocations")
        allocs = []
        for s in SLICES:
            entry = _require(allocations, s.label)
            try:
                sched = SchedulerPolicy(_require(entry, "scheduler"))
            except ValueError:
                raise BusDecodeError(
                    f"invalid value for scheduler: {entry.get('scheduler')!r}"
                ) from None
            allocs.append(SliceAllocation(prbs=_nonneg(_require(entry, "prbs"), "prbs"), scheduler=sched))
        return ControlMsg(
            window_id=_nonneg(_require(obj, "window_id"), "window_id"),
            action=SlicingAction(*allocs),
        )
    if mtype == "verdict":
        flags = _require(obj, "flags")
        return VerdictMsg(
            window_id=_nonneg(_require(obj, "window_id"), "window_id"),
            user_id=_nonneg(_require(obj, "user_id"), "user_id"),
            predicted_slice=_slice_of(_require(obj, "predicted_slice")),
            true_slice=_slice_of(_require(obj, "true_slice")),
            drift=bool(_require(flags, "drift")),
            misclass=bool(_require(flags, "misclass")),
            conflict=bool(_require(flags, "conflict")),
            latency_us=_nonneg(_require(obj, "latency_us"), "latency_us"),
        )
    if mtype == "escalation":
        return EscalationMsg(
            reason=str(_require(obj, "reason")),
            window_id=_nonneg(_require(obj, "window_id"), "window_id"),
        )
    raise BusDecodeError(f"unknown message type {mtype!r}")


class Subscription:
    """Single-consumer stream of decoded messages matching a type filter."""

    def __init__(self, types, depth: int):
        self.types = types
        self._queue: queue.Queue = queue.Queue(maxsize=depth)
        self.closed = False

    def matches(self, msg: BusMessage) -> bool:
        return self.types is None or msg.type in self.types

    def deliver(self, msg: BusMessage) -> None:
        self._queue.put(msg)  # blocks when full: backpressure by contract

    def get(self, timeout: float | None = None) -> BusMessage:
        return self._queue.get(timeout=timeout)

    def get_nowait(self) -> BusMessage | None:
        try:
            return self._queue.get_nowait()
        except queue.Empty:
            return None

    def __iter__(self):
        while True:
            try:
                yield self._queue.get(timeout=0.5)
            except queue.Empty:
                if self.closed:
                    return


def _normalize_filter(type_filter):
    if type_filter is None:
        return None
    if isinstance(type_filter, str):
        type_filter = (type_filter,)
    for t in type_filter:
        if t not in MESSAGE_TYPES:
            raise ValueError(f"unknown message type {t!r}")
    return frozenset(type_filter)


class InprocEndpoint:
    """Process-local bus: publish fans out to every matching subscriber in order."""

    def __init__(self):
        self._subs: list[Subscription] = []
        self._lock = threading.Lock()
        self.dropped = 0

    def publish(self, msg: BusMessage) -> None:
        with self._lock:
            subs = [s for s in self._subs if s.matches(msg)]
        for s in subs:
            s.deliver(msg)

    def subscribe(self, type_filter=None, depth: int = DEFAULT_QUEUE_DEPTH) -> Subscription:
        sub = Subscription(_normalize_filter(type_filter), depth)
        with self._lock:
            self._subs.append(sub)
        return sub

    def close(self) -> None:
        with self._lock:
            for s in self._subs:
                s.closed = True


def _parse_tcp_address(address: str) -> tuple[str, int]:
    addr = address
    if addr.startswith("tcp://"):
        addr = addr[len("tcp://") :]
    host, _, port = addr.rpartition(":")
    if not host or not port:
        raise ValueError(f"bad tcp address {address!r}, expected host:port")
    return host, int(port)


class TcpEndpoint(InprocEndpoint):
    """TCP hub/peer carrying the NDJSON wire format.

    A serving endpoint rebroadcasts every received line to all other peers and
    delivers it locally; a connecting endpoint exchanges lines with the hub.
    Lines that fail to decode are dropped and counted.
    """

    def __init__(self, address: str, connect: bool = False):
        super().__init__()
        self.address = address
        host, port = _parse_tcp_address(address)
        self._peers: list[socket.socket] = []
        self._peer_lock = threading.Lock()
        self._closing = False
        self._threads: list[threading.Thread] = []
        if connect:
            sock = socket.create_connection((host, port), timeout=5.0)
            self._server = None
            self._add_peer(sock)
        else:
            srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
            srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            try:
                srv.bind((host, port))
            except OSError as exc:
                srv.close()
                raise OSError(f"address in use or unavailable: {address}") from exc
            srv.listen()
            srv.settimeout(0.2)
            self._server = srv
            t = threading.Thread(target=self._accept_loop, daemon=True)
            t.start()
            self._threads.append(t)

    @property
    def port(self) -> int:
        if self._server is not None:
            return self._server.getsockname()[1]
        return _parse_tcp_address(self.address)[1]

    def _add_peer(self, sock: socket.socket) -> None:
        with self._peer_lock:
            self._peers.append(sock)
        t = threading.Thread(target=self._reader_loop, args=(sock,), daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                sock, _ = self._server.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            self._add_peer(sock)

    def _reader_loop(self, sock: socket.socket) -> None:
        buf = b""
        while not self._closing:
            try:
                chunk = sock.recv(65536)
            except OSError:
                break
            if not chunk:
                break
            buf += chunk
            while b"\n" in buf:
                line, buf = buf.split(b"\n", 1)
                self._handle_line(line + b"\n", source=sock)
        with self._peer_lock:
            if sock in self._peers:
                self._peers.remove(sock)

    def _handle_line(self, line: bytes, source: socket.socket) -> None:
        try:
            msg = decode_msg(line)
        except BusDecodeError:
            self.dropped += 1
            return
        super().publish(msg)
        if self._server is not None:  # hub: relay to the other peers
            self._send_raw(line, exclude=source)

    def _send_raw(self, line: bytes, exclude: socket.socket | None = None) -> None:
        with self._peer_lock:
            peers = [p for p in self._peers if p is not exclude]
        for p in peers:
            try:
                p.sendall(line)
            except OSError:
                pass

    def publish(self, msg: BusMessage) -> None:
        super().publish(msg)
        self._send_raw(encode_msg(msg))

    def close(self) -> None:
        self._closing = True
        if self._server is not None:
            self._server.close()
        with self._peer_lock:
            for p in self._peers:
                try:
                    p.close()
                except OSError:
                    pass
            self._peers.clear()
        super().close()


def open_endpoint(mode: str = "inproc", address: str | None = None, connect: bool = False):
    """Open a bus endpoint. SLICE_VERIFY_BUS_ADDR overrides the tcp address."""
    if mode == "inproc":
        return InprocEndpoint()
    if mode == "tcp":
        address = os.environ.get(ENV_BUS_ADDR, address)
        if not address:
            raise ValueError("tcp mode requires an address")
        return TcpEndpoint(address, connect=connect)
    raise ValueError(f"unknown bus mode {mode!r}")
