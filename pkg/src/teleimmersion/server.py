"""Session hub: admits clients, keeps the shared world and redistributes state.

:class:`Server` is a pure tick machine. It consumes the raw inbound messages
of one tick (in arrival order) and produces that tick's outbound bytes, so a
recorded inbound log replays to a byte-identical WORLD_UPDATE stream.
:class:`HubServer` wraps it with TCP sockets and a fixed-rate tick loop.
"""

from __future__ import annotations

import logging
import queue
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import BinaryIO, Iterator, Optional, Sequence

import numpy as np

from .collision import Aabb, BodyModel, CollisionEvent, Joint, SweepState, detect_interactions
from .errors import ConfigError, FormatError
from .geometry import RigidPose, to_global
from .netproto.wire import (
    DEFAULT_PORT,
    PROTOCOL_VERSION,
    Bye,
    Hello,
    Message,
    MsgType,
    ObjectState,
    ProtocolError,
    StreamDecoder,
    VersionError,
    WorldUpdate,
    decode_message,
    encode_message,
)
from .tracking import ViewpointEstimate

log = logging.getLogger(__name__)

SERVER_ID = 0xFF
FLAG_HELD = 0x01
FLAG_CONTACT = 0x02


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class SceneObject:
    """Catalog entry: initial pose and a box given relative to the object origin."""

    object_id: int
    pose: RigidPose
    box_min: tuple[float, float, float] = (-0.05, -0.05, -0.05)
    box_max: tuple[float, float, float] = (0.05, 0.05, 0.05)

    def world_box(self, pose: RigidPose) -> Aabb:
        lo, hi = np.asarray(self.box_min, dtype=np.float64), np.asarray(self.box_max, dtype=np.float64)
        corners = np.array([[x, y, z] for x in (lo[0], hi[0]) for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
        pts = corners @ pose.rotation.T + pose.translation
        return Aabb(tuple(pts.min(axis=0)), tuple(pts.max(axis=0)), self.object_id)


def default_seats(count: int = 8, radius: float = 1.0) -> tuple[RigidPose, ...]:
    """Seats evenly spaced around a table centred on the shared origin."""
    return tuple(RigidPose.from_yaw(360.0 * i / count, (0.0, 0.0, radius)) for i in range(count))


def default_objects(count: int = 8, radius: float = 0.6, height: float = 0.0) -> tuple[SceneObject, ...]:
    """One cube in front of each seat."""
    out = []
    for i in range(count):
        a = np.radians(360.0 * i / count)
        pos = (-radius * np.sin(a), height, -radius * np.cos(a))
        out.append(SceneObject(i + 1, RigidPose(np.eye(3), pos)))
    return tuple(out)


@dataclass(frozen=True)
class SessionConfig:
    seats: tuple[RigidPose, ...] = field(default_factory=default_seats)
    objects: tuple[SceneObject, ...] = field(default_factory=default_objects)
    tick_hz: float = 15.0
    keyframe_interval: int = 30
    capacity: int = 8
    joint_padding: float = 0.03
    release_ticks: int = 3
    session_timeout_ticks: int = 45
    viewpoint_jump_m: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "seats", tuple(self.seats))
        object.__setattr__(self, "objects", tuple(self.objects))
        if not self.tick_hz > 0:
            raise ConfigError("tick rate must be positive")
        if not 1 <= self.capacity <= 254:
            raise ConfigError("capacity must lie in [1, 254]")
        if not self.seats:
            raise ConfigError("at least one seat pose is required")
        for s in self.seats:
            try:
                s.validate()
            except ValueError as exc:
                raise ConfigError(f"bad seat pose: {exc}") from exc
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ConfigError("object ids must be unique")
        if self.keyframe_interval < 1 or self.release_ticks < 1 or self.session_timeout_ticks < 1:
            raise ConfigError("intervals must be at least one tick")

    def seat(self, client_id: int) -> RigidPose:
        return self.seats[client_id % len(self.seats)]

    def tick_timestamp_us(self, tick: int) -> int:
        return int(round(tick * 1e6 / self.tick_hz))

    # session.cfg: "key = value" lines plus "seat" and "object" lines
    _SCALARS = {
        "tick_hz": float,
        "keyframe_interval": int,
        "capacity": int,
        "joint_padding": float,
        "release_ticks": int,
        "session_timeout_ticks": int,
        "viewpoint_jump_m": float,
    }

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)!r}" for k in self._SCALARS]
        for i, s in enumerate(self.seats):
            lines.append("seat " + " ".join(repr(float(x)) for x in (*s.rotation.ravel(), *s.translation)))
        for o in self.objects:
            vals = (*o.pose.rotation.ravel(), *o.pose.translation, *o.box_min, *o.box_max)
            lines.append(f"object {o.object_id} " + " ".join(repr(float(x)) for x in vals))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "SessionConfig":
        scalars: dict = {}
        seats: list[RigidPose] = []
        objects: list[SceneObject] = []
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            where = f"{source}:{n}"
            try:
                if "=" in line:
                    key, value = (s.strip() for s in line.split("=", 1))
                    if key not in cls._SCALARS:
                        raise ConfigError(f"{where}: unknown key {key!r}")
                    scalars[key] = cls._SCALARS[key](value)
                    continue
                word, *rest = line.split()
                if word == "seat":
                    seats.append(_seat_from_fields([float(x) for x in rest]))
                elif word == "object":
                    oid, vals = int(rest[0]), [float(x) for x in rest[1:]]
                    objects.append(_object_from_fields(oid, vals))
                else:
                    raise ConfigError(f"{where}: unrecognised line {line!r}")
            except (ValueError, IndexError) as exc:
                if isinstance(exc, ConfigError):
                    raise
                raise ConfigError(f"{where}: {exc}") from exc
        kwargs = dict(scalars)
        if seats:
            kwargs["seats"] = tuple(seats)
        if objects:
            kwargs["objects"] = tuple(objects)
        return cls(**kwargs)

    @classmethod
    def load(cls, path) -> "SessionConfig":
        try:
            text = Path(path).read_text(encoding="ascii")
        except (OSError, UnicodeDecodeError) as exc:
            raise FormatError(f"cannot read session config {path}: {exc}") from exc
        return cls.from_text(text, str(path))


def _seat_from_fields(v: list[float]) -> RigidPose:
    # either "yaw_deg x y z" or a full "R(9) t(3)"
    if len(v) == 4:
        return RigidPose.from_yaw(v[0], v[1:])
    if len(v) == 12:
        return RigidPose(np.reshape(v[:9], (3, 3)), v[9:])
    raise ConfigError("seat needs 4 (yaw x y z) or 12 (R t) numbers")


def _object_from_fields(oid: int, v: list[float]) -> SceneObject:
    # either "x y z hx hy hz" or a full "R(9) t(3) min(3) max(3)"
    if len(v) == 6:
        h = np.abs(v[3:])
        return SceneObject(oid, RigidPose(np.eye(3), v[:3]), tuple(-h), tuple(h))
    if len(v) == 18:
        return SceneObject(oid, RigidPose(np.reshape(v[:9], (3, 3)), v[9:12]), tuple(v[12:15]), tuple(v[15:18]))
    raise ConfigError("object needs 6 (x y z hx hy hz) or 18 (R t min max) numbers")


# -- world state -------------------------------------------------------------------


@dataclass
class ObjectRecord:
    spec: SceneObject
    pose: RigidPose
    held_by: Optional[int] = None
    holder_joint: Optional[str] = None
    grip_offset: Optional[np.ndarray] = None  # object origin minus holding joint
    ticks_without_contact: int = 0
    in_contact: bool = False

    def box(self) -> Aabb:
        return self.spec.world_box(self.pose)

    def state(self) -> ObjectState:
        flags = (FLAG_HELD if self.held_by is not None else 0) | (FLAG_CONTACT if self.in_contact else 0)
        return ObjectState(self.spec.object_id, self.pose, flags, self.held_by)

    def release(self) -> None:
        self.held_by = None
        self.holder_joint = None
        self.grip_offset = None
        self.ticks_without_contact = 0


@dataclass
class ClientRecord:
    client_id: int
    conn: int
    seat: RigidPose
    connected: bool = True
    last_seq: int = -1
    last_seen_tick: int = 0
    body: Optional[BodyModel] = None  # shared frame
    history: deque = field(default_factory=lambda: deque(maxlen=4))  # raw global viewpoints
    viewpoint: Optional[ViewpointEstimate] = None  # refined
    reported_events: tuple[CollisionEvent, ...] = ()


@dataclass
class World:
    objects: dict[int, ObjectRecord]
    clients: dict[int, ClientRecord] = field(default_factory=dict)
    tick: int = 0

    @classmethod
    def from_config(cls, config: SessionConfig) -> "World":
        return cls({o.object_id: ObjectRecord(o, o.pose) for o in config.objects})


def refine_viewpoint(history: Sequence[ViewpointEstimate], jump: float = 0.5) -> ViewpointEstimate:
    """Replace an estimate that jumps more than ``jump`` metres away from the
    median of the (up to three) preceding valid estimates by that median."""
    if not history:
        raise ValueError("refine_viewpoint needs at least one estimate")
    latest = history[-1]
    prior = [h.position for h in list(history)[-4:-1] if h.valid]
    if not latest.valid or not prior:
        return latest
    med = np.median(np.asarray(prior, dtype=np.float64), axis=0)
    if np.linalg.norm(np.asarray(latest.position) - med) > jump:
        return replace(latest, position=tuple(float(x) for x in med))
    return latest


def body_to_global(body: BodyModel, seat: RigidPose, client_id: int) -> BodyModel:
    if not body.joints:
        return BodyModel(client_id, client_id, ())
    g = to_global(seat, body.positions())
    return BodyModel(client_id, client_id, tuple(Joint(j.label, tuple(p)) for j, p in zip(body.joints, g)))


# -- tick machine ------------------------------------------------------------------


@dataclass
class TickOutput:
    tick: int
    world_update: bytes
    replies: list[tuple[int, bytes]]  # (conn, message) for one connection
    forwards: list[tuple[int, bytes]]  # (origin client id, message) for every other client
    closed: list[int]  # connections to close after sending replies
    events: list[CollisionEvent]


class Server:
    """Deterministic single-writer world."""

    def __init__(self, config: SessionConfig = SessionConfig()):
        self.config = config
        self.world = World.from_config(config)
        self.by_conn: dict[int, int] = {}
        self.sweep = SweepState()
        self.errors: list[str] = []

    # admission

    def _hello_reply(self, cid: int) -> bytes:
        seat = self.config.seat(cid)
        fields = Hello.of(
            status="ok",
            client_id=cid,
            version=PROTOCOL_VERSION,
            tick_hz=repr(self.config.tick_hz),
            keyframe_interval=self.config.keyframe_interval,
            seat=" ".join(repr(float(x)) for x in (*seat.rotation.ravel(), *seat.translation)),
        )
        return self._server_msg(MsgType.HELLO, fields)

    def _server_msg(self, msg_type: MsgType, body) -> bytes:
        t = self.world.tick
        return encode_message(Message(msg_type, body, SERVER_ID, t, self.config.tick_timestamp_us(t)))

    def admit(self, conn: int, hello: Hello) -> tuple[Optional[int], list[bytes]]:
        """Assign the lowest free client id, or reject with a BYE carrying the reason."""
        version = hello.get("version", str(PROTOCOL_VERSION))
        if version != str(PROTOCOL_VERSION):
            return None, [self._server_msg(MsgType.BYE, Bye(f"protocol version {version} unsupported"))]
        if conn in self.by_conn:
            return None, [self._server_msg(MsgType.BYE, Bye("connection already admitted"))]
        used = set(self.world.clients)
        free = [i for i in range(self.config.capacity) if i not in used]
        if not free:
            return None, [self._server_msg(MsgType.BYE, Bye("session full"))]
        cid = free[0]
        self.world.clients[cid] = ClientRecord(cid, conn, self.config.seat(cid), last_seen_tick=self.world.tick)
        self.by_conn[conn] = cid
        return cid, [self._hello_reply(cid), self._server_msg(MsgType.WORLD_UPDATE, self.snapshot())]

    def _disconnect(self, cid: int) -> None:
        rec = self.world.clients.get(cid)
        if rec is None or not rec.connected:
            return
        rec.connected = False
        self.by_conn.pop(rec.conn, None)
        for obj in self.world.objects.values():
            if obj.held_by == cid:
                obj.release()

    def _drop(self, cid: int) -> None:
        self._disconnect(cid)
        self.world.clients.pop(cid, None)

    # per-message handling

    def _note(self, text: str) -> None:
        log.warning(text)
        self.errors.append(text)

    def _handle(self, conn: int, data: bytes, out: TickOutput) -> None:
        if not data:
            cid = self.by_conn.get(conn)
            if cid is not None:
                self._disconnect(cid)
            return
        try:
            msg, _ = decode_message(data)
        except VersionError as exc:
            self._note(f"tick {self.world.tick}: conn {conn}: {exc}")
            if conn not in self.by_conn:
                out.replies.append((conn, self._server_msg(MsgType.BYE, Bye(f"rejected: {exc}"))))
                out.closed.append(conn)
            return
        except ProtocolError as exc:
            self._note(f"tick {self.world.tick}: conn {conn}: dropped message: {exc}")
            return
        cid = self.by_conn.get(conn)
        if msg.msg_type == MsgType.HELLO and cid is not None and msg.body.get("keyframe_request") is not None:
            self._relay_keyframe_request(cid, msg.body.get("keyframe_request"), out)
            return
        if msg.msg_type == MsgType.HELLO:
            new_id, replies = self.admit(conn, msg.body)
            out.replies.extend((conn, r) for r in replies)
            if new_id is None and conn not in self.by_conn:
                out.closed.append(conn)
            return
        if cid is None:
            self._note(f"tick {self.world.tick}: conn {conn}: {msg.msg_type.name} before HELLO")
            return
        if msg.client_id != cid:
            self._note(f"tick {self.world.tick}: client {cid} sent id {msg.client_id}")
            return
        rec = self.world.clients[cid]
        if msg.seq <= rec.last_seq:
            self._note(f"tick {self.world.tick}: client {cid} stale seq {msg.seq}")
            return
        rec.last_seq = msg.seq
        rec.last_seen_tick = self.world.tick
        t = msg.msg_type
        if t == MsgType.FRAME:
            out.forwards.append((cid, data))
        elif t == MsgType.VIEWPOINT:
            v = msg.body
            if v.valid:
                v = replace(v, position=tuple(float(x) for x in to_global(rec.seat, v.position)))
            rec.history.append(v)
        elif t == MsgType.JOINTS:
            rec.body = body_to_global(msg.body, rec.seat, cid)
        elif t == MsgType.COLLISION:
            rec.reported_events = msg.body.events
        elif t == MsgType.BYE:
            self._drop(cid)
            out.closed.append(conn)
        else:
            self._note(f"tick {self.world.tick}: client {cid} sent {t.name}")

    def _relay_keyframe_request(self, requester: int, target: str, out: TickOutput) -> None:
        # a receiver lost the keyframe of ``target``'s stream; ask the sender for a new one
        try:
            rec = self.world.clients.get(int(target))
        except ValueError:
            rec = None
        if rec is None or not rec.connected:
            self._note(f"tick {self.world.tick}: keyframe request for unknown client {target!r}")
            return
        out.replies.append((rec.conn, self._server_msg(MsgType.HELLO, Hello.of(keyframe_request=requester))))

    # tick

    def step(self, inbound: Sequence[tuple[int, bytes]]) -> TickOutput:
        """Apply one tick of inbound ``(conn, raw message)`` pairs; ``b""`` marks a closed connection."""
        w = self.world
        out = TickOutput(w.tick + 1, b"", [], [], [], [])
        for conn, data in inbound:
            try:
                self._handle(conn, data, out)
            except Exception as exc:  # a bad message never aborts the tick
                self._note(f"tick {w.tick}: conn {conn}: {type(exc).__name__}: {exc}")
        w.tick += 1

        for cid in sorted(w.clients):
            if w.tick - w.clients[cid].last_seen_tick > self.config.session_timeout_ticks:
                self._drop(cid)

        active = [w.clients[c] for c in sorted(w.clients) if w.clients[c].connected]
        bodies = [r.body for r in active if r.body is not None and r.body.joints]
        ids = sorted(w.objects)
        events = detect_interactions(bodies, [w.objects[i].box() for i in ids], self.config.joint_padding, self.sweep)
        out.events = events
        self._grab_release(events, bodies)

        for r in active:
            if r.history:
                r.viewpoint = refine_viewpoint(r.history, self.config.viewpoint_jump_m)
        out.world_update = self._server_msg(MsgType.WORLD_UPDATE, self.snapshot(events))
        return out

    def _grab_release(self, events: list[CollisionEvent], bodies: list[BodyModel]) -> None:
        contacts: dict[int, list[CollisionEvent]] = {}
        for e in events:
            if not e.other_is_body:
                contacts.setdefault(e.other_id, []).append(e)
        joints = {(b.body_id, j.label): np.asarray(j.position) for b in bodies for j in b.joints}
        for oid in sorted(self.world.objects):
            obj = self.world.objects[oid]
            touching = contacts.get(oid, [])
            obj.in_contact = bool(touching)
            if obj.held_by is None:
                if touching:
                    win = min(touching, key=lambda e: (e.body_id, e.joint_index))
                    obj.held_by = win.body_id
                    obj.holder_joint = win.joint_label
                    obj.grip_offset = obj.pose.translation - joints[(win.body_id, win.joint_label)]
                    obj.ticks_without_contact = 0
                continue
            holding = any(e.body_id == obj.held_by and e.joint_label == obj.holder_joint for e in touching)
            if holding:
                obj.ticks_without_contact = 0
                hand = joints[(obj.held_by, obj.holder_joint)]
                obj.pose = RigidPose(obj.pose.rotation, hand + obj.grip_offset)
            else:
                obj.ticks_without_contact += 1
                if obj.ticks_without_contact >= self.config.release_ticks:
                    obj.release()

    def snapshot(self, events: Sequence[CollisionEvent] = ()) -> WorldUpdate:
        w = self.world
        active = [w.clients[c] for c in sorted(w.clients) if w.clients[c].connected]
        return WorldUpdate(
            w.tick,
            tuple(w.objects[i].state() for i in sorted(w.objects)),
            tuple(events),
            tuple((r.client_id, r.viewpoint) for r in active if r.viewpoint is not None),
            tuple(r.body for r in active if r.body is not None),
        )


# -- record / replay -----------------------------------------------------------------

LOG_MAGIC = b"TIREC1\n"
_U32 = struct.Struct("<I")
_TICK = struct.Struct("<QI")
_ITEM = struct.Struct("<II")


class InboundRecorder:
    """Binary log: magic, session config text, then per tick the inbound messages."""

    def __init__(self, fh: BinaryIO, config: SessionConfig):
        self.fh = fh
        text = config.to_text().encode("ascii")
        fh.write(LOG_MAGIC + _U32.pack(len(text)) + text)

    def record(self, tick: int, inbound: Sequence[tuple[int, bytes]]) -> None:
        parts = [_TICK.pack(tick, len(inbound))]
        for conn, data in inbound:
            parts.append(_ITEM.pack(conn, len(data)))
            parts.append(data)
        self.fh.write(b"".join(parts))
        self.fh.flush()


def read_log(path) -> tuple[SessionConfig, list[list[tuple[int, bytes]]]]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read replay log {path}: {exc}") from exc
    try:
        if not data.startswith(LOG_MAGIC):
            raise FormatError(f"{path}: not a replay log")
        pos = len(LOG_MAGIC)
        (n,) = _U32.unpack_from(data, pos)
        pos += 4
        config = SessionConfig.from_text(data[pos:pos + n].decode("ascii"), str(path))
        pos += n
        ticks = []
        while pos < len(data):
            _, count = _TICK.unpack_from(data, pos)
            pos += _TICK.size
            items = []
            for _ in range(count):
                conn, ln = _ITEM.unpack_from(data, pos)
                pos += _ITEM.size
                if pos + ln > len(data):
                    raise FormatError(f"{path}: truncated log")
                items.append((conn, data[pos:pos + ln]))
                pos += ln
            ticks.append(items)
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt replay log: {exc}") from exc
    return config, ticks


def replay(path) -> Iterator[TickOutput]:
    config, ticks = read_log(path)
    server = Server(config)
    for inbound in ticks:
        yield server.step(inbound)


# -- TCP hub -------------------------------------------------------------------------


class _Conn:
    def __init__(self, key: int, sock: socket.socket):
        self.key = key
        self.sock = sock
        self.lock = threading.Lock()
        self.alive = True

    def send(self, data: bytes) -> None:
        if not self.alive:
            return
        try:
            with self.lock:
                self.sock.sendall(data)
        except OSError:
            self.alive = False

    def close(self) -> None:
        self.alive = False
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


class HubServer:
    """Threaded TCP front end: one reader per connection, one ticking writer.

    ``lockstep`` ticks as soon as every connected client has delivered a
    JOINTS message since the last tick (or after ``lockstep_timeout``
    seconds), which lets a benchmark run as fast as the clients produce frames.
    """

    def __init__(
        self,
        server: Server,
        host: str = "127.0.0.1",
        port: int = DEFAULT_PORT,
        record: Optional[BinaryIO] = None,
        updates: Optional[BinaryIO] = None,
        lockstep: bool = False,
        lockstep_timeout: float = 0.5,
    ):
        self.server = server
        self.inbox: "queue.Queue[tuple[int, bytes]]" = queue.Queue()
        self.conns: dict[int, _Conn] = {}
        self.conns_lock = threading.Lock()
        self.recorder = InboundRecorder(record, server.config) if record is not None else None
        self.updates = updates
        self.lockstep = lockstep
        self.lockstep_timeout = lockstep_timeout
        self.tick_seconds = 0.0
        self.stop_event = threading.Event()
        self.listener = socket.create_server((host, port))
        self.listener.settimeout(0.2)
        self.port = self.listener.getsockname()[1]
        self.transport_seconds = 0.0
        self.ticks_done = 0
        self.max_ticks: Optional[int] = None
        self._threads: list[threading.Thread] = []
        self._next_key = 0

    def start(self) -> "HubServer":
        for target in (self._accept_loop, self._tick_loop):
            t = threading.Thread(target=target, daemon=True)
            t.start()
            self._threads.append(t)
        return self

    def stop(self) -> None:
        self.stop_event.set()
        for t in self._threads:
            t.join(timeout=2.0)
        with self.conns_lock:
            for c in self.conns.values():
                c.close()
        self.listener.close()

    def run(self, ticks: Optional[int] = None) -> None:
        """Serve until ``ticks`` ticks have been produced (forever if None)."""
        self.max_ticks = ticks
        self.start()
        try:
            while not self.stop_event.is_set():
                time.sleep(0.05)
        finally:
            self.stop()

    def _accept_loop(self) -> None:
        while not self.stop_event.is_set():
            try:
                sock, _ = self.listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            key = self._next_key
            self._next_key += 1
            conn = _Conn(key, sock)
            with self.conns_lock:
                self.conns[key] = conn
            t = threading.Thread(target=self._read_loop, args=(conn,), daemon=True)
            t.start()

    def _read_loop(self, conn: _Conn) -> None:
        dec = StreamDecoder()
        try:
            while not self.stop_event.is_set():
                chunk = conn.sock.recv(1 << 20)
                if not chunk:
                    break
                for raw in dec.feed_raw(chunk):
                    self.inbox.put((conn.key, raw))
        except (OSError, ProtocolError) as exc:
            log.info("connection %d closed: %s", conn.key, exc)
        conn.alive = False
        self.inbox.put((conn.key, b""))

    def _collect(self, deadline: float) -> list[tuple[int, bytes]]:
        items: list[tuple[int, bytes]] = []
        waiting: set[int] = set()
        if self.lockstep:
            waiting = {c for c, r in self.server.world.clients.items() if r.connected}
        while True:
            timeout = deadline - time.perf_counter()
            if self.lockstep and not waiting and items:
                timeout = 0.0
            try:
                conn, data = self.inbox.get(timeout=max(timeout, 0.0)) if timeout > 0 else self.inbox.get_nowait()
            except queue.Empty:
                return items
            items.append((conn, data))
            # byte 3 of the envelope is the message type
            if self.lockstep and (not data or data[3] in (MsgType.JOINTS, MsgType.BYE)):
                waiting.discard(self.server.by_conn.get(conn))

    def _tick_loop(self) -> None:
        period = self.lockstep_timeout if self.lockstep else 1.0 / self.server.config.tick_hz
        next_tick = time.perf_counter() + period
        while not self.stop_event.is_set():
            if self.max_ticks is not None and self.ticks_done >= self.max_ticks:
                self.stop_event.set()
                return
            inbound = self._collect(next_tick)
            t0 = time.thread_time()
            out = self.server.step(inbound)
            self.tick_seconds += time.thread_time() - t0
            if self.recorder is not None:
                self.recorder.record(out.tick, inbound)
            if self.updates is not None:
                self.updates.write(out.world_update)
                self.updates.flush()
            self._send(out)
            self.ticks_done += 1
            now = time.perf_counter()
            next_tick = now + period if (self.lockstep or now > next_tick + period) else next_tick + period

    def _send(self, out: TickOutput) -> None:
        t0 = time.thread_time()
        with self.conns_lock:
            conns = dict(self.conns)
        for conn, data in out.replies:
            if conn in conns:
                conns[conn].send(data)
        for conn in out.closed:
            c = conns.get(conn)
            if c is not None:
                c.close()
                with self.conns_lock:
                    self.conns.pop(conn, None)
        clients = {cid: r for cid, r in self.server.world.clients.items() if r.connected}
        for origin, data in out.forwards:
            for cid, r in clients.items():
                if cid != origin and r.conn in conns:
                    conns[r.conn].send(data)
        for r in clients.values():
            if r.conn in conns:
                conns[r.conn].send(out.world_update)
        self.transport_seconds += time.thread_time() - t0
