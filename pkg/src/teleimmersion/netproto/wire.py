"""Message envelope and typed payload codecs.

Envelope (all integers little-endian)::

    magic 'TI' | version u8 | msg_type u8 | client_id u8 | seq u32
    | timestamp_us u64 | payload_len u32 | payload | crc32 u32

The CRC (CRC-32/ISO-HDLC, as computed by ``zlib.crc32``) covers the header
and payload.
"""

from __future__ import annotations

import enum
import struct
import zlib
from dataclasses import dataclass, field
from typing import Iterator, Optional, Union

import numpy as np

from ..collision import BodyModel, CollisionEvent, Joint
from ..errors import TeleimmersionError
from ..geometry import RigidPose
from ..tracking import Source, ViewpointEstimate

MAGIC = b"TI"
PROTOCOL_VERSION = 1
DEFAULT_PORT = 7447
MAX_PAYLOAD = 64 * 1024 * 1024

HEADER = struct.Struct("<2sBBBIQI")
HEADER_SIZE = HEADER.size
CRC = struct.Struct("<I")
ENVELOPE_OVERHEAD = HEADER_SIZE + CRC.size


class MsgType(enum.IntEnum):
    FRAME = 1
    VIEWPOINT = 2
    JOINTS = 3
    COLLISION = 4
    WORLD_UPDATE = 5
    HELLO = 6
    BYE = 7


class ProtocolError(TeleimmersionError):
    """Base class for wire-format failures."""


class BadMagicError(ProtocolError):
    pass


class ChecksumError(ProtocolError):
    pass


class VersionError(ProtocolError):
    pass


class PayloadError(ProtocolError):
    pass


class NeedMoreBytes(ProtocolError):
    """The buffer holds only part of a message; not fatal for stream readers."""

    def __init__(self, needed: int):
        super().__init__(f"need at least {needed} bytes")
        self.needed = needed


# -- payload types -----------------------------------------------------------


@dataclass(frozen=True)
class ObjectState:
    object_id: int
    pose: RigidPose
    flags: int = 0
    held_by: Optional[int] = None


@dataclass(frozen=True)
class WorldUpdate:
    tick: int
    objects: tuple[ObjectState, ...] = ()
    events: tuple[CollisionEvent, ...] = ()
    viewpoints: tuple[tuple[int, ViewpointEstimate], ...] = ()
    bodies: tuple[BodyModel, ...] = ()  # joints in the shared frame

    def __post_init__(self):
        object.__setattr__(self, "objects", tuple(self.objects))
        object.__setattr__(self, "bodies", tuple(self.bodies))
        object.__setattr__(self, "events", tuple(self.events))
        object.__setattr__(self, "viewpoints", tuple(self.viewpoints))
        ids = [o.object_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise ValueError("object ids must be unique within a world update")


@dataclass(frozen=True)
class Hello:
    fields: tuple[tuple[str, str], ...] = ()

    @classmethod
    def of(cls, **kv) -> "Hello":
        return cls(tuple((k, str(v)) for k, v in kv.items()))

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        for k, v in self.fields:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class Bye:
    reason: str = ""


@dataclass(frozen=True)
class Collisions:
    events: tuple[CollisionEvent, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))


Payload = Union["CompressedFrame", ViewpointEstimate, BodyModel, Collisions, WorldUpdate, Hello, Bye]


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    body: object
    client_id: int = 0
    seq: int = 0
    timestamp_us: int = 0
    version: int = PROTOCOL_VERSION


# -- primitive writers/readers -------------------------------------------------


class _Reader:
    def __init__(self, data: bytes):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.data):
            raise PayloadError("payload ends early")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: struct.Struct):
        return fmt.unpack(self.take(fmt.size))

    def string(self) -> str:
        (n,) = self.unpack(_U16)
        try:
            return bytes(self.take(n)).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PayloadError("bad utf-8 string") from exc

    def done(self) -> None:
        if self.pos != len(self.data):
            raise PayloadError(f"{len(self.data) - self.pos} trailing payload bytes")


_U8 = struct.Struct("<B")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")
_VEC3 = struct.Struct("<3d")
_POSE = struct.Struct("<12d")
_EVENT = struct.Struct("<IHBI")
_VIEW = struct.Struct("<3dBBd")


def _string(s: str) -> bytes:
    raw = s.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise PayloadError("string too long")
    return _U16.pack(len(raw)) + raw


def _pack_viewpoint(v: ViewpointEstimate) -> bytes:
    return _VIEW.pack(*v.position, int(v.source), int(bool(v.valid)), v.confidence)


def _unpack_viewpoint(r: _Reader) -> ViewpointEstimate:
    x, y, z, src, valid, conf = r.unpack(_VIEW)
    try:
        source = Source(src)
    except ValueError as exc:
        raise PayloadError(f"unknown viewpoint source {src}") from exc
    try:
        return ViewpointEstimate((x, y, z), source, bool(valid), conf)
    except ValueError as exc:
        raise PayloadError(str(exc)) from exc


def _pack_events(events) -> bytes:
    parts = [_U32.pack(len(events))]
    for e in events:
        parts.append(_EVENT.pack(e.body_id, e.joint_index, int(e.other_is_body), e.other_id))
        parts.append(_string(e.joint_label))
    return b"".join(parts)


def _unpack_events(r: _Reader) -> tuple[CollisionEvent, ...]:
    (n,) = r.unpack(_U32)
    out = []
    for _ in range(n):
        body, joint, is_body, other = r.unpack(_EVENT)
        out.append(CollisionEvent(body, joint, r.string(), bool(is_body), other))
    return tuple(out)


def _pack_pose(p: RigidPose) -> bytes:
    return _POSE.pack(*p.rotation.ravel(), *p.translation)


def _unpack_pose(r: _Reader) -> RigidPose:
    vals = r.unpack(_POSE)
    return RigidPose(np.array(vals[:9]).reshape(3, 3), np.array(vals[9:]))


# -- typed payload codecs ------------------------------------------------------


def _pack_body(body: BodyModel) -> bytes:
    parts = [_U32.pack(body.body_id), _U8.pack(body.client_id), _U16.pack(len(body.joints))]
    for j in body.joints:
        parts.append(_string(j.label))
        parts.append(_VEC3.pack(*j.position))
    return b"".join(parts)


def _unpack_body(r: "_Reader") -> BodyModel:
    (body_id,) = r.unpack(_U32)
    (client_id,) = r.unpack(_U8)
    (n,) = r.unpack(_U16)
    joints = []
    for _ in range(n):
        label = r.string()
        joints.append(Joint(label, r.unpack(_VEC3)))
    try:
        return BodyModel(body_id, client_id, tuple(joints))
    except ValueError as exc:
        raise PayloadError(str(exc)) from exc


def encode_payload(msg_type: MsgType, body) -> bytes:
    from .codec import CompressedFrame

    t = MsgType(msg_type)
    if t == MsgType.FRAME:
        if not isinstance(body, CompressedFrame):
            raise PayloadError("FRAME body must be a CompressedFrame")
        return body.to_bytes()
    if t == MsgType.VIEWPOINT:
        return _pack_viewpoint(body)
    if t == MsgType.JOINTS:
        return _pack_body(body)
    if t == MsgType.COLLISION:
        return _pack_events(body.events)
    if t == MsgType.WORLD_UPDATE:
        parts = [_U64.pack(body.tick), _U32.pack(len(body.objects))]
        for o in body.objects:
            held = 0xFF if o.held_by is None else o.held_by
            parts.append(_U32.pack(o.object_id) + _pack_pose(o.pose) + _U8.pack(o.flags) + _U8.pack(held))
        parts.append(_pack_events(body.events))
        parts.append(_U16.pack(len(body.viewpoints)))
        for cid, v in body.viewpoints:
            parts.append(_U8.pack(cid) + _pack_viewpoint(v))
        parts.append(_U16.pack(len(body.bodies)))
        parts.extend(_pack_body(b) for b in body.bodies)
        return b"".join(parts)
    if t == MsgType.HELLO:
        text = "\n".join(f"{k}={v}" for k, v in body.fields)
        if any("=" in k or "\n" in k + v for k, v in body.fields):
            raise PayloadError("HELLO keys may not contain '=' or newlines")
        try:
            return text.encode("ascii")
        except UnicodeEncodeError as exc:
            raise PayloadError("HELLO must be ASCII") from exc
    if t == MsgType.BYE:
        return body.reason.encode("utf-8")
    raise PayloadError(f"unhandled message type {t}")


def decode_payload(msg_type: MsgType, payload: bytes):
    from .codec import CompressedFrame

    t = MsgType(msg_type)
    if t == MsgType.FRAME:
        return CompressedFrame.from_bytes(payload)
    r = _Reader(payload)
    if t == MsgType.VIEWPOINT:
        out = _unpack_viewpoint(r)
    elif t == MsgType.JOINTS:
        out = _unpack_body(r)
    elif t == MsgType.COLLISION:
        out = Collisions(_unpack_events(r))
    elif t == MsgType.WORLD_UPDATE:
        (tick,) = r.unpack(_U64)
        (n,) = r.unpack(_U32)
        objs = []
        for _ in range(n):
            (oid,) = r.unpack(_U32)
            pose = _unpack_pose(r)
            (flags,) = r.unpack(_U8)
            (held,) = r.unpack(_U8)
            objs.append(ObjectState(oid, pose, flags, None if held == 0xFF else held))
        events = _unpack_events(r)
        (nv,) = r.unpack(_U16)
        views = []
        for _ in range(nv):
            (cid,) = r.unpack(_U8)
            views.append((cid, _unpack_viewpoint(r)))
        (nb,) = r.unpack(_U16)
        bodies = tuple(_unpack_body(r) for _ in range(nb))
        try:
            out = WorldUpdate(tick, tuple(objs), events, tuple(views), bodies)
        except ValueError as exc:
            raise PayloadError(str(exc)) from exc
    elif t == MsgType.HELLO:
        try:
            text = bytes(payload).decode("ascii")
        except UnicodeDecodeError as exc:
            raise PayloadError("HELLO must be ASCII") from exc
        pairs = []
        for line in text.split("\n") if text else []:
            if "=" not in line:
                raise PayloadError(f"bad HELLO field {line!r}")
            k, v = line.split("=", 1)
            pairs.append((k, v))
        return Hello(tuple(pairs))
    elif t == MsgType.BYE:
        try:
            return Bye(bytes(payload).decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise PayloadError("bad BYE reason") from exc
    else:
        raise PayloadError(f"unhandled message type {t}")
    r.done()
    return out


# -- envelope ----------------------------------------------------------------


def encode_message(msg: Message) -> bytes:
    payload = encode_payload(msg.msg_type, msg.body)
    return encode_raw(msg.msg_type, payload, msg.client_id, msg.seq, msg.timestamp_us, msg.version)


def encode_raw(msg_type: int, payload: bytes, client_id: int = 0, seq: int = 0,
               timestamp_us: int = 0, version: int = PROTOCOL_VERSION) -> bytes:
    if len(payload) > MAX_PAYLOAD:
        raise PayloadError(f"payload of {len(payload)} bytes exceeds {MAX_PAYLOAD}")
    header = HEADER.pack(MAGIC, version, int(msg_type), client_id, seq, timestamp_us, len(payload))
    crc = zlib.crc32(payload, zlib.crc32(header))
    return header + payload + CRC.pack(crc)


def decode_message(data, offset: int = 0) -> tuple[Message, int]:
    """Decode the message starting at ``offset``; return it and the bytes consumed.

    Raises :class:`NeedMoreBytes` when the buffer is a proper prefix of a
    message, and a distinct :class:`ProtocolError` subclass for bad magic,
    unknown version, CRC mismatch or a malformed payload.
    """
    buf = memoryview(data)[offset:]
    if len(buf) < 2:
        if len(buf) and bytes(buf[:1]) != MAGIC[:1]:
            raise BadMagicError("bad magic")
        raise NeedMoreBytes(HEADER_SIZE)
    if bytes(buf[:2]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:2])!r}")
    if len(buf) < HEADER_SIZE:
        raise NeedMoreBytes(HEADER_SIZE)
    _, version, msg_type, client_id, seq, ts, plen = HEADER.unpack(buf[:HEADER_SIZE])
    if plen > MAX_PAYLOAD:
        raise PayloadError(f"declared payload of {plen} bytes exceeds limit")
    total = HEADER_SIZE + plen + CRC.size
    if len(buf) < total:
        raise NeedMoreBytes(total)
    (crc,) = CRC.unpack(buf[HEADER_SIZE + plen:total])
    if zlib.crc32(buf[:HEADER_SIZE + plen]) != crc:
        raise ChecksumError("CRC mismatch")
    if version != PROTOCOL_VERSION:
        raise VersionError(f"unsupported protocol version {version}")
    try:
        mtype = MsgType(msg_type)
    except ValueError as exc:
        raise PayloadError(f"unknown message type {msg_type}") from exc
    body = decode_payload(mtype, bytes(buf[HEADER_SIZE:HEADER_SIZE + plen]))
    return Message(mtype, body, client_id, seq, ts, version), total


def frame_length(data, offset: int = 0) -> int:
    """Total size of the message starting at ``offset`` (header must be present)."""
    buf = memoryview(data)[offset:]
    if len(buf) < HEADER_SIZE:
        raise NeedMoreBytes(HEADER_SIZE)
    if bytes(buf[:2]) != MAGIC:
        raise BadMagicError(f"bad magic {bytes(buf[:2])!r}")
    plen = HEADER.unpack(buf[:HEADER_SIZE])[6]
    return HEADER_SIZE + plen + CRC.size


@dataclass
class StreamDecoder:
    """Reassembles messages from arbitrarily chunked bytes.

    A message that fails its CRC or payload checks is dropped and recorded in
    ``errors``; decoding continues with the next message. Bad magic means the
    stream lost framing and is raised.
    """

    buffer: bytearray = field(default_factory=bytearray)
    errors: list[ProtocolError] = field(default_factory=list)

    def feed(self, chunk: bytes) -> list[Message]:
        self.buffer += chunk
        return list(self._drain())

    def feed_raw(self, chunk: bytes) -> list[bytes]:
        """Like :meth:`feed` but yields whole undecoded messages."""
        self.buffer += chunk
        out = []
        while True:
            try:
                n = frame_length(self.buffer)
            except NeedMoreBytes:
                return out
            if len(self.buffer) < n:
                return out
            out.append(bytes(self.buffer[:n]))
            del self.buffer[:n]

    def _drain(self) -> Iterator[Message]:
        while self.buffer:
            try:
                msg, n = decode_message(self.buffer)
            except NeedMoreBytes:
                return
            except (ChecksumError, VersionError, PayloadError) as exc:
                del self.buffer[:frame_length(self.buffer)]
                self.errors.append(exc)
                continue
            del self.buffer[:n]
            yield msg


def decode_stream(data: bytes) -> list[Message]:
    dec = StreamDecoder()
    out = dec.feed(data)
    if dec.buffer:
        raise NeedMoreBytes(len(dec.buffer) + 1)
    return out
