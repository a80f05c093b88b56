"""ROI-tracked RGB-D frame compression.

Keyframes carry the whole raster. Other frames carry only the bounding
rectangle of the tracked foreground (dilated by a margin) and reference the
last keyframe for everything outside it. Depth is coded as row-wise deltas,
zig-zag mapped and run-length coded into LEB128 varints; colour is raw RGB.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ..errors import TeleimmersionError
from ..geometry import CameraIntrinsics, RgbdFrame

DEFAULT_KEYFRAME_INTERVAL = 30
DEFAULT_ROI_MARGIN = 8
MIN_RUN = 4

FLAG_KEYFRAME = 0x01
FLAG_RAW_DEPTH = 0x02
FLAG_HEARTBEAT = 0x04

_HEAD = struct.Struct("<BIIQB4H")
_KEYINFO = struct.Struct("<HH4d")


class CodecError(TeleimmersionError):
    """Malformed compressed frame; nothing is emitted."""


class DesyncError(CodecError):
    """The referenced keyframe is not available; the receiver needs a new keyframe."""


# -- varint / run-length primitives --------------------------------------------


def varint_encode(values: np.ndarray) -> bytes:
    """LEB128 encoding of non-negative integers (< 2**35), vectorised."""
    v = np.asarray(values, dtype=np.uint64)
    if v.size == 0:
        return b""
    nbytes = np.ones(v.size, dtype=np.int64)
    for k in (7, 14, 21, 28):
        nbytes += v >= (1 << k)
    if np.any(v >= (1 << 35)):
        raise CodecError("varint value out of range")
    total = int(nbytes.sum())
    out = np.empty(total, dtype=np.uint8)
    starts = np.cumsum(nbytes) - nbytes
    for k in range(5):
        has = nbytes > k
        chunk = ((v[has] >> np.uint64(7 * k)) & np.uint64(0x7F)).astype(np.uint8)
        more = (nbytes[has] > k + 1).astype(np.uint8) << 7
        out[starts[has] + k] = chunk | more
    return out.tobytes()


def varint_decode(data: bytes) -> np.ndarray:
    b = np.frombuffer(data, dtype=np.uint8)
    if b.size == 0:
        return np.zeros(0, dtype=np.uint64)
    ends = np.flatnonzero(b < 0x80)
    if ends.size == 0 or ends[-1] != b.size - 1:
        raise CodecError("truncated varint stream")
    starts = np.concatenate(([0], ends[:-1] + 1))
    lengths = ends - starts + 1
    if np.any(lengths > 5):
        raise CodecError("varint longer than 5 bytes")
    out = np.zeros(ends.size, dtype=np.uint64)
    for k in range(5):
        has = lengths > k
        out[has] |= (b[starts[has] + k].astype(np.uint64) & np.uint64(0x7F)) << np.uint64(7 * k)
    return out


def zigzag(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.int64)
    return ((x << 1) ^ (x >> 63)).astype(np.uint64)


def unzigzag(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u, dtype=np.uint64)
    return ((u >> np.uint64(1)).astype(np.int64)) ^ (-(u & np.uint64(1)).astype(np.int64))


def rle_encode(values: np.ndarray) -> np.ndarray:
    """Token stream for non-negative ints.

    Runs of at least ``MIN_RUN`` equal values become ``[(n << 1) | 1, value]``;
    everything between them becomes a literal block ``[n << 1, v1 .. vn]``.
    """
    v = np.asarray(values, dtype=np.uint64)
    n = v.size
    if n == 0:
        return np.zeros(0, dtype=np.uint64)
    run_starts = np.flatnonzero(np.concatenate(([True], v[1:] != v[:-1])))
    run_lens = np.diff(np.append(run_starts, n))
    is_long = run_lens >= MIN_RUN
    # segments: each long run alone; maximal groups of consecutive short runs merged
    prev_long = np.concatenate(([True], is_long[:-1]))
    new_seg = is_long | prev_long
    seg_of_run = np.cumsum(new_seg) - 1
    n_seg = int(seg_of_run[-1]) + 1
    seg_len = np.bincount(seg_of_run, weights=run_lens, minlength=n_seg).astype(np.int64)
    seg_is_run = np.zeros(n_seg, dtype=bool)
    seg_is_run[seg_of_run[is_long]] = True
    seg_elem_start = np.cumsum(seg_len) - seg_len
    slots = np.where(seg_is_run, 2, 1 + seg_len)
    seg_out = np.cumsum(slots) - slots
    out = np.empty(int(slots.sum()), dtype=np.uint64)
    out[seg_out] = (seg_len.astype(np.uint64) << np.uint64(1)) | seg_is_run.astype(np.uint64)
    run_seg = np.flatnonzero(seg_is_run)
    out[seg_out[run_seg] + 1] = v[seg_elem_start[run_seg]]
    elem_seg = np.repeat(np.arange(n_seg), seg_len)
    lit = ~seg_is_run[elem_seg]
    idx = np.flatnonzero(lit)
    es = elem_seg[idx]
    out[seg_out[es] + 1 + (idx - seg_elem_start[es])] = v[idx]
    return out


def rle_decode(tokens: np.ndarray, expected: int) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.uint64)
    out = np.empty(expected, dtype=np.uint64)
    pos = 0
    i = 0
    nt = t.size
    while i < nt:
        head = int(t[i])
        count = head >> 1
        if count == 0 or pos + count > expected:
            raise CodecError("run-length block overruns the raster")
        if head & 1:
            if i + 1 >= nt:
                raise CodecError("run token without value")
            out[pos:pos + count] = t[i + 1]
            i += 2
        else:
            if i + 1 + count > nt:
                raise CodecError("literal block truncated")
            out[pos:pos + count] = t[i + 1:i + 1 + count]
            i += 1 + count
        pos += count
    if pos != expected:
        raise CodecError(f"run-length stream decodes to {pos} values, expected {expected}")
    return out


def encode_depth(depth: np.ndarray) -> bytes:
    """Row-delta + zig-zag + run-length + varint coding of a mm depth block."""
    d = np.asarray(depth, dtype=np.int64)
    if d.size == 0:
        return b""
    delta = d.copy()
    delta[:, 1:] = np.diff(d, axis=1)
    return varint_encode(rle_encode(zigzag(delta.ravel())))


def decode_depth(data: bytes, h: int, w: int) -> np.ndarray:
    if h * w == 0:
        if data:
            raise CodecError("depth payload for an empty block")
        return np.zeros((h, w), dtype=np.uint16)
    delta = unzigzag(rle_decode(varint_decode(data), h * w)).reshape(h, w)
    depth = np.cumsum(delta, axis=1)
    if depth.min() < 0 or depth.max() > 0xFFFF:
        raise CodecError("decoded depth out of range")
    return depth.astype(np.uint16)


# -- frames ------------------------------------------------------------------


@dataclass(frozen=True)
class CompressedFrame:
    keyframe: bool
    seq: int
    ref_seq: int
    roi: tuple[int, int, int, int]  # x, y, w, h
    timestamp: int
    client_id: int
    color: bytes
    depth: bytes
    raw_depth: bool = False
    heartbeat: bool = False
    intrinsics: Optional[CameraIntrinsics] = None  # keyframes only

    def to_bytes(self) -> bytes:
        flags = (
            (FLAG_KEYFRAME if self.keyframe else 0)
            | (FLAG_RAW_DEPTH if self.raw_depth else 0)
            | (FLAG_HEARTBEAT if self.heartbeat else 0)
        )
        parts = [_HEAD.pack(flags, self.seq, self.ref_seq, self.timestamp, self.client_id, *self.roi)]
        if self.keyframe:
            k = self.intrinsics
            parts.append(_KEYINFO.pack(k.width, k.height, k.fx, k.fy, k.cx, k.cy))
        # colour is raw RGB, so its length follows from the ROI
        parts.append(self.color)
        parts.append(self.depth)
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "CompressedFrame":
        from .wire import PayloadError

        mv = memoryview(data)
        try:
            flags, seq, ref, ts, cid, x, y, w, h = _HEAD.unpack_from(mv, 0)
            pos = _HEAD.size
            intr = None
            if flags & FLAG_KEYFRAME:
                width, height, fx, fy, cx, cy = _KEYINFO.unpack_from(mv, pos)
                pos += _KEYINFO.size
                intr = CameraIntrinsics(fx, fy, cx, cy, width, height)
        except (struct.error, ValueError) as exc:
            raise PayloadError(f"bad FRAME header: {exc}") from exc
        nc = 0 if flags & FLAG_HEARTBEAT else w * h * 3
        if pos + nc > len(mv):
            raise PayloadError("FRAME payload shorter than its ROI")
        nd = len(mv) - pos - nc
        return cls(
            keyframe=bool(flags & FLAG_KEYFRAME),
            seq=seq,
            ref_seq=ref,
            roi=(x, y, w, h),
            timestamp=ts,
            client_id=cid,
            color=bytes(mv[pos:pos + nc]),
            depth=bytes(mv[pos + nc:pos + nc + nd]),
            raw_depth=bool(flags & FLAG_RAW_DEPTH),
            heartbeat=bool(flags & FLAG_HEARTBEAT),
            intrinsics=intr,
        )

    @property
    def size(self) -> int:
        return len(self.to_bytes())


def raw_size(frame: RgbdFrame) -> int:
    return frame.width * frame.height * 5


def foreground_roi(mask: np.ndarray, margin: int = DEFAULT_ROI_MARGIN) -> Optional[tuple[int, int, int, int]]:
    """Bounding rectangle of the mask grown by ``margin`` pixels, clipped to the raster."""
    m = np.asarray(getattr(mask, "labels", mask)).astype(bool)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(m.any(axis=0))
    h, w = m.shape
    y0 = max(int(rows[0]) - margin, 0)
    y1 = min(int(rows[-1]) + margin, h - 1)
    x0 = max(int(cols[0]) - margin, 0)
    x1 = min(int(cols[-1]) + margin, w - 1)
    return (x0, y0, x1 - x0 + 1, y1 - y0 + 1)


def _pack_block(frame: RgbdFrame, roi) -> tuple[bytes, bytes, bool]:
    x, y, w, h = roi
    color = frame.color[y:y + h, x:x + w].tobytes()
    block = frame.depth[y:y + h, x:x + w]
    coded = encode_depth(block)
    if len(coded) >= block.size * 2:
        return color, block.astype("<u2").tobytes(), True
    return color, coded, False


@dataclass
class FrameEncoder:
    """Sender-side codec state for one stream."""

    keyframe_interval: int = DEFAULT_KEYFRAME_INTERVAL
    roi_margin: int = DEFAULT_ROI_MARGIN
    seq: int = 0
    last_keyframe_seq: Optional[int] = None
    force_keyframe: bool = False

    def request_keyframe(self) -> None:
        self.force_keyframe = True

    def compress(self, frame: RgbdFrame, fg_mask) -> CompressedFrame:
        mask = np.asarray(getattr(fg_mask, "labels", fg_mask))
        if mask.shape != frame.depth.shape:
            from ..errors import ShapeError

            raise ShapeError(f"mask {mask.shape} does not match frame {frame.depth.shape}")
        seq = self.seq
        self.seq += 1
        key = (
            self.force_keyframe
            or self.last_keyframe_seq is None
            or self.keyframe_interval <= 1
            or seq - self.last_keyframe_seq >= self.keyframe_interval
        )
        if key:
            self.force_keyframe = False
            self.last_keyframe_seq = seq
            roi = (0, 0, frame.width, frame.height)
            color, depth, raw = _pack_block(frame, roi)
            return CompressedFrame(True, seq, seq, roi, frame.timestamp, frame.client_id,
                                   color, depth, raw, False, frame.intrinsics)
        roi = foreground_roi(mask, self.roi_margin)
        if roi is None:
            return CompressedFrame(False, seq, self.last_keyframe_seq, (0, 0, 1, 1), frame.timestamp,
                                   frame.client_id, b"", b"", False, True)
        color, depth, raw = _pack_block(frame, roi)
        return CompressedFrame(False, seq, self.last_keyframe_seq, roi, frame.timestamp,
                               frame.client_id, color, depth, raw)


@dataclass
class FrameDecoder:
    """Receiver-side codec state: the last keyframe, used to fill outside the ROI."""

    keyframe: Optional[RgbdFrame] = None
    keyframe_seq: Optional[int] = None

    def decompress(self, c: CompressedFrame) -> RgbdFrame:
        if c.keyframe:
            if c.intrinsics is None:
                raise CodecError("keyframe without intrinsics")
            intr = c.intrinsics
            color, depth = self._block(c, intr)
            frame = RgbdFrame(color, depth, intr, c.timestamp, c.client_id)
            self.keyframe, self.keyframe_seq = frame, c.seq
            return frame
        if self.keyframe is None or self.keyframe_seq != c.ref_seq:
            raise DesyncError(f"frame {c.seq} references keyframe {c.ref_seq}, have {self.keyframe_seq}")
        ref = self.keyframe
        color = ref.color.copy()
        depth = ref.depth.copy()
        if not c.heartbeat:
            block_c, block_d = self._block(c, ref.intrinsics)
            x, y, w, h = c.roi
            color[y:y + h, x:x + w] = block_c
            depth[y:y + h, x:x + w] = block_d
        elif c.color or c.depth:
            raise CodecError("heartbeat frame carries pixel data")
        return RgbdFrame(color, depth, ref.intrinsics, c.timestamp, c.client_id)

    @staticmethod
    def _block(c: CompressedFrame, intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
        x, y, w, h = c.roi
        if w <= 0 or h <= 0 or x + w > intr.width or y + h > intr.height:
            raise CodecError(f"ROI {c.roi} outside {intr.width}x{intr.height} raster")
        if len(c.color) != w * h * 3:
            raise CodecError("colour block size mismatch")
        color = np.frombuffer(c.color, dtype=np.uint8).reshape(h, w, 3)
        if c.raw_depth:
            if len(c.depth) != w * h * 2:
                raise CodecError("raw depth block size mismatch")
            depth = np.frombuffer(c.depth, dtype="<u2").reshape(h, w).astype(np.uint16)
        else:
            depth = decode_depth(c.depth, h, w)
        if depth.max(initial=0) > 10000:
            raise CodecError("decoded depth exceeds sensor range")
        return color, depth
