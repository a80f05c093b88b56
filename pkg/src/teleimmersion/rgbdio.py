"""On-disk formats: ``.rgbd`` frame dumps, binary PGM masks, background models.

``.rgbd`` layout::

    RGBD1\\n
    <width> <height> <fx> <fy> <cx> <cy> <timestamp> <client_id>\\n
    width*height*3 bytes RGB (row-major)
    width*height little-endian uint16 depth (mm)
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import FormatError
from .geometry import CameraIntrinsics, RgbdFrame

RGBD_MAGIC = b"RGBD1\n"


def _fmt_float(x: float) -> str:
    return repr(float(x))


def frame_to_bytes(frame: RgbdFrame) -> bytes:
    k = frame.intrinsics
    header = " ".join(
        [
            str(k.width),
            str(k.height),
            _fmt_float(k.fx),
            _fmt_float(k.fy),
            _fmt_float(k.cx),
            _fmt_float(k.cy),
            str(int(frame.timestamp)),
            str(int(frame.client_id)),
        ]
    )
    return b"".join(
        [
            RGBD_MAGIC,
            header.encode("ascii") + b"\n",
            frame.color.tobytes(),
            frame.depth.astype("<u2").tobytes(),
        ]
    )


def frame_from_bytes(data: bytes) -> RgbdFrame:
    if not data.startswith(RGBD_MAGIC):
        raise FormatError("not an .rgbd file (bad magic)")
    end = data.find(b"\n", len(RGBD_MAGIC))
    if end < 0:
        raise FormatError(".rgbd header line is unterminated")
    fields = data[len(RGBD_MAGIC):end].decode("ascii", errors="replace").split()
    if len(fields) != 8:
        raise FormatError(f".rgbd header needs 8 fields, got {len(fields)}")
    try:
        w, h = int(fields[0]), int(fields[1])
        fx, fy, cx, cy = (float(f) for f in fields[2:6])
        ts, cid = int(fields[6]), int(fields[7])
        intr = CameraIntrinsics(fx, fy, cx, cy, w, h)
    except ValueError as exc:
        raise FormatError(f"bad .rgbd header: {exc}") from exc
    body = memoryview(data)[end + 1:]
    n_color, n_depth = w * h * 3, w * h * 2
    if len(body) != n_color + n_depth:
        raise FormatError(f".rgbd body is {len(body)} bytes, expected {n_color + n_depth}")
    color = np.frombuffer(body[:n_color], dtype=np.uint8).reshape(h, w, 3)
    depth = np.frombuffer(body[n_color:], dtype="<u2").reshape(h, w)
    try:
        return RgbdFrame(color.copy(), depth.astype(np.uint16), intr, ts, cid)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc


def save_frame(path, frame: RgbdFrame) -> None:
    Path(path).write_bytes(frame_to_bytes(frame))


def load_frame(path) -> RgbdFrame:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read frame {path}: {exc.strerror}") from exc
    try:
        return frame_from_bytes(data)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def list_frames(directory) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FormatError(f"frame directory {d} does not exist")
    return sorted(d.glob("*.rgbd"))


def write_pgm(path, mask: np.ndarray) -> None:
    """Write a 0/1 mask as binary PGM (P5) with values 0/255."""
    m = (np.asarray(mask) != 0).astype(np.uint8) * 255
    h, w = m.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + m.tobytes())


def read_pgm(path) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"cannot read mask {path}: {exc.strerror}") from exc
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        if pos >= len(data):
            raise FormatError(f"{path}: truncated PGM header")
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: only binary PGM (P5) is supported")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as exc:
        raise FormatError(f"{path}: bad PGM header") from exc
    if maxval > 255:
        raise FormatError(f"{path}: 16-bit PGM not supported")
    raster = np.frombuffer(data[pos + 1:pos + 1 + w * h], dtype=np.uint8)
    if raster.size != w * h:
        raise FormatError(f"{path}: truncated PGM raster")
    return (raster.reshape(h, w) > 0).astype(np.uint8)
