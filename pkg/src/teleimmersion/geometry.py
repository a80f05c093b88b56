"""Pinhole camera model, RGB-D frames, point clouds and rigid transforms.

Depth is stored as integer millimetres in frames (0 marks a hole) and
converted to metres (float64) for all geometric math.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .errors import BehindCameraError, CoordinateError, InvalidPoseError, ShapeError

MAX_DEPTH_MM = 10000
_ORTHO_TOL = 1e-6


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got {self.fx}, {self.fy}")
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"raster size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside {self.width}x{self.height} raster"
            )

    @classmethod
    def kinect_v2(cls) -> "CameraIntrinsics":
        """Nominal depth-camera intrinsics for a 512x424 sensor."""
        return cls(fx=365.0, fy=365.0, cx=256.0, cy=212.0, width=512, height=424)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)


@dataclass(eq=False)
class RgbdFrame:
    """Registered colour + depth raster pair.

    ``color`` is ``(height, width, 3)`` uint8, ``depth`` is ``(height, width)``
    uint16 millimetres.
    """

    color: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    timestamp: int = 0
    client_id: int = 0

    def __post_init__(self):
        self.color = np.ascontiguousarray(self.color, dtype=np.uint8)
        depth = np.asarray(self.depth)
        if depth.size and (depth.min() < 0 or depth.max() > MAX_DEPTH_MM):
            raise ValueError(f"depth values must lie in [0, {MAX_DEPTH_MM}] mm")
        self.depth = np.ascontiguousarray(depth, dtype=np.uint16)
        h, w = self.intrinsics.shape
        if self.color.shape != (h, w, 3):
            raise ShapeError(f"color raster {self.color.shape} does not match intrinsics {h}x{w}")
        if self.depth.shape != (h, w):
            raise ShapeError(f"depth raster {self.depth.shape} does not match intrinsics {h}x{w}")

    @property
    def width(self) -> int:
        return self.intrinsics.width

    @property
    def height(self) -> int:
        return self.intrinsics.height

    def same_pixels(self, other: "RgbdFrame") -> bool:
        return (
            self.intrinsics == other.intrinsics
            and np.array_equal(self.color, other.color)
            and np.array_equal(self.depth, other.depth)
        )


class ColoredPoint(NamedTuple):
    x: float
    y: float
    z: float
    r: int
    g: int
    b: int


@dataclass(frozen=True)
class RigidPose:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.array(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.array(self.translation, dtype=np.float64).reshape(3))

    def __eq__(self, other):
        if not isinstance(other, RigidPose):
            return NotImplemented
        return np.array_equal(self.rotation, other.rotation) and np.array_equal(
            self.translation, other.translation
        )

    def __hash__(self):
        return hash((self.rotation.tobytes(), self.translation.tobytes()))

    def validate(self) -> None:
        R = self.rotation
        if not np.all(np.isfinite(R)) or not np.all(np.isfinite(self.translation)):
            raise InvalidPoseError("pose contains non-finite values")
        if np.max(np.abs(R.T @ R - np.eye(3))) >= _ORTHO_TOL:
            raise InvalidPoseError("rotation is not orthonormal")
        if np.linalg.det(R) <= 0:
            raise InvalidPoseError("rotation has negative determinant (reflection)")

    @classmethod
    def from_yaw(cls, yaw_deg: float, translation: Sequence[float] = (0.0, 0.0, 0.0)) -> "RigidPose":
        """Pose rotated about the vertical (y) axis."""
        return cls(rot_y(np.radians(yaw_deg)), translation)


def rot_x(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def back_project(frame: RgbdFrame, u: int, v: int) -> Optional[ColoredPoint]:
    """Lift pixel ``(u, v)`` (column, row) to a camera-frame point.

    Returns ``None`` for a hole (depth 0).
    """
    if not (0 <= u < frame.width and 0 <= v < frame.height):
        raise CoordinateError(f"pixel ({u}, {v}) outside {frame.width}x{frame.height} raster")
    d = int(frame.depth[v, u])
    if d == 0:
        return None
    k = frame.intrinsics
    z = d / 1000.0
    r, g, b = (int(c) for c in frame.color[v, u])
    return ColoredPoint((u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z, r, g, b)


def project(intrinsics: CameraIntrinsics, p: Sequence[float]) -> tuple[float, float]:
    x, y, z = (float(c) for c in p)
    if not z > 0:
        raise BehindCameraError(f"point with z={z} is not in front of the camera")
    return (intrinsics.fx * x / z + intrinsics.cx, intrinsics.fy * y / z + intrinsics.cy)


def back_project_pixel(intrinsics: CameraIntrinsics, u: float, v: float, z: float) -> np.ndarray:
    """Real-valued pixel plus metric depth to a camera-frame 3-vector."""
    k = intrinsics
    return np.array([(u - k.cx) * z / k.fx, (v - k.cy) * z / k.fy, z])


def cloud_from_frame(frame: RgbdFrame, mask=None) -> list[ColoredPoint]:
    """Every valid (and, when ``mask`` is given, foreground) pixel as a point, row-major."""
    xyz, rgb = cloud_arrays(frame, mask)
    return [
        ColoredPoint(float(p[0]), float(p[1]), float(p[2]), int(c[0]), int(c[1]), int(c[2]))
        for p, c in zip(xyz, rgb)
    ]


def cloud_arrays(frame: RgbdFrame, mask=None) -> tuple[np.ndarray, np.ndarray]:
    """Array form of :func:`cloud_from_frame`: ``(N, 3)`` float64 xyz and ``(N, 3)`` uint8 rgb."""
    valid = frame.depth > 0
    if mask is not None:
        labels = np.asarray(getattr(mask, "labels", mask))
        if labels.shape != valid.shape:
            raise ShapeError(f"mask {labels.shape} does not match frame {valid.shape}")
        valid &= labels.astype(bool)
    vs, us = np.nonzero(valid)
    k = frame.intrinsics
    z = frame.depth[vs, us] / 1000.0
    xyz = np.column_stack(((us - k.cx) * z / k.fx, (vs - k.cy) * z / k.fy, z))
    return xyz, frame.color[vs, us]


def to_global(pose: RigidPose, p) -> np.ndarray:
    """Map a user-local point into the shared frame: ``R @ p - R @ t``.

    Accepts a single 3-vector or an ``(N, 3)`` array.
    """
    pose.validate()
    p = np.asarray(p, dtype=np.float64)
    R, t = pose.rotation, pose.translation
    return p @ R.T - R @ t


def from_global(pose: RigidPose, p_global) -> np.ndarray:
    """Exact inverse of :func:`to_global`: ``R.T @ p' + t``."""
    pose.validate()
    q = np.asarray(p_global, dtype=np.float64)
    return q @ pose.rotation + pose.translation
