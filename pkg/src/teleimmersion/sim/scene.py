"""Analytic RGB-D scene: a head sphere in front of a planar wall, plus two hand
joints reported in the user's egocentric frame.

Every frame is a pure function of ``(scene, index)``; noise comes from a
generator seeded with ``(seed, index)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from typing import Optional

import numpy as np

from ..geometry import CameraIntrinsics, RgbdFrame

HAND_LABELS = ("left_hand", "right_hand")


@dataclass(frozen=True)
class SyntheticScene:
    intrinsics: CameraIntrinsics = field(default_factory=CameraIntrinsics.kinect_v2)
    background_depth_mm: float = 3000.0
    head_center: tuple[float, float, float] = (0.0, -0.1, 2.0)
    head_orbit: tuple[float, float, float] = (0.25, 0.05, 0.3)  # path amplitude per axis, m
    head_period_frames: float = 60.0
    head_radius: float = 0.1
    head_color: tuple[int, int, int] = (205, 130, 85)
    hand_center: tuple[float, float, float] = (0.0, 0.0, 0.25)  # egocentric frame, m
    hand_spread: float = 0.15
    hand_orbit: float = 0.08
    depth_noise_mm: float = 5.0
    hole_probability: float = 0.01
    sensor_min_mm: int = 500
    sensor_max_mm: int = 4500
    frame_count: int = 30
    fps: float = 15.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.hole_probability < 0.3:
            raise ValueError("hole probability must lie in [0, 0.3)")
        if self.head_radius <= 0 or self.frame_count < 0:
            raise ValueError("head radius must be positive and frame count non-negative")

    def head_position(self, index: int) -> np.ndarray:
        phase = 2.0 * math.pi * index / self.head_period_frames
        c = np.asarray(self.head_center, dtype=np.float64)
        a = np.asarray(self.head_orbit, dtype=np.float64)
        return c + a * np.array([math.sin(phase), math.sin(2.0 * phase), math.cos(phase) - 1.0])

    def hand_positions(self, index: int) -> dict[str, np.ndarray]:
        phase = 2.0 * math.pi * index / self.head_period_frames
        base = np.asarray(self.hand_center, dtype=np.float64)
        wobble = self.hand_orbit * np.array([math.cos(phase), math.sin(phase), 0.5 * math.sin(phase)])
        side = np.array([self.hand_spread, 0.0, 0.0])
        return {"left_hand": base - side + wobble, "right_hand": base + side - wobble}

    def timestamp_us(self, index: int) -> int:
        return int(round(index * 1e6 / self.fps))

    def replace(self, **changes) -> "SyntheticScene":
        vals = {f.name: getattr(self, f.name) for f in fields(self)}
        vals.update(changes)
        return SyntheticScene(**vals)


@dataclass(frozen=True)
class GroundTruth:
    head_center: np.ndarray
    joints: dict[str, np.ndarray]
    head_mask: np.ndarray  # pixels whose ray hits the head sphere


def _rays(intr: CameraIntrinsics) -> tuple[np.ndarray, np.ndarray]:
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    return (u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy


def sphere_depth(intr: CameraIntrinsics, center, radius: float) -> np.ndarray:
    """Metric depth (z) of the first ray-sphere hit per pixel; ``inf`` on a miss."""
    dx, dy = _rays(intr)
    c = np.asarray(center, dtype=np.float64)
    # ray p = s * (dx, dy, 1); z of the hit equals s
    a = dx * dx + dy * dy + 1.0
    b = dx * c[0] + dy * c[1] + c[2]
    cc = float(c @ c) - radius * radius
    disc = b * b - a * cc
    hit = disc >= 0
    s = np.full(a.shape, np.inf)
    s[hit] = (b[hit] - np.sqrt(disc[hit])) / a[hit]
    s[s <= 0] = np.inf
    return s


def _background_color(intr: CameraIntrinsics) -> np.ndarray:
    v, u = np.mgrid[0:intr.height, 0:intr.width]
    base = 110 + 25 * (((u // 32) + (v // 32)) % 2)
    gray = np.repeat(base[..., None], 3, axis=2)
    return gray + np.array([4, 0, -4])


def render_synthetic(scene: SyntheticScene, index: int) -> tuple[RgbdFrame, GroundTruth]:
    if not 0 <= index < scene.frame_count:
        raise IndexError(f"frame {index} outside scene of {scene.frame_count} frames")
    intr = scene.intrinsics
    rng = np.random.default_rng((scene.seed, index))
    center = scene.head_position(index)
    z_head = sphere_depth(intr, center, scene.head_radius)
    head = np.isfinite(z_head)
    z_mm = np.where(head, z_head * 1000.0, scene.background_depth_mm)
    if scene.depth_noise_mm > 0:
        z_mm = z_mm + rng.normal(0.0, scene.depth_noise_mm, z_mm.shape)
    depth = np.rint(z_mm)
    depth[(depth < scene.sensor_min_mm) | (depth > scene.sensor_max_mm)] = 0
    if scene.hole_probability > 0:
        depth[rng.random(depth.shape) < scene.hole_probability] = 0
    color = _background_color(intr)
    color = np.where(head[..., None], np.asarray(scene.head_color), color)
    color = color + rng.integers(-6, 7, color.shape)
    frame = RgbdFrame(
        np.clip(color, 0, 255).astype(np.uint8),
        depth.astype(np.uint16),
        intr,
        scene.timestamp_us(index),
        0,
    )
    return frame, GroundTruth(center, scene.hand_positions(index), head)


def render_background(scene: SyntheticScene, count: int = 5) -> list[RgbdFrame]:
    """User-free frames for fitting the background model (indices are offset
    so their noise is independent of the session frames)."""
    empty = scene.replace(head_center=(0.0, 0.0, -10.0), head_orbit=(0.0, 0.0, 0.0),
                          frame_count=count, seed=scene.seed + 7919)
    return [render_synthetic(empty, i)[0] for i in range(count)]


def clean_sphere_frame(
    center, radius: float = 0.1, intrinsics: Optional[CameraIntrinsics] = None,
    background_mm: float = 3000.0,
) -> tuple[RgbdFrame, np.ndarray]:
    """Noise-free frame of one sphere plus its exact silhouette mask."""
    scene = SyntheticScene(
        intrinsics=intrinsics or CameraIntrinsics.kinect_v2(),
        background_depth_mm=background_mm,
        head_center=tuple(center),
        head_orbit=(0.0, 0.0, 0.0),
        head_radius=radius,
        depth_noise_mm=0.0,
        hole_probability=0.0,
        frame_count=1,
    )
    frame, truth = render_synthetic(scene, 0)
    return frame, truth.head_mask.astype(np.uint8)
