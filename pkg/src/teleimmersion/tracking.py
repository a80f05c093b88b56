"""Viewpoint tracking: head-sphere fit on the depth silhouette, a hue mean-shift
fallback, an external positional fallback, priority arbitration and a
constant-velocity Kalman filter.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional, Sequence

import numpy as np
from scipy import ndimage

from .errors import StateError
from .geometry import CameraIntrinsics, RgbdFrame, back_project_pixel, project

HUE_BINS = 16
_MIN_SATURATION = 0.2
_MIN_VALUE = 0.1


class Source(enum.IntEnum):
    DEPTH = 0
    COLOR = 1
    POSITIONAL = 2
    PREDICTED = 3  # Kalman coast, no tracker reported this frame
    NONE = 4


@dataclass(frozen=True)
class ViewpointEstimate:
    position: tuple[float, float, float]
    source: Source
    valid: bool
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "position", tuple(float(c) for c in self.position))
        if self.valid and not all(math.isfinite(c) for c in self.position):
            raise ValueError("a valid estimate needs a finite position")

    def __eq__(self, other):
        if not isinstance(other, ViewpointEstimate):
            return NotImplemented
        return (
            np.array_equal(self.position, other.position, equal_nan=True)
            and self.source == other.source
            and self.valid == other.valid
            and self.confidence == other.confidence
        )

    def __hash__(self):
        return hash((self.source, self.valid))

    @classmethod
    def invalid(cls, source: Source = Source.NONE) -> "ViewpointEstimate":
        return cls((math.nan, math.nan, math.nan), source, False, 0.0)

    @property
    def z(self) -> float:
        return self.position[2]


class Window(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    @property
    def center(self) -> tuple[float, float]:
        return (self.x + (self.w - 1) / 2.0, self.y + (self.h - 1) / 2.0)


# -- morphology --------------------------------------------------------------


def _square(radius: int) -> np.ndarray:
    return np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)


def morph_open_close(mask, radius: int = 2) -> np.ndarray:
    """Opening (erode, dilate) then closing (dilate, erode) with a square element.

    Pixels outside the raster count as background. The raster is padded so
    the result equals set morphology on the unbounded plane, which keeps
    opening anti-extensive, closing extensive and both idempotent.
    """
    if radius < 1:
        raise ValueError("radius must be >= 1")
    return morph_close(morph_open(mask, radius), radius)


def _padded_op(mask, radius: int, first, second) -> np.ndarray:
    # opening and box closing both stay inside the set's bounding box and
    # everything outside it is background, so working on the crop is exact
    m = np.asarray(mask).astype(bool)
    out = np.zeros(m.shape, dtype=np.uint8)
    rows = np.flatnonzero(m.any(axis=1))
    if rows.size == 0:
        return out
    cols = np.flatnonzero(m.any(axis=0))
    sl = (slice(rows[0], rows[-1] + 1), slice(cols[0], cols[-1] + 1))
    pad = 2 * radius
    se = _square(radius)
    crop = np.pad(m[sl], pad)
    res = second(first(crop, se), se)
    out[sl] = res[pad:-pad, pad:-pad]
    return out


def morph_open(mask, radius: int) -> np.ndarray:
    return _padded_op(mask, radius, ndimage.binary_erosion, ndimage.binary_dilation)


def morph_close(mask, radius: int) -> np.ndarray:
    return _padded_op(mask, radius, ndimage.binary_dilation, ndimage.binary_erosion)


# -- depth tracker -----------------------------------------------------------


def topmost_component(mask: np.ndarray) -> Optional[np.ndarray]:
    """Boolean mask of the 8-connected component reaching the highest row.

    Ties on the top row go to the component with the leftmost top pixel.
    """
    labels, n = ndimage.label(mask, structure=np.ones((3, 3)))
    if n == 0:
        return None
    # first label encountered in row-major order is the topmost-then-leftmost one
    first = int(labels.ravel()[np.flatnonzero(labels.ravel())[0]])
    return labels == first


def fit_silhouette_cone(
    intrinsics: CameraIntrinsics, us: np.ndarray, vs: np.ndarray
) -> Optional[tuple[np.ndarray, float]]:
    """Least-squares circular cone through the viewing rays of outline pixels.

    A sphere's silhouette is the set of rays at a fixed angle ``a`` from the
    ray through its centre, i.e. unit rays ``d`` with ``d . n = 1`` for
    ``n = c_hat / cos(a)``. This is the algebraic circle fit carried out on
    the sphere of view directions, which stays exact off-axis where the
    image-plane silhouette becomes an ellipse.

    Returns the unit centre direction and ``cos(a)**2``.
    """
    if len(us) < 3:
        return None
    k = intrinsics
    d = np.column_stack(((us - k.cx) / k.fx, (vs - k.cy) / k.fy, np.ones(len(us))))
    d /= np.linalg.norm(d, axis=1)[:, None]
    n, _, rank, _ = np.linalg.lstsq(d, np.ones(len(us)), rcond=None)
    if rank < 3:
        return None
    nn = float(n @ n)
    if not nn > 1.0:
        return None
    c_hat = n / math.sqrt(nn)
    if c_hat[2] <= 0:
        return None
    return c_hat, 1.0 / nn


def fit_head_sphere(
    frame: RgbdFrame,
    fg,
    band_fraction: float = 0.25,
    min_band_pixels: int = 30,
) -> ViewpointEstimate:
    """Head centre from the top band of the topmost silhouette component.

    The centre direction comes from a cone fit to the band's outline pixels.
    Each band pixel with valid depth is a surface point ``P``; the sphere
    centre ``D * c_hat`` must satisfy ``|D c_hat - P| = D sin(a)``, which
    gives one distance estimate per pixel. The median distance is used, and
    the resulting centre is pulled along its ray so that its depth stays
    inside the band's observed depth range.
    """
    mask = np.asarray(getattr(fg, "labels", fg)).astype(bool)
    comp = topmost_component(mask)
    if comp is None:
        return ViewpointEstimate.invalid(Source.DEPTH)
    rows = np.flatnonzero(comp.any(axis=1))
    top, bottom = int(rows[0]), int(rows[-1])
    band_rows = max(1, int(math.ceil(band_fraction * (bottom - top + 1))))
    band = np.zeros_like(comp)
    band[top:top + band_rows] = comp[top:top + band_rows]
    depth = frame.depth
    band_valid = band & (depth > 0)
    if band.sum() < min_band_pixels or not band_valid.any():
        return ViewpointEstimate.invalid(Source.DEPTH)

    padded = np.pad(comp, 1)
    interior = padded[:-2, 1:-1] & padded[2:, 1:-1] & padded[1:-1, :-2] & padded[1:-1, 2:]
    vs, us = np.nonzero(band & ~interior)
    k = frame.intrinsics
    cone = fit_silhouette_cone(k, us, vs)
    if cone is None:
        return ViewpointEstimate.invalid(Source.DEPTH)
    c_hat, cos2 = cone

    bv, bu = np.nonzero(band_valid)
    z = depth[bv, bu] / 1000.0
    P = np.column_stack(((bu - k.cx) * z / k.fx, (bv - k.cy) * z / k.fy, z))
    cp = P @ c_hat
    disc = np.maximum(cp * cp - cos2 * np.einsum("ij,ij->i", P, P), 0.0)
    dist = float(np.median((cp + np.sqrt(disc)) / cos2))
    center = dist * c_hat
    z_c = float(np.clip(center[2], z.min(), z.max()))
    center = center * (z_c / center[2])
    center[2] = z_c
    return ViewpointEstimate(tuple(center), Source.DEPTH, True, 1.0)


# -- colour tracker ----------------------------------------------------------


def rgb_to_hsv(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Hue in [0, 1), saturation and value in [0, 1]."""
    c = rgb.astype(np.float64) / 255.0
    r, g, b = c[..., 0], c[..., 1], c[..., 2]
    mx = c.max(axis=-1)
    mn = c.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(
        mx == r,
        ((g - b) / safe) % 6.0,
        np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    )
    hue = np.where(delta > 0, hue / 6.0, 0.0) % 1.0
    sat = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return hue, sat, mx


def _hue_bins(rgb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    hue, sat, val = rgb_to_hsv(rgb)
    bins = np.minimum((hue * HUE_BINS).astype(np.intp), HUE_BINS - 1)
    chromatic = (sat >= _MIN_SATURATION) & (val >= _MIN_VALUE)
    return bins, chromatic


def hue_histogram(frame: RgbdFrame, mask) -> np.ndarray:
    """16-bin hue histogram of the chromatic pixels under ``mask``, scaled to max 1."""
    m = np.asarray(getattr(mask, "labels", mask)).astype(bool)
    bins, chromatic = _hue_bins(frame.color[m])
    hist = np.bincount(bins[chromatic], minlength=HUE_BINS).astype(np.float64)
    peak = hist.max()
    return hist / peak if peak > 0 else hist


def back_projection(color: np.ndarray, hist: np.ndarray) -> np.ndarray:
    """Per-pixel histogram weight of each pixel's hue; grey pixels weigh 0."""
    bins, chromatic = _hue_bins(color)
    return np.where(chromatic, np.asarray(hist)[bins], 0.0)


def _clamp_window(win: Window, width: int, height: int) -> Window:
    w = min(win.w, width)
    h = min(win.h, height)
    x = min(max(win.x, 0), width - w)
    y = min(max(win.y, 0), height - h)
    return Window(int(x), int(y), int(w), int(h))


def color_track(
    frame: RgbdFrame,
    prev_window: Window,
    target_hue_hist: Sequence[float],
    max_iterations: int = 10,
) -> tuple[Window, float]:
    """Mean shift of a fixed-size window over the hue back-projection.

    Returns the final window and its mean back-projection weight.
    """
    hist = np.asarray(target_hue_hist, dtype=np.float64)
    if hist.shape != (HUE_BINS,):
        raise ValueError(f"hue histogram needs {HUE_BINS} bins")
    win = _clamp_window(Window(*prev_window), frame.width, frame.height)
    weights = None
    for _ in range(max_iterations):
        patch = frame.color[win.y:win.y + win.h, win.x:win.x + win.w]
        weights = back_projection(patch, hist)
        mass = weights.sum()
        if mass <= 0:
            return win, 0.0
        ys, xs = np.mgrid[0:win.h, 0:win.w]
        cu = win.x + float((weights * xs).sum() / mass)
        cv = win.y + float((weights * ys).sum() / mass)
        ou, ov = win.center
        moved = _clamp_window(
            Window(int(round(cu - (win.w - 1) / 2.0)), int(round(cv - (win.h - 1) / 2.0)), win.w, win.h),
            frame.width,
            frame.height,
        )
        shift = math.hypot(cu - ou, cv - ov)
        if moved == win or shift < 1.0:
            win = moved
            break
        win = moved
    patch = frame.color[win.y:win.y + win.h, win.x:win.x + win.w]
    return win, float(back_projection(patch, hist).mean())


# -- arbitration -------------------------------------------------------------


def arbitrate(
    depth_est: ViewpointEstimate,
    color_est: ViewpointEstimate,
    positional_est: ViewpointEstimate,
    near: float = 0.8,
    far: float = 4.0,
    color_min_confidence: float = 0.3,
) -> ViewpointEstimate:
    """Strict priority: in-range depth, then confident colour, then positional."""
    if depth_est.valid and near <= depth_est.z <= far:
        return depth_est
    if color_est.valid and color_est.confidence >= color_min_confidence:
        return color_est
    if positional_est.valid:
        return positional_est
    return ViewpointEstimate.invalid()


# -- Kalman filter -----------------------------------------------------------


@dataclass(eq=False)
class KalmanState:
    """Constant-velocity state ``[x, y, z, vx, vy, vz]`` and its covariance."""

    state: np.ndarray
    covariance: np.ndarray

    def __post_init__(self):
        self.state = np.array(self.state, dtype=np.float64).reshape(6)
        self.covariance = np.array(self.covariance, dtype=np.float64).reshape(6, 6)

    @classmethod
    def at(cls, position, variance: float = 0.1) -> "KalmanState":
        s = np.zeros(6)
        s[:3] = position
        return cls(s, variance * np.eye(6))

    @property
    def position(self) -> np.ndarray:
        return self.state[:3]

    @property
    def velocity(self) -> np.ndarray:
        return self.state[3:]

    def check(self) -> None:
        P = self.covariance
        if not np.all(np.isfinite(P)) or not np.all(np.isfinite(self.state)):
            raise StateError("Kalman state has non-finite entries")
        if np.max(np.abs(P - P.T)) >= 1e-9:
            raise StateError("covariance is not symmetric")
        if np.linalg.eigvalsh(P).min() < -1e-9:
            raise StateError("covariance is not positive semidefinite")


_H = np.hstack((np.eye(3), np.zeros((3, 3))))


def kalman_step(
    state: KalmanState,
    measurement=None,
    dt: float = 1 / 15,
    q: float = 1.0,
    r: float = 1e-4,
) -> KalmanState:
    """One predict (and optional position update) step.

    ``q`` is the white-acceleration variance driving ``Q = q G G^T`` with
    ``G = [dt^2/2 I; dt I]``; ``r`` is the per-axis measurement variance.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not (q > 0 and r > 0):
        raise ValueError("noise parameters must be positive")
    state.check()
    I3 = np.eye(3)
    F = np.block([[I3, dt * I3], [np.zeros((3, 3)), I3]])
    G = np.vstack((0.5 * dt * dt * I3, dt * I3))
    x = F @ state.state
    P = F @ state.covariance @ F.T + q * (G @ G.T)
    if measurement is not None:
        z = np.asarray(measurement, dtype=np.float64).reshape(3)
        S = _H @ P @ _H.T + r * I3
        K = np.linalg.solve(S, _H @ P).T
        x = x + K @ (z - _H @ x)
        IKH = np.eye(6) - K @ _H
        P = IKH @ P @ IKH.T + r * (K @ K.T)
    P = 0.5 * (P + P.T)
    return KalmanState(x, P)


# -- per-frame pipeline ------------------------------------------------------


@dataclass(frozen=True)
class TrackerParams:
    morph_radius: int = 2
    band_fraction: float = 0.25
    min_band_pixels: int = 30
    near: float = 0.8
    far: float = 4.0
    color_min_confidence: float = 0.3
    color_window: int = 40
    q: float = 1.0
    r: float = 1e-4
    init_variance: float = 0.1
    default_dt: float = 1 / 15
    max_coast: int = 15


@dataclass
class ViewpointTracker:
    """Per-stream tracker state; one instance per client camera."""

    intrinsics: CameraIntrinsics
    params: TrackerParams = field(default_factory=TrackerParams)
    target_hist: Optional[np.ndarray] = None
    kalman: Optional[KalmanState] = None
    window: Optional[Window] = None
    last_timestamp: Optional[int] = None
    coasted: int = 0
    last_mask: Optional[np.ndarray] = None

    def _dt(self, frame: RgbdFrame) -> float:
        if self.last_timestamp is not None and frame.timestamp > self.last_timestamp:
            return (frame.timestamp - self.last_timestamp) / 1e6
        return self.params.default_dt

    def _window_around(self, u: float, v: float) -> Window:
        s = self.params.color_window
        return _clamp_window(
            Window(int(round(u - (s - 1) / 2.0)), int(round(v - (s - 1) / 2.0)), s, s),
            self.intrinsics.width,
            self.intrinsics.height,
        )

    def _color_estimate(self, frame: RgbdFrame, z_hint: Optional[float]) -> ViewpointEstimate:
        if self.target_hist is None or self.window is None:
            return ViewpointEstimate.invalid(Source.COLOR)
        win, conf = color_track(frame, self.window, self.target_hist)
        self.window = win
        patch = frame.depth[win.y:win.y + win.h, win.x:win.x + win.w]
        vals = patch[patch > 0]
        if vals.size:
            z = float(np.median(vals)) / 1000.0
        elif z_hint is not None:
            z = z_hint
        else:
            return ViewpointEstimate.invalid(Source.COLOR)
        u, v = win.center
        pos = back_project_pixel(self.intrinsics, u, v, z)
        return ViewpointEstimate(tuple(pos), Source.COLOR, conf >= self.params.color_min_confidence, conf)

    def track_frame(self, frame: RgbdFrame, fg, positional=None) -> ViewpointEstimate:
        p = self.params
        dt = self._dt(frame)
        self.last_timestamp = frame.timestamp
        mask = morph_open_close(np.asarray(getattr(fg, "labels", fg)), p.morph_radius)
        self.last_mask = mask
        depth_est = fit_head_sphere(frame, mask, p.band_fraction, p.min_band_pixels)

        z_hint = float(self.kalman.position[2]) if self.kalman is not None else None
        color_est = self._color_estimate(frame, z_hint)
        if positional is not None:
            pos_est = ViewpointEstimate(tuple(positional), Source.POSITIONAL, True)
        else:
            pos_est = ViewpointEstimate.invalid(Source.POSITIONAL)

        chosen = arbitrate(depth_est, color_est, pos_est, p.near, p.far, p.color_min_confidence)

        if chosen.source == Source.DEPTH:
            u, v = project(self.intrinsics, chosen.position)
            self.window = self._window_around(u, v)
            if self.target_hist is None:
                hist = hue_histogram(frame, mask)
                if hist.max() > 0:
                    self.target_hist = hist

        if self.kalman is None:
            if not chosen.valid:
                return ViewpointEstimate.invalid()
            self.kalman = KalmanState.at(chosen.position, p.init_variance)
            self.coasted = 0
            return chosen

        meas = chosen.position if chosen.valid else None
        self.kalman = kalman_step(self.kalman, meas, dt, p.q, p.r)
        if chosen.valid:
            self.coasted = 0
            return replace(chosen, position=tuple(self.kalman.position))
        self.coasted += 1
        valid = self.coasted <= p.max_coast
        return ViewpointEstimate(tuple(self.kalman.position), Source.PREDICTED, valid, 0.0)
