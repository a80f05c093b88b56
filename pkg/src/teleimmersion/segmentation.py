"""Foreground/background labeling as MAP inference on a 4-connected MRF.

Costs are negative log potentials: every pixel carries a two-entry unary cost
(BACKGROUND, FOREGROUND) and every grid edge a contrast-sensitive Potts
penalty paid when its endpoints disagree. Inference is synchronous min-sum
loopy belief propagation.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ModelError, OracleSizeError, ShapeError
from .geometry import MAX_DEPTH_MM, RgbdFrame

BACKGROUND = 0
FOREGROUND = 1

BRUTE_FORCE_MAX_PIXELS = 20


@dataclass(eq=False)
class LabelField:
    labels: np.ndarray  # (height, width) uint8 in {0, 1}

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if self.labels.ndim != 2:
            raise ShapeError(f"label field must be 2-D, got shape {self.labels.shape}")
        if self.labels.size and self.labels.max() > 1:
            raise ValueError("labels must be 0 (background) or 1 (foreground)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def __eq__(self, other):
        if not isinstance(other, LabelField):
            return NotImplemented
        return np.array_equal(self.labels, other.labels)

    def foreground_fraction(self) -> float:
        return float(self.labels.mean()) if self.labels.size else 0.0


@dataclass(eq=False)
class MrfModel:
    """Unary costs ``(h, w, 2)`` plus Potts weights on horizontal and vertical edges.

    ``h_weight[i, j]`` couples pixel ``(i, j)`` with ``(i, j + 1)``;
    ``v_weight[i, j]`` couples ``(i, j)`` with ``(i + 1, j)``.
    """

    unary: np.ndarray
    h_weight: np.ndarray
    v_weight: np.ndarray

    def __post_init__(self):
        self.unary = np.asarray(self.unary, dtype=np.float64)
        self.h_weight = np.asarray(self.h_weight, dtype=np.float64)
        self.v_weight = np.asarray(self.v_weight, dtype=np.float64)
        if self.unary.ndim != 3 or self.unary.shape[2] != 2:
            raise ShapeError(f"unary must be (h, w, 2), got {self.unary.shape}")
        h, w = self.unary.shape[:2]
        if self.h_weight.shape != (h, max(w - 1, 0)) or self.v_weight.shape != (max(h - 1, 0), w):
            raise ShapeError("edge weight arrays do not match the unary raster")
        for name in ("unary", "h_weight", "v_weight"):
            a = getattr(self, name)
            if not np.all(np.isfinite(a)) or (a.size and a.min() < 0):
                raise ModelError(f"{name} costs must be finite and non-negative")

    @property
    def height(self) -> int:
        return self.unary.shape[0]

    @property
    def width(self) -> int:
        return self.unary.shape[1]

    @property
    def edge_count(self) -> int:
        return self.h_weight.size + self.v_weight.size

    @classmethod
    def uniform(cls, unary: np.ndarray, weight: float) -> "MrfModel":
        unary = np.asarray(unary, dtype=np.float64)
        h, w = unary.shape[:2]
        return cls(unary, np.full((h, w - 1), weight), np.full((h - 1, w), weight))


@dataclass(eq=False)
class BackgroundModel:
    mean_depth: np.ndarray  # mm, float64
    depth_sigma: np.ndarray  # mm, float64, > 0

    def __post_init__(self):
        self.mean_depth = np.asarray(self.mean_depth, dtype=np.float64)
        self.depth_sigma = np.asarray(self.depth_sigma, dtype=np.float64)
        if self.mean_depth.shape != self.depth_sigma.shape:
            raise ShapeError("mean and sigma rasters differ in shape")
        if not np.all(self.depth_sigma > 0):
            raise ModelError("background sigma must be positive everywhere")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mean_depth.shape

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            np.savez(fh, mean_depth=self.mean_depth, depth_sigma=self.depth_sigma)

    @classmethod
    def load(cls, path) -> "BackgroundModel":
        try:
            with np.load(Path(path)) as data:
                return cls(data["mean_depth"], data["depth_sigma"])
        except (OSError, KeyError, ValueError) as exc:
            raise FormatError(f"cannot load background model {path}: {exc}") from exc


@dataclass(frozen=True)
class PotentialParams:
    lambda_d: float = 1.0
    tau_d: float = 3.0
    w_p: float = 2.0
    sigma_depth: float = 30.0  # mm
    sigma_color: float = 30.0  # L1 distance over 8-bit RGB
    sigma_floor: float = 5.0  # mm
    default_sigma: float = 50.0  # mm, pixels never observed while fitting
    hole_window: int = 5
    iterations: int = 10


def fit_background(frames: Sequence[RgbdFrame], params: PotentialParams = PotentialParams()) -> BackgroundModel:
    """Per-pixel mean and standard deviation of the non-zero depths in user-free frames."""
    if not frames:
        raise ModelError("need at least one background frame")
    shape = frames[0].depth.shape
    for f in frames:
        if f.depth.shape != shape:
            raise ModelError(f"background frames differ in size: {f.depth.shape} vs {shape}")
    stack = np.stack([f.depth for f in frames]).astype(np.float64)
    valid = stack > 0
    count = valid.sum(axis=0)
    total = np.where(valid, stack, 0.0).sum(axis=0)
    seen = count > 0
    mean = np.divide(total, count, out=np.zeros(shape), where=seen)
    sq = np.where(valid, (stack - mean) ** 2, 0.0).sum(axis=0)
    std = np.sqrt(np.divide(sq, count - 1, out=np.zeros(shape), where=count > 1))
    sigma = np.maximum(std, params.sigma_floor)
    fill_depth = float(stack.max()) if valid.any() else float(MAX_DEPTH_MM)
    mean[~seen] = fill_depth
    sigma[~seen] = params.default_sigma
    return BackgroundModel(mean, sigma)


def _hole_residuals(color: np.ndarray, depth: np.ndarray, depth_resid: np.ndarray, params: PotentialParams) -> np.ndarray:
    """Clipped colour residual of each hole pixel against nearby background samples.

    A background sample is a valid-depth pixel in the window whose depth
    residual already favours BACKGROUND. Holes with no sample get the neutral
    value ``tau_d / 2``.
    """
    h, w = depth.shape
    hv, hu = np.nonzero(depth == 0)
    out = np.full(hv.size, params.tau_d / 2.0)
    if hv.size == 0:
        return out
    is_sample = (depth > 0) & (depth_resid < params.tau_d / 2.0)
    color = color.astype(np.int32)
    c0 = color[hv, hu]
    best = np.full(hv.size, np.inf)
    half = params.hole_window // 2
    for dv in range(-half, half + 1):
        for du in range(-half, half + 1):
            v, u = hv + dv, hu + du
            inside = (v >= 0) & (v < h) & (u >= 0) & (u < w)
            vc, uc = np.clip(v, 0, h - 1), np.clip(u, 0, w - 1)
            ok = inside & is_sample[vc, uc]
            dist = np.abs(color[vc, uc] - c0).sum(axis=1) / params.sigma_color
            best = np.where(ok, np.minimum(best, dist), best)
    found = np.isfinite(best)
    out[found] = np.minimum(best[found], params.tau_d)
    return out


def build_model(frame: RgbdFrame, bg: BackgroundModel, params: PotentialParams = PotentialParams()) -> MrfModel:
    """Unary and pairwise costs from depth continuity and colour similarity."""
    if bg.shape != frame.depth.shape:
        raise ShapeError(f"background model {bg.shape} does not match frame {frame.depth.shape}")
    return model_from_arrays(frame.color, frame.depth, bg.mean_depth, bg.depth_sigma, params)


def model_from_arrays(
    color: np.ndarray,
    depth_mm: np.ndarray,
    bg_mean: np.ndarray,
    bg_sigma: np.ndarray,
    params: PotentialParams = PotentialParams(),
) -> MrfModel:
    depth = depth_mm.astype(np.float64)
    valid = depth_mm > 0
    resid = np.minimum(np.abs(depth - bg_mean) / bg_sigma, params.tau_d)
    resid[~valid] = 0.0
    resid[~valid] = _hole_residuals(color, depth_mm, np.where(valid, resid, np.inf), params)

    unary = np.empty(depth.shape + (2,))
    unary[..., BACKGROUND] = params.lambda_d * resid
    unary[..., FOREGROUND] = params.lambda_d * (params.tau_d - resid)

    color = color.astype(np.int16)

    def edge_weights(d_a, d_b, ok_a, ok_b, c_a, c_b):
        dd = np.where(ok_a & ok_b, np.abs(d_a - d_b), 0.0)
        dc = np.abs(c_a - c_b).sum(axis=-1)
        return params.w_p * np.exp(-dd / params.sigma_depth - dc / params.sigma_color)

    h_w = edge_weights(depth[:, :-1], depth[:, 1:], valid[:, :-1], valid[:, 1:], color[:, :-1], color[:, 1:])
    v_w = edge_weights(depth[:-1], depth[1:], valid[:-1], valid[1:], color[:-1], color[1:])
    return MrfModel(unary, h_w, v_w)


def _clip_into(src, lo, hi, out, scratch):
    np.minimum(src, hi, out=scratch)
    np.maximum(scratch, lo, out=out)


def lbp_map(model: MrfModel, iterations: int = 10, damping: float = 0.5) -> LabelField:
    """Synchronous min-sum loopy BP with per-round min-normalised messages.

    A normalised binary message has one zero entry, so it is stored as the
    single difference ``m(FOREGROUND) - m(BACKGROUND)``. For a Potts edge of
    weight ``w`` the min-sum update of that difference is ``clip(a, -w, w)``
    where ``a`` is the sender's belief difference excluding the receiver.

    Each round's new message is blended with the previous one,
    ``damping * old + (1 - damping) * new``; a blend of normalised binary
    messages is still normalised. ``damping=0`` gives plain synchronous BP,
    which oscillates on some small loopy grids.
    """
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if not 0.0 <= damping < 1.0:
        raise ValueError("damping must lie in [0, 1)")
    unary_diff = model.unary[..., FOREGROUND] - model.unary[..., BACKGROUND]
    h, w = unary_diff.shape
    wh, wv = model.h_weight, model.v_weight
    neg_wh, neg_wv = -wh, -wv
    # messages arriving at each pixel from its left/right/upper/lower neighbour
    m_left = np.zeros((h, w))
    m_right = np.zeros((h, w))
    m_up = np.zeros((h, w))
    m_down = np.zeros((h, w))
    new = {k: np.zeros((h, w)) for k in ("left", "right", "up", "down")}
    belief = np.empty((h, w))
    tmp_h, tmp_h2 = np.empty((h, max(w - 1, 0))), np.empty((h, max(w - 1, 0)))
    tmp_v, tmp_v2 = np.empty((max(h - 1, 0), w)), np.empty((max(h - 1, 0), w))
    keep = 1.0 - damping
    for _ in range(iterations):
        np.add(unary_diff, m_left, out=belief)
        belief += m_right
        belief += m_up
        belief += m_down
        if w > 1:
            np.subtract(belief[:, :-1], m_right[:, :-1], out=tmp_h)
            _clip_into(tmp_h, neg_wh, wh, new["left"][:, 1:], tmp_h2)
            np.subtract(belief[:, 1:], m_left[:, 1:], out=tmp_h)
            _clip_into(tmp_h, neg_wh, wh, new["right"][:, :-1], tmp_h2)
        if h > 1:
            np.subtract(belief[:-1], m_down[:-1], out=tmp_v)
            _clip_into(tmp_v, neg_wv, wv, new["up"][1:], tmp_v2)
            np.subtract(belief[1:], m_up[1:], out=tmp_v)
            _clip_into(tmp_v, neg_wv, wv, new["down"][:-1], tmp_v2)
        for msg, key in ((m_left, "left"), (m_right, "right"), (m_up, "up"), (m_down, "down")):
            if damping:
                msg *= damping
                msg += keep * new[key]
            else:
                msg[...] = new[key]
    np.add(unary_diff, m_left, out=belief)
    belief += m_right
    belief += m_up
    belief += m_down
    # strictly cheaper FOREGROUND wins; ties go to BACKGROUND
    return LabelField((belief < 0).astype(np.uint8))


def energy(model: MrfModel, labels) -> float:
    """Selected unary costs plus the weight of every edge whose labels differ."""
    lab = np.asarray(getattr(labels, "labels", labels))
    if lab.shape != model.unary.shape[:2]:
        raise ShapeError(f"labels {lab.shape} do not match model {model.unary.shape[:2]}")
    lab = lab.astype(np.intp)
    unary = np.take_along_axis(model.unary, lab[..., None], axis=2).sum()
    pair = model.h_weight[lab[:, :-1] != lab[:, 1:]].sum() + model.v_weight[lab[:-1] != lab[1:]].sum()
    return float(unary + pair)


def brute_force_map(model: MrfModel) -> LabelField:
    """Exhaustive minimum-energy labeling for tiny models.

    Labelings are enumerated in lexicographic order over row-major pixels and
    the first minimum is kept, so ties resolve toward BACKGROUND-first labelings.
    """
    h, w = model.height, model.width
    n = h * w
    if n > BRUTE_FORCE_MAX_PIXELS:
        raise OracleSizeError(f"brute force limited to {BRUTE_FORCE_MAX_PIXELS} pixels, model has {n}")
    shifts = np.arange(n - 1, -1, -1, dtype=np.int64)
    u0 = model.unary[..., BACKGROUND]
    u1 = model.unary[..., FOREGROUND]
    best_energy, best_bits = np.inf, None
    chunk = 1 << 14
    for start in range(0, 1 << n, chunk):
        codes = np.arange(start, min(start + chunk, 1 << n), dtype=np.int64)
        bits = ((codes[:, None] >> shifts) & 1).reshape(-1, h, w)
        e = np.where(bits == 1, u1, u0).reshape(len(codes), -1).sum(axis=1)
        if w > 1:
            e += ((bits[:, :, :-1] != bits[:, :, 1:]) * model.h_weight).reshape(len(codes), -1).sum(axis=1)
        if h > 1:
            e += ((bits[:, :-1] != bits[:, 1:]) * model.v_weight).reshape(len(codes), -1).sum(axis=1)
        i = int(np.argmin(e))
        # strict comparison keeps the lexicographically first minimum
        if e[i] < best_energy:
            best_energy, best_bits = e[i], bits[i]
    return LabelField(best_bits.astype(np.uint8))


def segment(frame: RgbdFrame, bg: BackgroundModel, params: PotentialParams = PotentialParams()) -> tuple[LabelField, MrfModel]:
    model = build_model(frame, bg, params)
    return lbp_map(model, params.iterations), model


def segment_roi(
    frame: RgbdFrame,
    bg: BackgroundModel,
    roi: tuple[int, int, int, int],
    params: PotentialParams = PotentialParams(),
) -> LabelField:
    """Segment only the ``(x, y, w, h)`` rectangle; pixels outside it are BACKGROUND."""
    if bg.shape != frame.depth.shape:
        raise ShapeError(f"background model {bg.shape} does not match frame {frame.depth.shape}")
    x, y, w, h = roi
    H, W = frame.depth.shape
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise ShapeError(f"ROI {roi} outside {W}x{H} frame")
    sl = (slice(y, y + h), slice(x, x + w))
    model = model_from_arrays(frame.color[sl], frame.depth[sl], bg.mean_depth[sl], bg.depth_sigma[sl], params)
    labels = np.zeros((H, W), dtype=np.uint8)
    labels[sl] = lbp_map(model, params.iterations).labels
    return LabelField(labels)
