"""Experiment drivers: joint-position accuracy, offline tracking quality and
the two-client loopback timing benchmark."""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Optional

import numpy as np

from ..collision import BodyModel, BoxSet, Joint
from ..geometry import to_global
from ..netproto.codec import DesyncError, FrameDecoder, raw_size
from ..netproto.wire import Hello, Message, MsgType, decode_message, encode_message
from ..segmentation import PotentialParams, fit_background
from ..server import HubServer, Server, SessionConfig
from ..tracking import TrackerParams
from .client import STAGES, ClientPipeline, NetClient, PipelineParams
from .scene import SyntheticScene, render_background, render_synthetic

TIMED_COMPONENTS = ("segmentation", "tracking", "collision", "codec", "transport", "object_stage")


# -- accuracy ----------------------------------------------------------------------


@dataclass(frozen=True)
class AccuracyConfig:
    joint_sigma_cm: float = 0.8
    grid: tuple[int, int, int] = (9, 8, 8)
    x_range_cm: tuple[float, float] = (-30.0, 30.0)
    y_range_cm: tuple[float, float] = (-20.0, 20.0)
    z_range_cm: tuple[float, float] = (5.0, 40.0)
    seed: int = 0


def hand_grid(cfg: AccuracyConfig) -> np.ndarray:
    """Sensor-frame hand positions in metres, x varying slowest."""
    axes = [
        np.linspace(lo, hi, n) / 100.0
        for (lo, hi), n in zip((cfg.x_range_cm, cfg.y_range_cm, cfg.z_range_cm), cfg.grid)
    ]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)


def run_accuracy_experiment(cfg: AccuracyConfig = AccuracyConfig(), session: Optional[SessionConfig] = None) -> dict:
    """Push noisy hand detections through the wire and the server and compare the
    shared-frame joints it reports with the transformed ground truth.

    Noise is a fixed standard-normal draw scaled by the configured sigma, so
    runs at different noise levels differ only in scale.
    """
    session = session or SessionConfig()
    truth_local = hand_grid(cfg)
    n = len(truth_local)
    unit = np.random.default_rng(cfg.seed).standard_normal((n, 3))
    measured = truth_local + unit * (cfg.joint_sigma_cm / 100.0)

    server = Server(session)
    conn = 0
    out = server.step([(conn, encode_message(Message(MsgType.HELLO, Hello.of(version=1))))])
    cid = server.by_conn[conn]
    seat = session.seat(cid)
    reported = np.empty((n, 3))
    truth = np.empty((n, 3))
    for k in range(n):
        body = BodyModel(cid, cid, (Joint("right_hand", tuple(measured[k])),))
        msg = encode_message(Message(MsgType.JOINTS, body, cid, k + 1))
        out = server.step([(conn, msg)])
        update = decode_message(out.world_update)[0].body
        (mine,) = [b for b in update.bodies if b.body_id == cid]
        reported[k] = mine.joints[0].position
        # same call shape as the server's transform, so zero noise gives exactly zero offset
        truth[k] = to_global(seat, truth_local[k:k + 1])[0]
    offsets_cm = (reported - truth) * 100.0
    std = offsets_cm.std(axis=0, ddof=1) if n > 1 else np.zeros(3)
    return {
        "samples": int(n),
        "joint_sigma_cm": float(cfg.joint_sigma_cm),
        "offset_std_cm": dict(zip("xyz", (float(v) for v in std))),
        "offset_mean_cm": dict(zip("xyz", (float(v) for v in offsets_cm.mean(axis=0)))),
        "offset_max_abs_cm": float(np.abs(offsets_cm).max()),
        "grid": list(cfg.grid),
        "x_range_cm": list(cfg.x_range_cm),
        "y_range_cm": list(cfg.y_range_cm),
        "z_range_cm": list(cfg.z_range_cm),
    }


# -- offline tracking ------------------------------------------------------------------


def run_tracking_experiment(
    scene: SyntheticScene = SyntheticScene(),
    potentials: PotentialParams = PotentialParams(),
    tracker: TrackerParams = TrackerParams(),
    pipeline: PipelineParams = PipelineParams(),
    background_frames: int = 5,
    keyframe_interval: int = 30,
) -> dict:
    """Head-centre error and compression ratio of the client pipeline, no network."""
    bg = fit_background(render_background(scene, background_frames), potentials)
    pipe = ClientPipeline(0, bg, scene.intrinsics, potentials=potentials, tracker=tracker, params=pipeline,
                          keyframe_interval=keyframe_interval)
    decoder = FrameDecoder()
    errors, sizes, valid = [], [], 0
    roi_exact = True
    for i in range(scene.frame_count):
        frame, truth = render_synthetic(scene, i)
        res = pipe.process(frame, truth.joints)
        compressed = res.messages[0][1]
        sizes.append(compressed.size)
        decoded = decoder.decompress(compressed)
        x, y, w, h = compressed.roi
        if not compressed.heartbeat:
            roi_exact &= bool(
                np.array_equal(decoded.depth[y:y + h, x:x + w], frame.depth[y:y + h, x:x + w])
                and np.array_equal(decoded.color[y:y + h, x:x + w], frame.color[y:y + h, x:x + w])
            )
        if res.viewpoint.valid:
            valid += 1
            errors.append(np.linalg.norm(np.asarray(res.viewpoint.position) - truth.head_center))
    err = np.asarray(errors) * 100.0
    raw = raw_size(frame) if scene.frame_count else 1
    return {
        "frames": scene.frame_count,
        "valid_fraction": valid / scene.frame_count if scene.frame_count else 0.0,
        "head_error_rms_cm": float(np.sqrt(np.mean(err ** 2))) if err.size else None,
        "head_error_max_cm": float(err.max()) if err.size else None,
        "compressed_mean_bytes": float(np.mean(sizes)) if sizes else 0.0,
        "compression_ratio_mean": float(np.mean(sizes) / raw) if sizes else 0.0,
        "roi_lossless": roi_exact,
        "depth_noise_mm": scene.depth_noise_mm,
    }


# -- timing ------------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchConfig:
    frames: int = 60
    warmup: int = 5
    clients: int = 2
    clutter_boxes: int = 500  # static scene boxes for the client-side collision stage
    port: int = 0  # 0 picks a free port
    background_frames: int = 5
    seed: int = 0


def clutter_scene(session: SessionConfig, count: int, seed: int = 0) -> BoxSet:
    """Catalog objects plus ``count`` static boxes scattered around the room."""
    rng = np.random.default_rng(seed)
    centers = rng.uniform([-3.0, -1.0, -3.0], [3.0, 1.5, 3.0], size=(count, 3))
    half = rng.uniform(0.05, 0.3, size=(count, 3))
    objs = [o.world_box(o.pose) for o in session.objects]
    lo = np.concatenate([np.array([b.min for b in objs]).reshape(-1, 3), centers - half])
    hi = np.concatenate([np.array([b.max for b in objs]).reshape(-1, 3), centers + half])
    first = max([o.object_id for o in session.objects], default=0) + 1
    ids = np.concatenate([[o.object_id for o in session.objects], first + np.arange(count)])
    return BoxSet(lo, hi, ids)


def _summary(samples) -> dict:
    a = np.asarray(samples, dtype=np.float64) * 1000.0
    if a.size == 0:
        return {"mean_ms": 0.0, "p95_ms": 0.0}
    return {"mean_ms": float(a.mean()), "p95_ms": float(np.percentile(a, 95))}


def measure_harness_overhead(frames: int = 200) -> float:
    """Per-frame cost (ms) of the timing bookkeeping around empty stages."""
    clock = time.thread_time
    rec = {k: [] for k in TIMED_COMPONENTS}
    t_start = clock()
    for _ in range(frames):
        marks = [clock() for _ in range(len(STAGES) + 1)]
        timings = {k: marks[i + 1] - marks[i] for i, k in enumerate(STAGES)}
        timings["transport"] = 0.0
        for k in TIMED_COMPONENTS:
            rec[k].append(timings[k])
    return (clock() - t_start) / frames * 1000.0


class _BenchClient(threading.Thread):
    def __init__(self, index, port, frames, background, session, scene_boxes, cfg, barrier,
                 potentials, tracker, pipeline):
        super().__init__(daemon=True)
        self.index = index
        self.port = port
        self.frames = frames
        self.background = background
        self.session = session
        self.scene_boxes = scene_boxes
        self.cfg = cfg
        self.barrier = barrier
        self.potentials = potentials
        self.tracker = tracker
        self.pipeline_params = pipeline
        self.samples = {k: [] for k in TIMED_COMPONENTS}
        self.received_frames: dict[int, int] = {}
        self.desyncs = 0
        self.error: Optional[BaseException] = None
        self.wall_seconds = 0.0
        self.rounds = 0

    def run(self) -> None:
        try:
            self._run()
        except BaseException as exc:  # reported by the driver
            self.error = exc
            try:
                self.barrier.abort()
            except threading.BrokenBarrierError:
                pass

    def _run(self) -> None:
        net = NetClient(port=self.port)
        cid = net.client_id
        pipe = ClientPipeline(cid, self.background, self.frames[0][0].intrinsics, self.session.seat(cid),
                              self.scene_boxes, self.potentials, self.tracker, self.pipeline_params,
                              self.session.joint_padding, int(net.session["keyframe_interval"]))
        decoders: dict[int, FrameDecoder] = {}
        rng_seed = (self.cfg.seed, cid)
        clock = time.thread_time
        wall = time.perf_counter
        decode_time = [0.0]
        last_tick = [0]

        def on_other(m):
            if m.msg_type == MsgType.FRAME:
                t0 = clock()
                dec = decoders.setdefault(m.client_id, FrameDecoder())
                try:
                    dec.decompress(m.body)
                    self.received_frames[m.client_id] = self.received_frames.get(m.client_id, 0) + 1
                except DesyncError:
                    self.desyncs += 1
                    net.send(MsgType.HELLO, Hello.of(keyframe_request=m.client_id))
                decode_time[0] += clock() - t0
            elif m.msg_type == MsgType.HELLO and m.body.get("keyframe_request") is not None:
                pipe.encoder.request_keyframe()
            elif m.msg_type == MsgType.WORLD_UPDATE:
                last_tick[0] = max(last_tick[0], m.body.tick)

        self.barrier.wait()
        # discard updates produced before every client was admitted
        while net.wait_for(lambda m: False, timeout=0.05, on_other=on_other) is not None:
            pass
        total = len(self.frames)
        t_begin = None
        for i, (frame, truth) in enumerate(self.frames):
            measured = i >= self.cfg.warmup
            if measured and t_begin is None:
                t_begin = wall()
            rng = np.random.default_rng(rng_seed + (i,))
            joints = {k: v + rng.normal(0.0, self.pipeline_params.joint_sigma_m, 3) for k, v in truth.joints.items()}
            send0, recv0 = net.send_seconds, net.recv_seconds
            decode_time[0] = 0.0
            res = pipe.process(frame, joints)
            net.send_many(res.messages, frame.timestamp)
            update = net.wait_for(
                lambda m: m.msg_type == MsgType.WORLD_UPDATE and m.body.tick > last_tick[0],
                timeout=10.0,
                on_other=on_other,
            )
            if update is None:
                raise TimeoutError(f"client {cid}: no world update for frame {i}")
            last_tick[0] = update.body.tick
            if measured:
                timings = dict(res.timings)
                timings["codec"] += decode_time[0]
                timings["transport"] = (net.send_seconds - send0) + (net.recv_seconds - recv0)
                for k in TIMED_COMPONENTS:
                    self.samples[k].append(timings[k])
                self.rounds += 1
        self.wall_seconds = wall() - t_begin if t_begin is not None else 0.0
        # collect frames still in flight from the final round
        while net.wait_for(lambda m: False, timeout=0.2, on_other=on_other) is not None:
            pass
        self.barrier.wait()
        net.close()


def run_timing_benchmark(
    cfg: BenchConfig = BenchConfig(),
    scene: SyntheticScene = SyntheticScene(),
    session: Optional[SessionConfig] = None,
    potentials: PotentialParams = PotentialParams(),
    tracker: TrackerParams = TrackerParams(),
    pipeline: PipelineParams = PipelineParams(),
) -> dict:
    """Two (or more) simulated clients and the hub over loopback TCP.

    Frames are rendered and background models fitted before the clock starts.
    The hub runs in lockstep, so one round is every client processing one
    frame plus the tick that redistributes it.
    """
    session = session or SessionConfig()
    total = cfg.frames + cfg.warmup
    client_frames, backgrounds = [], []
    for c in range(cfg.clients):
        sc = scene.replace(seed=scene.seed + c, frame_count=total)
        client_frames.append([render_synthetic(sc, i) for i in range(total)])
        backgrounds.append(fit_background(render_background(sc, cfg.background_frames), potentials))
    boxes = clutter_scene(session, cfg.clutter_boxes, cfg.seed)

    hub = HubServer(Server(session), port=cfg.port, lockstep=True).start()
    barrier = threading.Barrier(cfg.clients)
    clients = []
    try:
        for c in range(cfg.clients):
            t = _BenchClient(c, hub.port, client_frames[c], backgrounds[c], session, boxes, cfg, barrier,
                             potentials, tracker, pipeline)
            clients.append(t)
            t.start()
            time.sleep(0.05)  # admit in index order
        for t in clients:
            t.join(timeout=300.0)
        ticks = hub.ticks_done
    finally:
        hub.stop()
    for t in clients:
        if t.error is not None:
            raise RuntimeError(f"benchmark client {t.index} failed: {t.error!r}") from t.error

    # the hub's fan-out time is shared by the frames of one round
    fanout = hub.transport_seconds / max(ticks, 1) / cfg.clients
    merged = {k: np.array([s for t in clients for s in t.samples[k]]) for k in TIMED_COMPONENTS}
    merged["transport"] = merged["transport"] + fanout
    merged["rgbd_processing"] = merged["segmentation"] + merged["tracking"]
    merged["network_transmission"] = merged["codec"] + merged["transport"]
    components = {k: _summary(v) for k, v in merged.items()}
    wall = max(t.wall_seconds for t in clients)
    rounds = min(t.rounds for t in clients)
    ids = sorted(range(cfg.clients))
    fanout_ok = all(
        all(t.received_frames.get(o, 0) >= total - 1 for o in ids if o != t.index) for t in clients
    )
    frame_ms = wall / rounds * 1000.0 if rounds else 0.0
    return {
        "clients": cfg.clients,
        "frames": rounds,
        "resolution": f"{scene.intrinsics.width}x{scene.intrinsics.height}",
        "components": components,
        "end_to_end_fps": rounds / wall if wall > 0 else 0.0,
        "frame_time_mean_ms": frame_ms,
        "wall_time_s": wall,
        "server_tick_mean_ms": hub.tick_seconds / max(ticks, 1) * 1000.0,
        "harness_overhead_ms": measure_harness_overhead(),
        "scene_boxes": len(boxes),
        "fanout_complete": bool(fanout_ok),
        "desyncs": sum(t.desyncs for t in clients),
    }


# -- report ------------------------------------------------------------------------------


def _plain(obj):
    if is_dataclass(obj):
        out = {}
        for f in fields(obj):
            out[f.name] = _plain(getattr(obj, f.name))
        return out
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


@dataclass
class MetricsReport:
    accuracy: dict = field(default_factory=dict)
    tracking: dict = field(default_factory=dict)
    timing: Optional[dict] = None
    config_echo: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.timing is not None:
            for name, comp in self.timing.get("components", {}).items():
                if comp["mean_ms"] < 0 or comp["p95_ms"] < 0:
                    raise ValueError(f"negative duration for {name}")

    def to_dict(self) -> dict:
        return _plain({
            "accuracy": self.accuracy,
            "tracking": self.tracking,
            "timing": self.timing,
            "config_echo": self.config_echo,
        })

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "MetricsReport":
        return cls(data.get("accuracy", {}), data.get("tracking", {}), data.get("timing"), data.get("config_echo", {}))
