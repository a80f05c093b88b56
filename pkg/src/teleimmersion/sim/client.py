"""Simulated client: per-frame capture processing and a TCP session to the hub."""

from __future__ import annotations

import queue
import socket
import threading
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from ..collision import BodyModel, BoxSet, Joint, SweepState, detect_interactions
from ..geometry import RgbdFrame, RigidPose, to_global
from ..netproto.codec import DEFAULT_KEYFRAME_INTERVAL, DEFAULT_ROI_MARGIN, FrameEncoder, foreground_roi
from ..netproto.wire import (
    DEFAULT_PORT,
    PROTOCOL_VERSION,
    Collisions,
    Hello,
    Message,
    MsgType,
    ProtocolError,
    StreamDecoder,
    encode_message,
)
from ..segmentation import BackgroundModel, LabelField, PotentialParams, segment_roi
from ..tracking import TrackerParams, ViewpointEstimate, ViewpointTracker

STAGES = ("segmentation", "tracking", "collision", "codec", "object_stage")


@dataclass(frozen=True)
class PipelineParams:
    roi_margin: int = 24  # px added around the previous foreground before segmenting
    full_frame_every: int = 30  # periodic whole-frame segmentation to pick up new foreground
    codec_roi_margin: int = DEFAULT_ROI_MARGIN
    joint_sigma_m: float = 0.008
    object_points: int = 20000  # point transforms per frame in the object-stage stand-in


@dataclass
class FrameResult:
    messages: list[tuple[MsgType, object]]
    mask: LabelField  # cleaned foreground
    viewpoint: ViewpointEstimate
    body: BodyModel
    events: list
    timings: dict[str, float]  # seconds per stage


class ClientPipeline:
    """Segmentation, viewpoint tracking, local collision and compression for one camera."""

    def __init__(
        self,
        client_id: int,
        background: BackgroundModel,
        intrinsics,
        seat: RigidPose = RigidPose(),
        scene: Optional[BoxSet] = None,
        potentials: PotentialParams = PotentialParams(),
        tracker: TrackerParams = TrackerParams(),
        params: PipelineParams = PipelineParams(),
        joint_padding: float = 0.03,
        keyframe_interval: int = DEFAULT_KEYFRAME_INTERVAL,
    ):
        self.client_id = client_id
        self.background = background
        self.seat = seat
        self.scene = scene if scene is not None else BoxSet(np.zeros((0, 3)), np.zeros((0, 3)), [])
        self.potentials = potentials
        self.params = params
        self.joint_padding = joint_padding
        self.tracker = ViewpointTracker(intrinsics, tracker)
        self.encoder = FrameEncoder(keyframe_interval, params.codec_roi_margin)
        self.sweep = SweepState()
        self.prev_mask: Optional[np.ndarray] = None
        self.frames = 0
        rng = np.random.default_rng(client_id)
        self._object_points = rng.normal(size=(params.object_points, 3))

    def _segment(self, frame: RgbdFrame) -> LabelField:
        full = (0, 0, frame.width, frame.height)
        roi = full
        if self.prev_mask is not None and self.frames % self.params.full_frame_every != 0:
            roi = foreground_roi(self.prev_mask, self.params.roi_margin) or full
        return segment_roi(frame, self.background, roi, self.potentials)

    def object_stage(self) -> None:
        """Fixed-cost stand-in for scene-model work: transform a point set by the seat pose."""
        if len(self._object_points):
            to_global(self.seat, self._object_points)

    def process(self, frame: RgbdFrame, joints: dict[str, np.ndarray]) -> FrameResult:
        # per-thread CPU time: stage costs stay meaningful when clients share a core
        clock = time.thread_time
        timings = {}
        t0 = clock()
        mask = self._segment(frame)
        t1 = clock()
        view = self.tracker.track_frame(frame, mask)
        # the opened/closed mask drives both the next segmentation ROI and the codec ROI
        clean = self.tracker.last_mask
        self.prev_mask = clean if clean.any() else None
        t2 = clock()
        body_local = BodyModel(self.client_id, self.client_id,
                               tuple(Joint(k, tuple(v)) for k, v in sorted(joints.items())))
        body_global = BodyModel(self.client_id, self.client_id, tuple(
            Joint(j.label, tuple(p)) for j, p in zip(body_local.joints, to_global(self.seat, body_local.positions()))
        )) if body_local.joints else body_local
        events = detect_interactions([body_global], self.scene, self.joint_padding, self.sweep)
        t3 = clock()
        compressed = self.encoder.compress(frame, clean)
        t4 = clock()
        self.object_stage()
        t5 = clock()
        timings.update(segmentation=t1 - t0, tracking=t2 - t1, collision=t3 - t2, codec=t4 - t3, object_stage=t5 - t4)
        self.frames += 1
        messages = [
            (MsgType.FRAME, compressed),
            (MsgType.VIEWPOINT, view),
            (MsgType.COLLISION, Collisions(events)),
            (MsgType.JOINTS, body_local),
        ]
        return FrameResult(messages, LabelField(clean), view, body_local, events, timings)


class NetClient:
    """Blocking TCP session; a reader thread queues every decoded inbound message."""

    def __init__(self, host: str = "127.0.0.1", port: int = DEFAULT_PORT, timeout: float = 5.0,
                 capabilities: str = "frame,viewpoint,joints,collision"):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self.sock.settimeout(None)
        self.inbox: "queue.Queue[Optional[Message]]" = queue.Queue()
        self.decoder = StreamDecoder()
        self.seq = 0
        self.client_id: Optional[int] = None
        self.recv_seconds = 0.0
        self.send_seconds = 0.0
        self._reader = threading.Thread(target=self._read_loop, daemon=True)
        self._reader.start()
        self._raw_send(encode_message(Message(MsgType.HELLO, Hello.of(version=PROTOCOL_VERSION, caps=capabilities))))
        reply = self.wait_for(lambda m: m.msg_type in (MsgType.HELLO, MsgType.BYE), timeout)
        if reply is None:
            raise ConnectionError("no reply to HELLO")
        if reply.msg_type == MsgType.BYE:
            raise ConnectionRefusedError(reply.body.reason)
        self.client_id = int(reply.body.get("client_id"))
        self.session = dict(reply.body.fields)

    def _read_loop(self) -> None:
        try:
            while True:
                chunk = self.sock.recv(1 << 20)
                if not chunk:
                    break
                t0 = time.thread_time()
                msgs = self.decoder.feed(chunk)
                self.recv_seconds += time.thread_time() - t0
                for m in msgs:
                    self.inbox.put(m)
        except (OSError, ProtocolError):
            pass
        self.inbox.put(None)

    def _raw_send(self, data: bytes) -> None:
        self.sock.sendall(data)

    def send(self, msg_type: MsgType, body, timestamp_us: int = 0) -> None:
        t0 = time.thread_time()
        self.seq += 1
        self._raw_send(encode_message(Message(msg_type, body, self.client_id, self.seq, timestamp_us)))
        self.send_seconds += time.thread_time() - t0

    def send_many(self, items, timestamp_us: int = 0) -> None:
        t0 = time.thread_time()
        parts = []
        for msg_type, body in items:
            self.seq += 1
            parts.append(encode_message(Message(msg_type, body, self.client_id, self.seq, timestamp_us)))
        self._raw_send(b"".join(parts))
        self.send_seconds += time.thread_time() - t0

    def wait_for(self, predicate: Callable[[Message], bool], timeout: float = 5.0,
                 on_other: Optional[Callable[[Message], None]] = None) -> Optional[Message]:
        """Return the first inbound message matching ``predicate``; others go to ``on_other``."""
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return None
            try:
                m = self.inbox.get(timeout=remaining)
            except queue.Empty:
                return None
            if m is None:
                return None
            if predicate(m):
                return m
            if on_other is not None:
                on_other(m)

    def close(self, reason: str = "done") -> None:
        from ..netproto.wire import Bye

        try:
            self.send(MsgType.BYE, Bye(reason))
            self.sock.shutdown(socket.SHUT_WR)
        except OSError:
            pass
        self._reader.join(timeout=2.0)
        self.sock.close()


def run_live_client(
    host: str,
    port: int,
    scene,
    potentials: PotentialParams = PotentialParams(),
    tracker: TrackerParams = TrackerParams(),
    params: PipelineParams = PipelineParams(),
    background_frames: int = 5,
    update_timeout: float = 2.0,
) -> list[dict]:
    """Stream a synthetic scene to a running hub; one summary row per frame."""
    from ..segmentation import fit_background
    from .scene import render_background, render_synthetic

    net = NetClient(host, port)
    cid = net.client_id
    sc = scene.replace(seed=scene.seed + cid)
    bg = fit_background(render_background(sc, background_frames), potentials)
    seat_vals = [float(x) for x in net.session["seat"].split()]
    seat = RigidPose(np.reshape(seat_vals[:9], (3, 3)), seat_vals[9:])
    pipe = ClientPipeline(cid, bg, sc.intrinsics, seat, None, potentials, tracker, params,
                          keyframe_interval=int(net.session["keyframe_interval"]))
    rows = []
    last_tick = -1
    try:
        for i in range(sc.frame_count):
            frame, truth = render_synthetic(sc, i)
            rng = np.random.default_rng((sc.seed, cid, i))
            joints = {k: v + rng.normal(0.0, params.joint_sigma_m, 3) for k, v in truth.joints.items()}
            res = pipe.process(frame, joints)
            net.send_many(res.messages, frame.timestamp)
            update = net.wait_for(
                lambda m: m.msg_type == MsgType.WORLD_UPDATE and m.body.tick > last_tick, update_timeout,
                on_other=lambda m: pipe.encoder.request_keyframe()
                if m.msg_type == MsgType.HELLO and m.body.get("keyframe_request") is not None else None,
            )
            tick = update.body.tick if update is not None else None
            if tick is not None:
                last_tick = tick
            v = res.viewpoint
            rows.append({
                "client_id": cid,
                "frame": i,
                "tick": tick,
                "source": v.source.name,
                "valid": v.valid,
                "x": v.position[0],
                "y": v.position[1],
                "z": v.position[2],
                "frame_bytes": res.messages[0][1].size,
            })
    finally:
        net.close()
    return rows
