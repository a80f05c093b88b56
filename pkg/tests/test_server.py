import threading

import numpy as np
import pytest

from teleimmersion.collision import BodyModel, Joint
from teleimmersion.errors import ConfigError, FormatError
from teleimmersion.geometry import RigidPose, to_global
from teleimmersion.netproto.codec import CompressedFrame
from teleimmersion.netproto.wire import (
    Bye,
    Hello,
    Message,
    MsgType,
    decode_message,
    decode_stream,
    encode_message,
    encode_raw,
)
from teleimmersion.server import (
    FLAG_HELD,
    HubServer,
    InboundRecorder,
    SceneObject,
    Server,
    SessionConfig,
    read_log,
    refine_viewpoint,
    replay,
)
from teleimmersion.tracking import Source, ViewpointEstimate

IDENTITY_SEATS = (RigidPose(),)


def config(**kw):
    kw.setdefault("seats", IDENTITY_SEATS)
    kw.setdefault("objects", (SceneObject(1, RigidPose(np.eye(3), (0.0, 0.0, 0.0))),
                              SceneObject(2, RigidPose(np.eye(3), (5.0, 0.0, 0.0)))))
    return SessionConfig(**kw)


def hello(version=1):
    return encode_message(Message(MsgType.HELLO, Hello.of(version=version)))


def joints(cid, seq, *pos):
    body = BodyModel(0, cid, tuple(Joint(f"j{k}", p) for k, p in enumerate(pos)))
    return encode_message(Message(MsgType.JOINTS, body, cid, seq))


def decode_update(out):
    m, _ = decode_message(out.world_update)
    assert m.msg_type == MsgType.WORLD_UPDATE
    return m.body


def objects(out):
    return {o.object_id: o for o in decode_update(out).objects}


class Harness:
    def __init__(self, cfg):
        self.server = Server(cfg)
        self.seq = {}

    def join(self, conn):
        out = self.server.step([(conn, hello())])
        reply = decode_message(next(d for c, d in out.replies if c == conn))[0]
        assert reply.msg_type == MsgType.HELLO
        return int(reply.body.get("client_id"))

    def send(self, cid, conn, *pos):
        self.seq[cid] = self.seq.get(cid, 0) + 1
        return (conn, joints(cid, self.seq[cid], *pos))


# -- admission -----------------------------------------------------------------


def test_first_client_gets_id_zero_and_snapshot():
    s = Server(config())
    out = s.step([(7, hello())])
    msgs = [decode_message(d)[0] for c, d in out.replies if c == 7]
    assert msgs[0].body.get("client_id") == "0" and msgs[0].body.get("status") == "ok"
    assert msgs[1].msg_type == MsgType.WORLD_UPDATE and len(msgs[1].body.objects) == 2


def test_ninth_client_rejected_at_capacity():
    s = Server(config(capacity=8))
    out = s.step([(c, hello()) for c in range(9)])
    ids = sorted(s.world.clients)
    assert ids == list(range(8))
    last = decode_message(dict(out.replies)[8])[0]
    assert last.msg_type == MsgType.BYE and "full" in last.body.reason
    assert 8 in out.closed


def test_version_mismatch_rejected():
    s = Server(config())
    out = s.step([(1, hello(version=7))])
    assert decode_message(out.replies[0][1])[0].msg_type == MsgType.BYE and 1 in out.closed
    out = s.step([(2, encode_raw(MsgType.HELLO, b"version=1", version=9))])
    assert decode_message(out.replies[0][1])[0].msg_type == MsgType.BYE and not s.world.clients


def test_reconnect_gets_fresh_id_and_old_session_collected():
    h = Harness(config(session_timeout_ticks=5))
    assert h.join(1) == 0
    h.server.step([h.send(0, 1, (9.0, 9.0, 9.0))])
    # the old link goes silent; the same user reconnects on a new connection
    assert h.join(2) == 1
    stale = joints(0, 1, (9.0, 9.0, 9.0))  # replays an already-used seq
    h.server.step([(1, stale)])
    assert any("stale seq" in e for e in h.server.errors)
    for _ in range(6):
        h.server.step([h.send(1, 2, (8.0, 8.0, 8.0))])
    assert sorted(h.server.world.clients) == [1]


# -- ticks and objects -------------------------------------------------------------


def test_idle_tick_keeps_poses_and_advances():
    s = Server(config())
    a = s.step([])
    b = s.step([])
    assert decode_update(b).tick == decode_update(a).tick + 1 == 2
    assert objects(a)[1].pose == objects(b)[1].pose


def test_grab_follow_and_release():
    h = Harness(config(release_ticks=3))
    cid = h.join(1)
    out = h.server.step([h.send(cid, 1, (0.04, 0.0, 0.0))])
    o = objects(out)[1]
    assert o.held_by == cid and o.flags & FLAG_HELD
    # the hand moves while keeping contact; the object keeps its grip offset
    for x in (0.06, 0.08, 0.10):
        out = h.server.step([h.send(cid, 1, (x, 0.0, 0.0))])
        assert np.allclose(objects(out)[1].pose.translation, (x - 0.04, 0.0, 0.0))
    assert objects(out)[2].pose == RigidPose(np.eye(3), (5.0, 0.0, 0.0))
    # hand leaves: released after three contact-free ticks
    for k in range(3):
        out = h.server.step([h.send(cid, 1, (3.0, 3.0, 3.0))])
        assert (objects(out)[1].held_by is None) == (k == 2)
    assert np.allclose(objects(out)[1].pose.translation, (0.06, 0.0, 0.0))


def test_lower_client_wins_simultaneous_grab():
    h = Harness(config())
    a, b = h.join(1), h.join(2)
    out = h.server.step([h.send(b, 2, (0.05, 0.0, 0.0)), h.send(a, 1, (-0.05, 0.0, 0.0))])
    assert objects(out)[1].held_by == a == 0


def test_disconnect_releases_immediately():
    h = Harness(config())
    cid = h.join(1)
    h.server.step([h.send(cid, 1, (0.0, 0.0, 0.0))])
    out = h.server.step([(1, b"")])
    assert objects(out)[1].held_by is None


def test_joints_are_mapped_through_the_seat():
    seat = RigidPose.from_yaw(90.0, (0.0, 0.0, 1.0))
    h = Harness(config(seats=(seat,)))
    cid = h.join(1)
    out = h.server.step([h.send(cid, 1, (0.1, 0.2, 0.3))])
    body = decode_update(out).bodies[0]
    assert np.allclose(body.joints[0].position, to_global(seat, (0.1, 0.2, 0.3)))


def test_frames_are_forwarded_and_bad_messages_skipped():
    h = Harness(config())
    a = h.join(1)
    frame = CompressedFrame(False, 1, 0, (0, 0, 1, 1), 0, a, b"", b"", heartbeat=True)
    data = encode_message(Message(MsgType.FRAME, frame, a, 1))
    out = h.server.step([(1, data), (1, data), (1, b"garbage"), (9, data)])
    assert out.forwards == [(a, data)]
    assert len(h.server.errors) == 3


def test_bye_drops_session():
    h = Harness(config())
    a = h.join(1)
    out = h.server.step([(1, encode_message(Message(MsgType.BYE, Bye("done"), a, 1)))])
    assert 1 in out.closed and not h.server.world.clients


# -- viewpoint refinement ------------------------------------------------------------


def vp(x):
    return ViewpointEstimate((x, 0.0, 2.0), Source.DEPTH, True)


def test_refine_passthrough_and_spike():
    assert refine_viewpoint([vp(0.1)]) == vp(0.1)
    steady = [vp(0.0), vp(0.01), vp(0.02), vp(0.03)]
    assert refine_viewpoint(steady) == vp(0.03)
    spiked = refine_viewpoint([vp(0.0), vp(0.01), vp(0.02), vp(2.0)])
    assert spiked.position == (0.01, 0.0, 2.0)
    with pytest.raises(ValueError):
        refine_viewpoint([])


# -- configuration ---------------------------------------------------------------------


def test_session_config_text_round_trip(tmp_path):
    cfg = SessionConfig(capacity=4, release_ticks=5)
    back = SessionConfig.from_text(cfg.to_text())
    assert back == cfg
    p = tmp_path / "s.cfg"
    p.write_text("capacity = 2\nseat 90 0 0 1\nobject 3 0 0 0 0.1 0.1 0.1\n")
    loaded = SessionConfig.load(p)
    assert loaded.capacity == 2 and len(loaded.seats) == 1 and loaded.objects[0].object_id == 3
    p.write_text("nonsense = 1\n")
    with pytest.raises(ConfigError, match="s.cfg:1"):
        SessionConfig.load(p)
    with pytest.raises(FormatError):
        SessionConfig.load(tmp_path / "missing.cfg")


# -- record / replay -----------------------------------------------------------------


def scripted_session(cfg, seed=0):
    rng = np.random.default_rng(seed)
    h = Harness(cfg)
    ticks = [[(1, hello()), (2, hello())]]
    for t in range(40):
        items = []
        for conn, cid in ((1, 0), (2, 1)):
            if rng.random() < 0.8:
                items.append(h.send(cid, conn, tuple(rng.normal(0, 0.05, 3)), tuple(rng.normal(0, 1, 3))))
        ticks.append(items)
    ticks.append([(2, b"")])
    return ticks


def test_replay_reproduces_world_updates(tmp_path):
    cfg = config()
    path = tmp_path / "in.log"
    live = []
    with open(path, "wb") as fh:
        rec = InboundRecorder(fh, cfg)
        s = Server(cfg)
        for inbound in scripted_session(cfg):
            out = s.step(inbound)
            rec.record(out.tick, inbound)
            live.append(out.world_update)
    assert [o.world_update for o in replay(path)] == live
    ticks = [decode_update(type("O", (), {"world_update": w})).tick for w in live]
    assert ticks == list(range(1, len(live) + 1))


def test_corrupt_log_rejected(tmp_path):
    p = tmp_path / "bad.log"
    p.write_bytes(b"nope")
    with pytest.raises(FormatError):
        read_log(p)


# -- TCP hub -------------------------------------------------------------------------


def test_hub_fans_out_frames_to_every_other_client():
    from teleimmersion.sim.client import NetClient

    hub = HubServer(Server(SessionConfig(tick_hz=50.0)), "127.0.0.1", 0).start()
    try:
        clients = [NetClient("127.0.0.1", hub.port) for _ in range(3)]
        assert sorted(c.client_id for c in clients) == [0, 1, 2]
        for c in clients:
            frame = CompressedFrame(False, 1, 0, (0, 0, 1, 1), 0, c.client_id, b"", b"", heartbeat=True)
            c.send(MsgType.FRAME, frame)
        for c in clients:
            seen = set()
            while len(seen) < 2:
                m = c.wait_for(lambda m: m.msg_type == MsgType.FRAME, 5.0)
                assert m is not None
                seen.add(m.client_id)
            assert c.client_id not in seen
        for c in clients:
            c.close()
    finally:
        hub.stop()
