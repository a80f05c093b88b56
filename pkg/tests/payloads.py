"""Randomised message bodies for every wire message type."""

import string

import numpy as np

from teleimmersion.collision import BodyModel, CollisionEvent, Joint
from teleimmersion.geometry import CameraIntrinsics, RigidPose
from teleimmersion.netproto.codec import CompressedFrame
from teleimmersion.netproto.wire import Bye, Collisions, Hello, Message, MsgType, ObjectState, WorldUpdate
from teleimmersion.tracking import Source, ViewpointEstimate

_ALNUM = string.ascii_letters + string.digits + "_"


def text(rng, alphabet=_ALNUM, lo=0, hi=12):
    return "".join(rng.choice(list(alphabet), int(rng.integers(lo, hi + 1))))


def viewpoint(rng):
    if rng.random() < 0.2:
        return ViewpointEstimate.invalid(Source(int(rng.integers(0, 5))))
    return ViewpointEstimate(tuple(rng.normal(0, 3, 3)), Source(int(rng.integers(0, 5))), True, float(rng.random()))


def body(rng):
    return BodyModel(int(rng.integers(0, 2**32)), int(rng.integers(0, 256)),
                     tuple(Joint(text(rng, lo=1), tuple(rng.normal(0, 1, 3))) for _ in range(rng.integers(0, 6))))


def event(rng):
    return CollisionEvent(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**16)), text(rng),
                          bool(rng.random() < 0.5), int(rng.integers(0, 2**32)))


def pose(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return RigidPose(q, rng.normal(0, 2, 3))


def frame(rng):
    key = bool(rng.random() < 0.3)
    heartbeat = not key and rng.random() < 0.2
    w, h = (int(v) for v in rng.integers(1, 9, 2))
    return CompressedFrame(
        keyframe=key,
        seq=int(rng.integers(0, 2**32)),
        ref_seq=int(rng.integers(0, 2**32)),
        roi=(0, 0, 1, 1) if heartbeat else (int(rng.integers(0, 100)), int(rng.integers(0, 100)), w, h),
        timestamp=int(rng.integers(0, 2**63)),
        client_id=int(rng.integers(0, 256)),
        color=b"" if heartbeat else rng.bytes(w * h * 3),
        depth=b"" if heartbeat else rng.bytes(int(rng.integers(0, 40))),
        raw_depth=bool(rng.random() < 0.3) and not heartbeat,
        heartbeat=heartbeat,
        intrinsics=CameraIntrinsics(*rng.uniform(100, 900, 2), 0.5, 0.5, int(rng.integers(1, 2000)),
                                    int(rng.integers(1, 2000))) if key else None,
    )


def world(rng):
    ids = rng.choice(1000, int(rng.integers(0, 5)), replace=False)
    objects = tuple(ObjectState(int(i), pose(rng), int(rng.integers(0, 4)),
                                None if rng.random() < 0.5 else int(rng.integers(0, 255))) for i in ids)
    return WorldUpdate(
        int(rng.integers(0, 2**63)), objects, tuple(event(rng) for _ in range(rng.integers(0, 4))),
        tuple((int(rng.integers(0, 256)), viewpoint(rng)) for _ in range(rng.integers(0, 4))),
        tuple(body(rng) for _ in range(rng.integers(0, 3))),
    )


def hello(rng):
    return Hello(tuple((text(rng, lo=1), text(rng, _ALNUM + " .,-")) for _ in range(rng.integers(0, 5))))


BODIES = {
    MsgType.FRAME: frame,
    MsgType.VIEWPOINT: viewpoint,
    MsgType.JOINTS: body,
    MsgType.COLLISION: lambda rng: Collisions(tuple(event(rng) for _ in range(rng.integers(0, 5)))),
    MsgType.WORLD_UPDATE: world,
    MsgType.HELLO: hello,
    MsgType.BYE: lambda rng: Bye(text(rng, _ALNUM + " éß")),
}


def random_message(rng, msg_type=None):
    t = MsgType(int(rng.integers(1, 8))) if msg_type is None else msg_type
    return Message(t, BODIES[t](rng), int(rng.integers(0, 256)), int(rng.integers(0, 2**32)),
                   int(rng.integers(0, 2**63)))
