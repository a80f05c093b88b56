"""Acceptance criteria, one test each, at their stated tolerances.

Run with ``pytest tests/test_acceptance.py`` (verdict lines appear in the
summary) or ``python3 tests/test_acceptance.py``.
"""

import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent))

from acceptance_log import verdict  # noqa: E402
from oracles import overlap_keys  # noqa: E402
from payloads import random_message  # noqa: E402
from teleimmersion.collision import BoxSet, SweepState, sweep_prune_update  # noqa: E402
from teleimmersion.geometry import CameraIntrinsics, RigidPose, back_project_pixel, from_global, project, to_global  # noqa: E402
from teleimmersion.netproto.codec import FrameDecoder, FrameEncoder, raw_size  # noqa: E402
from teleimmersion.netproto.wire import MsgType, decode_message, encode_message  # noqa: E402
from teleimmersion.segmentation import MrfModel, brute_force_map, energy, lbp_map  # noqa: E402
from teleimmersion.sim.experiments import (  # noqa: E402
    AccuracyConfig,
    BenchConfig,
    run_accuracy_experiment,
    run_timing_benchmark,
)
from teleimmersion.sim.scene import SyntheticScene, render_synthetic  # noqa: E402
from teleimmersion.tracking import KalmanState, kalman_step  # noqa: E402

LBP_ITERATIONS = 30


def _random_mrf(rng, h, w):
    return MrfModel(rng.uniform(0, 3, (h, w, 2)), rng.uniform(0, 2, (h, max(w - 1, 0))),
                    rng.uniform(0, 2, (max(h - 1, 0), w)))


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_1_map_oracle_equivalence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for _ in range(100):
        h, w = (int(v) for v in rng.integers(1, 5, 2))
        m = _random_mrf(rng, h, w)
        best = energy(m, brute_force_map(m))
        got = energy(m, lbp_map(m, LBP_ITERATIONS))
        worst = max(worst, got / best if best > 0 else (1.0 if got == 0 else np.inf))
    chain_mismatch = 0
    chains = 0
    for n in range(1, 17):
        for vertical in (False, True):
            for _ in range(3):
                m = _random_mrf(rng, n, 1) if vertical else _random_mrf(rng, 1, n)
                chains += 1
                chain_mismatch += energy(m, lbp_map(m, LBP_ITERATIONS)) != energy(m, brute_force_map(m))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.05 and chain_mismatch == 0 and elapsed < 10.0
    verdict(1, "MAP oracle equivalence", ok,
            f"worst energy ratio {worst:.4f} (<= 1.05), chain mismatches {chain_mismatch}/{chains}, {elapsed:.1f} s (< 10 s)")


def test_2_broadphase_exactness():
    n, scenes, steps = 500, 100, 100
    upper = np.triu(np.ones((n, n), dtype=bool), 1)
    ids = np.arange(n)
    mismatches = 0
    t0 = time.perf_counter()
    for s in range(scenes):
        rng = np.random.default_rng(2000 + s)
        lo = rng.uniform(0.0, 10.0, (n, 3))
        hi = lo + rng.uniform(0.0, 1.0, (n, 3))
        state = SweepState()
        for _ in range(steps):
            d = rng.normal(0.0, 0.05, (n, 3))
            lo, hi = lo + d, hi + d
            got = sweep_prune_update(state, BoxSet(lo, hi, ids))
            keys = np.fromiter((a * n + b for a, b in got), dtype=np.int64, count=len(got))
            keys.sort()
            mismatches += not np.array_equal(keys, overlap_keys(lo, hi, upper))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 30.0
    verdict(2, "Broadphase exactness", ok,
            f"{mismatches} mismatching steps of {scenes * steps} (500 boxes), {elapsed:.1f} s (< 30 s)")


def test_3_geometry_round_trips():
    rng = np.random.default_rng(303)
    intr = CameraIntrinsics.kinect_v2()
    px_err = 0.0
    for _ in range(100_000):
        u, v = rng.uniform(0, intr.width - 1), rng.uniform(0, intr.height - 1)
        z = rng.integers(1, 10001) / 1000.0
        uu, vv = project(intr, back_project_pixel(intr, u, v, z))
        px_err = max(px_err, abs(uu - u), abs(vv - v))
    pose_err = 0.0
    for _ in range(10_000):
        pose = RigidPose(_random_rotation(rng), rng.uniform(-10, 10, 3))
        p = rng.uniform(-10, 10, (10, 3))
        pose_err = max(pose_err, float(np.max(np.abs(to_global(pose, from_global(pose, p)) - p))))
    ok = px_err < 1e-6 and pose_err < 1e-9
    verdict(3, "Geometry round trips", ok,
            f"max pixel error {px_err:.2e} over 1e5 pixels (< 1e-6), max transform error {pose_err:.2e} "
            f"over 1e5 pose/point pairs (< 1e-9)")


def test_4_kalman_sanity():
    rng = np.random.default_rng(404)
    s = KalmanState.at(rng.normal(size=3))
    worst_asym, worst_eig = 0.0, np.inf
    for _ in range(10_000):
        meas = rng.normal(size=3) if rng.random() < 0.7 else None
        s = kalman_step(s, meas, rng.uniform(0.001, 0.5), rng.uniform(0.01, 10.0), 10 ** rng.uniform(-8, 0))
        P = s.covariance
        worst_asym = max(worst_asym, float(np.max(np.abs(P - P.T))))
        worst_eig = min(worst_eig, float(np.linalg.eigvalsh(P).min()))
    start, vel = np.array([0.2, -0.1, 2.0]), np.array([0.3, -0.2, 0.1])
    k = KalmanState.at(start)
    for i in range(1, 51):
        k = kalman_step(k, start + vel * i / 15.0, 1 / 15.0)
    track_err = float(np.linalg.norm(k.position - (start + vel * 50 / 15.0)))
    ok = worst_asym <= 1e-9 and worst_eig >= -1e-9 and track_err < 1e-3
    verdict(4, "Kalman sanity", ok,
            f"max asymmetry {worst_asym:.1e}, min eigenvalue {worst_eig:.2e} over 1e4 steps; "
            f"constant-velocity error {track_err * 1000:.3f} mm after 50 steps (< 1 mm)")


def test_5_codec():
    rng = np.random.default_rng(505)
    bad = 0
    per_type = dict.fromkeys(MsgType, 0)
    for _ in range(10_000):
        m = random_message(rng)
        per_type[m.msg_type] += 1
        bad += decode_message(encode_message(m))[0] != m
    scene = SyntheticScene(frame_count=30)
    enc, dec = FrameEncoder(keyframe_interval=10), FrameDecoder()
    key_lossless = roi_exact = True
    ratios = []
    for i in range(scene.frame_count):
        frame, truth = render_synthetic(scene, i)
        h, w = truth.head_mask.shape
        # foreground fixture: the head plus a body block, 10 % of the pixels at most
        mask = truth.head_mask.astype(np.uint8)
        mask[h - int(0.3 * h):, (w - int(0.3 * w)) // 2:(w + int(0.3 * w)) // 2] = 1
        frac = mask.mean()
        c = enc.compress(frame, mask)
        out = dec.decompress(c)
        if c.keyframe:
            key_lossless &= out.same_pixels(frame)
            continue
        x, y, cw, ch = c.roi
        sl = (slice(y, y + ch), slice(x, x + cw))
        roi_exact &= np.array_equal(out.depth[sl], frame.depth[sl]) and np.array_equal(out.color[sl], frame.color[sl])
        assert frac <= 0.10
        ratios.append(c.size / raw_size(frame))
    worst_ratio = max(ratios)
    ok = bad == 0 and all(v > 0 for v in per_type.values()) and key_lossless and roi_exact and worst_ratio < 0.35
    verdict(5, "Codec", ok,
            f"{bad} round-trip failures over 10000 payloads of all 7 types; keyframes lossless {key_lossless}; "
            f"ROI exact {roi_exact}; worst ROI frame size {worst_ratio:.3f} x raw (< 0.35)")


def test_6_accuracy_experiment():
    cfg = AccuracyConfig()
    r = run_accuracy_experiment(cfg)
    zero = run_accuracy_experiment(AccuracyConfig(joint_sigma_cm=0.0))
    std = r["offset_std_cm"]
    in_ranges = (r["x_range_cm"] == [-30.0, 30.0] and r["y_range_cm"] == [-20.0, 20.0]
                 and r["z_range_cm"] == [5.0, 40.0])
    ok = (r["samples"] >= 500 and in_ranges and all(v < 1.2 for v in std.values())
          and all(v == 0.0 for v in zero["offset_std_cm"].values()))
    verdict(6, "Accuracy experiment", ok,
            f"sigma_joint {cfg.joint_sigma_cm} cm, {r['samples']} samples: std x {std['x']:.3f} y {std['y']:.3f} "
            f"z {std['z']:.3f} cm (< 1.2); zero-noise std {list(zero['offset_std_cm'].values())}")


def test_7_timing():
    t0 = time.perf_counter()
    r = run_timing_benchmark(BenchConfig())
    elapsed = time.perf_counter() - t0
    comp = r["components"]
    fps = r["end_to_end_fps"]
    coll = comp["collision"]["mean_ms"]
    net = comp["network_transmission"]["mean_ms"]
    ok = (fps >= 14.0 and coll < 1.0 and net < 5.0 and elapsed < 120.0
          and r["resolution"] == "512x424" and r["clients"] == 2 and r["fanout_complete"])
    verdict(7, "Timing", ok,
            f"{fps:.1f} fps (>= 14) at {r['resolution']} with {r['clients']} clients; collision {coll:.3f} ms (< 1); "
            f"codec+transport {net:.3f} ms (< 5); {r['scene_boxes']} scene boxes; benchmark {elapsed:.1f} s (< 120 s)")


def _cli(*args, **kw):
    return subprocess.run([sys.executable, "-m", "teleimmersion", *args], capture_output=True, text=True, **kw)


def _free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def test_8_determinism(tmp_path=None):
    import tempfile

    tmp = Path(tmp_path or tempfile.mkdtemp())
    port = _free_port()
    log, live, again = tmp / "in.log", tmp / "live.bin", tmp / "replay.bin"
    server = subprocess.Popen([sys.executable, "-m", "teleimmersion", "serve", "--port", str(port), "--record",
                               str(log), "--updates", str(live), "--ticks", "45"],
                              stderr=subprocess.PIPE, text=True)
    try:
        server.stderr.readline()  # "listening on ..."
        clients = [subprocess.Popen([sys.executable, "-m", "teleimmersion", "client", "--port", str(port),
                                     "--set", "scene.frame_count=8", "--out", str(tmp / f"c{i}.csv")])
                   for i in range(2)]
        client_codes = [c.wait(timeout=120) for c in clients]
        server.wait(timeout=120)
    finally:
        server.kill() if server.poll() is None else None
    rep = _cli("serve", "--replay", str(log), "--updates", str(again))
    updates_equal = live.exists() and live.read_bytes() == again.read_bytes()
    ticks = 0
    data = live.read_bytes() if live.exists() else b""
    pos = 0
    while pos < len(data):
        _, used = decode_message(data, pos)
        pos += used
        ticks += 1

    a, b = tmp / "a.json", tmp / "b.json"
    fast = ["--seed", "5", "--set", "scene.frame_count=10"]
    ra = _cli("simulate", "--out", str(a), *fast)
    rb = _cli("simulate", "--out", str(b), *fast)
    reports_equal = (ra.returncode == rb.returncode == 0
                     and json.loads(a.read_text()) == json.loads(b.read_text()))
    ok = client_codes == [0, 0] and rep.returncode == 0 and updates_equal and ticks == 45 and reports_equal
    verdict(8, "Determinism", ok,
            f"replayed {ticks} WORLD_UPDATE messages byte-identical: {updates_equal}; "
            f"seeded simulate reports identical: {reports_equal}")


if __name__ == "__main__":
    failed = 0
    for name, fn in sorted((k, v) for k, v in dict(globals()).items() if k.startswith("test_")):
        try:
            fn()
        except AssertionError:
            failed += 1
    sys.exit(1 if failed else 0)
