"""Command-line entry point: ``teleimmersion <subcommand> ...``.

Exit status is 0 on success, 1 on a usage error and 2 on a data error
(missing or malformed input). Diagnostics go to standard error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import AppConfig, parse_assignments
from .errors import ConfigError, FormatError, TeleimmersionError

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, config_flag: str = "--params") -> None:
    p.add_argument(config_flag, dest="params", metavar="FILE", help="key = value parameter file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one dotted parameter (repeatable)")
    p.add_argument("--seed", type=int, help="seed for every generator")
    p.add_argument("--print-config", action="store_true", help="print the effective parameters and exit")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="teleimmersion", description="RGB-D tele-immersion pipeline and experiments")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("segment", help="label one .rgbd frame foreground/background")
    _common(s)
    s.add_argument("--frame", help=".rgbd frame")
    s.add_argument("--background", help="background model (.npz) or directory of user-free .rgbd frames")
    s.add_argument("--out", help="output PGM mask")
    s.add_argument("--save-background", metavar="NPZ", help="also save the fitted background model")

    s = sub.add_parser("track", help="viewpoint track over a directory of .rgbd frames")
    _common(s)
    s.add_argument("--frames", help="directory of .rgbd frames (sorted by name)")
    s.add_argument("--background", help="background model (.npz) or directory of user-free .rgbd frames")
    s.add_argument("--out", help="CSV output (default: standard output)")

    s = sub.add_parser("collide", help="broadphase pairs of a box scene file")
    _common(s)
    s.add_argument("--scene", help="text file: id min_x min_y min_z max_x max_y max_z per line")

    s = sub.add_parser("serve", help="run the session hub")
    _common(s, "--params")
    s.add_argument("--config", dest="session", help="session file (key = value, seat and object lines)")
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=7447)
    s.add_argument("--record", help="write the inbound message log here")
    s.add_argument("--replay", help="replay an inbound log instead of listening")
    s.add_argument("--updates", help="write every WORLD_UPDATE message to this file")
    s.add_argument("--ticks", type=int, help="stop after this many ticks")
    s.add_argument("--lockstep", action="store_true", help="tick as soon as every client has sent its joints")

    s = sub.add_parser("client", help="stream a synthetic scene to a running hub")
    _common(s)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=7447)
    s.add_argument("--out", help="CSV of per-frame results (default: standard output)")

    s = sub.add_parser("simulate", help="accuracy and tracking experiments (timing with --timing)")
    _common(s, "--scene")
    s.add_argument("--out", help="report.json path")
    s.add_argument("--timing", action="store_true", help="also run the loopback timing benchmark")
    s.add_argument("--frames-out", metavar="DIR", help="also write the synthetic frames as .rgbd files")

    s = sub.add_parser("bench", help="two-client loopback timing benchmark")
    _common(s, "--scene")
    s.add_argument("--out", help="report.json path")

    s = sub.add_parser("report", help="render a report.json")
    _common(s)
    s.add_argument("--in", dest="input", help="report.json")
    s.add_argument("--format", choices=("table", "json"), default="table")
    s.add_argument("--color", choices=("auto", "always", "never"), default="auto")
    return p


def load_config(args) -> AppConfig:
    cfg = AppConfig.load(args.params) if args.params else AppConfig()
    try:
        overrides = parse_assignments(args.overrides)
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc
    if args.seed is not None:
        for key in ("scene.seed", "accuracy.seed", "bench.seed"):
            overrides.setdefault(key, str(args.seed))
    try:
        return cfg.with_overrides(overrides, "--set")
    except ConfigError as exc:
        raise UsageError(str(exc)) from exc


def _require(args, *names) -> None:
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise UsageError(f"{args.command}: missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _background(spec: str, cfg: AppConfig):
    from .rgbdio import list_frames, load_frame
    from .segmentation import BackgroundModel, fit_background

    path = Path(spec)
    if path.is_dir():
        frames = [load_frame(f) for f in list_frames(path)]
        if not frames:
            raise FormatError(f"{path}: no .rgbd frames")
        return fit_background(frames, cfg.segmentation)
    return BackgroundModel.load(path)


def _open_out(path: Optional[str]):
    return open(path, "w", newline="") if path else sys.stdout


# -- subcommands ---------------------------------------------------------------------


def cmd_segment(args, cfg: AppConfig) -> int:
    from .rgbdio import load_frame, write_pgm
    from .segmentation import build_model, energy, lbp_map

    _require(args, "frame", "background", "out")
    frame = load_frame(args.frame)
    bg = _background(args.background, cfg)
    if args.save_background:
        bg.save(args.save_background)
    model = build_model(frame, bg, cfg.segmentation)
    labels = lbp_map(model, cfg.segmentation.iterations)
    write_pgm(args.out, labels.labels)
    print(f"energy {energy(model, labels):.6f}")
    print(f"foreground_fraction {labels.foreground_fraction():.6f}")
    return EXIT_OK


def cmd_track(args, cfg: AppConfig) -> int:
    from .rgbdio import list_frames, load_frame
    from .sim.client import ClientPipeline

    _require(args, "frames", "background")
    paths = list_frames(args.frames)
    if not paths:
        raise FormatError(f"{args.frames}: no .rgbd frames")
    bg = _background(args.background, cfg)
    first = load_frame(paths[0])
    pipe = ClientPipeline(first.client_id, bg, first.intrinsics, potentials=cfg.segmentation,
                          tracker=cfg.tracking, params=cfg.pipeline,
                          keyframe_interval=cfg.server.keyframe_interval)
    out = _open_out(args.out)
    try:
        w = csv.writer(out)
        w.writerow(["frame", "timestamp_us", "source", "valid", "x_m", "y_m", "z_m"])
        for i, p in enumerate(paths):
            frame = first if i == 0 else load_frame(p)
            v = pipe.process(frame, {}).viewpoint
            w.writerow([p.name, frame.timestamp, v.source.name, int(v.valid)] + [f"{c:.6f}" for c in v.position])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_collide(args, cfg: AppConfig) -> int:
    from .collision import SweepState, load_boxes, sweep_prune_update

    _require(args, "scene")
    boxes = load_boxes(args.scene)
    for a, b in sorted(sweep_prune_update(SweepState(), boxes)):
        print(a, b)
    return EXIT_OK


def _session(args, cfg: AppConfig):
    import dataclasses

    from .server import SessionConfig

    base = SessionConfig.load(args.session) if args.session else cfg.server
    # dotted server.* parameters given explicitly win over the session file
    explicit = parse_assignments(args.overrides)
    changes = {k.split(".", 1)[1]: getattr(cfg.server, k.split(".", 1)[1])
               for k in explicit if k.startswith("server.")}
    return dataclasses.replace(base, **changes) if changes else base


def cmd_serve(args, cfg: AppConfig) -> int:
    from .server import HubServer, Server, replay

    if args.replay:
        count = 0
        out = open(args.updates, "wb") if args.updates else None
        try:
            for tick in replay(args.replay):
                if out is not None:
                    out.write(tick.world_update)
                count += 1
        finally:
            if out is not None:
                out.close()
        print(f"replayed {count} ticks", file=sys.stderr)
        return EXIT_OK
    session = _session(args, cfg)
    record = open(args.record, "wb") if args.record else None
    updates = open(args.updates, "wb") if args.updates else None
    try:
        hub = HubServer(Server(session), args.host, args.port, record, updates, args.lockstep)
        print(f"listening on {args.host}:{hub.port}", file=sys.stderr, flush=True)
        try:
            hub.run(args.ticks)
        except KeyboardInterrupt:
            hub.stop()
        print(f"served {hub.ticks_done} ticks", file=sys.stderr)
    finally:
        for f in (record, updates):
            if f is not None:
                f.close()
    return EXIT_OK


def cmd_client(args, cfg: AppConfig) -> int:
    from .sim.client import run_live_client

    try:
        rows = run_live_client(args.host, args.port, cfg.scene, cfg.segmentation, cfg.tracking, cfg.pipeline)
    except (ConnectionError, OSError) as exc:
        print(f"client: cannot reach {args.host}:{args.port}: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = _open_out(args.out)
    try:
        if rows:
            w = csv.DictWriter(out, fieldnames=list(rows[0]))
            w.writeheader()
            w.writerows(rows)
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def _write_frames(directory: str, cfg: AppConfig) -> None:
    from .rgbdio import save_frame
    from .sim.scene import render_background, render_synthetic

    d = Path(directory)
    (d / "background").mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(render_background(cfg.scene, cfg.bench.background_frames)):
        save_frame(d / "background" / f"bg_{i:04d}.rgbd", f)
    for i in range(cfg.scene.frame_count):
        save_frame(d / f"frame_{i:04d}.rgbd", render_synthetic(cfg.scene, i)[0])


def _echo(cfg: AppConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.flat().items()}


def cmd_simulate(args, cfg: AppConfig) -> int:
    from .report import render_table
    from .sim.experiments import MetricsReport, run_accuracy_experiment, run_timing_benchmark, run_tracking_experiment

    _require(args, "out")
    if args.frames_out:
        _write_frames(args.frames_out, cfg)
    report = MetricsReport(
        accuracy=run_accuracy_experiment(cfg.accuracy, cfg.server),
        tracking=run_tracking_experiment(cfg.scene, cfg.segmentation, cfg.tracking, cfg.pipeline,
                                         cfg.bench.background_frames, cfg.server.keyframe_interval),
        timing=run_timing_benchmark(cfg.bench, cfg.scene, cfg.server, cfg.segmentation, cfg.tracking, cfg.pipeline)
        if args.timing else None,
        config_echo=_echo(cfg),
    )
    Path(args.out).write_text(report.to_json(), encoding="utf-8")
    sys.stderr.write(render_table(report.to_dict()))
    return EXIT_OK


def cmd_bench(args, cfg: AppConfig) -> int:
    from .report import render_table, use_color
    from .sim.experiments import MetricsReport, run_timing_benchmark

    timing = run_timing_benchmark(cfg.bench, cfg.scene, cfg.server, cfg.segmentation, cfg.tracking, cfg.pipeline)
    report = MetricsReport(timing=timing, config_echo=_echo(cfg))
    if args.out:
        Path(args.out).write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(render_table(report.to_dict(), use_color(sys.stdout)))
    return EXIT_OK


def cmd_report(args, cfg: AppConfig) -> int:
    import json

    from .report import load_report, render_table, use_color

    _require(args, "input")
    data = load_report(args.input)
    if args.format == "json":
        sys.stdout.write(json.dumps(data, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(render_table(data, use_color(sys.stdout, args.color)))
    return EXIT_OK


COMMANDS = {
    "segment": cmd_segment,
    "track": cmd_track,
    "collide": cmd_collide,
    "serve": cmd_serve,
    "client": cmd_client,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
    "report": cmd_report,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        if not argv:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage().strip())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        cfg = load_config(args)
        if args.print_config:
            sys.stdout.write(cfg.to_text())
            return EXIT_OK
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (TeleimmersionError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
