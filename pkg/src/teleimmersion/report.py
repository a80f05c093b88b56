"""Plain-text rendering of a metrics report in the per-component timing layout."""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Optional, TextIO

from .errors import FormatError

COLLISION_BUDGET_MS = 1.0
NETWORK_BUDGET_MS = 5.0
FPS_TARGET = 14.0
ACCURACY_BUDGET_CM = 1.2

_BOLD, _GREEN, _RED, _RESET = "\x1b[1m", "\x1b[32m", "\x1b[31m", "\x1b[0m"


def use_color(stream: Optional[TextIO], mode: str = "auto") -> bool:
    """ANSI styling is off whenever ``NO_COLOR`` is set."""
    if os.environ.get("NO_COLOR"):
        return False
    if mode == "always":
        return True
    if mode == "never":
        return False
    return bool(stream is not None and hasattr(stream, "isatty") and stream.isatty())


def load_report(path) -> dict:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise FormatError(f"cannot read report {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise FormatError(f"{path}: report must be a JSON object")
    return data


class _Style:
    def __init__(self, color: bool):
        self.color = color

    def bold(self, s: str) -> str:
        return f"{_BOLD}{s}{_RESET}" if self.color else s

    def verdict(self, ok: bool) -> str:
        word = "PASS" if ok else "FAIL"
        if not self.color:
            return word
        return f"{_GREEN if ok else _RED}{word}{_RESET}"


def _ms(v) -> str:
    return f"{v:8.2f}" if isinstance(v, (int, float)) else f"{'--':>8}"


def render_table(report: dict, color: bool = False) -> str:
    st = _Style(color)
    lines: list[str] = []
    timing = report.get("timing")
    if timing:
        comp = timing.get("components", {})

        def row(label, key, budget=None):
            c = comp.get(key, {})
            mean, p95 = c.get("mean_ms"), c.get("p95_ms")
            tail = ""
            if budget is not None and isinstance(mean, (int, float)):
                tail = f"  < {budget:g} ms  {st.verdict(mean < budget)}"
            lines.append(f"{label:<24}{_ms(mean)}  {_ms(p95)}{tail}")

        lines.append(st.bold(f"Per-frame timing ({timing.get('clients', '?')} clients, "
                             f"{timing.get('resolution', '?')}, {timing.get('frames', '?')} frames)"))
        lines.append(f"{'Component':<24}{'mean ms':>8}  {'p95 ms':>8}  budget")
        lines.append("-" * 60)
        row("3D object (stand-in)", "object_stage")
        row("RGB-D processing", "rgbd_processing")
        row("  segmentation", "segmentation")
        row("  tracking", "tracking")
        row("Collision detection", "collision", COLLISION_BUDGET_MS)
        row("Network transmission", "network_transmission", NETWORK_BUDGET_MS)
        row("  codec", "codec")
        row("  transport", "transport")
        lines.append("-" * 60)
        fps = timing.get("end_to_end_fps")
        total = timing.get("frame_time_mean_ms")
        if isinstance(fps, (int, float)) and isinstance(total, (int, float)):
            lines.append(f"{'Total':<24}{_ms(total)} ms/frame, {fps:.1f} fps  "
                         f">= {FPS_TARGET:g} fps  {st.verdict(fps >= FPS_TARGET)}")
        extra = [("server tick", timing.get("server_tick_mean_ms"), "ms"),
                 ("harness overhead", timing.get("harness_overhead_ms"), "ms/frame")]
        for label, v, unit in extra:
            if isinstance(v, (int, float)):
                lines.append(f"{label:<24}{_ms(v)} {unit}")
        lines.append("")

    acc = report.get("accuracy")
    if acc:
        lines.append(st.bold(f"Joint accuracy ({acc.get('samples', '?')} samples, "
                             f"sigma_joint {acc.get('joint_sigma_cm', '?')} cm)"))
        lines.append(f"{'Axis':<24}{'std cm':>8}  {'mean cm':>8}  budget")
        lines.append("-" * 60)
        std, mean = acc.get("offset_std_cm", {}), acc.get("offset_mean_cm", {})
        for axis in "xyz":
            s = std.get(axis)
            ok = isinstance(s, (int, float)) and s < ACCURACY_BUDGET_CM
            lines.append(f"{axis:<24}{_ms(s)}  {_ms(mean.get(axis))}  < {ACCURACY_BUDGET_CM:g} cm  {st.verdict(ok)}")
        lines.append("")

    trk = report.get("tracking")
    if trk:
        lines.append(st.bold(f"Viewpoint tracking ({trk.get('frames', '?')} frames)"))
        lines.append("-" * 60)
        for label, key in (("head error rms (cm)", "head_error_rms_cm"),
                           ("head error max (cm)", "head_error_max_cm"),
                           ("valid fraction", "valid_fraction"),
                           ("compression ratio", "compression_ratio_mean")):
            lines.append(f"{label:<24}{_ms(trk.get(key))}")
        lines.append("")
    if not lines:
        return "(empty report)\n"
    return "\n".join(lines).rstrip("\n") + "\n"
