"""Deployment metrics: uptime against the expected cadence, channel statistics,
gap lists, and the battery energy report."""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Iterable, Sequence

from .simcore import SimTime


def round2(x: float) -> float:
    """Round half-up to 2 decimals, matching printed-table precision."""
    return float(Decimal(str(x)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def uptime(
    expected_cadence_ms: int,
    span: tuple[SimTime, SimTime],
    received: Iterable[SimTime],
) -> tuple[int, int, float]:
    """(expected slots, distinct received slots, uptime percent).

    A slot counts at most once no matter how many frames land in it, so
    retries never inflate availability.
    """
    start, end = span
    if end <= start:
        raise ValueError("span end must be after start")
    if expected_cadence_ms <= 0:
        raise ValueError("cadence must be positive")
    expected = (end - start) // expected_cadence_ms
    slots = set()
    for t in received:
        slot = (t - start) // expected_cadence_ms
        if 0 <= slot < expected:
            slots.add(slot)
    pct = round2(100.0 * len(slots) / expected)
    return int(expected), len(slots), pct


def gap_list(
    expected_cadence_ms: int,
    span: tuple[SimTime, SimTime],
    received: Iterable[SimTime],
) -> list[tuple[SimTime, SimTime]]:
    """Missing-slot runs as (start, end) times, consecutive slots merged."""
    start, end = span
    expected = (end - start) // expected_cadence_ms
    filled = set()
    for t in received:
        slot = (t - start) // expected_cadence_ms
        if 0 <= slot < expected:
            filled.add(slot)
    gaps = []
    run_start = None
    for slot in range(expected):
        if slot in filled:
            if run_start is not None:
                gaps.append((start + run_start * expected_cadence_ms, start + slot * expected_cadence_ms))
                run_start = None
        elif run_start is None:
            run_start = slot
    if run_start is not None:
        gaps.append((start + run_start * expected_cadence_ms, start + expected * expected_cadence_ms))
    return gaps


def channel_stats(values: Sequence[float]) -> tuple[float, float, float]:
    """(min, max, mean rounded to 2 decimals) of a non-empty value list."""
    if not values:
        raise ValueError("cannot compute statistics of an empty list")
    return min(values), max(values), round2(sum(values) / len(values))


def energy_report(
    intervals: Sequence[tuple[float, float, float]],
    capacity_mah: float,
) -> tuple[float, float]:
    """Time-weighted average current and projected battery life.

    `intervals` are (start_ms, end_ms, current_ma), contiguous and
    non-overlapping. Returns (avg_ma, life_hours = capacity / avg).
    """
    if not intervals:
        raise ValueError("empty draw log")
    total_ms = 0.0
    total_mams = 0.0
    prev_end = None
    for start, end, ma in intervals:
        if end < start:
            raise ValueError(f"interval ends before it starts: {(start, end)}")
        if prev_end is not None and start < prev_end:
            raise ValueError("intervals overlap")
        prev_end = end
        total_ms += end - start
        total_mams += ma * (end - start)
    if total_ms <= 0:
        raise ValueError("zero-length draw log")
    avg_ma = total_mams / total_ms
    life_h = capacity_mah / avg_ma if avg_ma > 0 else float("inf")
    return avg_ma, life_h


@dataclass
class DeploymentReport:
    device: str
    uptime_pct: float
    expected_frames: int
    received_frames: int
    stats: dict[str, tuple[float, float, float]]  # channel -> (min, max, avg)
    gaps: list[tuple[SimTime, SimTime]] = field(default_factory=list)
    avg_current_ma: float = 0.0
    projected_life_h: float = 0.0


def build_report(
    device: str,
    expected_cadence_ms: int,
    span: tuple[SimTime, SimTime],
    received_times: list[SimTime],
    channel_values: dict[str, list[float]],
    draw_log: Sequence[tuple[float, float, float]],
    capacity_mah: float,
) -> DeploymentReport:
    expected, received, pct = uptime(expected_cadence_ms, span, received_times)
    stats = {ch: channel_stats(vals) for ch, vals in channel_values.items() if vals}
    gaps = gap_list(expected_cadence_ms, span, received_times)
    avg_ma, life_h = (0.0, 0.0)
    if draw_log:
        avg_ma, life_h = energy_report(draw_log, capacity_mah)
    return DeploymentReport(device, pct, expected, received, stats, gaps, avg_ma, life_h)


def _fmt_value(v: float) -> str:
    return f"{v:g}"


def render_table(reports: Sequence[DeploymentReport]) -> str:
    """Aligned text table: one row per device and channel."""
    header = ["S. No.", "Location", "Channel", "Uptime (%)", "Min", "Max", "Avg"]
    rows = []
    n = 0
    for rep in reports:
        channels = rep.stats or {"-": (float("nan"),) * 3}
        for ch, (mn, mx, avg) in channels.items():
            n += 1
            rows.append(
                [
                    str(n),
                    rep.device,
                    ch,
                    f"{rep.uptime_pct:.2f}",
                    _fmt_value(mn),
                    _fmt_value(mx),
                    f"{avg:.2f}",
                ]
            )
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) if rows else len(header[i]) for i in range(len(header))]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * widths[i] for i in range(len(header))),
    ]
    for r in rows:
        lines.append("  ".join(r[i].ljust(widths[i]) for i in range(len(header))))
    return "\n".join(lines) + "\n"


def report_to_dict(rep: DeploymentReport) -> dict:
    return {
        "device": rep.device,
        "uptime_pct": rep.uptime_pct,
        "expected_frames": rep.expected_frames,
        "received_frames": rep.received_frames,
        "channels": {
            ch: {"min": mn, "max": mx, "avg": avg} for ch, (mn, mx, avg) in rep.stats.items()
        },
        "gaps": [[int(a), int(b)] for a, b in rep.gaps],
        "avg_current_mA": rep.avg_current_ma,
        "projected_life_h": rep.projected_life_h,
    }
