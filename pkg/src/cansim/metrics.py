"""Busload and overhead metrics, scenario summaries, CSV and candump-style
trace export.

The CSV layout mirrors the desktop tool's frame table
(``index,time,channel,id,name,direction,data``); the log format follows
the common candump convention ``(seconds) channel id#data`` with a
`` KILLED`` suffix as a documented extension for frames destroyed by the
firewall.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field
from typing import Optional

from .codec import STANDARD
from .errors import EmptyWindow


@dataclass
class ScenarioSummary:
    frames_offered: int = 0
    frames_delivered: int = 0
    frames_killed: int = 0
    bus_off_events: list = field(default_factory=list)  # (node, time_us)
    busload_pct: float = 0.0
    rbt_added_busload_pct: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "frames_offered": self.frames_offered,
            "frames_delivered": self.frames_delivered,
            "frames_killed": self.frames_killed,
            "bus_off_events": [{"node": n, "time_us": t} for n, t in self.bus_off_events],
            "busload_pct": self.busload_pct,
            "rbt_added_busload_pct": self.rbt_added_busload_pct,
        }


def busload(trace, window_us: Optional[tuple] = None) -> float:
    """Percent of bit times occupied by frames, error signalling, or
    intermission inside the window (default: the whole trace)."""
    bit_time = trace.bit_time_us
    busy = trace.busy
    if window_us is None:
        start_us, end_us = 0, len(busy) * bit_time
    else:
        start_us, end_us = window_us
    if end_us <= start_us:
        raise EmptyWindow(f"window [{start_us}, {end_us}) is empty")
    if start_us < 0 or end_us > len(busy) * bit_time:
        raise EmptyWindow(f"window [{start_us}, {end_us}) outside trace span")
    lo = start_us // bit_time
    hi = end_us // bit_time
    total = hi - lo
    if total <= 0:
        raise EmptyWindow("window shorter than one bit time")
    return 100.0 * int(busy[lo:hi].sum()) / total


def payload_overhead_comparison(scheme: str, mac_bytes: int = 4,
                                payload_bytes: int = 8) -> float:
    """Percent of payload (or extra frames) a scheme costs.

    The firewall consumes none; an in-payload MAC eats mac/payload of
    every frame; a separate MAC frame doubles the frame count."""
    if scheme == "rbt":
        return 0.0
    if scheme == "mac_in_payload":
        if not 0 <= mac_bytes <= 8:
            raise ValueError("mac_bytes must be 0..8")
        if not 1 <= payload_bytes <= 8:
            raise ValueError("payload_bytes must be 1..8")
        return 100.0 * mac_bytes / payload_bytes
    if scheme == "mac_separate_frame":
        return 100.0
    raise ValueError(f"unknown scheme {scheme!r}")


_CSV_HEADER = "index,time,channel,id,name,direction,data"
_FRAME_KINDS = {"frame_tx_start": "TX", "frame_killed": "TX", "frame_delivered": "RX"}


def _id_csv(value: int, kind: str) -> str:
    return f"{value:04x}" if kind == STANDARD else f"{value:08x}"


def _data_spaced(data_hex: str) -> str:
    return " ".join(data_hex[i : i + 2] for i in range(0, len(data_hex), 2))


def export_csv(trace) -> str:
    """Frame table rows for every tx-start, delivery, and kill event.

    Times carry millisecond precision, matching the desktop table layout."""
    out = io.StringIO()
    out.write(_CSV_HEADER + "\n")
    index = 0
    for rec in trace.records:
        direction = _FRAME_KINDS.get(rec.kind)
        if direction is None:
            continue
        index += 1
        detail = rec.detail
        out.write(
            "%d,%.3f,%s,%s,%s,%s,%s\n"
            % (
                index,
                rec.time_us / 1e6,
                trace.channel,
                _id_csv(detail["id"], detail.get("id_kind", STANDARD)),
                detail.get("name", ""),
                direction,
                _data_spaced(detail.get("data", "")),
            )
        )
    return out.getvalue()


def parse_csv(text: str) -> list[dict]:
    """Inverse of export_csv; returns one dict per row."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != _CSV_HEADER:
        raise ValueError("missing or malformed header")
    rows = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 7:
            raise ValueError(f"malformed row: {ln!r}")
        rows.append(
            {
                "index": int(parts[0]),
                "time": float(parts[1]),
                "channel": parts[2],
                "id": int(parts[3], 16),
                "name": parts[4],
                "direction": parts[5],
                "data": bytes.fromhex(parts[6].replace(" ", "")),
            }
        )
    return rows


def export_log(trace) -> str:
    """candump-style log: one line per completed transmission attempt."""
    out = io.StringIO()
    delivered_attempts = set()
    for rec in trace.records:
        if rec.kind == "frame_delivered":
            attempt = rec.detail.get("attempt")
            if attempt in delivered_attempts:
                continue
            delivered_attempts.add(attempt)
            suffix = ""
        elif rec.kind == "frame_killed":
            suffix = " KILLED"
        else:
            continue
        detail = rec.detail
        value = detail["id"]
        id_text = f"{value:03X}" if detail.get("id_kind", STANDARD) == STANDARD else f"{value:08X}"
        payload = "R" if detail.get("rtr") else detail.get("data", "")
        out.write(
            "(%.6f) %s %s#%s%s\n" % (rec.time_us / 1e6, trace.channel, id_text, payload, suffix)
        )
    return out.getvalue()


def summarize(trace, baseline_trace=None) -> ScenarioSummary:
    """Scenario counts plus busload; pass the paired no-firewall run to fill
    in the firewall's busload cost."""
    offered = 0
    killed = 0
    delivered_attempts = set()
    bus_off = []
    for rec in trace.records:
        if rec.kind == "frame_tx_start":
            offered += 1
        elif rec.kind == "frame_killed":
            killed += 1
        elif rec.kind == "frame_delivered":
            delivered_attempts.add(rec.detail.get("attempt"))
        elif rec.kind == "state_change":
            if rec.detail.get("mode") == "bus_off" and rec.detail.get("prev_mode") != "bus_off":
                bus_off.append((rec.node, rec.time_us))
    load = busload(trace) if trace.span_us > 0 else 0.0
    delta = None
    if baseline_trace is not None:
        base = busload(baseline_trace) if baseline_trace.span_us > 0 else 0.0
        delta = load - base
    return ScenarioSummary(
        frames_offered=offered,
        frames_delivered=len(delivered_attempts),
        frames_killed=killed,
        bus_off_events=bus_off,
        busload_pct=load,
        rbt_added_busload_pct=delta,
    )
