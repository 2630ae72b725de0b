"""Attacker node behaviors: spoofing, fuzzing, and replay.

All behaviors are pure functions of their parameters and seed, so traces
are reproducible bit for bit. The fuzzer uses xorshift64* with the usual
12/25/27 shifts and multiplier 0x2545F4914F6CDD1D rather than Python's
random module, so another implementation can regenerate the exact frame
sequence from the documented constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .bus import PeriodicSource, QueuedFrame
from .codec import Frame, FrameId, STANDARD
from .errors import EmptySlice

_XS_MULT = 0x2545F4914F6CDD1D
_MASK64 = (1 << 64) - 1


class XorShift64Star:
    def __init__(self, seed: int):
        self.state = (seed & _MASK64) or 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= (x >> 12)
        x ^= (x << 25) & _MASK64
        x ^= (x >> 27)
        self.state = x
        return (x * _XS_MULT) & _MASK64

    def below(self, bound: int) -> int:
        return self.next_u64() % bound


def spoof_attacker(id_value: int, dlc: int, data: bytes,
                   period_us: int, start_us: int = 0,
                   kind: str = STANDARD, name: str = "spoof") -> PeriodicSource:
    """Repeat one forged frame at a fixed period; period 0 keeps the frame
    pending back to back. The controller retransmits killed frames on its
    own, which is what drives the attacker into bus-off."""
    frame = Frame(FrameId(id_value, kind), dlc=dlc, data=bytes(data))
    return PeriodicSource(frame, name=name, start_us=start_us, period_us=period_us)


class FuzzSource:
    """Pseudorandom frames at a fixed rate; same seed, same sequence."""

    def __init__(self, seed: int, frames_per_second: int, id_range: tuple,
                 start_us: int = 0, name: str = "fuzz"):
        lo, hi = id_range
        if not 0 <= lo <= hi < (1 << 11):
            raise ValueError("id_range must stay within standard 11-bit ids")
        if frames_per_second <= 0:
            raise ValueError("frames_per_second must be positive")
        self.rng = XorShift64Star(seed)
        self.period_us = 10**6 // frames_per_second
        self.id_lo = lo
        self.id_hi = hi
        self.start_us = start_us
        self.name = name
        self._emitted = 0

    def _next_frame(self) -> Frame:
        ident = self.id_lo + self.rng.below(self.id_hi - self.id_lo + 1)
        dlc = self.rng.below(9)
        data = bytes(self.rng.below(256) for _ in range(dlc))
        return Frame(FrameId(ident, STANDARD), dlc=dlc, data=data)

    def pop_due(self, now_us: int, pending_len: int) -> list[QueuedFrame]:
        out = []
        while True:
            due = self.start_us + self._emitted * self.period_us
            if now_us < due:
                break
            out.append(QueuedFrame(self._next_frame(), self.name, due))
            self._emitted += 1
        return out


def fuzz_attacker(seed: int, frames_per_second: int, id_range: tuple,
                  start_us: int = 0) -> FuzzSource:
    return FuzzSource(seed, frames_per_second, id_range, start_us)


class ScheduleSource:
    """Fixed (time, frame) schedule, used by the replay attacker."""

    def __init__(self, entries: list):
        self.entries = sorted(entries, key=lambda e: e[0])
        self._pos = 0

    def pop_due(self, now_us: int, pending_len: int) -> list[QueuedFrame]:
        out = []
        while self._pos < len(self.entries) and self.entries[self._pos][0] <= now_us:
            due, qf = self.entries[self._pos]
            out.append(QueuedFrame(qf.frame, qf.name, due))
            self._pos += 1
        return out


def replay_attacker(records: list, start_us: int = 0) -> ScheduleSource:
    """Re-transmit recorded frames with their original inter-frame gaps.

    Takes frame_tx_start trace records; raises EmptySlice when none are
    present."""
    starts = [r for r in records if r.kind == "frame_tx_start"]
    if not starts:
        raise EmptySlice("no frame transmissions in the slice")
    t0 = starts[0].time_us
    entries = []
    for rec in starts:
        d = rec.detail
        frame = Frame(
            FrameId(d["id"], d.get("id_kind", STANDARD)),
            rtr=d.get("rtr", False),
            dlc=d["dlc"],
            data=bytes.fromhex(d.get("data", "")),
        )
        entries.append((start_us + (rec.time_us - t0), QueuedFrame(frame, d.get("name", ""))))
    return ScheduleSource(entries)


@dataclass
class AttackSpec:
    """Scenario-file description of one attack behavior."""

    kind: str  # spoof | fuzz | replay
    id_value: Optional[int] = None
    dlc: int = 0
    data: bytes = b""
    period_us: int = 0
    seed: Optional[int] = None
    frames_per_second: int = 10
    id_range: tuple = (0, 0x7FF)
    replay_records: list = field(default_factory=list)
    name: str = ""

    def to_behavior(self, start_us: int, default_seed: int):
        if self.kind == "spoof":
            return spoof_attacker(
                self.id_value, self.dlc, self.data, self.period_us,
                start_us=start_us, name=self.name or "spoof",
            )
        if self.kind == "fuzz":
            seed = self.seed if self.seed is not None else default_seed
            src = fuzz_attacker(seed, self.frames_per_second, tuple(self.id_range), start_us)
            if self.name:
                src.name = self.name
            return src
        if self.kind == "replay":
            return replay_attacker(self.replay_records, start_us)
        raise ValueError(f"unknown attack kind {self.kind!r}")
