"""Rule-based transceiver firewall: streaming frame parser, registered-ID
classification, and pre-ACK error-flag injection planning.

The parser consumes one sampled bus level per bit time, discards stuff
bits in flight, and announces each completed field. The firewall applies
one rule - is the frame's ID registered? - at a configurable decision
point; only the decision timing (and therefore the slack before the ACK
slot) differs between the ID, data, and CRC variants.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Union

from .codec import DOMINANT, RECESSIVE, EXTENDED, STANDARD, FrameId, bits_to_int, crc15
from .errors import DeadlineMiss

AFTER_ID = "after_id"
AFTER_DATA = "after_data"
AFTER_CRC = "after_crc"
DECISION_POINTS = (AFTER_ID, AFTER_DATA, AFTER_CRC)

# Bits left before the ACK slot when a decision fires, excluding data and
# stuff bits (worst case): used for feasibility reporting.
_MIN_BITS_TO_ACK = {
    AFTER_ID: 1 + 1 + 1 + 4 + 15 + 1,  # RTR IDE R0 DLC CRC CRC_DEL
    AFTER_DATA: 15 + 1,
    AFTER_CRC: 1,
}


def as_fraction(x) -> Fraction:
    """Exact rational from int/float/str; floats go through their decimal
    representation so 1.6 means 8/5, not the nearest binary float."""
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(str(x))
    return Fraction(x)


def _norm_id(value: Union[FrameId, int, tuple]) -> FrameId:
    if isinstance(value, FrameId):
        return value
    if isinstance(value, tuple):
        return FrameId(value[0], value[1])
    return FrameId(int(value), STANDARD)


@dataclass(frozen=True)
class RuleSet:
    """Registered-ID allowlist plus decision-point policy."""

    registered_ids: frozenset[FrameId]
    decision_point: str = AFTER_ID
    processing_budget_us: Fraction = Fraction(0)

    def __post_init__(self):
        if self.decision_point not in DECISION_POINTS:
            raise ValueError(f"unknown decision point {self.decision_point!r}")
        object.__setattr__(
            self, "registered_ids", frozenset(_norm_id(i) for i in self.registered_ids)
        )
        budget = as_fraction(self.processing_budget_us)
        if budget < 0:
            raise ValueError("processing budget must be nonnegative")
        object.__setattr__(self, "processing_budget_us", budget)

    def is_registered(self, frame_id: FrameId) -> bool:
        return frame_id in self.registered_ids


@dataclass(frozen=True)
class FieldEvent:
    name: str
    value: object
    stuffed_bit_index: int  # index of the sampled bit that completed the field


@dataclass(frozen=True)
class Verdict:
    decision: str  # "pass" | "kill"
    frame_id: FrameId
    decided_at_bit: int
    deadline_bit: int  # ACK slot index (exact after CRC, lower bound earlier)
    processing_budget_us: Fraction
    slack_us: Optional[Fraction] = None


@dataclass(frozen=True)
class InjectionPlan:
    start_bit: int  # stuffed-stream index where the active flag begins
    flag_bits: int = 6


# Field progression for standard frames; extended frames splice in
# SRR/IDE/ID_EXT/R1 once the IDE bit turns out recessive.
_STD_AFTER_ID = ["RTR", "IDE", "R0", "DLC", "DATA", "CRC"]
_EXT_AFTER_IDE = ["ID_EXT", "RTR", "R1", "R0", "DLC", "DATA", "CRC"]
_TAIL = ["CRC_DEL", "ACK_SLOT", "ACK_DEL", "EOF"]
_FIELD_WIDTHS = {
    "ID": 11, "RTR": 1, "IDE": 1, "R0": 1, "R1": 1, "ID_EXT": 18,
    "DLC": 4, "CRC": 15, "CRC_DEL": 1, "ACK_SLOT": 1, "ACK_DEL": 1, "EOF": 7,
}

IDLE = "idle"
IN_FIELD = "in_field"
DONE = "done"
ERROR = "error"

_ERROR_RECOVERY_RECESSIVE = 11  # 8 delimiter + 3 intermission bits


@dataclass
class ParserState:
    """Streaming parse of one frame, advanced one sampled bit at a time."""

    phase: str = IDLE
    run_level: int = -1
    run_len: int = 0
    bits_sampled: int = 0  # stuffed-stream bits consumed since SOF
    collected: list[int] = field(default_factory=list)  # destuffed bits
    fields_seen: dict = field(default_factory=dict)

    current_field: str = ""
    field_bits: list[int] = field(default_factory=list)
    pending_fields: list[str] = field(default_factory=list)

    kind: str = STANDARD
    rtr: bool = False
    dlc: int = 0
    pending_trailing_stuff: bool = False
    destuffing: bool = False
    crc_ok: Optional[bool] = None
    ack_slot_index: Optional[int] = None
    error_reason: Optional[str] = None
    error_at_bit: Optional[int] = None
    recovery_recessive: int = 0

    def frame_id(self) -> Optional[FrameId]:
        if self.kind == EXTENDED and "ID_EXT" in self.fields_seen:
            return FrameId((self.fields_seen["ID"] << 18) | self.fields_seen["ID_EXT"], EXTENDED)
        if "ID" in self.fields_seen:
            return FrameId(self.fields_seen["ID"], STANDARD)
        return None

    def data_field_empty(self) -> bool:
        return self.rtr or self.dlc == 0

    def _reset_for_frame(self):
        self.run_level = -1
        self.run_len = 0
        self.bits_sampled = 0
        self.collected = []
        self.fields_seen = {}
        self.kind = STANDARD
        self.rtr = False
        self.dlc = 0
        self.pending_trailing_stuff = False
        self.destuffing = True
        self.crc_ok = None
        self.ack_slot_index = None
        self.error_reason = None
        self.error_at_bit = None
        self.recovery_recessive = 0


def _begin_field(state: ParserState, name: str):
    state.current_field = name
    state.field_bits = []


def _enter_error(state: ParserState, reason: str):
    state.phase = ERROR
    state.error_reason = reason
    state.error_at_bit = state.bits_sampled - 1
    state.recovery_recessive = 0


def _field_width(state: ParserState, name: str) -> int:
    if name == "DATA":
        return 0 if state.rtr else 8 * state.dlc
    return _FIELD_WIDTHS[name]


def _complete_field(state: ParserState) -> Optional[FieldEvent]:
    name = state.current_field
    bits = state.field_bits
    index = state.bits_sampled - 1
    value: object = bits_to_int(bits)

    if name == "DATA":
        value = bytes(bits_to_int(bits[i : i + 8]) for i in range(0, len(bits), 8))
    state.fields_seen[name] = value

    if name == "IDE":
        if bits[0] == RECESSIVE:
            state.kind = EXTENDED
            state.pending_fields = list(_EXT_AFTER_IDE) + list(_TAIL)
            # the bit before IDE was SRR, not RTR
            state.fields_seen["SRR"] = state.fields_seen.pop("RTR")
    elif name == "RTR":
        state.rtr = bits[0] == RECESSIVE
    elif name == "DLC":
        state.dlc = min(int(value), 8)
    elif name == "CRC":
        covered = state.collected[:-15]
        state.crc_ok = crc15(covered) == value
        state.pending_trailing_stuff = state.run_len == 5
        state.destuffing = state.pending_trailing_stuff
        # CRC_DEL follows the (possible) trailing stuff bit, ACK after it
        state.ack_slot_index = index + (2 if state.pending_trailing_stuff else 1) + 1

    if state.pending_fields:
        _begin_field(state, state.pending_fields.pop(0))
        # skip fields with zero width (empty DATA)
        while _field_width(state, state.current_field) == 0 and state.pending_fields:
            state.fields_seen[state.current_field] = b"" if state.current_field == "DATA" else 0
            _begin_field(state, state.pending_fields.pop(0))
    else:
        state.phase = DONE

    return FieldEvent(name, value, index)


def observe_bit(state: ParserState, level: int) -> tuple[ParserState, Optional[FieldEvent]]:
    """Consume one sampled bus level; return a FieldEvent when a field
    completes. Stuff violations and dominant fixed-form bits move the
    parser to the error phase (an error flag is unfolding on the wire)."""
    if state.phase == DONE:
        state.phase = IDLE

    if state.phase == IDLE:
        if level == DOMINANT:
            state._reset_for_frame()
            state.phase = IN_FIELD
            state.bits_sampled = 1
            state.run_level = DOMINANT
            state.run_len = 1
            state.collected.append(DOMINANT)
            state.fields_seen["SOF"] = 0
            state.pending_fields = list(_STD_AFTER_ID) + list(_TAIL)
            _begin_field(state, "ID")
        return state, None

    if state.phase == ERROR:
        if level == RECESSIVE:
            state.recovery_recessive += 1
            if state.recovery_recessive >= _ERROR_RECOVERY_RECESSIVE:
                state.phase = IDLE
        else:
            state.recovery_recessive = 0
        return state, None

    state.bits_sampled += 1
    index = state.bits_sampled - 1

    if state.destuffing:
        if state.run_len == 5:
            # this bit is a stuff bit; equal would make six in a row
            if level == state.run_level:
                _enter_error(state, "stuff")
                return state, None
            state.run_level = level
            state.run_len = 1
            if state.pending_trailing_stuff:
                # stuff bit owed after the final CRC bit ends the region
                state.pending_trailing_stuff = False
                state.destuffing = False
            return state, None
        if level == state.run_level:
            state.run_len += 1
        else:
            state.run_level = level
            state.run_len = 1
        state.collected.append(level)
        state.field_bits.append(level)
    else:
        # fixed-form region: CRC_DEL, ACK_SLOT, ACK_DEL, EOF
        state.collected.append(level)
        state.field_bits.append(level)
        if state.current_field in ("CRC_DEL", "ACK_DEL", "EOF") and level == DOMINANT:
            _enter_error(state, "form")
            return state, None

    if len(state.field_bits) == _field_width(state, state.current_field):
        return state, _complete_field(state)
    return state, None


def classify(rules: RuleSet, event: FieldEvent, state: ParserState,
             bit_time_us=None) -> Optional[Verdict]:
    """Apply the registered-ID rule when the event matches the ruleset's
    decision point. Passing bit_time_us fills in the verdict's slack."""
    point = rules.decision_point
    frame_id: Optional[FrameId] = None

    if point == AFTER_ID:
        if event.name == "ID":
            # the IDE bit has not arrived yet; treat the 11-bit value as a
            # standard ID (extended frames are re-checked at ID_EXT)
            frame_id = FrameId(int(event.value), STANDARD)
        elif event.name == "ID_EXT":
            frame_id = state.frame_id()
    elif point == AFTER_DATA:
        if event.name == "DATA" or (event.name == "DLC" and state.data_field_empty()):
            frame_id = state.frame_id()
    elif point == AFTER_CRC:
        if event.name == "CRC":
            frame_id = state.frame_id()

    if frame_id is None:
        return None

    decision = "pass" if rules.is_registered(frame_id) else "kill"
    decided = event.stuffed_bit_index
    if state.ack_slot_index is not None:
        deadline = state.ack_slot_index
    else:
        deadline = decided + _min_bits_to_ack(state, event) + 1

    slack = None
    if bit_time_us is not None:
        slack = (deadline - decided - 1) * as_fraction(bit_time_us) - rules.processing_budget_us
    return Verdict(
        decision=decision,
        frame_id=frame_id,
        decided_at_bit=decided,
        deadline_bit=deadline,
        processing_budget_us=rules.processing_budget_us,
        slack_us=slack,
    )


def _min_bits_to_ack(state: ParserState, event: FieldEvent) -> int:
    """Raw bits guaranteed between the decision bit and the ACK slot
    (future stuff bits can only widen the gap)."""
    if event.name == "ID":
        return 1 + 1 + 1 + 4 + 15 + 1  # RTR IDE R0 DLC CRC CRC_DEL, dlc may add more
    if event.name == "ID_EXT":
        return 1 + 1 + 1 + 4 + 15 + 1  # RTR R1 R0 DLC CRC CRC_DEL
    if event.name == "DLC":
        return 15 + 1
    if event.name == "DATA":
        return 15 + 1
    return 1


def injection_plan(verdict: Optional[Verdict], bit_time_us) -> Optional[InjectionPlan]:
    """Schedule the active error flag for a kill verdict.

    The decision value is available during the bit that completed the
    field; once the processing budget elapses the flag starts at the next
    bit boundary, so a budget within one bit time still makes the very
    next bit. Raises DeadlineMiss when the start would fall at or past the
    ACK slot (equivalently, when the verdict's slack is gone)."""
    if verdict is None or verdict.decision == "pass":
        return None
    bit_time = as_fraction(bit_time_us)
    lead = math.floor(verdict.processing_budget_us / bit_time) + 1
    start = verdict.decided_at_bit + lead
    if start >= verdict.deadline_bit:
        raise DeadlineMiss(
            f"flag would start at bit {start}, ACK slot at {verdict.deadline_bit}"
        )
    return InjectionPlan(start_bit=start)


@dataclass(frozen=True)
class SlackReport:
    bitrate: int
    cpu_freq_hz: int
    cycles_per_decision: int
    bit_time_us: Fraction
    compute_time_us: Fraction
    slack_us: dict  # decision point -> available window before ACK, worst case
    feasible: dict  # decision point -> bool
    sampling_overhead_pct: Fraction


def slack_report(rules: RuleSet, bitrate: int, cpu_freq_hz: int,
                 cycles_per_decision: int) -> SlackReport:
    """Exact timing arithmetic for the firewall's decision points."""
    if bitrate <= 0 or cpu_freq_hz <= 0 or cycles_per_decision <= 0:
        raise ValueError("bitrate, cpu frequency, and cycles must be positive")
    bit_time = Fraction(10**6, bitrate)
    compute = Fraction(10**6) * cycles_per_decision / cpu_freq_hz
    slack = {point: bits * bit_time for point, bits in _MIN_BITS_TO_ACK.items()}
    # feasible while some slack remains: a compute cost that eats the whole
    # window would put the flag at the ACK slot
    feasible = {point: compute < bits * bit_time for point, bits in _MIN_BITS_TO_ACK.items()}
    overhead = compute / bit_time * 100
    return SlackReport(
        bitrate=bitrate,
        cpu_freq_hz=cpu_freq_hz,
        cycles_per_decision=cycles_per_decision,
        bit_time_us=bit_time,
        compute_time_us=compute,
        slack_us=slack,
        feasible=feasible,
        sampling_overhead_pct=overhead,
    )


def rbt_attach(bus, rules: RuleSet):
    """Add the firewall node to a bus; it samples every bit, classifies at
    the ruleset's decision point, and kills by injecting an active flag."""
    from .bus import attach_rbt_node

    return attach_rbt_node(bus, rules)
