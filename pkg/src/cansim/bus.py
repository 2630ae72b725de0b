"""Deterministic bit-time simulation of a multi-node CAN bus.

Each step is one bit time. Every non-bus-off node contributes an output
level; the wire resolves to dominant if anyone drives dominant (wired
AND). All nodes sample the resolved level: transmitters bit-monitor and
arbitrate, receivers run the streaming parser, the firewall classifies
and injects. Protocol errors never raise - they become error flags on the
wire and feed the ISO 11898-style fault confinement counters.

Identical config and seed always produce a bit-identical trace.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rbt as rbt_mod
from .codec import (
    ACTIVE_FLAG_BITS,
    DOMINANT,
    DOMINANT_VOLTAGE,
    IFS_BITS,
    RECESSIVE,
    RECESSIVE_VOLTAGE,
    Frame,
    encode_frame,
)
from .errors import ConfigError, DeadlineMiss, DuplicateRbt, UnknownNode
from .rbt import IDLE as PARSER_IDLE
from .rbt import ERROR as PARSER_ERROR
from .rbt import ParserState, RuleSet, classify, injection_plan, observe_bit

ERROR_ACTIVE = "error_active"
ERROR_PASSIVE = "error_passive"
BUS_OFF = "bus_off"

ROLE_SENDER = "sender"
ROLE_RECEIVER = "receiver"
ROLE_ATTACKER = "attacker"
ROLE_RBT = "rbt"

_ERROR_DELIMITER = 8


@dataclass(frozen=True)
class NodeState:
    tec: int = 0
    rec: int = 0
    mode: str = ERROR_ACTIVE


def fault_confinement_update(state: NodeState, event: str) -> NodeState:
    """ISO 11898-style counter arithmetic: +8 per transmit error, +1 per
    receive error, -1 on success; passive at 128, bus-off past 255 and
    sticky until an explicit reset."""
    tec, rec = state.tec, state.rec
    if event == "tx_error":
        tec += 8
    elif event == "rx_error":
        rec += 1
    elif event == "tx_success":
        tec = max(tec - 1, 0)
    elif event == "rx_success":
        rec = max(rec - 1, 0)
    else:
        raise ValueError(f"unknown fault event {event!r}")
    if state.mode == BUS_OFF or tec > 255:
        mode = BUS_OFF
    elif tec >= 128 or rec >= 128:
        mode = ERROR_PASSIVE
    else:
        mode = ERROR_ACTIVE
    return NodeState(tec=tec, rec=rec, mode=mode)


@dataclass
class QueuedFrame:
    frame: Frame
    name: str = ""
    not_before_us: int = 0


class PeriodicSource:
    """Deterministic periodic frame source; period 0 keeps exactly one
    frame pending (back-to-back transmission)."""

    def __init__(self, frame: Frame, name: str = "", start_us: int = 0,
                 period_us: Optional[int] = None, count: Optional[int] = None):
        self.frame = frame
        self.name = name
        self.start_us = start_us
        self.period_us = period_us
        self.count = count
        self._emitted = 0

    def pop_due(self, now_us: int, pending_len: int) -> list[QueuedFrame]:
        out = []
        while True:
            if self.count is not None and self._emitted >= self.count:
                break
            if self.period_us == 0:
                if now_us >= self.start_us and pending_len + len(out) == 0:
                    out.append(QueuedFrame(self.frame, self.name, now_us))
                    self._emitted += 1
                break
            due = self.start_us + self._emitted * (self.period_us or 0)
            if now_us < due:
                break
            out.append(QueuedFrame(self.frame, self.name, due))
            self._emitted += 1
            if self.period_us is None:
                break
        return out


class CompositeSource:
    """Merge several frame sources into one behavior slot."""

    def __init__(self, sources: list):
        self.sources = sources

    def pop_due(self, now_us: int, pending_len: int) -> list[QueuedFrame]:
        out: list[QueuedFrame] = []
        for src in self.sources:
            out.extend(src.pop_due(now_us, pending_len + len(out)))
        return out


@dataclass
class NodeSpec:
    name: str
    role: str = ROLE_RECEIVER
    tx_queue: list = field(default_factory=list)  # QueuedFrame
    registered_ids: frozenset = frozenset()
    behavior: object = None  # pop_due(now_us, pending_len) -> [QueuedFrame]
    rules: Optional[RuleSet] = None  # only for role "rbt"


@dataclass
class BusConfig:
    bitrate: int
    nodes: list = field(default_factory=list)
    seed: int = 0
    max_time_us: Optional[int] = None
    channel: str = "CAN1"
    trace_bits: bool = False


@dataclass
class TraceRecord:
    time_us: int
    kind: str  # frame_tx_start | frame_delivered | frame_killed | error_flag
    #          | arbitration_loss | state_change | bit_sample
    node: str
    detail: dict
    voltage_label: Optional[str] = None


class Trace:
    """Completed simulation trace: event records plus per-bit level and
    busy bitmaps (numpy uint8) for busload arithmetic."""

    def __init__(self, bit_time_us: int, channel: str):
        self.bit_time_us = bit_time_us
        self.channel = channel
        self.records: list[TraceRecord] = []
        self._levels: list[int] = []
        self._busy: list[int] = []

    @property
    def levels(self) -> np.ndarray:
        return np.array(self._levels, dtype=np.uint8)

    @property
    def busy(self) -> np.ndarray:
        return np.array(self._busy, dtype=np.uint8)

    @property
    def span_us(self) -> int:
        return len(self._levels) * self.bit_time_us


class _Node:
    def __init__(self, spec: NodeSpec):
        self.spec = spec
        self.name = spec.name
        self.role = spec.role
        self.fault = NodeState()
        self.parser = ParserState()
        self.pending: deque[QueuedFrame] = deque(spec.tx_queue)
        self.behavior = spec.behavior

        # transmit state
        self.tx: Optional[QueuedFrame] = None
        self.tx_bits: Optional[np.ndarray] = None
        self.tx_map = None
        self.tx_pos = 0
        self.tx_attempt = -1
        self.acked = False

        # error-flag state
        self.flag_level: Optional[int] = None
        self.flag_left = 0
        self.flag_next: Optional[str] = None  # reason, flag starts next bit

        self.was_in_frame = False  # parser was mid-frame last bit

    @property
    def bus_off(self) -> bool:
        return self.fault.mode == BUS_OFF

    def reset(self):
        self.fault = NodeState()
        self.parser = ParserState()
        self.tx = None
        self.tx_bits = None
        self.tx_map = None
        self.tx_pos = 0
        self.acked = False
        self.flag_level = None
        self.flag_left = 0
        self.flag_next = None
        self.was_in_frame = False


class _RbtNode(_Node):
    def __init__(self, spec: NodeSpec):
        super().__init__(spec)
        self.rules: RuleSet = spec.rules
        self.plan = None
        self.plan_verdict = None
        self.inject_left = 0
        self.deadline_misses: list = []


class Bus:
    def __init__(self, config: BusConfig):
        if config.bitrate <= 0:
            raise ConfigError("bitrate must be positive")
        if 10**6 % config.bitrate != 0:
            raise ConfigError(f"bit time for {config.bitrate} bps is not a whole microsecond")
        names = [spec.name for spec in config.nodes]
        if len(names) != len(set(names)):
            raise ConfigError("duplicate node names")
        if sum(1 for spec in config.nodes if spec.role == ROLE_RBT) > 1:
            raise ConfigError("at most one rbt node")
        for spec in config.nodes:
            if spec.role == ROLE_RBT:
                if spec.tx_queue or spec.behavior:
                    raise ConfigError("rbt node never transmits data frames")
                if spec.rules is None:
                    raise ConfigError("rbt node needs a ruleset")

        self.config = config
        self.bit_time_us = 10**6 // config.bitrate
        self.time_us = 0
        self.nodes: list[_Node] = []
        for spec in config.nodes:
            self.nodes.append(_RbtNode(spec) if spec.role == ROLE_RBT else _Node(spec))
        self.trace = Trace(self.bit_time_us, config.channel)

        self.activity = "idle"  # idle | frame | error | intermission
        self._intermission_left = 0
        self._error_recessive = 0
        self._attempt_counter = 0
        self._inflight: dict[int, dict] = {}  # attempt -> info
        self._inflight_remove: list[int] = []
        self._frame_done = False
        self._error_started = False

    # -- helpers ---------------------------------------------------------

    def node(self, name: str) -> _Node:
        for node in self.nodes:
            if node.name == name:
                return node
        raise UnknownNode(name)

    def _record(self, kind: str, node: str, detail: dict, voltage: Optional[str] = None):
        rec = TraceRecord(self.time_us, kind, node, detail, voltage)
        self.trace.records.append(rec)
        return rec

    def _frame_detail(self, qf: QueuedFrame, attempt: int) -> dict:
        frame = qf.frame
        return {
            "attempt": attempt,
            "id": frame.id.value,
            "id_kind": frame.id.kind,
            "rtr": frame.rtr,
            "dlc": frame.dlc,
            "data": frame.data.hex().upper(),
            "name": qf.name,
        }

    def _apply_fault(self, node: _Node, event: str, cause: str):
        if isinstance(node, _RbtNode):
            return  # the firewall is a transceiver pair, not a CAN controller
        before = node.fault
        node.fault = fault_confinement_update(before, event)
        if (before.tec, before.rec, before.mode) != (
            node.fault.tec, node.fault.rec, node.fault.mode
        ):
            self._record(
                "state_change",
                node.name,
                {
                    "tec": node.fault.tec,
                    "rec": node.fault.rec,
                    "mode": node.fault.mode,
                    "prev_mode": before.mode,
                    "cause": cause,
                },
            )
        if node.fault.mode == BUS_OFF and before.mode != BUS_OFF:
            # the controller needs a hardware reset; buffered frames are gone
            node.tx = None
            node.tx_bits = None
            node.pending.clear()
            node.flag_level = None
            node.flag_left = 0
            node.flag_next = None

    def _abort_tx(self, node: _Node, requeue: bool = True):
        if node.tx is not None and requeue:
            node.pending.appendleft(node.tx)
        self._inflight_remove.append(node.tx_attempt)
        node.tx = None
        node.tx_bits = None
        node.tx_map = None
        node.tx_pos = 0
        node.acked = False

    def _start_flag(self, node: _Node, reason: str):
        node.flag_next = reason

    # -- one bit time ----------------------------------------------------

    def step_bit(self) -> list[TraceRecord]:
        first_record = len(self.trace.records)
        self._frame_done = False
        self._error_started = False
        self._inflight_remove = []

        # scheduled frame sources
        for node in self.nodes:
            if node.behavior is not None:
                due = node.behavior.pop_due(self.time_us, len(node.pending))
                if not node.bus_off:
                    node.pending.extend(due)

        # transmission starts: bus idle, node quiet, frame due
        if self.activity == "idle":
            for node in self.nodes:
                if (
                    node.bus_off
                    or node.tx is not None
                    or node.flag_level is not None
                    or node.flag_next is not None
                    or not node.pending
                ):
                    continue
                if node.pending[0].not_before_us > self.time_us:
                    continue
                qf = node.pending.popleft()
                node.tx = qf
                node.tx_bits, node.tx_map = encode_frame(qf.frame)
                node.tx_pos = 0
                node.acked = False
                self._attempt_counter += 1
                node.tx_attempt = self._attempt_counter
                self._inflight[node.tx_attempt] = {
                    "node": node.name,
                    "qf": qf,
                    "map": node.tx_map,
                }
                self._record("frame_tx_start", node.name, self._frame_detail(qf, node.tx_attempt))
                self.activity = "frame"

        # start error flags scheduled last bit
        for node in self.nodes:
            if node.flag_next is not None and not node.bus_off:
                mode = "active" if node.fault.mode == ERROR_ACTIVE else "passive"
                node.flag_level = DOMINANT if mode == "active" else RECESSIVE
                node.flag_left = ACTIVE_FLAG_BITS
                self._error_started = True
                self._record(
                    "error_flag",
                    node.name,
                    {"mode": mode, "reason": node.flag_next},
                    DOMINANT_VOLTAGE if mode == "active" else RECESSIVE_VOLTAGE,
                )
                node.flag_next = None

        # output phase
        outputs: dict[str, Optional[int]] = {}
        for node in self.nodes:
            outputs[node.name] = self._output_of(node)
        level = DOMINANT if any(v == DOMINANT for v in outputs.values()) else RECESSIVE

        busy = self.activity != "idle"
        self.trace._levels.append(level)
        self.trace._busy.append(1 if busy else 0)
        if self.config.trace_bits:
            self._record(
                "bit_sample",
                "bus",
                {"level": level, "outputs": dict(outputs), "busy": busy},
                DOMINANT_VOLTAGE if level == DOMINANT else RECESSIVE_VOLTAGE,
            )

        # sample phase
        for node in self.nodes:
            if node.bus_off:
                continue
            if isinstance(node, _RbtNode):
                self._sample_rbt(node, level)
            else:
                self._sample_node(node, level)

        # bus activity bookkeeping
        if self._error_started:
            self.activity = "error"
            self._error_recessive = 0
        if self.activity == "error":
            if level == RECESSIVE:
                self._error_recessive += 1
                if self._error_recessive >= _ERROR_DELIMITER:
                    self.activity = "intermission"
                    self._intermission_left = IFS_BITS
            else:
                self._error_recessive = 0
        elif self.activity == "frame" and self._frame_done:
            self.activity = "intermission"
            self._intermission_left = IFS_BITS
        elif self.activity == "intermission":
            self._intermission_left -= 1
            if self._intermission_left <= 0:
                self.activity = "idle"

        for attempt in self._inflight_remove:
            self._inflight.pop(attempt, None)

        self.time_us += self.bit_time_us
        return self.trace.records[first_record:]

    def _output_of(self, node: _Node) -> Optional[int]:
        if node.bus_off:
            return None
        if node.flag_level is not None and node.flag_left > 0:
            return node.flag_level
        if isinstance(node, _RbtNode):
            return DOMINANT if node.inject_left > 0 else None
        if node.tx_bits is not None:
            return int(node.tx_bits[node.tx_pos])
        # receiver drives the ACK slot dominant for a frame it validated
        parser = node.parser
        if (
            parser.ack_slot_index is not None
            and parser.bits_sampled == parser.ack_slot_index
            and parser.phase not in (PARSER_ERROR, PARSER_IDLE)
            and parser.crc_ok
        ):
            return DOMINANT
        return None

    def _sample_node(self, node: _Node, level: int):
        # error flag in progress: just count it down, then the shared
        # delimiter/intermission tracking gates retransmission
        if node.flag_level is not None and node.flag_left > 0:
            node.flag_left -= 1
            if node.flag_left == 0:
                node.flag_level = None
            self._feed_parser(node, level, transmitting=True)
            return

        if node.tx_bits is not None:
            sent = int(node.tx_bits[node.tx_pos])
            pos = node.tx_pos
            if sent == RECESSIVE and level == DOMINANT:
                arb_start, arb_end = node.tx_map.arbitration_span()
                if arb_start <= pos < arb_end:
                    self._record(
                        "arbitration_loss",
                        node.name,
                        {
                            "attempt": node.tx_attempt,
                            "id": node.tx.frame.id.value,
                            "lost_at_bit": pos,
                        },
                    )
                    self._abort_tx(node)
                    # keep listening: the parser has tracked the winner all along
                elif pos == node.tx_map.ack_slot:
                    node.acked = True
                    node.tx_pos += 1
                else:
                    self._apply_fault(node, "tx_error", "bit_error")
                    if not node.bus_off:
                        self._start_flag(node, "bit_error")
                    self._abort_tx(node)
            else:
                if pos == node.tx_map.ack_slot and level == RECESSIVE:
                    self._apply_fault(node, "tx_error", "ack_error")
                    if not node.bus_off:
                        self._start_flag(node, "ack_error")
                    self._abort_tx(node)
                else:
                    node.tx_pos += 1
                    if node.tx_pos == len(node.tx_bits):
                        self._apply_fault(node, "tx_success", "tx_success")
                        self._inflight_remove.append(node.tx_attempt)
                        node.tx = None
                        node.tx_bits = None
                        node.tx_map = None
                        node.tx_pos = 0
                        self._frame_done = True
            self._feed_parser(node, level, transmitting=True)
            return

        self._feed_parser(node, level, transmitting=False)

    def _feed_parser(self, node: _Node, level: int, transmitting: bool):
        parser = node.parser
        was_in_frame = node.was_in_frame
        _, event = observe_bit(parser, level)

        in_frame = parser.phase not in (PARSER_IDLE, PARSER_ERROR)

        if parser.phase == PARSER_ERROR and was_in_frame and not transmitting:
            if node.flag_level is None and node.flag_next is None:
                self._apply_fault(node, "rx_error", f"{parser.error_reason}_error")
                self._start_flag(node, f"{parser.error_reason}_error")
            self._error_started = True

        if event is not None and not transmitting:
            if event.name == "ACK_DEL" and parser.crc_ok is False:
                # a receiver with a bad CRC flags after the ACK delimiter
                self._apply_fault(node, "rx_error", "crc_error")
                self._start_flag(node, "crc_error")
            elif event.name == "EOF" and parser.crc_ok:
                info = self._current_inflight()
                if info is not None:
                    self._apply_fault(node, "rx_success", "rx_success")
                    self._record(
                        "frame_delivered",
                        node.name,
                        dict(
                            self._frame_detail(info["qf"], info["attempt"]),
                            tx_node=info["node"],
                        ),
                    )

        node.was_in_frame = in_frame

    def _current_inflight(self) -> Optional[dict]:
        # removals are deferred to the end of the bit, so the frame that is
        # completing or dying right now is still visible here
        if len(self._inflight) == 1:
            attempt, info = next(iter(self._inflight.items()))
            return dict(info, attempt=attempt)
        return None

    def _sample_rbt(self, node: _RbtNode, level: int):
        parser = node.parser
        if node.inject_left > 0:
            node.inject_left -= 1

        _, event = observe_bit(parser, level)

        if parser.phase == PARSER_ERROR:
            node.plan = None
            node.plan_verdict = None
            return
        if parser.phase == PARSER_IDLE:
            node.plan = None
            node.plan_verdict = None
            return

        if event is not None:
            verdict = classify(node.rules, event, parser, self.bit_time_us)
            if verdict is not None and verdict.decision == "kill" and node.plan is None:
                try:
                    node.plan = injection_plan(verdict, self.bit_time_us)
                    node.plan_verdict = verdict
                except DeadlineMiss as exc:
                    node.deadline_misses.append((self.time_us, str(exc)))

        if node.plan is not None and parser.bits_sampled == node.plan.start_bit:
            node.inject_left = ACTIVE_FLAG_BITS
            self._error_started = True
            verdict = node.plan_verdict
            info = self._current_inflight()
            self._record(
                "error_flag",
                node.name,
                {"mode": "active", "reason": "unregistered_id"},
                DOMINANT_VOLTAGE,
            )
            detail = {
                "id": verdict.frame_id.value,
                "decision_point": node.rules.decision_point,
                "decided_at_bit": verdict.decided_at_bit,
                "injection_start_bit": node.plan.start_bit,
                "ack_slot_bit": verdict.deadline_bit,
            }
            tx_name = ""
            if info is not None:
                base = self._frame_detail(info["qf"], info["attempt"])
                base.update(detail)
                detail = base
                # the verdict's deadline is a worst-case bound; the frame's
                # field map gives the true ACK slot
                detail["ack_slot_bit"] = info["map"].ack_slot
                detail["deadline_bound_bit"] = verdict.deadline_bit
                tx_name = info["node"]
            self._record("frame_killed", tx_name or node.name, detail)
            node.plan = None
            node.plan_verdict = None


def build_bus(config: BusConfig) -> Bus:
    """Create a bus with every node error-active and counters at zero."""
    return Bus(config)


def step_bit(bus: Bus) -> tuple[Bus, list[TraceRecord]]:
    records = bus.step_bit()
    return bus, records


def reset_node(bus: Bus, name: str) -> Bus:
    """Model the paper's hardware reset: the only way back from bus-off."""
    node = bus.node(name)
    node.reset()
    bus._record(
        "state_change",
        name,
        {"tec": 0, "rec": 0, "mode": ERROR_ACTIVE, "prev_mode": BUS_OFF, "cause": "reset"},
    )
    return bus


def run_until(bus: Bus, until_us: Optional[int] = None, predicate=None,
              max_bits: int = 10_000_000) -> tuple[Bus, Trace]:
    """Advance bit by bit until the stop time or a trace predicate fires."""
    limit = until_us
    if limit is None:
        limit = bus.config.max_time_us
    if limit is None and predicate is None:
        raise ValueError("need a stop time or a predicate")
    for _ in range(max_bits):
        if limit is not None and bus.time_us >= limit:
            break
        records = bus.step_bit()
        if predicate is not None and any(predicate(r) for r in records):
            break
    return bus, bus.trace


def attach_rbt_node(bus: Bus, rules: RuleSet, name: str = "rbt") -> Bus:
    if any(isinstance(n, _RbtNode) for n in bus.nodes):
        raise DuplicateRbt("bus already has an rbt node")
    spec = NodeSpec(name=name, role=ROLE_RBT, rules=rules)
    bus.nodes.append(_RbtNode(spec))
    return bus
