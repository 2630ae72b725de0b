"""Scenario files: JSON schema, validation, and bus construction.

A scenario describes the bus (bitrate, nodes and their traffic), the
firewall ruleset, attacks, and the run duration. IDs are hex strings
("0x199") or integers; extended 29-bit ids carry ``"extended": true``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import jsonschema

from .attacks import AttackSpec, ScheduleSource
from .bus import (
    Bus,
    BusConfig,
    CompositeSource,
    NodeSpec,
    PeriodicSource,
    QueuedFrame,
    build_bus,
    run_until,
)
from .codec import EXTENDED, Frame, FrameId, STANDARD
from .errors import ConfigError
from .rbt import AFTER_ID, DECISION_POINTS, RuleSet, as_fraction
from . import bus as bus_mod

_ID = {"anyOf": [{"type": "string", "pattern": "^(0[xX])?[0-9a-fA-F]+$"}, {"type": "integer"}]}

_TX_ENTRY = {
    "type": "object",
    "required": ["id"],
    "additionalProperties": False,
    "properties": {
        "id": _ID,
        "extended": {"type": "boolean"},
        "rtr": {"type": "boolean"},
        "name": {"type": "string"},
        "dlc": {"type": "integer", "minimum": 0, "maximum": 8},
        "data": {"type": "string", "pattern": "^([0-9a-fA-F]{2})*$"},
        "time_us": {"type": "integer", "minimum": 0},
        "period_us": {"type": "integer", "minimum": 0},
        "count": {"type": "integer", "minimum": 1},
    },
}

_NODE = {
    "type": "object",
    "required": ["name"],
    "additionalProperties": False,
    "properties": {
        "name": {"type": "string", "minLength": 1},
        "role": {"enum": ["sender", "receiver", "attacker"]},
        "registered_ids": {"type": "array", "items": _ID},
        "tx": {"type": "array", "items": _TX_ENTRY},
    },
}

_ATTACK = {
    "type": "object",
    "required": ["node", "kind"],
    "additionalProperties": False,
    "properties": {
        "node": {"type": "string"},
        "kind": {"enum": ["spoof", "fuzz", "replay"]},
        "start_time_us": {"type": "integer", "minimum": 0},
        "id": _ID,
        "dlc": {"type": "integer", "minimum": 0, "maximum": 8},
        "data": {"type": "string", "pattern": "^([0-9a-fA-F]{2})*$"},
        "period_us": {"type": "integer", "minimum": 0},
        "seed": {"type": "integer", "minimum": 0},
        "frames_per_second": {"type": "integer", "minimum": 1},
        "id_range": {
            "type": "array",
            "items": _ID,
            "minItems": 2,
            "maxItems": 2,
        },
        "frames": {"type": "array", "items": _TX_ENTRY},
        "name": {"type": "string"},
    },
}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["bus", "duration_us"],
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "duration_us": {"type": "integer", "minimum": 1},
        "tx_node": {"type": "string"},
        "trace_bits": {"type": "boolean"},
        "bus": {
            "type": "object",
            "required": ["bitrate", "nodes"],
            "additionalProperties": False,
            "properties": {
                "bitrate": {"type": "integer", "minimum": 1},
                "channel": {"type": "string"},
                "nodes": {"type": "array", "items": _NODE},
            },
        },
        "rules": {
            "type": "object",
            "required": ["registered_ids"],
            "additionalProperties": False,
            "properties": {
                "registered_ids": {"type": "array", "items": _ID},
                "decision_point": {"enum": list(DECISION_POINTS)},
                "processing_budget_us": {"type": "number", "minimum": 0},
                "attach": {"type": "boolean"},
            },
        },
        "attacks": {"type": "array", "items": _ATTACK},
    },
}

SCENARIO_DIR = Path(__file__).parent / "scenarios"


def parse_id(value, extended: bool = False) -> FrameId:
    if isinstance(value, str):
        value = int(value, 16)
    return FrameId(value, EXTENDED if extended else STANDARD)


@dataclass
class ScenarioConfig:
    bus: BusConfig
    rules: Optional[RuleSet]
    attach_rbt: bool
    duration_us: int
    seed: int
    tx_node: Optional[str]
    doc: dict


def validate_scenario(doc: dict) -> list[str]:
    """Schema diagnostics, one line per problem, empty when valid."""
    validator = jsonschema.Draft202012Validator(SCHEMA)
    errors = []
    for err in sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path)):
        where = "/".join(str(p) for p in err.absolute_path) or "<root>"
        errors.append(f"{where}: {err.message}")
    return errors


def _tx_frame(entry: dict) -> tuple[Frame, str]:
    frame = Frame(
        parse_id(entry["id"], entry.get("extended", False)),
        rtr=entry.get("rtr", False),
        dlc=entry.get("dlc", 0),
        data=bytes.fromhex(entry.get("data", "")),
    )
    return frame, entry.get("name", "")


def _node_sources(entries: list) -> tuple[list, object]:
    queue: list[QueuedFrame] = []
    sources = []
    for entry in entries:
        frame, name = _tx_frame(entry)
        start = entry.get("time_us", 0)
        if "period_us" in entry:
            sources.append(
                PeriodicSource(frame, name, start, entry["period_us"], entry.get("count"))
            )
        else:
            queue.append(QueuedFrame(frame, name, start))
    behavior = None
    if len(sources) == 1:
        behavior = sources[0]
    elif sources:
        behavior = CompositeSource(sources)
    return queue, behavior


def build_scenario(doc: dict) -> ScenarioConfig:
    errors = validate_scenario(doc)
    if errors:
        raise ConfigError("; ".join(errors))

    seed = doc.get("seed", 0)
    bus_doc = doc["bus"]
    attack_docs = doc.get("attacks", [])
    attacked = {a["node"] for a in attack_docs}

    specs = []
    for node_doc in bus_doc["nodes"]:
        queue, behavior = _node_sources(node_doc.get("tx", []))
        role = node_doc.get("role", "receiver")
        name = node_doc["name"]
        if name in attacked:
            role = "attacker"
            if behavior is not None or queue:
                raise ConfigError(f"attack node {name} cannot also have scripted tx")
        registered = frozenset(parse_id(i) for i in node_doc.get("registered_ids", []))
        specs.append(
            NodeSpec(name=name, role=role, tx_queue=queue,
                     registered_ids=registered, behavior=behavior)
        )

    names = {spec.name for spec in specs}
    for attack in attack_docs:
        if attack["node"] not in names:
            raise ConfigError(f"attack references unknown node {attack['node']!r}")

    for attack in attack_docs:
        spec = next(s for s in specs if s.name == attack["node"])
        spec.behavior = _attack_behavior(attack, seed)

    rules = None
    attach = False
    if "rules" in doc:
        rules_doc = doc["rules"]
        registered = frozenset(parse_id(i) for i in rules_doc["registered_ids"])
        rules = RuleSet(
            registered_ids=registered,
            decision_point=rules_doc.get("decision_point", AFTER_ID),
            processing_budget_us=as_fraction(rules_doc.get("processing_budget_us", 0)),
        )
        attach = rules_doc.get("attach", True)

    config = BusConfig(
        bitrate=bus_doc["bitrate"],
        nodes=specs,
        seed=seed,
        max_time_us=doc["duration_us"],
        channel=bus_doc.get("channel", "CAN1"),
        trace_bits=doc.get("trace_bits", False),
    )
    return ScenarioConfig(
        bus=config,
        rules=rules,
        attach_rbt=attach,
        duration_us=doc["duration_us"],
        seed=seed,
        tx_node=doc.get("tx_node"),
        doc=doc,
    )


def _attack_behavior(attack: dict, default_seed: int):
    kind = attack["kind"]
    start = attack.get("start_time_us", 0)
    if kind == "replay":
        entries = []
        for entry in attack.get("frames", []):
            frame, name = _tx_frame(entry)
            entries.append((start + entry.get("time_us", 0), QueuedFrame(frame, name)))
        if not entries:
            raise ConfigError("replay attack needs a frames list")
        return ScheduleSource(entries)
    spec = AttackSpec(
        kind=kind,
        id_value=parse_id(attack["id"]).value if "id" in attack else None,
        dlc=attack.get("dlc", 0),
        data=bytes.fromhex(attack.get("data", "")),
        period_us=attack.get("period_us", 0),
        seed=attack.get("seed"),
        frames_per_second=attack.get("frames_per_second", 10),
        id_range=tuple(parse_id(v).value for v in attack.get("id_range", (0, 0x7FF))),
        name=attack.get("name", ""),
    )
    return spec.to_behavior(start, default_seed)


def load_scenario(path) -> ScenarioConfig:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    return build_scenario(doc)


def bundled_scenario_path(name: str) -> Path:
    return SCENARIO_DIR / f"{name}.json"


def run_scenario(config: ScenarioConfig, with_rbt: Optional[bool] = None,
                 rbt_name: str = "rbt"):
    """Build a fresh bus from the scenario and run it to its duration.

    with_rbt overrides the scenario's own attach flag, which is how the
    paired with/without comparison runs."""
    # behaviors hold mutable progress, so rebuild them for every run
    fresh = build_scenario(config.doc)
    bus = build_bus(fresh.bus)
    attach = fresh.attach_rbt if with_rbt is None else with_rbt
    if attach:
        if fresh.rules is None:
            raise ConfigError("scenario has no ruleset to attach")
        bus_mod.attach_rbt_node(bus, fresh.rules, rbt_name)
    bus, trace = run_until(bus, until_us=fresh.duration_us)
    return bus, trace
