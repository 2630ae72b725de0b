"""Deterministic bit-time CAN bus simulator with a rule-based transceiver
firewall, attack harness, metrics, and a live monitoring gateway."""

from ._kernels import BACKEND
from .attacks import AttackSpec, fuzz_attacker, replay_attacker, spoof_attacker
from .bus import (
    BusConfig,
    NodeSpec,
    NodeState,
    PeriodicSource,
    QueuedFrame,
    Trace,
    TraceRecord,
    build_bus,
    fault_confinement_update,
    reset_node,
    run_until,
    step_bit,
)
from .codec import (
    DOMINANT,
    EXTENDED,
    RECESSIVE,
    STANDARD,
    FieldMap,
    Frame,
    FrameId,
    crc15,
    decode_frame,
    destuff,
    encode_frame,
    error_frame_bits,
    stuff,
)
from .errors import (
    BindError,
    CanSimError,
    ConfigError,
    CrcMismatch,
    DeadlineMiss,
    DuplicateRbt,
    EmptySlice,
    EmptyWindow,
    FormError,
    StuffViolation,
    UnknownNode,
)
from .metrics import (
    ScenarioSummary,
    busload,
    export_csv,
    export_log,
    parse_csv,
    payload_overhead_comparison,
    summarize,
)
from .rbt import (
    FieldEvent,
    InjectionPlan,
    ParserState,
    RuleSet,
    SlackReport,
    Verdict,
    classify,
    injection_plan,
    observe_bit,
    rbt_attach,
    slack_report,
)
from .scenario import ScenarioConfig, build_scenario, load_scenario, run_scenario

__version__ = "0.1.0"
