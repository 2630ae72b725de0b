"""CAN 2.0 frame serialization: field layout, bit stuffing, CRC-15, error flags.

Frame layout (standard, 11-bit ID)::

    SOF | ID(11) | RTR | IDE | R0 | DLC(4) | DATA(0-64) | CRC(15) |
    CRC_DEL | ACK_SLOT | ACK_DEL | EOF(7)

Extended (29-bit) frames replace the arbitration/control prefix with::

    SOF | ID(11 base) | SRR | IDE | ID_EXT(18) | RTR | R1 | R0 | DLC(4) | ...

Bits are bus levels: 0 = dominant, 1 = recessive (dominant wins on the
wire). Stuffing applies from SOF through the end of the CRC sequence; the
CRC delimiter onward is fixed-form and transmitted unstuffed. A BitSeq is
a numpy uint8 array of levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._kernels import crc15_kernel, destuff_kernel, stuff_kernel
from .errors import CrcMismatch, FormError, StuffViolation

DOMINANT = 0
RECESSIVE = 1

STANDARD = "standard"
EXTENDED = "extended"

ACTIVE_FLAG_BITS = 6
ERROR_DELIMITER_BITS = 8
EOF_BITS = 7
IFS_BITS = 3  # interframe space (intermission)

# Physical-layer annotation strings; simulation is purely logical.
DOMINANT_VOLTAGE = "CANH 3.5V / CANL 1.5V"
RECESSIVE_VOLTAGE = "both 2.5V"


def bitseq(bits) -> np.ndarray:
    """Coerce any 0/1 iterable into a BitSeq (uint8 array)."""
    return np.asarray(bits, dtype=np.uint8)


def int_to_bits(value: int, width: int) -> list[int]:
    return [(value >> (width - 1 - i)) & 1 for i in range(width)]


def bits_to_int(bits) -> int:
    out = 0
    for b in bits:
        out = (out << 1) | int(b)
    return out


@dataclass(frozen=True)
class FrameId:
    value: int
    kind: str = STANDARD

    def __post_init__(self):
        if self.kind not in (STANDARD, EXTENDED):
            raise ValueError(f"unknown id kind {self.kind!r}")
        limit = 1 << (11 if self.kind == STANDARD else 29)
        if not 0 <= self.value < limit:
            raise ValueError(f"id 0x{self.value:X} out of range for {self.kind}")


@dataclass(frozen=True)
class Frame:
    id: FrameId
    rtr: bool = False
    dlc: int = 0
    data: bytes = b""

    def __post_init__(self):
        if not 0 <= self.dlc <= 8:
            raise ValueError(f"dlc {self.dlc} out of range")
        if self.rtr:
            if self.data:
                raise ValueError("remote frame carries no data")
        elif len(self.data) != self.dlc:
            raise ValueError(f"data length {len(self.data)} != dlc {self.dlc}")


@dataclass(frozen=True)
class FieldMap:
    """Field name -> (start index, bit length) over the stuffed stream.

    Stuff bits are attributed to the field of the raw bit they follow, so
    the ranges tile the stream exactly.
    """

    ranges: dict[str, tuple[int, int]] = field(default_factory=dict)

    def start(self, name: str) -> int:
        return self.ranges[name][0]

    def end(self, name: str) -> int:
        """Index one past the field's last bit."""
        start, length = self.ranges[name]
        return start + length

    @property
    def total_bits(self) -> int:
        return sum(length for _, length in self.ranges.values())

    @property
    def ack_slot(self) -> int:
        return self.start("ACK_SLOT")

    def arbitration_span(self) -> tuple[int, int]:
        """Stuffed (start, end) of the arbitration region, ID through RTR."""
        return self.start("ID"), self.end("RTR")


def crc15(payload) -> int:
    """CRC-15 remainder under the CAN polynomial 0x4599, initial value 0."""
    return int(crc15_kernel(bitseq(payload)))


def stuff(raw) -> np.ndarray:
    """Insert a complement bit after every run of 5 equal bits."""
    out, m = stuff_kernel(bitseq(raw))
    return out[:m].copy()


def destuff(stuffed) -> np.ndarray:
    """Inverse of stuff.

    Raises StuffViolation when six equal bits appear in a row (an error
    flag, or corruption).
    """
    out, m, violation = destuff_kernel(bitseq(stuffed))
    if violation >= 0:
        raise StuffViolation(violation)
    return out[:m].copy()


def _raw_fields(frame: Frame) -> list[tuple[str, list[int]]]:
    rtr_bit = 1 if frame.rtr else 0
    if frame.id.kind == STANDARD:
        fields = [
            ("SOF", [DOMINANT]),
            ("ID", int_to_bits(frame.id.value, 11)),
            ("RTR", [rtr_bit]),
            ("IDE", [DOMINANT]),
            ("R0", [DOMINANT]),
        ]
    else:
        base = frame.id.value >> 18
        ext = frame.id.value & ((1 << 18) - 1)
        fields = [
            ("SOF", [DOMINANT]),
            ("ID", int_to_bits(base, 11)),
            ("SRR", [RECESSIVE]),
            ("IDE", [RECESSIVE]),
            ("ID_EXT", int_to_bits(ext, 18)),
            ("RTR", [rtr_bit]),
            ("R1", [DOMINANT]),
            ("R0", [DOMINANT]),
        ]
    fields.append(("DLC", int_to_bits(frame.dlc, 4)))
    data_bits: list[int] = []
    for byte in frame.data:
        data_bits.extend(int_to_bits(byte, 8))
    fields.append(("DATA", data_bits))
    return fields


def encode_frame(frame: Frame) -> tuple[np.ndarray, FieldMap]:
    """Serialize a frame to its stuffed wire bits plus a FieldMap."""
    fields = _raw_fields(frame)
    raw = [b for _, bits in fields for b in bits]
    crc = crc15(raw)
    fields.append(("CRC", int_to_bits(crc, 15)))

    # Stuff while carrying field labels; a stuff bit inherits the label of
    # the raw bit it follows.
    labeled = [(b, name) for name, bits in fields for b in bits]
    out_bits: list[int] = []
    out_labels: list[str] = []
    run_level = -1
    run_len = 0
    for b, label in labeled:
        out_bits.append(b)
        out_labels.append(label)
        if b == run_level:
            run_len += 1
        else:
            run_level = b
            run_len = 1
        if run_len == 5:
            comp = 1 - b
            out_bits.append(comp)
            out_labels.append(label)
            run_level = comp
            run_len = 1

    tail = [
        ("CRC_DEL", [RECESSIVE]),
        ("ACK_SLOT", [RECESSIVE]),
        ("ACK_DEL", [RECESSIVE]),
        ("EOF", [RECESSIVE] * EOF_BITS),
    ]
    for name, bits in tail:
        out_bits.extend(bits)
        out_labels.extend(name for _ in bits)

    ranges: dict[str, tuple[int, int]] = {}
    for i, label in enumerate(out_labels):
        if label not in ranges:
            ranges[label] = (i, 1)
        else:
            start, length = ranges[label]
            ranges[label] = (start, length + 1)

    return np.array(out_bits, dtype=np.uint8), FieldMap(ranges)


class _FrameReader:
    """Index walk over a complete stuffed frame, destuffing as it goes."""

    def __init__(self, bits: np.ndarray):
        self.bits = bits
        self.pos = 0
        self.run_level = -1
        self.run_len = 0
        self.collected: list[int] = []

    def next_destuffed(self) -> int:
        while True:
            if self.pos >= len(self.bits):
                raise FormError("truncated frame")
            b = int(self.bits[self.pos])
            if self.run_len == 5:
                if b == self.run_level:
                    raise StuffViolation(self.pos)
                # drop the stuff bit; it starts a new run on the wire
                self.run_level = b
                self.run_len = 1
                self.pos += 1
                continue
            self.pos += 1
            if b == self.run_level:
                self.run_len += 1
            else:
                self.run_level = b
                self.run_len = 1
            self.collected.append(b)
            return b

    def take(self, count: int) -> list[int]:
        return [self.next_destuffed() for _ in range(count)]

    def skip_trailing_stuff(self):
        """Consume the stuff bit owed after the final CRC bit, if any."""
        if self.run_len == 5 and self.pos < len(self.bits):
            if int(self.bits[self.pos]) == self.run_level:
                raise StuffViolation(self.pos)
            self.pos += 1

    def next_fixed(self, name: str) -> int:
        if self.pos >= len(self.bits):
            raise FormError(f"truncated frame at {name}")
        b = int(self.bits[self.pos])
        self.pos += 1
        return b


def decode_frame(bits) -> Frame:
    """Parse a complete stuffed frame back into a Frame.

    Raises StuffViolation, FormError (bad fixed-form bit or length), or
    CrcMismatch. The ACK slot value is ignored: the decoder accepts both
    an acknowledged and an unacknowledged frame.
    """
    reader = _FrameReader(bitseq(bits))
    if reader.next_destuffed() != DOMINANT:
        raise FormError("frame does not start with a dominant SOF")

    base = bits_to_int(reader.take(11))
    first_flag = reader.next_destuffed()  # RTR (standard) or SRR (extended)
    ide = reader.next_destuffed()
    if ide == DOMINANT:
        frame_id = FrameId(base, STANDARD)
        rtr = first_flag == RECESSIVE
        reader.next_destuffed()  # R0
    else:
        ext = bits_to_int(reader.take(18))
        frame_id = FrameId((base << 18) | ext, EXTENDED)
        rtr = reader.next_destuffed() == RECESSIVE
        reader.take(2)  # R1, R0
    dlc_raw = bits_to_int(reader.take(4))
    dlc = min(dlc_raw, 8)

    data = b""
    if not rtr:
        data_bits = reader.take(8 * dlc)
        data = bytes(bits_to_int(data_bits[i : i + 8]) for i in range(0, len(data_bits), 8))

    crc_region = list(reader.collected)
    received_crc = bits_to_int(reader.take(15))
    computed_crc = crc15(crc_region)
    if computed_crc != received_crc:
        raise CrcMismatch(computed_crc, received_crc)
    reader.skip_trailing_stuff()

    if reader.next_fixed("CRC_DEL") != RECESSIVE:
        raise FormError("CRC delimiter not recessive")
    reader.next_fixed("ACK_SLOT")
    if reader.next_fixed("ACK_DEL") != RECESSIVE:
        raise FormError("ACK delimiter not recessive")
    for i in range(EOF_BITS):
        if reader.next_fixed("EOF") != RECESSIVE:
            raise FormError(f"EOF bit {i} not recessive")
    if reader.pos != len(reader.bits):
        raise FormError("trailing bits after EOF")

    return Frame(id=frame_id, rtr=rtr, dlc=dlc, data=data)


def error_frame_bits(mode: str = "active") -> np.ndarray:
    """Error flag plus delimiter: 6 dominant (active) or 6 recessive
    (passive) bits followed by 8 recessive delimiter bits."""
    if mode == "active":
        flag = [DOMINANT] * ACTIVE_FLAG_BITS
    elif mode == "passive":
        flag = [RECESSIVE] * ACTIVE_FLAG_BITS
    else:
        raise ValueError(f"unknown error flag mode {mode!r}")
    return bitseq(flag + [RECESSIVE] * ERROR_DELIMITER_BITS)
