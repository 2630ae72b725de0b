"""Independent reference implementations the real code is checked against.

These deliberately avoid the package's kernels and state machines: the CRC
oracle is plain polynomial long division, the stuffing oracle a direct
transcription of the five-equal-bits rule, and the fault oracle a dict
shuffle. They stay separate from the paths they judge.
"""

# x^15 + x^14 + x^10 + x^8 + x^7 + x^4 + x^3 + 1, coefficients x^15..x^0
CRC15_POLY_BITS = [1, 1, 0, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 0, 1]


def crc15_longdiv(bits) -> int:
    """CRC-15 by long division of the message (times x^15) by the generator."""
    work = [int(b) for b in bits] + [0] * 15
    for i in range(len(work) - 15):
        if work[i]:
            for j, p in enumerate(CRC15_POLY_BITS):
                work[i + j] ^= p
    remainder = 0
    for b in work[-15:]:
        remainder = (remainder << 1) | b
    return remainder


def stuff_oracle(bits):
    """Bit stuffing straight from the rule: after five equal bits (stuff
    bits included), insert the complement."""
    out = []
    for b in bits:
        out.append(int(b))
        if len(out) >= 5 and len(set(out[-5:])) == 1:
            out.append(1 - out[-1])
    return out


def destuff_oracle(bits):
    """Returns (destuffed, violation_index); violation_index None if clean.

    After five equal wire bits the next bit must differ and is discarded;
    a sixth equal bit is a violation. A discarded bit starts a new run."""
    out = []
    prev = None
    run = 0
    for i, b in enumerate(int(x) for x in bits):
        if run == 5:
            if b == prev:
                return out, i
            prev, run = b, 1
            continue
        out.append(b)
        if b == prev:
            run += 1
        else:
            prev, run = b, 1
    return out, None


def fault_oracle(state: dict, event: str) -> dict:
    """Counter oracle for the fault confinement arithmetic."""
    tec, rec, mode = state["tec"], state["rec"], state["mode"]
    tec += {"tx_error": 8, "tx_success": -1}.get(event, 0)
    rec += {"rx_error": 1, "rx_success": -1}.get(event, 0)
    tec = max(tec, 0)
    rec = max(rec, 0)
    if mode == "bus_off" or tec > 255:
        mode = "bus_off"
    elif tec >= 128 or rec >= 128:
        mode = "error_passive"
    else:
        mode = "error_active"
    return {"tec": tec, "rec": rec, "mode": mode}
