"""Exception types shared across the simulator."""


class CanSimError(Exception):
    """Base class for all cansim errors."""


class StuffViolation(CanSimError):
    """Six consecutive equal bits on the wire (error flag or corruption)."""

    def __init__(self, index: int, message: str = ""):
        self.index = index
        super().__init__(message or f"stuff violation at bit {index}")


class FormError(CanSimError):
    """A fixed-form bit (CRC delimiter, ACK delimiter, EOF) was dominant,
    or the frame had the wrong length."""


class CrcMismatch(CanSimError):
    """Computed CRC-15 disagrees with the received CRC field."""

    def __init__(self, computed: int, received: int):
        self.computed = computed
        self.received = received
        super().__init__(f"crc mismatch: computed 0x{computed:04x}, received 0x{received:04x}")


class ConfigError(CanSimError):
    """Invalid bus or scenario configuration."""


class UnknownNode(CanSimError):
    """Named node does not exist on the bus."""


class DuplicateRbt(CanSimError):
    """The bus already carries a rule-based transceiver node."""


class DeadlineMiss(CanSimError):
    """The error flag cannot start before the ACK slot with this budget."""


class EmptySlice(CanSimError):
    """Replay source contains no frame transmissions."""


class EmptyWindow(CanSimError):
    """Busload window is empty or outside the trace span."""


class BindError(CanSimError):
    """Gateway could not bind its listening port."""
