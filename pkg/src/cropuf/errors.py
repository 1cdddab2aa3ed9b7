"""Exception hierarchy shared by the simulator, extraction, key-sharing and protocol layers."""


class CroPufError(Exception):
    """Base class for all package errors."""


class ParameterError(CroPufError, ValueError):
    """Invalid simulation parameters or malformed domain object."""


class DimensionError(CroPufError, ValueError):
    """A path, challenge or model does not fit the device dimensions."""


class EnvironmentRangeError(CroPufError):
    """Temperature drives an effective inverter delay to zero or below."""


class FuseBurnedError(CroPufError):
    """The counter read-out interface has been destroyed."""


class CounterError(CroPufError):
    """Counter noise kept producing non-positive readings."""


class InfeasiblePairError(CroPufError):
    """Two paths share an inverter and cannot run in one configuration."""


class UnderdeterminedError(CroPufError):
    """Readings do not pin the delay model beyond its column-shift freedom."""


class DataError(CroPufError, ValueError):
    """Non-finite or otherwise unusable measurement data."""


class KeyUnsatisfiableError(CroPufError):
    """No challenge satisfying the threshold was found for a key bit."""

    def __init__(self, bit_index: int, attempts: int):
        super().__init__(f"no challenge found for key bit {bit_index} after {attempts} attempts")
        self.bit_index = bit_index
        self.attempts = attempts


class ProtocolError(CroPufError):
    """Protocol-level failure; ``code`` mirrors the ERROR message code."""

    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class FrameError(ProtocolError):
    def __init__(self, detail: str):
        super().__init__("bad_frame", detail)
