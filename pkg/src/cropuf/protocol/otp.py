"""One-time-pad messaging with a PUF-derived shared key."""

from __future__ import annotations

import numpy as np

from ..errors import ParameterError
from ..keyshare import SharedKey


def _pad(key: SharedKey, nbytes: int) -> np.ndarray:
    if len(key) < 8 * nbytes:
        raise ParameterError(f"key has {len(key)} bits, message needs {8 * nbytes}")
    return np.packbits(np.array(key.bits[: 8 * nbytes], dtype=np.uint8))


def xor_encrypt(key: SharedKey, message: bytes) -> bytes:
    """``message XOR key`` over the first ``8 * len(message)`` key bits (MSB first).

    The key must be at least as long as the message; it is never repeated.
    """
    data = np.frombuffer(bytes(message), dtype=np.uint8)
    return (data ^ _pad(key, len(data))).tobytes()


xor_decrypt = xor_encrypt


def bits_to_bytes(bits: str) -> bytes:
    if not bits or len(bits) % 8 or set(bits) - {"0", "1"}:
        raise ParameterError("bit string must be a nonempty multiple of 8 binary digits")
    return int(bits, 2).to_bytes(len(bits) // 8, "big")


def bytes_to_bits(data: bytes) -> str:
    return "".join(f"{b:08b}" for b in data)
