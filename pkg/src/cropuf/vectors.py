"""Published reference vectors and the regression check behind ``cropuf selftest``.

The 4x4 matrices are the worked example used to introduce the crossover
structure; they have an even stage count and only serve as arithmetic vectors.
Loop pairs are given 1-based, as in their original presentation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .keyshare import CosReport, SharedKey
from .protocol.otp import bits_to_bytes, bytes_to_bits, xor_decrypt, xor_encrypt
from .puf import Challenge, EnvCondition, PufInstance, StageConfig, loop_rows, respond

MATRIX_A = ((3, 6, 8, 5), (9, 7, 4, 5), (5, 4, 6, 5), (2, 5, 6, 3))
MATRIX_B = ((2, 4, 6, 5), (5, 1, 3, 2), (8, 6, 5, 7), (3, 6, 4, 5))
# Crossings that turn B's straight rows into the loops with sums {17, 21, 19, 15}.
ADJUSTED_B_CROSSINGS = ((0, 2, 1, 3), (0, 2, 1, 3), (0, 2, 3, 1))
ADJUSTED_B_LOOP_SUMS = (17, 21, 19, 15)

PAIRS_A_FIRST = ((1, 2), (2, 3), (3, 4))
PAIRS_B_FIRST = ((1, 3), (3, 4), (4, 2))
RESPONSES_FIRST = (0, 1, 1)
PAIRS_A_SECOND = ((4, 2), (2, 3), (3, 1))
PAIRS_B_SECOND = ((1, 2), (2, 4), (4, 3))
RESPONSES_SECOND = (0, 1, 0)

XOR_MESSAGE = "10100101"
XOR_KEY = "01101001"
XOR_CIPHERTEXT = "11001100"

CRP_COUNT_EXAMPLE = 10_368
COS_EXAMPLE_RELIABLE = 5_184


def straight(n: int, m: int) -> StageConfig:
    return StageConfig.identity(n, m)


def adjusted_b() -> StageConfig:
    return StageConfig(ADJUSTED_B_CROSSINGS)


def responses(device: PufInstance, config: StageConfig, pairs_1based) -> tuple[int, ...]:
    env = EnvCondition(device.params.temp_ref)
    return tuple(respond(device, Challenge(config, (a - 1, b - 1)), env) for a, b in pairs_1based)


def example_devices() -> tuple[PufInstance, PufInstance]:
    """Noise-free devices holding matrices A and B."""
    a = PufInstance.from_matrix(MATRIX_A, jitter_sigma_rel=0.0, sigma_process=0.0, nominal_delay=5.0)
    b = PufInstance.from_matrix(MATRIX_B, jitter_sigma_rel=0.0, sigma_process=0.0, nominal_delay=5.0)
    return a, b


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    detail: str


def run_selftest() -> list[Check]:
    a, b = example_devices()
    out = []

    def check(name, got, want):
        out.append(Check(name, got == want, f"got {got}, expected {want}"))

    b_values = np.array(MATRIX_B, dtype=float)
    sums = tuple(int(v) for v in b_values[loop_rows(adjusted_b()), np.arange(4)].sum(axis=1))
    check("adjusted B loop sums", sums, ADJUSTED_B_LOOP_SUMS)
    check("A, first challenge set", responses(a, straight(4, 4), PAIRS_A_FIRST), RESPONSES_FIRST)
    check("B, first challenge set", responses(b, straight(4, 4), PAIRS_B_FIRST), RESPONSES_FIRST)
    check("A, second challenge set", responses(a, straight(4, 4), PAIRS_A_SECOND), RESPONSES_SECOND)
    check("adjusted B, second challenge set", responses(b, adjusted_b(), PAIRS_B_SECOND), RESPONSES_SECOND)

    key = SharedKey.parse(XOR_KEY)
    cipher = xor_encrypt(key, bits_to_bytes(XOR_MESSAGE))
    check("XOR encrypt", bytes_to_bits(cipher), XOR_CIPHERTEXT)
    check("XOR decrypt", bytes_to_bits(xor_decrypt(key, cipher)), XOR_MESSAGE)

    half = CosReport(COS_EXAMPLE_RELIABLE, CRP_COUNT_EXAMPLE)
    check("COS of 5184 / 10368", half.cos, 0.5)
    return out
