"""Crossover ring-oscillator PUF simulator.

A device is an ``n x m`` grid of inverter delays: ``n`` rows (ring oscillators)
and ``m`` stages.  Between consecutive stages an interstage crossing permutes the
rows, so every oscillation loop picks one inverter per stage.  A loop is
described by its row sequence (:class:`PathConfig`); its delay is the sum of the
selected inverter delays, and the counter attached to it reads
``window / delay``.

Scalar operations (``path_delay``, ``respond``...) mirror the device interface
one call at a time.  The ``*_many`` / array helpers at the bottom evaluate whole
path or pair sets at once and are what the extraction and key-sharing layers
use for anything larger than a handful of challenges.
"""

from __future__ import annotations

import itertools
import math
import threading
from dataclasses import asdict, dataclass, field, fields
from functools import lru_cache
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    CounterError,
    DimensionError,
    EnvironmentRangeError,
    FuseBurnedError,
    InfeasiblePairError,
    ParameterError,
)

MAX_COUNTER_RETRIES = 16


@dataclass(frozen=True)
class PufParams:
    n: int = 4
    m: int = 5
    nominal_delay: float = 100.0
    sigma_process: float = 5.0
    temp_ref: float = 25.0
    temp_coeff_mean: float = 0.0
    temp_coeff_sigma: float = 2e-4
    jitter_sigma_rel: float = 1e-3
    counter_window: float = 1.0
    seed: int = 0
    # Constant routing delay per interstage crossing; identical for every loop.
    crossing_delay: float = 0.0
    integer_counts: bool = False

    def validate(self) -> "PufParams":
        """Check the oscillation and sampling constraints; returns ``self``."""
        if self.n < 3:
            raise ParameterError(f"n must be >= 3, got {self.n}")
        if self.m < 5 or self.m % 2 == 0:
            raise ParameterError(f"m must be odd and >= 5, got {self.m}")
        self.validate_physics()
        return self

    def validate_physics(self) -> "PufParams":
        for name in ("sigma_process", "temp_coeff_sigma", "jitter_sigma_rel", "crossing_delay"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be >= 0")
        if self.nominal_delay <= 0:
            raise ParameterError("nominal_delay must be > 0")
        if self.nominal_delay <= 3 * self.sigma_process:
            raise ParameterError("nominal_delay must exceed 3 * sigma_process")
        if self.counter_window <= 0:
            raise ParameterError("counter_window must be > 0")
        if not math.isfinite(self.temp_ref):
            raise ParameterError("temp_ref must be finite")
        return self

    def replace(self, **changes) -> "PufParams":
        return PufParams(**{**asdict(self), **changes})

    @classmethod
    def from_dict(cls, data: dict) -> "PufParams":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ParameterError(f"unknown parameter(s): {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class EnvCondition:
    temperature: float = 25.0

    def __post_init__(self):
        if not math.isfinite(self.temperature):
            raise ParameterError("temperature must be finite")


@dataclass(frozen=True, eq=False)
class DelayMatrix:
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        if arr.ndim != 2:
            raise ParameterError("delay matrix must be two-dimensional")
        if not np.all(np.isfinite(arr)) or np.any(arr <= 0):
            raise ParameterError("every delay must be finite and strictly positive")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        return isinstance(other, DelayMatrix) and np.array_equal(self.values, other.values)

    def row_sums(self) -> np.ndarray:
        return self.values.sum(axis=1)


@dataclass(eq=False)
class PufInstance:
    delays: DelayMatrix
    temp_coeffs: np.ndarray
    params: PufParams
    fuse_intact: bool = True
    _fuse_lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        coeffs = np.array(self.temp_coeffs, dtype=float)
        if coeffs.shape != self.delays.values.shape:
            raise ParameterError("temp_coeffs must match the delay matrix shape")
        coeffs.setflags(write=False)
        self.temp_coeffs = coeffs
        if (self.params.n, self.params.m) != (self.delays.n, self.delays.m):
            raise ParameterError("params dimensions disagree with the delay matrix")

    @property
    def n(self) -> int:
        return self.delays.n

    @property
    def m(self) -> int:
        return self.delays.m

    def burn_fuse(self) -> None:
        """Destroy the counter interface. Irreversible; burning twice is an error."""
        with self._fuse_lock:
            if not self.fuse_intact:
                raise FuseBurnedError("fuse already burned")
            self.fuse_intact = False

    @classmethod
    def from_matrix(cls, values, temp_coeffs=None, **param_overrides) -> "PufInstance":
        """Wrap an explicit delay matrix (any n x m, e.g. the 4x4 worked example)."""
        delays = DelayMatrix(values)
        params = PufParams(n=delays.n, m=delays.m, **param_overrides).validate_physics()
        if temp_coeffs is None:
            temp_coeffs = np.zeros_like(delays.values)
        return cls(delays, temp_coeffs, params)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "delays": self.delays.values.tolist(),
            "temp_coeffs": self.temp_coeffs.tolist(),
            "params": asdict(self.params),
            "fuse_intact": self.fuse_intact,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PufInstance":
        params = PufParams.from_dict(data["params"])
        puf = cls(DelayMatrix(data["delays"]), data["temp_coeffs"], params, bool(data["fuse_intact"]))
        if (puf.n, puf.m) != (data["n"], data["m"]):
            raise ParameterError("declared n, m disagree with the delay array")
        return puf


@dataclass(frozen=True)
class PathConfig:
    """One inverter per stage: ``rows[j]`` is the row used at stage ``j``."""

    rows: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "rows", tuple(int(r) for r in self.rows))

    def __len__(self):
        return len(self.rows)

    def check(self, n: int, m: int) -> "PathConfig":
        if len(self.rows) != m or any(not 0 <= r < n for r in self.rows):
            raise DimensionError(f"path {self.rows} is not valid for a {n}x{m} device")
        return self

    def routing_matrix(self, n: int) -> np.ndarray:
        """Binary selection matrix with one 1 per column."""
        c = np.zeros((n, len(self.rows)), dtype=int)
        c[list(self.rows), np.arange(len(self.rows))] = 1
        return c

    def to_str(self) -> str:
        return "-".join(str(r) for r in self.rows)

    @classmethod
    def parse(cls, text: str) -> "PathConfig":
        try:
            return cls(tuple(int(t) for t in text.strip().split("-")))
        except ValueError as exc:
            raise ParameterError(f"bad path {text!r}") from exc

    @classmethod
    def straight(cls, row: int, m: int) -> "PathConfig":
        return cls((row,) * m)


@dataclass(frozen=True)
class StageConfig:
    """Interstage crossings.

    ``perms[j][r]`` is the row entered at stage ``j + 1`` by the signal leaving row
    ``r`` of stage ``j``.  There is one crossing between each pair of consecutive
    stages; the return route from the last stage to the first is implied by the
    loop closing on its start row (see :meth:`closing_route`).
    """

    perms: tuple[tuple[int, ...], ...]

    def __post_init__(self):
        perms = tuple(tuple(int(x) for x in p) for p in self.perms)
        object.__setattr__(self, "perms", perms)
        if not perms:
            raise ParameterError("a stage configuration needs at least one crossing")
        n = len(perms[0])
        for j, p in enumerate(perms):
            if sorted(p) != list(range(n)):
                raise ParameterError(f"crossing {j} is not a permutation of 0..{n - 1}")

    @property
    def n(self) -> int:
        return len(self.perms[0])

    @property
    def m(self) -> int:
        return len(self.perms) + 1

    @classmethod
    def identity(cls, n: int, m: int) -> "StageConfig":
        return cls((tuple(range(n)),) * (m - 1))

    @classmethod
    def random(cls, n: int, m: int, rng: np.random.Generator) -> "StageConfig":
        return cls(tuple(tuple(rng.permutation(n).tolist()) for _ in range(m - 1)))

    def closing_route(self) -> tuple[int, ...]:
        """Permutation taking each loop's last-stage row back to its start row."""
        end = list(range(self.n))
        for p in self.perms:
            end = [p[r] for r in end]
        back = [0] * self.n
        for start, last in enumerate(end):
            back[last] = start
        return tuple(back)


@dataclass(frozen=True)
class Challenge:
    stage_config: StageConfig
    pair: tuple[int, int]

    def __post_init__(self):
        a, b = (int(x) for x in self.pair)
        object.__setattr__(self, "pair", (a, b))
        n = self.stage_config.n
        if a == b:
            raise ParameterError("challenge must compare two different loops")
        if not (0 <= a < n and 0 <= b < n):
            raise ParameterError(f"loop index out of range for n={n}")

    def to_dict(self) -> dict:
        return {"perms": [list(p) for p in self.stage_config.perms], "pair": list(self.pair)}

    @classmethod
    def from_dict(cls, data: dict) -> "Challenge":
        try:
            return cls(StageConfig(tuple(tuple(p) for p in data["perms"])), tuple(data["pair"]))
        except (KeyError, TypeError, IndexError) as exc:
            raise ParameterError(f"malformed challenge: {exc}") from exc

    def check(self, n: int, m: int) -> "Challenge":
        if (self.stage_config.n, self.stage_config.m) != (n, m):
            raise DimensionError(
                f"challenge is for {self.stage_config.n}x{self.stage_config.m}, device is {n}x{m}"
            )
        return self


@dataclass(frozen=True)
class CounterReading:
    path: PathConfig
    counts: float
    env: EnvCondition

    def __post_init__(self):
        if not self.counts > 0:
            raise ParameterError("counts must be positive")


def sample_puf(params: PufParams) -> PufInstance:
    """Draw a device: Gaussian per-inverter delays and temperature coefficients."""
    params.validate()
    rng = np.random.default_rng(params.seed)
    shape = (params.n, params.m)
    delays = rng.normal(params.nominal_delay, params.sigma_process, size=shape)
    # Rejection-resample the (vanishingly rare) non-positive draws.
    bad = delays <= 0
    while bad.any():
        delays[bad] = rng.normal(params.nominal_delay, params.sigma_process, size=int(bad.sum()))
        bad = delays <= 0
    coeffs = rng.normal(params.temp_coeff_mean, params.temp_coeff_sigma, size=shape)
    return PufInstance(DelayMatrix(delays), coeffs, params)


def effective_matrix(puf: PufInstance, env: EnvCondition) -> np.ndarray:
    """All inverter delays at ``env``; linear in temperature around ``temp_ref``."""
    dt = env.temperature - puf.params.temp_ref
    if dt == 0:
        return puf.delays.values
    eff = puf.delays.values * (1.0 + puf.temp_coeffs * dt)
    if np.any(eff <= 0):
        raise EnvironmentRangeError(f"temperature {env.temperature} gives non-positive delays")
    return eff


def effective_delay(puf: PufInstance, i: int, j: int, env: EnvCondition) -> float:
    if not (0 <= i < puf.n and 0 <= j < puf.m):
        raise DimensionError(f"inverter ({i}, {j}) outside {puf.n}x{puf.m}")
    d = float(puf.delays.values[i, j])
    dt = env.temperature - puf.params.temp_ref
    if dt == 0:
        return d
    eff = d * (1.0 + float(puf.temp_coeffs[i, j]) * dt)
    if eff <= 0:
        raise EnvironmentRangeError(f"temperature {env.temperature} gives delay {eff} at ({i}, {j})")
    return eff


def _routing_overhead(puf: PufInstance) -> float:
    return (puf.m - 1) * puf.params.crossing_delay


def path_delay(puf: PufInstance, path: PathConfig, env: EnvCondition) -> float:
    path.check(puf.n, puf.m)
    total = sum(effective_delay(puf, r, j, env) for j, r in enumerate(path.rows))
    return total + _routing_overhead(puf)


def _jittered_counts(puf: PufInstance, delay: np.ndarray, rng) -> np.ndarray:
    """Counter values for loop delays ``delay`` (any shape), one fresh noise draw each."""
    p = puf.params
    counts = p.counter_window / delay
    if p.jitter_sigma_rel > 0:
        if rng is None:
            raise ParameterError("an rng is required when jitter_sigma_rel > 0")
        noisy = counts * (1.0 + rng.normal(0.0, p.jitter_sigma_rel, size=counts.shape))
        for _ in range(MAX_COUNTER_RETRIES):
            bad = noisy <= 0
            if not bad.any():
                break
            noisy[bad] = counts[bad] * (1.0 + rng.normal(0.0, p.jitter_sigma_rel, size=int(bad.sum())))
        else:
            raise CounterError("counter noise kept producing non-positive counts")
        counts = noisy
    if p.integer_counts:
        counts = np.floor(counts)
        if np.any(counts <= 0):
            raise CounterError("counter window too short: zero counts")
    return counts


def counter_reading(puf: PufInstance, path: PathConfig, env: EnvCondition, rng=None) -> CounterReading:
    """Read the counter on one loop. Needs the fuse-protected interface."""
    if not puf.fuse_intact:
        raise FuseBurnedError("counter interface destroyed")
    delay = path_delay(puf, path, env)
    counts = float(_jittered_counts(puf, np.array([delay]), rng)[0])
    return CounterReading(path, counts, env)


def loops_of_config(s: StageConfig) -> list[PathConfig]:
    """The ``n`` loops of a configuration, indexed by start row."""
    return [PathConfig(tuple(row)) for row in loop_rows(s)]


def loop_rows(s: StageConfig) -> np.ndarray:
    rows = np.empty((s.n, s.m), dtype=np.int64)
    rows[:, 0] = np.arange(s.n)
    for j, p in enumerate(s.perms):
        rows[:, j + 1] = np.asarray(p)[rows[:, j]]
    return rows


def respond(puf: PufInstance, chal: Challenge, env: EnvCondition, rng=None) -> int:
    """Response bit: 1 iff loop ``pair[0]`` is slower (larger delay, fewer counts)
    than loop ``pair[1]``.  Equal readings give 0.  Works after the fuse is burned."""
    chal.check(puf.n, puf.m)
    loops = loop_rows(chal.stage_config)
    a, b = chal.pair
    return int(respond_paths(puf, loops[a][None], loops[b][None], env, rng)[0])


def config_for_paths(p1: PathConfig, p2: PathConfig, n: int) -> Challenge:
    """Build a configuration of an ``n``-row device in which ``p1`` and ``p2`` are
    two of the loops, with ``pair`` selecting them in that order.

    Each crossing routes the two prescribed rows; the other sources are matched
    in ascending order to the smallest targets still free.
    """
    if len(p1) != len(p2):
        raise DimensionError("paths have different lengths")
    p1.check(n, len(p1))
    p2.check(n, len(p2))
    return config_for_rows(p1.rows, p2.rows, n)


def config_for_rows(r1: Sequence[int], r2: Sequence[int], n: int) -> Challenge:
    m = len(r1)
    for j in range(m):
        if r1[j] == r2[j]:
            raise InfeasiblePairError(f"paths share inverter ({r1[j]}, {j})")
    perms = []
    for j in range(m - 1):
        perm = [-1] * n
        perm[r1[j]] = r1[j + 1]
        perm[r2[j]] = r2[j + 1]
        free = iter(t for t in range(n) if t not in (r1[j + 1], r2[j + 1]))
        for src in range(n):
            if perm[src] < 0:
                perm[src] = next(free)
        perms.append(tuple(perm))
    return Challenge(StageConfig(tuple(perms)), (r1[0], r2[0]))


def parse_paths(texts: Sequence[str], n: int, m: int) -> np.ndarray:
    """``(K, m)`` rows from dash-joined path strings, checked against the device size."""
    try:
        rows = np.array([[int(x) for x in t.split("-")] for t in texts], dtype=np.int64)
    except (ValueError, AttributeError) as exc:
        raise DimensionError(f"malformed path string: {exc}") from exc
    if len(texts) == 0:
        return np.empty((0, m), dtype=np.int64)
    if rows.ndim != 2 or rows.shape[1] != m:
        raise DimensionError(f"paths must have {m} stages")
    if rows.min() < 0 or rows.max() >= n:
        raise DimensionError(f"path rows outside 0..{n - 1}")
    return rows


def enumerate_paths(n: int, m: int, closed: bool = False) -> Iterator[PathConfig]:
    """All row sequences in lexicographic order (``closed``: last row == first row)."""
    for rows in itertools.product(range(n), repeat=m):
        if not closed or rows[-1] == rows[0]:
            yield PathConfig(rows)


# ---------------------------------------------------------------------------
# Array helpers
# ---------------------------------------------------------------------------


@lru_cache(maxsize=32)
def all_paths(n: int, m: int, closed: bool = False) -> np.ndarray:
    """``(P, m)`` array of every path, same order as :func:`enumerate_paths`."""
    idx = np.arange(n**m, dtype=np.int64)
    rows = np.empty((idx.size, m), dtype=np.int64)
    for j in range(m - 1, -1, -1):
        rows[:, j] = idx % n
        idx //= n
    if closed:
        rows = rows[rows[:, -1] == rows[:, 0]]
    rows.setflags(write=False)
    return rows


def path_index(rows: np.ndarray, n: int) -> np.ndarray:
    """Lexicographic index of each path (position in the full enumeration)."""
    rows = np.asarray(rows, dtype=np.int64)
    weights = n ** np.arange(rows.shape[-1] - 1, -1, -1, dtype=np.int64)
    return rows @ weights


def path_sums(matrix: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Sum of the selected entries of ``matrix`` for each path in ``rows``."""
    rows = np.asarray(rows)
    return np.asarray(matrix)[rows, np.arange(rows.shape[-1])].sum(axis=-1)


def path_delays_many(puf: PufInstance, rows: np.ndarray, env: EnvCondition) -> np.ndarray:
    return path_sums(effective_matrix(puf, env), rows) + _routing_overhead(puf)


def respond_paths(puf: PufInstance, rows_a: np.ndarray, rows_b: np.ndarray, env: EnvCondition, rng=None) -> np.ndarray:
    """Batched responses for loop pairs given directly as row arrays.

    Noise is drawn reading-by-reading (a then b for each pair, in order).
    """
    da = path_delays_many(puf, rows_a, env)
    db = path_delays_many(puf, rows_b, env)
    counts = _jittered_counts(puf, np.stack([da, db], axis=-1), rng)
    return (counts[..., 0] < counts[..., 1]).astype(np.int8)


@dataclass(frozen=True, eq=False)
class CrpSet:
    """Loop pairs ``(rows_a[k], rows_b[k])``; ``exhaustive`` if it is the full set."""

    rows_a: np.ndarray
    rows_b: np.ndarray
    exhaustive: bool
    total: int
    # For exhaustive sets: positions of each side in ``all_paths(n, m, closed)``.
    index_a: np.ndarray | None = None
    index_b: np.ndarray | None = None
    closed: bool = False

    def __len__(self):
        return len(self.rows_a)

    def pair_gaps(self, matrix: np.ndarray) -> np.ndarray:
        """``sum(rows_a) - sum(rows_b)`` over ``matrix`` for every pair."""
        if self.index_a is None:
            return path_sums(matrix, self.rows_a) - path_sums(matrix, self.rows_b)
        n, m = np.shape(matrix)
        sums = path_sums(matrix, all_paths(n, m, self.closed))
        return sums[self.index_a] - sums[self.index_b]


def crp_count(n: int, m: int, closed: bool = False) -> int:
    """Unordered pairs of column-disjoint paths."""
    if closed:
        return n ** (m - 1) * (n - 1) ** (m - 1) // 2
    return n**m * (n - 1) ** m // 2


@lru_cache(maxsize=16)
def crp_pair_indices(n: int, m: int, closed: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Indices into :func:`all_paths` of every unordered column-disjoint pair (i < j)."""
    full = all_paths(n, m)
    offsets = all_paths(n - 1, m) + 1
    ia = np.repeat(np.arange(len(full)), len(offsets))
    partner = (full[:, None, :] + offsets[None, :, :]) % n
    ib = path_index(partner.reshape(-1, m), n)
    keep = ia < ib
    ia, ib = ia[keep], ib[keep]
    if closed:
        ok = (full[ia, -1] == full[ia, 0]) & (full[ib, -1] == full[ib, 0])
        ia, ib = ia[ok], ib[ok]
        # re-index into the closed enumeration
        closed_pos = np.full(len(full), -1, dtype=np.int64)
        mask = full[:, -1] == full[:, 0]
        closed_pos[mask] = np.arange(int(mask.sum()))
        ia, ib = closed_pos[ia], closed_pos[ib]
    ia.setflags(write=False)
    ib.setflags(write=False)
    return ia, ib


def sample_crp_pairs(n: int, m: int, count: int, rng: np.random.Generator, closed: bool = False):
    """Uniform (with replacement) column-disjoint pairs."""
    rows_a = rng.integers(0, n, size=(count, m))
    rows_b = (rows_a + rng.integers(1, n, size=(count, m))) % n
    if closed:
        rows_a[:, -1] = rows_a[:, 0]
        rows_b[:, -1] = rows_b[:, 0]
    return rows_a, rows_b


@lru_cache(maxsize=16)
def _exhaustive_crps(n: int, m: int, closed: bool) -> CrpSet:
    ia, ib = crp_pair_indices(n, m, closed)
    paths = all_paths(n, m, closed)
    ra, rb = paths[ia], paths[ib]
    ra.setflags(write=False)
    rb.setflags(write=False)
    return CrpSet(ra, rb, True, len(ra), ia, ib, closed)


def crp_set(
    n: int,
    m: int,
    rng: np.random.Generator | None = None,
    max_exhaustive: int = 200_000,
    sample_size: int = 100_000,
    closed: bool = False,
) -> CrpSet:
    """All unordered column-disjoint pairs, or a uniform sample when there are too many."""
    total = crp_count(n, m, closed)
    if total <= max_exhaustive:
        return _exhaustive_crps(n, m, closed)
    if rng is None:
        rng = np.random.default_rng(0)
    ra, rb = sample_crp_pairs(n, m, sample_size, rng, closed)
    return CrpSet(ra, rb, False, total, closed=closed)
