"""Reliability threshold, key-driven challenge search, COS and key derivation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DimensionError, KeyUnsatisfiableError, ParameterError
from .extraction import PredictedDelayMatrix, challenge_rows, predict_many
from .puf import (
    Challenge,
    CrpSet,
    EnvCondition,
    PufInstance,
    _jittered_counts,
    all_paths,
    config_for_rows,
    crp_set,
    path_delays_many,
    path_index,
    respond_paths,
    sample_crp_pairs,
)

DEFAULT_PROBE_TEMPS = (-20.0, 0.0, 25.0, 50.0, 75.0)
DEFAULT_PROBE_REPEATS = 11
DEFAULT_MARGIN = 1.3
DEFAULT_PAIR_CAP = 10**7
# Beyond this many noise standard deviations a reading cannot flip a comparison
# (tail probability < 1e-23), so the probe skips drawing noise for that pair.
CERTAIN_SIGMAS = 10.0


@dataclass(frozen=True)
class SharedKey:
    bits: tuple[int, ...]

    def __post_init__(self):
        bits = tuple(int(b) for b in self.bits)
        if not bits or any(b not in (0, 1) for b in bits):
            raise ParameterError("a key is a nonempty sequence of 0/1 bits")
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return len(self.bits)

    def __str__(self):
        return "".join(map(str, self.bits))

    @classmethod
    def parse(cls, text: str) -> "SharedKey":
        return cls(tuple(int(c) for c in text.strip()))

    @classmethod
    def random(cls, length: int, rng: np.random.Generator) -> "SharedKey":
        return cls(tuple(rng.integers(0, 2, size=length).tolist()))

    def to_bytes(self) -> bytes:
        """MSB-first packing; a trailing partial byte is zero-padded."""
        return np.packbits(np.array(self.bits, dtype=np.uint8)).tobytes()


@dataclass(frozen=True)
class ProbeConfig:
    temps: tuple[float, ...] = DEFAULT_PROBE_TEMPS
    repeats: int = DEFAULT_PROBE_REPEATS

    def to_dict(self) -> dict:
        return {"temps": list(self.temps), "repeats": self.repeats}


@dataclass(frozen=True)
class Threshold:
    value: float
    margin_factor: float = DEFAULT_MARGIN
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    # Provenance: how the value was found (not part of the wire payload).
    trigger_delta: float | None = None
    pairs_total: int = 0
    pairs_considered: int = 0
    pairs_probed: int = 0
    sampled: bool = False

    def __post_init__(self):
        if not self.value > 0:
            raise ParameterError("threshold must be positive")
        if self.margin_factor < 1:
            raise ParameterError("margin_factor must be >= 1")

    def to_dict(self) -> dict:
        return {"value": self.value, "margin_factor": self.margin_factor, "probe": self.probe.to_dict()}

    @classmethod
    def from_dict(cls, data: dict) -> "Threshold":
        probe = data.get("probe", {})
        return cls(
            float(data["value"]),
            float(data.get("margin_factor", DEFAULT_MARGIN)),
            ProbeConfig(tuple(probe.get("temps", DEFAULT_PROBE_TEMPS)), int(probe.get("repeats", DEFAULT_PROBE_REPEATS))),
        )


@dataclass(frozen=True)
class KeyChallenges:
    per_bit: tuple[Challenge, ...]

    def __len__(self):
        return len(self.per_bit)

    def to_dict(self) -> dict:
        return {"bits": len(self.per_bit), "challenges": [c.to_dict() for c in self.per_bit]}

    @classmethod
    def from_dict(cls, data: dict) -> "KeyChallenges":
        chals = tuple(Challenge.from_dict(c) for c in data["challenges"])
        if int(data["bits"]) != len(chals):
            raise ParameterError("bit count disagrees with the challenge list")
        return cls(chals)


@dataclass(frozen=True)
class CosReport:
    r_reliable: int
    r_total: int

    @property
    def cos(self) -> float:
        return self.r_reliable / self.r_total if self.r_total else 0.0


_MASK = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


def pair_normals(seed: int, lo: np.ndarray, hi: np.ndarray, count: int) -> np.ndarray:
    """``(len(lo), count)`` standard normals keyed only by ``(seed, lo[i], hi[i])``.

    Counter-based (splitmix64 hash + Box-Muller) so that every pair's draws are
    fixed no matter which other pairs are evaluated alongside it.
    """
    with np.errstate(over="ignore"):
        key = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ _splitmix64(lo.astype(np.uint64)))
        key = _splitmix64(key ^ _splitmix64(hi.astype(np.uint64) + np.uint64(0x632BE59BD9B4E019)))
        half = (count + 1) // 2
        ctr = np.arange(2 * half, dtype=np.uint64)
        words = _splitmix64(key[:, None] + ctr[None, :] * np.uint64(0xD1B54A32D192ED03))
    u = ((words >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53  # (0, 1)
    u1, u2 = u[:, :half], u[:, half:]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=1)
    return z[:, :count]


class DeviceProbe:
    """Stability oracle backed by a simulated device.

    A pair is unstable when its response is not identical over every
    (temperature, repeat) combination.  Noise for a pair comes from its own
    counter-based stream keyed by ``(seed, lower path index, higher path index)``,
    so a pair's verdict does not depend on which other pairs are probed or in what
    order.
    """

    # Devices up to this many paths get a precomputed delay table.
    TABLE_LIMIT = 200_000

    def __init__(self, device: PufInstance, config: ProbeConfig = ProbeConfig(), seed: int = 0):
        self.device = device
        self.config = config
        self.seed = seed
        self.envs = [EnvCondition(t) for t in config.temps]
        self._table = None
        if device.n**device.m <= self.TABLE_LIMIT:
            paths = all_paths(device.n, device.m)
            self._table = np.stack([path_delays_many(device, paths, e) for e in self.envs], axis=1)

    def delays(self, rows: np.ndarray) -> np.ndarray:
        """``(K, T)`` loop delays at every probe temperature."""
        if self._table is not None:
            return self._table[path_index(rows, self.device.n)]
        return np.stack([path_delays_many(self.device, rows, e) for e in self.envs], axis=1)

    def _classify(self, rows_a, rows_b):
        """Delays plus two masks: pairs whose verdict is 'unstable' regardless of
        noise, and pairs whose verdict depends on the noise draw."""
        da, db = self.delays(rows_a), self.delays(rows_b)
        slower = da > db
        p = self.device.params
        if p.jitter_sigma_rel == 0 or self.config.repeats == 0:
            close = np.zeros(da.shape, dtype=bool)
        elif p.integer_counts:
            close = np.ones(da.shape, dtype=bool)
        else:
            close = np.abs(da - db) <= CERTAIN_SIGMAS * p.jitter_sigma_rel * np.hypot(da, db)
        # two noise-proof temperatures that disagree settle it
        flips = (slower & ~close).any(axis=1) & (~slower & ~close).any(axis=1)
        ambiguous = close.any(axis=1) & ~flips
        return da, db, flips, ambiguous

    def _simulate(self, rows_a, rows_b, da, db, ks: np.ndarray) -> np.ndarray:
        """Noisy replay of the pairs ``ks``; True where responses disagree."""
        n, p = self.device.n, self.device.params
        ia, ib = path_index(rows_a[ks], n), path_index(rows_b[ks], n)
        lo, hi = np.minimum(ia, ib), np.maximum(ia, ib)
        shape = (len(self.envs), self.config.repeats, 2)
        pair = np.stack([da[ks], db[ks]], axis=-1)[:, :, None, :]  # (K, T, 1, 2)
        eps = p.jitter_sigma_rel * pair_normals(self.seed, lo, hi, int(np.prod(shape))).reshape((len(ks),) + shape)
        counts = p.counter_window / pair * np.maximum(1.0 + eps, 0.0)
        if p.integer_counts:
            counts = np.floor(counts)
        bits = counts[..., 0] < counts[..., 1]
        return bits.any(axis=(1, 2)) & ~bits.all(axis=(1, 2))

    def __call__(self, rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
        """Boolean array, True where the pair is unstable."""
        da, db, flips, ambiguous = self._classify(rows_a, rows_b)
        unstable = flips.copy()
        ks = np.flatnonzero(ambiguous)
        if ks.size:
            unstable[ks] = self._simulate(rows_a, rows_b, da, db, ks)
        return unstable

    def first_unstable(self, rows_a: np.ndarray, rows_b: np.ndarray) -> int:
        """Index of the first unstable pair, or -1; same verdicts as ``__call__``."""
        da, db, flips, ambiguous = self._classify(rows_a, rows_b)
        certain = np.flatnonzero(flips)
        stop = int(certain[0]) if certain.size else len(da)
        ks = np.flatnonzero(ambiguous[:stop])
        for start in range(0, len(ks), 128):
            block = ks[start:start + 128]
            hit = self._simulate(rows_a, rows_b, da, db, block)
            if hit.any():
                return int(block[np.argmax(hit)])
        return stop if stop < len(da) else -1


class ReadingProbe:
    """Stability oracle built from raw counter readings.

    ``table[p, t, r]`` is the r-th reading of path ``p`` (full enumeration
    order) at probe temperature ``t``.  The response of a pair at ``(t, r)``
    compares the two paths' r-th readings, so every pair gets
    ``len(temps) * repeats`` responses out of one table of measurements.
    """

    def __init__(self, table: np.ndarray, n: int, config: ProbeConfig):
        table = np.asarray(table, dtype=float)
        if table.shape[1:] != (len(config.temps), config.repeats):
            raise ParameterError(f"reading table shape {table.shape} does not match the probe config")
        self.table = table
        self.n = n
        self.config = config

    @classmethod
    def from_device(cls, device: PufInstance, config: ProbeConfig = ProbeConfig(), rng=None) -> "ReadingProbe":
        """Measure every path ``repeats`` times at each probe temperature.

        Uses the simulator directly, so it also works after the fuse is burned.
        """
        paths = all_paths(device.n, device.m)
        cols = []
        for t in config.temps:
            d = path_delays_many(device, paths, EnvCondition(t))
            cols.append(_jittered_counts(device, np.repeat(d[:, None], config.repeats, axis=1), rng))
        return cls(np.stack(cols, axis=1), device.n, config)

    def __call__(self, rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
        ca = self.table[path_index(rows_a, self.n)]
        cb = self.table[path_index(rows_b, self.n)]
        bits = ca < cb
        return bits.any(axis=(1, 2)) & ~bits.all(axis=(1, 2))


Probe = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _pair_set(model: PredictedDelayMatrix, pairs, max_pairs: int, sample_size: int, rng, closed: bool) -> CrpSet:
    if pairs is None:
        return crp_set(model.n, model.m, rng, max_exhaustive=max_pairs, sample_size=sample_size, closed=closed)
    if isinstance(pairs, CrpSet):
        return pairs
    ra, rb = (np.asarray(x, dtype=np.int64) for x in pairs)
    return CrpSet(ra, rb, True, len(ra))


def _descending_chunks(gap: np.ndarray, chunk: int, head: int = 32_768):
    """Indices of ``gap`` in stable descending order, in chunks.

    Only the largest ``head`` values are sorted up front; the walk usually stops
    inside them.  Splitting at a value (not a rank) keeps ties in index order,
    so the sequence equals a full stable sort.
    """
    if len(gap) > head:
        cut = np.partition(gap, len(gap) - head)[len(gap) - head]
        parts = [np.flatnonzero(gap >= cut), np.flatnonzero(gap < cut)]
    else:
        parts = [np.arange(len(gap))]
    for part in parts:
        order = part[np.argsort(-gap[part], kind="stable")]
        for start in range(0, len(order), chunk):
            yield order[start:start + chunk]


def compute_threshold(
    model: PredictedDelayMatrix,
    probe: Probe,
    margin_factor: float = DEFAULT_MARGIN,
    probe_config: ProbeConfig | None = None,
    pairs=None,
    max_pairs: int = DEFAULT_PAIR_CAP,
    sample_size: int = 10**6,
    rng=None,
    closed: bool = False,
    chunk: int = 4096,
) -> Threshold:
    """Walk the CRPs from the largest predicted delay difference down and stop at
    the first unstable one; its difference times ``margin_factor`` is the
    threshold.  Without any unstable CRP the smallest nonzero difference is used.
    """
    if margin_factor < 1:
        raise ParameterError("margin_factor must be >= 1")
    probe_config = probe_config or getattr(probe, "config", ProbeConfig())
    crps = _pair_set(model, pairs, max_pairs, sample_size, rng, closed)
    ra, rb, total, sampled = crps.rows_a, crps.rows_b, crps.total, not crps.exhaustive
    if len(ra) == 0:
        raise ParameterError("empty pair set")
    gap = np.abs(crps.pair_gaps(model.entries))
    probed = 0
    for idx in _descending_chunks(gap, chunk):
        if hasattr(probe, "first_unstable"):
            first = probe.first_unstable(ra[idx], rb[idx])
        else:
            unstable = np.asarray(probe(ra[idx], rb[idx]), dtype=bool)
            first = int(np.argmax(unstable)) if unstable.any() else -1
        if first >= 0:
            probed += first + 1
            x = float(gap[idx[first]])
            value = x * margin_factor
            if value <= 0:
                raise ParameterError("unstable pair with zero predicted difference")
            return Threshold(value, margin_factor, probe_config, x, total, len(ra), probed, sampled)
        probed += len(idx)
    nonzero = gap[gap > 0]
    if nonzero.size == 0:
        raise ParameterError("no pair has a nonzero predicted delay difference")
    return Threshold(float(nonzero.min()), margin_factor, probe_config, None, total, len(ra), probed, sampled)


def cos(model: PredictedDelayMatrix, t: Threshold | float, pairs=None, rng=None, closed: bool = False) -> CosReport:
    """Coefficient of stabilization: share of CRPs with ``|delta| > T``."""
    value = t.value if isinstance(t, Threshold) else float(t)
    crps = _pair_set(model, pairs, DEFAULT_PAIR_CAP, 10**6, rng, closed)
    gap = np.abs(crps.pair_gaps(model.entries))
    reliable = int(np.count_nonzero(gap > value))
    if not crps.exhaustive:
        # scale the sampled share to the full CRP space
        reliable = int(round(reliable / len(crps) * crps.total))
    return CosReport(reliable, crps.total)


def generate_challenges(
    model: PredictedDelayMatrix,
    t: Threshold | float,
    key: SharedKey,
    rng: np.random.Generator,
    max_attempts_per_bit: int = 10_000,
    batch: int = 64,
) -> KeyChallenges:
    """For every key bit draw random column-disjoint path pairs until the predicted
    difference clears the threshold in the direction of the bit."""
    value = t.value if isinstance(t, Threshold) else float(t)
    n, m = model.n, model.m
    out = []
    for i, bit in enumerate(key.bits):
        attempts = 0
        found = None
        while attempts < max_attempts_per_bit and found is None:
            size = min(batch, max_attempts_per_bit - attempts)
            d1, d2 = sample_crp_pairs(n, m, size, rng)
            diff = model.path_sums(d1) - model.path_sums(d2)
            ok = diff > value if bit else diff < -value
            if ok.any():
                k = int(np.argmax(ok))
                found = config_for_rows(d1[k].tolist(), d2[k].tolist(), n)
            attempts += size
        if found is None:
            raise KeyUnsatisfiableError(i, attempts)
        out.append(found)
    return KeyChallenges(tuple(out))


def derive_key(device: PufInstance, kc: KeyChallenges, env: EnvCondition | None = None, rng=None) -> SharedKey:
    """Replay each challenge on the device; works with a burned fuse."""
    for c in kc.per_bit:
        c.check(device.n, device.m)
    env = env or EnvCondition(device.params.temp_ref)
    ra, rb = challenge_rows(list(kc.per_bit))
    return SharedKey(tuple(respond_paths(device, ra, rb, env, rng).tolist()))


def predicted_key(model: PredictedDelayMatrix, kc: KeyChallenges) -> SharedKey:
    ra, rb = challenge_rows(list(kc.per_bit))
    if ra.shape[1] != model.m:
        raise DimensionError("challenges do not fit the model")
    return SharedKey(tuple(predict_many(model, ra, rb).tolist()))
