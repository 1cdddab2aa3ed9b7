"""Delay-model extraction from counter readings.

Every reading gives one linear equation: the delay of the measured loop,
``counter_window / counts``, equals the sum of the inverter delays it selects.
Stacking all loops gives an overdetermined system whose solution is the
predicted delay matrix.  Only path sums are identifiable: adding a constant to
one stage and subtracting it from another changes no loop, so the system has an
(m - 1)-dimensional null space.  The fit returns the minimum-norm solution,
which pins that freedom deterministically.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import DataError, DimensionError, FuseBurnedError, UnderdeterminedError
from .puf import (
    Challenge,
    CrpSet,
    EnvCondition,
    PathConfig,
    PufInstance,
    _jittered_counts,
    all_paths,
    crp_set,
    loop_rows,
    path_delays_many,
    path_index,
    path_sums,
)


@dataclass(frozen=True, eq=False)
class ReadingDataset:
    n: int
    m: int
    rows: np.ndarray          # (K, m) path rows
    counts: np.ndarray        # (K,)
    temperatures: np.ndarray  # (K,)
    counter_window: float = 1.0

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.int64).reshape(-1, self.m)
        counts = np.asarray(self.counts, dtype=float).reshape(-1)
        temps = np.broadcast_to(np.asarray(self.temperatures, dtype=float), counts.shape).copy()
        if len(rows) == 0:
            raise DataError("dataset is empty")
        if len(rows) != len(counts):
            raise DataError("rows and counts differ in length")
        if rows.min() < 0 or rows.max() >= self.n:
            raise DimensionError(f"path rows outside 0..{self.n - 1}")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "counts", counts)
        object.__setattr__(self, "temperatures", temps)

    def __len__(self):
        return len(self.counts)

    @property
    def samples(self) -> Iterator[tuple[PathConfig, float, EnvCondition]]:
        for r, c, t in zip(self.rows, self.counts, self.temperatures):
            yield PathConfig(tuple(r)), float(c), EnvCondition(float(t))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "counts", "temperature"])
        for r, c, t in zip(self.rows, self.counts, self.temperatures):
            w.writerow(["-".join(map(str, r)), repr(float(c)), repr(float(t))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, n: int | None = None, counter_window: float = 1.0) -> "ReadingDataset":
        reader = csv.DictReader(io.StringIO(text))
        if reader.fieldnames != ["path", "counts", "temperature"]:
            raise DataError(f"unexpected CSV header {reader.fieldnames}")
        rows, counts, temps = [], [], []
        for rec in reader:
            rows.append(PathConfig.parse(rec["path"]).rows)
            counts.append(float(rec["counts"]))
            temps.append(float(rec["temperature"]))
        if not rows:
            raise DataError("dataset is empty")
        arr = np.array(rows)
        n = int(arr.max()) + 1 if n is None else n
        return cls(n, arr.shape[1], arr, np.array(counts), np.array(temps), counter_window)


@dataclass(frozen=True, eq=False)
class PredictedDelayMatrix:
    """Fitted delays.  Entries are meaningful only through path sums."""

    entries: np.ndarray
    residual_rms: float = 0.0
    gauge_note: bool = True

    def __post_init__(self):
        e = np.array(self.entries, dtype=float)
        if e.ndim != 2:
            raise DataError("model entries must be two-dimensional")
        e.setflags(write=False)
        object.__setattr__(self, "entries", e)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def m(self) -> int:
        return self.entries.shape[1]

    def path_sums(self, rows: np.ndarray) -> np.ndarray:
        return path_sums(self.entries, rows)

    def gauge_shifted(self, shifts: Sequence[float]) -> "PredictedDelayMatrix":
        """Add ``shifts[j]`` to every entry of stage ``j``; ``sum(shifts)`` must be 0."""
        shifts = np.asarray(shifts, dtype=float)
        return PredictedDelayMatrix(self.entries + shifts[None, :], self.residual_rms, self.gauge_note)

    def to_dict(self) -> dict:
        return {"n": self.n, "m": self.m, "delays": self.entries.tolist(), "residual_rms": self.residual_rms}

    @classmethod
    def from_dict(cls, data: dict) -> "PredictedDelayMatrix":
        model = cls(np.array(data["delays"], dtype=float), float(data.get("residual_rms", 0.0)))
        if (model.n, model.m) != (data["n"], data["m"]):
            raise DataError("declared n, m disagree with the delay array")
        return model

    @classmethod
    def exact(cls, device: PufInstance) -> "PredictedDelayMatrix":
        """The device's own delays at its reference temperature (a stolen model)."""
        return cls(device.delays.values.copy())


def harvest(
    device: PufInstance,
    paths: Iterable[PathConfig] | np.ndarray | None = None,
    env: EnvCondition | None = None,
    repeats: int = 1,
    rng=None,
) -> ReadingDataset:
    """Read every path's counter ``repeats`` times and keep the mean count.

    ``paths`` defaults to the full enumeration.  Samples come out in
    lexicographic path order.
    """
    if not device.fuse_intact:
        raise FuseBurnedError("counter interface destroyed")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    env = env or EnvCondition(device.params.temp_ref)
    if paths is None:
        rows = all_paths(device.n, device.m)
    elif isinstance(paths, np.ndarray):
        rows = paths
    else:
        rows = np.array([p.check(device.n, device.m).rows for p in paths], dtype=np.int64)
    rows = rows[np.argsort(path_index(rows, device.n), kind="stable")]
    delays = path_delays_many(device, rows, env)
    counts = _jittered_counts(device, np.repeat(delays[:, None], repeats, axis=1), rng).mean(axis=1)
    return ReadingDataset(device.n, device.m, rows, counts, env.temperature, device.params.counter_window)


def design_matrix(rows: np.ndarray, n: int) -> np.ndarray:
    """One-hot selection matrix: row k has a 1 at ``rows[k, j] * m + j`` for every stage."""
    k, m = rows.shape
    x = np.zeros((k, n * m))
    x[np.arange(k)[:, None], rows * m + np.arange(m)] = 1.0
    return x


def fit_delay_matrix(
    data: ReadingDataset, method: str = "lstsq", max_iter: int = 20_000, tol: float = 1e-13
) -> PredictedDelayMatrix:
    """Least-squares delay model from a reading dataset.

    ``method="lstsq"`` solves directly (SVD, minimum norm).  ``method="gd"``
    runs full-batch gradient descent from zero, which converges to the same
    minimum-norm solution since the iterates never leave the row space.
    """
    n, m = data.n, data.m
    if not (np.all(np.isfinite(data.counts)) and np.all(data.counts > 0)):
        raise DataError("counts must be finite and positive")
    y = data.counter_window / data.counts
    covered = np.zeros((n, m), dtype=bool)
    covered[data.rows, np.arange(m)] = True
    if not covered.all():
        missing = [tuple(c) for c in np.argwhere(~covered)]
        raise UnderdeterminedError(f"cells never measured: {missing[:5]}")
    x = design_matrix(data.rows, n)
    w, _, rank, _ = np.linalg.lstsq(x, y, rcond=None)
    if rank < n * m - (m - 1):
        raise UnderdeterminedError(f"rank {rank} < {n * m - (m - 1)}: paths do not pin the model")
    if method == "gd":
        w = _gradient_descent(x, y, max_iter, tol)
    elif method != "lstsq":
        raise ValueError(f"unknown fit method {method!r}")
    resid = y - x @ w
    return PredictedDelayMatrix(w.reshape(n, m), float(math.sqrt(np.mean(resid**2))))


def _gradient_descent(x: np.ndarray, y: np.ndarray, max_iter: int, tol: float) -> np.ndarray:
    k = len(y)
    hess = x.T @ x / k
    step = 1.0 / np.linalg.eigvalsh(hess)[-1]
    xty = x.T @ y / k
    w = np.zeros(x.shape[1])
    scale = np.linalg.norm(xty)
    for _ in range(max_iter):
        grad = hess @ w - xty
        if np.linalg.norm(grad) <= tol * scale:
            break
        w -= step * grad
    return w


def predict_response(model: PredictedDelayMatrix, chal: Challenge) -> int:
    """Model-side response, same convention as the device (1 iff first loop slower)."""
    chal.check(model.n, model.m)
    loops = loop_rows(chal.stage_config)
    a, b = chal.pair
    sums = model.path_sums(loops[[a, b]])
    return int(sums[0] > sums[1])


def challenge_rows(challenges: Sequence[Challenge]) -> tuple[np.ndarray, np.ndarray]:
    """Loop rows of each challenge's selected pair, as two ``(K, m)`` arrays."""
    ra, rb = [], []
    for c in challenges:
        loops = loop_rows(c.stage_config)
        ra.append(loops[c.pair[0]])
        rb.append(loops[c.pair[1]])
    m = challenges[0].stage_config.m if challenges else 0
    return np.array(ra, dtype=np.int64).reshape(-1, m), np.array(rb, dtype=np.int64).reshape(-1, m)


def _as_rows(crps) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(crps, CrpSet):
        return crps.rows_a, crps.rows_b
    if isinstance(crps, tuple) and len(crps) == 2 and isinstance(crps[0], np.ndarray):
        return crps
    return challenge_rows(list(crps))


def predict_many(model: PredictedDelayMatrix, rows_a: np.ndarray, rows_b: np.ndarray) -> np.ndarray:
    return (model.path_sums(rows_a) > model.path_sums(rows_b)).astype(np.int8)


def model_accuracy(model: PredictedDelayMatrix, device: PufInstance, crps=None, env: EnvCondition | None = None) -> float:
    """Fraction of CRPs on which the model agrees with the noiseless device.

    ``crps`` is a :class:`CrpSet`, a ``(rows_a, rows_b)`` tuple or a sequence of
    :class:`Challenge`; by default the standard accuracy set for the device size.
    """
    if (model.n, model.m) != (device.n, device.m):
        raise DimensionError("model and device dimensions differ")
    env = env or EnvCondition(device.params.temp_ref)
    if crps is None:
        crps = accuracy_crps(device.n, device.m)
    ra, rb = _as_rows(crps)
    if len(ra) == 0:
        raise ValueError("empty challenge set")
    truth = path_delays_many(device, ra, env) > path_delays_many(device, rb, env)
    return float(np.mean(predict_many(model, ra, rb) == truth))


def accuracy_crps(n: int, m: int, seed: int = 0) -> CrpSet:
    """Exhaustive unordered disjoint pairs up to 2e5, else 1e5 uniform samples."""
    return crp_set(n, m, np.random.default_rng(seed), max_exhaustive=200_000, sample_size=100_000)
