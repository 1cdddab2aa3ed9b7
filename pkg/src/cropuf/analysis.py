"""Population experiments: COS distribution, uniqueness, reliability, adversary baselines.

Everything here is deterministic given the seeds involved; results are plain
dataclasses with CSV and JSON writers.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import CroPufError, ParameterError
from .extraction import (
    PredictedDelayMatrix,
    _as_rows,
    accuracy_crps,
    fit_delay_matrix,
    harvest,
    model_accuracy,
    predict_many,
)
from .keyshare import (
    DEFAULT_MARGIN,
    DeviceProbe,
    ProbeConfig,
    compute_threshold,
    cos,
)
from .puf import (
    EnvCondition,
    PufInstance,
    PufParams,
    crp_set,
    path_delays_many,
    respond_paths,
    sample_crp_pairs,
    sample_puf,
)

DEFAULT_EDGES = tuple(range(0, 101, 10))
UNIQUENESS_CHALLENGES = 1024


@dataclass(frozen=True)
class PopulationSpec:
    count: int
    params: PufParams = PufParams()
    seed_base: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ParameterError("population count must be >= 1")
        self.params.validate()

    def instance(self, i: int) -> PufInstance:
        return sample_puf(self.params.replace(seed=self.seed_base + i))

    def __iter__(self):
        return (self.instance(i) for i in range(self.count))


@dataclass(frozen=True)
class Histogram:
    """Counts per percentage bucket.  Bucket k holds values in ``(edges[k], edges[k+1]]``;
    the first bucket also takes ``edges[0]`` itself."""

    edges: tuple[float, ...]
    counts: tuple[int, ...]

    def __post_init__(self):
        if len(self.edges) < 2 or any(b <= a for a, b in zip(self.edges, self.edges[1:])):
            raise ParameterError("bucket edges must be strictly increasing")
        if len(self.counts) != len(self.edges) - 1:
            raise ParameterError("need one count per bucket")

    @classmethod
    def of(cls, percents: Iterable[float], edges: Sequence[float] = DEFAULT_EDGES) -> "Histogram":
        values = np.asarray(list(percents), dtype=float)
        e = np.asarray(edges, dtype=float)
        if values.size and (values.min() < e[0] or values.max() > e[-1]):
            raise ParameterError("value outside the histogram range")
        idx = np.clip(np.searchsorted(e, values, side="left") - 1, 0, len(e) - 2)
        counts = np.bincount(idx, minlength=len(e) - 1)
        return cls(tuple(float(x) for x in e), tuple(int(c) for c in counts))

    @property
    def total(self) -> int:
        return sum(self.counts)

    def rows(self) -> list[tuple[float, float, int]]:
        return [(lo, hi, c) for lo, hi, c in zip(self.edges, self.edges[1:], self.counts)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["bucket_low", "bucket_high", "count"])
        for lo, hi, c in self.rows():
            w.writerow([_num(lo), _num(hi), c])
        return buf.getvalue()


@dataclass(frozen=True)
class Metric:
    metric: str
    value: float
    ci_low: float | None = None
    ci_high: float | None = None


def metrics_csv(metrics: Iterable[Metric]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "value", "ci_low", "ci_high"])
    for m in metrics:
        w.writerow([m.metric, _num(m.value), _num(m.ci_low), _num(m.ci_high)])
    return buf.getvalue()


def _num(x) -> str:
    if x is None:
        return ""
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def summary_json(**sections) -> str:
    def default(obj):
        if isinstance(obj, np.generic):
            return obj.item()
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        raise TypeError(type(obj).__name__)

    return json.dumps(sections, indent=2, sort_keys=True, default=default)


# -- COS population ---------------------------------------------------------

@dataclass
class CosPopulationResult:
    spec: PopulationSpec
    histogram: Histogram
    cos_values: np.ndarray        # per successful instance, as a fraction
    reliable_counts: np.ndarray
    thresholds: np.ndarray
    failures: dict[int, str] = field(default_factory=dict)
    seconds: float = 0.0

    def share_with_at_least(self, reliable: int) -> float:
        if self.spec.count == 0:
            return 0.0
        # failed instances count against the share
        return float(np.count_nonzero(self.reliable_counts >= reliable)) / self.spec.count

    def metrics(self) -> list[Metric]:
        c = self.cos_values
        return [
            Metric("devices", self.spec.count),
            Metric("failures", len(self.failures)),
            Metric("cos_mean", float(c.mean()) if c.size else math.nan),
            Metric("cos_min", float(c.min()) if c.size else math.nan),
            Metric("cos_max", float(c.max()) if c.size else math.nan),
            Metric("reliable_min", float(self.reliable_counts.min()) if c.size else math.nan),
            Metric("share_reliable_ge_100", self.share_with_at_least(100)),
            Metric("seconds", self.seconds),
        ]


def noiseless_model(device: PufInstance) -> PredictedDelayMatrix:
    """Fit from jitter-free full enumeration at the reference temperature."""
    quiet = PufInstance(device.delays, device.temp_coeffs, device.params.replace(jitter_sigma_rel=0.0))
    return fit_delay_matrix(harvest(quiet))


def cos_population(
    spec: PopulationSpec,
    probe: ProbeConfig = ProbeConfig(),
    margin_factor: float = DEFAULT_MARGIN,
    edges: Sequence[float] = DEFAULT_EDGES,
    fit_repeats: int | None = None,
    closed: bool = False,
    progress=None,
) -> CosPopulationResult:
    """Fit, threshold and COS for every instance of ``spec``.

    ``fit_repeats=None`` uses the noiseless fit; an integer fits from that many
    jittered readings per path instead.  Instance ``i`` draws all its noise from
    seeds derived from ``seed_base + i``, so results do not depend on order.
    """
    t0 = time.perf_counter()
    cos_vals, reliable, thresholds, failures = [], [], [], {}
    for i in range(spec.count):
        seed = spec.seed_base + i
        try:
            device = spec.instance(i)
            if fit_repeats is None:
                model = noiseless_model(device)
            else:
                model = fit_delay_matrix(harvest(device, repeats=fit_repeats, rng=np.random.default_rng([seed, 1])))
            pairs = crp_set(device.n, device.m, np.random.default_rng([seed, 2]), closed=closed)
            t = compute_threshold(model, DeviceProbe(device, probe, seed), margin_factor, pairs=pairs)
            rep = cos(model, t, pairs=pairs)
        except CroPufError as exc:
            failures[i] = f"{type(exc).__name__}: {exc}"
            continue
        cos_vals.append(rep.cos)
        reliable.append(rep.r_reliable)
        thresholds.append(t.value)
        if progress is not None:
            progress(i + 1, spec.count)
    cos_arr = np.array(cos_vals, dtype=float)
    return CosPopulationResult(
        spec,
        Histogram.of(100.0 * cos_arr, edges),
        cos_arr,
        np.array(reliable, dtype=np.int64),
        np.array(thresholds, dtype=float),
        failures,
        time.perf_counter() - t0,
    )


# -- uniqueness ---------------------------------------------------------------

@dataclass(frozen=True)
class UniquenessReport:
    mean: float
    ci_low: float
    ci_high: float
    devices: int
    challenges: int
    per_device: tuple[float, ...] = ()

    def metric(self) -> Metric:
        return Metric("uniqueness", self.mean, self.ci_low, self.ci_high)


def uniqueness_challenges(n: int, m: int, count: int = UNIQUENESS_CHALLENGES, seed: int = 0):
    return sample_crp_pairs(n, m, count, np.random.default_rng(seed))


def mean_pairwise_distance(responses: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean fractional Hamming distance over all device pairs, plus each
    device's mean distance to the others."""
    r = np.asarray(responses, dtype=np.int64)
    k, c = r.shape
    if k < 2:
        raise ParameterError("need at least two response vectors")
    if c == 0:
        raise ParameterError("empty challenge set")
    # distance(i, j) * c = ones_i + ones_j - 2 * common_ones
    ones = r.sum(axis=1)
    common = r @ r.T
    dist = (ones[:, None] + ones[None, :] - 2 * common) / c
    per_device = dist.sum(axis=1) / (k - 1)
    return float(dist[np.triu_indices(k, 1)].mean()), per_device


def uniqueness(population: Sequence[PufInstance], challenges=None, env: EnvCondition | None = None) -> UniquenessReport:
    """Mean inter-device fractional Hamming distance of noiseless responses.

    The 95% interval is a jackknife over devices, which respects the
    dependence between pairs sharing a device.
    """
    population = list(population)
    if len(population) < 2:
        raise ParameterError("need at least two devices")
    n, m = population[0].n, population[0].m
    if challenges is None:
        challenges = uniqueness_challenges(n, m)
    ra, rb = _as_rows(challenges)
    responses = []
    for d in population:
        e = env or EnvCondition(d.params.temp_ref)
        responses.append(path_delays_many(d, ra, e) > path_delays_many(d, rb, e))
    responses = np.array(responses, dtype=np.int8)
    mean, per_device = mean_pairwise_distance(responses)
    k = len(population)
    if k >= 3:
        loo = np.array([mean_pairwise_distance(np.delete(responses, i, axis=0))[0] for i in range(k)])
        se = math.sqrt((k - 1) / k * np.sum((loo - loo.mean()) ** 2))
    else:
        se = 0.0
    return UniquenessReport(mean, max(0.0, mean - 1.96 * se), min(1.0, mean + 1.96 * se), k, len(ra),
                            tuple(float(x) for x in per_device))


# -- reliability ---------------------------------------------------------------

def reliability(
    device: PufInstance,
    challenges,
    env_sweep: Sequence[EnvCondition | float],
    repeats: int = 1,
    rng=None,
) -> np.ndarray:
    """Per challenge, the share of (env, repeat) responses equal to the
    jitter-free reference bit at the reference temperature."""
    if not env_sweep:
        raise ParameterError("environment sweep is empty")
    if repeats < 1:
        raise ParameterError("repeats must be >= 1")
    envs = [e if isinstance(e, EnvCondition) else EnvCondition(float(e)) for e in env_sweep]
    ra, rb = _as_rows(challenges)
    ref_env = EnvCondition(device.params.temp_ref)
    reference = path_delays_many(device, ra, ref_env) > path_delays_many(device, rb, ref_env)
    agree = np.zeros(len(ra))
    for env in envs:
        for _ in range(repeats):
            agree += respond_paths(device, ra, rb, env, rng) == reference
    return agree / (len(envs) * repeats)


# -- adversary baselines ------------------------------------------------------------

@dataclass(frozen=True)
class AdversaryReport:
    trials: int
    random_model_accuracy: float | None
    stolen_model_accuracy: float | None

    def metrics(self) -> list[Metric]:
        return [
            Metric("adversary_trials", self.trials),
            Metric("random_model_accuracy", math.nan if self.random_model_accuracy is None else self.random_model_accuracy),
            Metric("stolen_model_accuracy", math.nan if self.stolen_model_accuracy is None else self.stolen_model_accuracy),
        ]


def adversary_baseline(device: PufInstance, challenges, trials: int, rng=None) -> AdversaryReport:
    """Bit-guessing accuracy of an attacker who sees only the challenges.

    The challenge-only attacker guesses each bit with the delays of a freshly
    sampled device of the same size; the stolen-model attacker uses the device's own
    delays.  Truth is the device's jitter-free response.  The first ``trials``
    challenges are scored.
    """
    if device.fuse_intact:
        raise ParameterError("baseline assumes a deployed device (fuse burned)")
    if trials < 0:
        raise ParameterError("trials must be >= 0")
    if trials == 0:
        return AdversaryReport(0, None, None)
    ra, rb = _as_rows(getattr(challenges, "per_bit", challenges))
    if trials > len(ra):
        raise ParameterError(f"only {len(ra)} challenges for {trials} trials")
    ra, rb = ra[:trials], rb[:trials]
    env = EnvCondition(device.params.temp_ref)
    truth = (path_delays_many(device, ra, env) > path_delays_many(device, rb, env)).astype(np.int8)
    rng = rng if rng is not None else np.random.default_rng()
    # A fresh foreign device per bit: one fixed foreign matrix shares an
    # accidental correlation with the target over all bits, which biases the
    # match rate far from 1/2 (the delay space has only n * m dimensions).
    guesses = np.empty(trials, dtype=np.int8)
    for i, seed in enumerate(rng.integers(0, 2**63, size=trials)):
        foreign = PredictedDelayMatrix.exact(sample_puf(device.params.replace(seed=int(seed))))
        guesses[i] = predict_many(foreign, ra[i:i + 1], rb[i:i + 1])[0]
    random_acc = float(np.mean(guesses == truth))
    stolen_acc = float(np.mean(predict_many(PredictedDelayMatrix.exact(device), ra, rb) == truth))
    return AdversaryReport(trials, random_acc, stolen_acc)


# -- extraction accuracy table ------------------------------------------------------

@dataclass(frozen=True)
class AccuracyRow:
    n: int
    m: int
    jitter: float
    repeats: int
    paths: int
    crps_scored: int
    accuracy: float
    residual_rms: float
    seconds: float

    def to_dict(self) -> dict:
        return asdict(self)


def accuracy_table(sizes: Sequence[tuple[int, int]], params: PufParams = PufParams(), repeats: int = 10,
                   seed: int = 0) -> list[AccuracyRow]:
    """Fit each size from a full enumeration and score it against the device."""
    out = []
    for n, m in sizes:
        p = params.replace(n=n, m=m, seed=seed)
        device = sample_puf(p)
        t0 = time.perf_counter()
        data = harvest(device, repeats=repeats, rng=np.random.default_rng([seed, n, m]))
        model = fit_delay_matrix(data)
        seconds = time.perf_counter() - t0
        crps = accuracy_crps(n, m, seed)
        out.append(AccuracyRow(n, m, p.jitter_sigma_rel, repeats, len(data), len(crps),
                               model_accuracy(model, device, crps), model.residual_rms, seconds))
    return out


def accuracy_csv(rows: Iterable[AccuracyRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["n", "m", "jitter", "repeats", "paths", "crps_scored", "accuracy", "residual_rms", "seconds"])
    for r in rows:
        w.writerow([r.n, r.m, _num(r.jitter), r.repeats, r.paths, r.crps_scored, _num(r.accuracy),
                    _num(r.residual_rms), f"{r.seconds:.4f}"])
    return buf.getvalue()
