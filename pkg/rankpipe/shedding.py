"""
Online load shedding: under overload, a small pruning network decides per request how long a
prefix of the score-sorted candidate list goes on to re-ranking; the rest is dropped.

Labels for the pruning network come from an offline oracle that scans all cutoffs for the
smallest one whose final slate keeps recall@N within a tolerance of the unpruned slate.
"""
import collections
import hashlib
import json
import logging
import struct
import threading
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, TypeVar

import numpy as np

from . import config
from .errors import RankpipeError
from .hashing import stable_hash, unit_interval
from .schema import Candidate

LOG = logging.getLogger(__name__)

C = TypeVar("C")

FinalScorer = Callable[[Sequence[Candidate]], Sequence[float]]

FEATURE_COUNT = 6 + config.QID_BUCKETS

_HEADER = struct.Struct("<I")


class InsufficientData(RankpipeError):
    def __init__(self, have: int, need: int) -> None:
        self.have = have
        self.need = need
        super().__init__(f"need at least {need} records, got {have}")


class PrunerFormatError(RankpipeError):
    def __init__(self, path: str, reason: str) -> None:
        self.path = path
        self.reason = reason
        super().__init__(f"invalid pruning model {path}: {reason}")


def qid_bucket(qid: str, buckets: int = config.QID_BUCKETS) -> int:
    return stable_hash(qid) % buckets


@dataclass
class SheddingFeatures:
    quota: float
    cutoff_ratio_prev: float
    qid: str
    escore_avg: float
    escore_variance: float
    escore_max: float
    escore_min: float

    @classmethod
    def from_scores(
        cls, quota: float, cutoff_ratio_prev: float, qid: str, escores: Sequence[float]
    ) -> "SheddingFeatures":
        if len(escores):
            values = np.asarray(escores, dtype=np.float64)
            low, high = float(values.min()), float(values.max())
            # the mean can drift outside [min, max] by one ulp
            avg = min(high, max(low, float(values.mean())))
            var = float(values.var())
        else:
            avg = var = high = low = 0.0
        return cls(
            min(1.0, max(0.0, quota)),
            min(1.0, max(0.0, cutoff_ratio_prev)),
            qid,
            avg,
            var,
            high,
            low,
        )

    def vector(self) -> np.ndarray:
        v = np.zeros(FEATURE_COUNT, dtype=np.float64)
        v[0] = self.quota
        v[1] = self.cutoff_ratio_prev
        v[2 + qid_bucket(self.qid)] = 1.0
        base = 2 + config.QID_BUCKETS
        v[base : base + 4] = (
            self.escore_avg,
            self.escore_variance,
            self.escore_max,
            self.escore_min,
        )
        return v

    def to_dict(self) -> Dict:
        return asdict(self)


def sort_candidates(candidates: Sequence[C], key: Callable[[C], float] = None) -> List[C]:
    """
    Stable descending sort by recall-phase estimated score.
    """
    key = key or (lambda c: c.escore)
    return sorted(candidates, key=lambda c: -key(c))


def top_positions(final_scores: Sequence[float], slate_size: int) -> List[int]:
    """
    Positions (in list order) of the final top-N slate; ties prefer earlier positions.
    """
    order = sorted(range(len(final_scores)), key=lambda i: (-final_scores[i], i))
    return sorted(order[:slate_size])


def degradation(positions: Sequence[int], slate_size: int, keep: int) -> float:
    """
    1 - recall@N of the slate re-ranked from the first ``keep`` candidates, given the
    positions of the unpruned slate. Every slate item inside the prefix is also in the
    prefix's own top N, so recall is the share of slate positions below ``keep``.
    """
    if slate_size <= 0:
        return 0.0
    return 1.0 - sum(1 for p in positions if p < keep) / slate_size


def oracle_cutoff(
    candidates_sorted: Sequence[Candidate],
    final_scorer: FinalScorer,
    slate_size: int,
    epsilon: float,
) -> int:
    """
    The smallest keep count k >= N whose pruned final slate has recall@N degradation at most
    epsilon against the unpruned one, by scanning every cutoff.
    """
    n = len(candidates_sorted)
    if slate_size < 1 or slate_size > n:
        raise ValueError(f"slate size {slate_size} must be in [1, {n}]")

    scores = list(final_scorer(candidates_sorted))
    full = set(np.argsort(-np.asarray(scores), kind="stable")[:slate_size].tolist())
    for k in range(slate_size, n + 1):
        prefix = scores[:k]
        pruned = set(np.argsort(-np.asarray(prefix), kind="stable")[:slate_size].tolist())
        if 1.0 - len(full & pruned) / slate_size <= epsilon + 1e-12:
            return k
    return n


@dataclass
class ShedLogRecord:
    features: SheddingFeatures
    n: int
    k_star: int
    quality_delta: float = 0.0
    slate_size: int = 0
    top_positions: List[int] = field(default_factory=list)

    def __post_init__(self):
        if not 1 <= self.k_star <= self.n:
            raise ValueError(f"k* {self.k_star} outside [1, {self.n}]")

    @property
    def keep_fraction(self) -> float:
        return self.k_star / self.n

    def to_dict(self) -> Dict:
        doc = asdict(self)
        doc["features"] = self.features.to_dict()
        return doc

    @classmethod
    def from_dict(cls, doc: Dict) -> "ShedLogRecord":
        doc = dict(doc)
        doc["features"] = SheddingFeatures(**doc["features"])
        return cls(**doc)


def write_shed_logs(records: Iterable[ShedLogRecord], path: str) -> int:
    count = 0
    with open(path, "w", encoding="utf-8") as fd:
        for record in records:
            fd.write(json.dumps(record.to_dict(), sort_keys=True))
            fd.write("\n")
            count += 1
    return count


def read_shed_logs(path: str) -> List[ShedLogRecord]:
    with open(path, "r", encoding="utf-8") as fd:
        return [ShedLogRecord.from_dict(json.loads(line)) for line in fd if line.strip()]


def synthetic_final_scorer(noise: float = 0.15) -> FinalScorer:
    """
    A stand-in re-ranker: the recall estimate plus a deterministic per-item
    perturbation, so final and estimated orders mostly agree but not everywhere.
    """

    def _score(candidates: Sequence[Candidate]) -> List[float]:
        return [c.escore + noise * (unit_interval(f"rerank:{c.item}") - 0.5) for c in candidates]

    return _score


class PruningModel:
    """
    Two-layer network mapping standardized shedding features to a keep fraction, clamped to
    [min_keep, 1] after adding the calibrated safety margin.
    """

    def __init__(
        self,
        w1: np.ndarray,
        b1: np.ndarray,
        w2: np.ndarray,
        b2: np.ndarray,
        mean: np.ndarray,
        std: np.ndarray,
        margin: float = 0.0,
        min_keep: float = config.MIN_KEEP_FRACTION,
        metadata: Dict = None,
    ) -> None:
        self.w1 = np.asarray(w1, dtype=np.float64)
        self.b1 = np.asarray(b1, dtype=np.float64)
        self.w2 = np.asarray(w2, dtype=np.float64)
        self.b2 = np.asarray(b2, dtype=np.float64)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self.margin = float(margin)
        self.min_keep = float(min_keep)
        self.metadata = dict(metadata or {})

    def raw(self, x: np.ndarray) -> np.ndarray:
        z = (np.atleast_2d(x) - self.mean) / self.std
        h = np.maximum(z @ self.w1 + self.b1, 0.0)
        out = h @ self.w2 + self.b2
        return 1.0 / (1.0 + np.exp(-out[:, 0]))

    def predict_batch(self, x: np.ndarray) -> np.ndarray:
        return np.clip(self.raw(x) + self.margin, self.min_keep, 1.0)

    def predict(self, features: SheddingFeatures) -> float:
        return float(self.predict_batch(features.vector())[0])

    def __str__(self):
        return f"PruningModel(hidden={self.w1.shape[1]}, margin={self.margin:.3f})"

    def __repr__(self):
        return self.__str__()


def _dataset_hash(x: np.ndarray, y: np.ndarray) -> str:
    digest = hashlib.sha256()
    digest.update(np.ascontiguousarray(x).tobytes())
    digest.update(np.ascontiguousarray(y).tobytes())
    return digest.hexdigest()[:16]


def _keep_counts(fractions: np.ndarray, records: Sequence[ShedLogRecord]) -> List[int]:
    return [
        min(r.n, max(r.slate_size, int(round(f * r.n)))) for f, r in zip(fractions, records)
    ]


def _degradations(fractions: np.ndarray, records: Sequence[ShedLogRecord]) -> np.ndarray:
    keeps = _keep_counts(fractions, records)
    return np.array(
        [degradation(r.top_positions, r.slate_size, k) for r, k in zip(records, keeps)]
    )


def train_pruner(
    logs: Sequence[ShedLogRecord],
    epochs: int = 300,
    seed: int = 0,
    epsilon: float = config.SHED_EPSILON,
    hidden: int = 16,
    learning_rate: float = 0.01,
    batch_size: int = 64,
    min_keep: float = config.MIN_KEEP_FRACTION,
    min_records: int = 1000,
) -> PruningModel:
    """
    Fits the pruning network to the oracle keep fractions k*/n with mean squared error and
    Adam, holding out 20% of the records for the reported RMSE. When the records carry
    their slate positions, a safety margin is then added so that the mean recall@N
    degradation over the training records stays within epsilon.

    :raises InsufficientData: if fewer than ``min_records`` records are given
    """
    if len(logs) < min_records:
        raise InsufficientData(len(logs), min_records)

    rng = np.random.default_rng(seed)
    x = np.stack([r.features.vector() for r in logs])
    y = np.array([r.keep_fraction for r in logs])

    order = rng.permutation(len(logs))
    n_test = max(1, len(logs) // 5)
    test, train = order[:n_test], order[n_test:]

    mean = x[train].mean(axis=0)
    std = x[train].std(axis=0)
    std[std < 1e-9] = 1.0
    z = (x - mean) / std

    w1 = rng.normal(0.0, np.sqrt(2.0 / x.shape[1]), size=(x.shape[1], hidden))
    b1 = np.zeros(hidden)
    w2 = rng.normal(0.0, np.sqrt(1.0 / hidden), size=(hidden, 1))
    b2 = np.zeros(1)
    params = [w1, b1, w2, b2]
    m = [np.zeros_like(p) for p in params]
    v = [np.zeros_like(p) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    for _ in range(epochs):
        shuffled = rng.permutation(train)
        for start in range(0, len(shuffled), batch_size):
            idx = shuffled[start : start + batch_size]
            zb, yb = z[idx], y[idx]

            pre = zb @ w1 + b1
            h = np.maximum(pre, 0.0)
            out = 1.0 / (1.0 + np.exp(-(h @ w2 + b2)[:, 0]))

            d_out = (2.0 / len(idx)) * (out - yb) * out * (1.0 - out)
            g_w2 = h.T @ d_out[:, None]
            g_b2 = np.array([d_out.sum()])
            d_h = (d_out[:, None] @ w2.T) * (pre > 0)
            g_w1 = zb.T @ d_h
            g_b1 = d_h.sum(axis=0)

            step += 1
            for i, g in enumerate((g_w1, g_b1, g_w2, g_b2)):
                m[i] = beta1 * m[i] + (1 - beta1) * g
                v[i] = beta2 * v[i] + (1 - beta2) * g * g
                m_hat = m[i] / (1 - beta1**step)
                v_hat = v[i] / (1 - beta2**step)
                params[i] -= learning_rate * m_hat / (np.sqrt(v_hat) + eps)

    model = PruningModel(w1, b1, w2, b2, mean, std, 0.0, min_keep)
    pred = model.predict_batch(x)
    heldout_rmse = float(np.sqrt(np.mean((pred[test] - y[test]) ** 2)))
    train_rmse = float(np.sqrt(np.mean((pred[train] - y[train]) ** 2)))

    metadata = {
        "epsilon": epsilon,
        "quality_metric": "recall@N",
        "dataset_hash": _dataset_hash(x, y),
        "records": len(logs),
        "seed": seed,
        "heldout_rmse": heldout_rmse,
        "train_rmse": train_rmse,
    }

    calibratable = all(r.slate_size > 0 for r in logs)
    if calibratable:
        train_records = [logs[i] for i in train]
        raw = model.raw(x[train])
        margin = 0.0
        while margin < 1.0:
            fractions = np.clip(raw + margin, min_keep, 1.0)
            if _degradations(fractions, train_records).mean() <= epsilon:
                break
            margin = round(margin + 0.01, 2)
        model.margin = margin

        test_records = [logs[i] for i in test]
        losses = _degradations(model.predict_batch(x[test]), test_records)
        metadata.update(
            margin=margin,
            heldout_degradations=float(losses.mean()),
            heldout_p95_degradation=float(np.quantile(losses, 0.95)),
            heldout_over_epsilon=float(np.mean(losses > epsilon + 1e-12)),
        )

    model.metadata = metadata
    LOG.info(
        "trained pruner on %d records: held-out rmse %.4f, margin %.2f",
        len(logs),
        heldout_rmse,
        model.margin,
    )
    return model


def keep_count(
    model: Optional[PruningModel],
    features: SheddingFeatures,
    n: int,
    slate_size: int,
    overload: bool,
) -> int:
    if not overload or model is None or n <= slate_size:
        return n
    return min(n, max(slate_size, int(round(model.predict(features) * n))))


def shed(
    model: Optional[PruningModel],
    features: SheddingFeatures,
    candidates_sorted: Sequence[C],
    slate_size: int,
    overload: bool,
) -> Sequence[C]:
    """
    Returns the prefix of the sorted candidates that goes on to re-ranking. Without overload
    everything is kept; otherwise max(N, round(model(features) * n)) candidates.
    """
    keep = keep_count(model, features, len(candidates_sorted), slate_size, overload)
    return candidates_sorted[:keep]


class OverloadDetector:
    """
    Tracks the arrival rate over a sliding window and the p95 queue wait of the re-ranking
    stage. Shedding is active while the rate exceeds ``capacity_fraction`` of capacity or
    the queue wait exceeds its threshold. The quota feature is the remaining headroom.
    """

    def __init__(
        self,
        capacity_rps: float,
        capacity_fraction: float = config.CAPACITY_FRACTION,
        window: float = 1.0,
        queue_wait_threshold: float = None,
    ) -> None:
        if capacity_rps <= 0 or window <= 0:
            raise ValueError("capacity and window must be positive")
        self.capacity_rps = capacity_rps
        self.capacity_fraction = capacity_fraction
        self.window = window
        self.queue_wait_threshold = queue_wait_threshold
        self._arrivals = collections.deque()
        self._queue_wait_p95 = 0.0
        self._lock = threading.Lock()
        self.cutoff_ratio_prev = 0.0

    def observe(self, now: float) -> None:
        with self._lock:
            self._arrivals.append(now)
            self._trim(now)

    def observe_queue_wait(self, p95: float) -> None:
        self._queue_wait_p95 = p95

    def _trim(self, now: float) -> None:
        while self._arrivals and self._arrivals[0] <= now - self.window:
            self._arrivals.popleft()

    def rate(self, now: float) -> float:
        with self._lock:
            self._trim(now)
            return len(self._arrivals) / self.window

    def quota(self, now: float) -> float:
        return min(1.0, max(0.0, 1.0 - self.rate(now) / self.capacity_rps))

    def overloaded(self, now: float) -> bool:
        if self.rate(now) > self.capacity_fraction * self.capacity_rps:
            return True
        threshold = self.queue_wait_threshold
        return threshold is not None and self._queue_wait_p95 > threshold


def label_requests(
    requests: Iterable,
    final_scorer: FinalScorer,
    slate_size: int,
    epsilon: float,
    detector: OverloadDetector,
) -> List[ShedLogRecord]:
    """
    Builds shed-log records from recorded requests (objects with ``timestamp``, ``qid`` and
    ``candidates``): arrival quota from replaying the detector over the timestamps, the
    previous oracle cutoff as feedback feature, and oracle labels.
    """
    records = []
    cutoff_prev = 0.0
    for request in requests:
        detector.observe(request.timestamp)
        candidates = sort_candidates(request.candidates)
        n = len(candidates)
        if n < slate_size:
            continue
        features = SheddingFeatures.from_scores(
            detector.quota(request.timestamp),
            cutoff_prev,
            request.qid,
            [c.escore for c in candidates],
        )
        k_star = oracle_cutoff(candidates, final_scorer, slate_size, epsilon)
        positions = top_positions(list(final_scorer(candidates)), slate_size)
        records.append(
            ShedLogRecord(
                features,
                n,
                k_star,
                degradation(positions, slate_size, k_star),
                slate_size,
                positions,
            )
        )
        cutoff_prev = 1.0 - k_star / n
    return records


def save_pruner(model: PruningModel, path: str) -> None:
    """
    Writes the model with the dense model file convention: a u32 header length, a JSON
    header, then f32 arrays (w1, b1, w2, b2, mean, std).
    """
    arrays = [model.w1, model.b1, model.w2, model.b2, model.mean, model.std]
    header = {
        "kind": "pruner",
        "shapes": [list(a.shape) for a in arrays],
        "margin": model.margin,
        "min_keep": model.min_keep,
        "metadata": model.metadata,
    }
    encoded = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fd:
        fd.write(_HEADER.pack(len(encoded)))
        fd.write(encoded)
        for array in arrays:
            fd.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


def load_pruner(path: str) -> PruningModel:
    """
    Reads a pruning model written by ``save_pruner``.

    :raises PrunerFormatError: if the file is not a pruning model, or is truncated or malformed
    """
    with open(path, "rb") as fd:
        raw = fd.read()

    try:
        (length,) = _HEADER.unpack_from(raw, 0)
        header = json.loads(raw[_HEADER.size : _HEADER.size + length].decode("utf-8"))
        if header.get("kind") != "pruner":
            raise ValueError("not a pruning model")
        data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size + length)

        arrays = []
        pos = 0
        for shape in header["shapes"]:
            size = int(np.prod(shape))
            arrays.append(data[pos : pos + size].astype(np.float64).reshape(shape))
            pos += size
        if pos != len(data):
            raise ValueError(f"{len(data) - pos} trailing values")
        return PruningModel(
            *arrays,
            margin=header["margin"],
            min_keep=header["min_keep"],
            metadata=header["metadata"],
        )
    except (struct.error, ValueError, KeyError, TypeError, AttributeError) as e:
        raise PrunerFormatError(path, str(e))
