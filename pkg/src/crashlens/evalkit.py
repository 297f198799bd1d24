"""Dataset splitting, classification metrics and confidence calibration."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Callable, Generic, Optional, Sequence, TypeVar

import numpy as np

from .predictor import ClassDistribution

T = TypeVar("T")


@dataclass(frozen=True)
class SeverityFilter:
    """Drop ``drop`` events of class ``label`` from the val/test pool, then keep ``keep`` per split."""

    drop: int
    keep: int
    label: int = 0  # class index of S1

    def __post_init__(self):
        if self.drop < 0 or self.keep < 0:
            raise ValueError("drop and keep must be non-negative")


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (7, 1.5, 1.5)
    seed: int = 0
    severity_filter: Optional[SeverityFilter] = None

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r <= 0 for r in self.ratios):
            raise ValueError("three positive split ratios required")


WA_FILTER = SeverityFilter(drop=1428, keep=1000)


@dataclass
class Split(Generic[T]):
    train: list[T]
    val: list[T]
    test: list[T]
    dropped: list[T] = field(default_factory=list)

    def __iter__(self):
        return iter((self.train, self.val, self.test))

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


def split_sizes(n: int, ratios: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` items; ties go to the earlier split."""
    total = math.fsum(ratios)
    quotas = [n * r / total for r in ratios]
    sizes = [math.floor(q) for q in quotas]
    order = sorted(range(len(ratios)), key=lambda i: (-(quotas[i] - sizes[i]), i))
    for i in order[: n - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split_dataset(
    events: Sequence[T], spec: SplitSpec = SplitSpec(), label_of: Optional[Callable[[T], int]] = None
) -> Split[T]:
    if len(events) < 10:
        raise ValueError(f"need at least 10 events to split, got {len(events)}")
    order = np.random.default_rng(spec.seed).permutation(len(events))
    shuffled = [events[i] for i in order]
    n_train, n_val, _ = split_sizes(len(events), spec.ratios)
    train = shuffled[:n_train]
    val = shuffled[n_train : n_train + n_val]
    test = shuffled[n_train + n_val :]
    flt = spec.severity_filter
    if flt is None:
        return Split(train, val, test)
    if label_of is None:
        raise ValueError("a severity filter needs label_of to read event classes")

    pool = val + test
    hits = [i for i, ev in enumerate(pool) if label_of(ev) == flt.label]
    if len(hits) < flt.drop:
        raise ValueError(f"filter drops {flt.drop} events of class {flt.label} but the pool holds {len(hits)}")
    drop_idx = set(hits[: flt.drop])
    dropped = [ev for i, ev in enumerate(pool) if i in drop_idx]
    kept = [ev for i, ev in enumerate(pool) if i not in drop_idx]
    if len(kept) < 2 * flt.keep:
        raise ValueError(f"only {len(kept)} events left for val/test, {2 * flt.keep} requested")
    return Split(train, kept[: flt.keep], kept[flt.keep : 2 * flt.keep], dropped + kept[2 * flt.keep :])


@dataclass(frozen=True)
class ClassCounts:
    tp: int
    tn: int
    fp: int
    fn: int


def _ratio(num, den) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


@dataclass(frozen=True)
class MetricsReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    per_class: tuple[ClassCounts, ...]
    confusion: tuple[tuple[int, ...], ...]  # rows = gold, columns = predicted

    @property
    def k(self) -> int:
        return len(self.per_class)

    @property
    def support(self) -> list[int]:
        return [sum(row) for row in self.confusion]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_class"] = [asdict(c) for c in self.per_class]
        d["confusion"] = [list(r) for r in self.confusion]
        return d

    def confusion_csv(self, labels: Optional[Sequence[str]] = None) -> str:
        labels = list(labels or range(self.k))
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["gold\\predicted", *labels])
        for label, row in zip(labels, self.confusion):
            w.writerow([label, *row])
        return buf.getvalue()


def compute_metrics(pred: Sequence[int], gold: Sequence[int], k: int) -> MetricsReport:
    """Accuracy plus support-weighted and macro precision/recall/F1.

    Per-class precision or recall with a zero denominator counts as 0 in the averages.
    """
    if len(pred) != len(gold):
        raise ValueError(f"{len(pred)} predictions for {len(gold)} gold labels")
    if not pred:
        raise ValueError("no predictions")
    p = np.asarray(pred, dtype=int)
    g = np.asarray(gold, dtype=int)
    if p.min() < 0 or g.min() < 0 or p.max() >= k or g.max() >= k:
        raise ValueError(f"class indices must lie in 0..{k - 1}")
    confusion = np.zeros((k, k), dtype=int)
    np.add.at(confusion, (g, p), 1)
    n = int(confusion.sum())

    # exact rational arithmetic, rounded once at the end
    per_class, precisions, recalls, f1s = [], [], [], []
    for c in range(k):
        tp = int(confusion[c, c])
        fp = int(confusion[:, c].sum()) - tp
        fn = int(confusion[c, :].sum()) - tp
        per_class.append(ClassCounts(tp, n - tp - fp - fn, fp, fn))
        prec, rec = _ratio(tp, tp + fp), _ratio(tp, tp + fn)
        precisions.append(prec)
        recalls.append(rec)
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else Fraction(0))
    support = [int(v) for v in confusion.sum(axis=1)]

    def weighted(values) -> float:
        return float(sum((Fraction(w, n) * v for w, v in zip(support, values)), Fraction(0)))

    def macro(values) -> float:
        return float(sum(values, Fraction(0)) / k)

    return MetricsReport(
        accuracy=float(Fraction(int(np.trace(confusion)), n)),
        precision=weighted(precisions),
        recall=weighted(recalls),
        f1=weighted(f1s),
        macro_precision=macro(precisions),
        macro_recall=macro(recalls),
        macro_f1=macro(f1s),
        per_class=tuple(per_class),
        confusion=tuple(tuple(int(v) for v in row) for row in confusion),
    )


def precision_for_class(report: MetricsReport, index: int) -> Optional[float]:
    if not 0 <= index < report.k:
        raise ValueError(f"class {index} outside 0..{report.k - 1}")
    c = report.per_class[index]
    return c.tp / (c.tp + c.fp) if c.tp + c.fp else None


@dataclass(frozen=True)
class CalibrationBin:
    lo: float
    hi: float
    count: int
    accuracy: Optional[float]
    mean_confidence: Optional[float]


@dataclass(frozen=True)
class CalibrationCurve:
    bins: tuple[CalibrationBin, ...]

    @property
    def total(self) -> int:
        return sum(b.count for b in self.bins)

    def to_dict(self) -> dict:
        return {"bins": [asdict(b) for b in self.bins]}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["lo", "hi", "count", "accuracy", "mean_confidence"])
        for b in self.bins:
            w.writerow([b.lo, b.hi, b.count, "" if b.accuracy is None else b.accuracy,
                        "" if b.mean_confidence is None else b.mean_confidence])
        return buf.getvalue()


def equal_width_edges(n_bins: int = 10) -> list[float]:
    return [i / n_bins for i in range(n_bins + 1)]


def calibration_bins(
    dists: Sequence[ClassDistribution], gold: Sequence[int], edges: Optional[Sequence[float]] = None
) -> CalibrationCurve:
    """Bin predictions by confidence: bins are ``[lo, hi)`` except the last, which includes 1.0."""
    edges = list(edges) if edges is not None else equal_width_edges()
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError("bin edges must be strictly increasing")
    if edges[0] != 0.0 or edges[-1] != 1.0:
        raise ValueError("bin edges must span [0, 1]")
    if len(dists) != len(gold):
        raise ValueError("one gold label per distribution required")
    n_bins = len(edges) - 1
    members: list[list[tuple[float, bool]]] = [[] for _ in range(n_bins)]
    for dist, g in zip(dists, gold):
        conf = dist.confidence
        idx = min(int(np.searchsorted(edges, conf, side="right")) - 1, n_bins - 1)
        members[idx].append((conf, dist.predicted == g))
    bins = []
    for i, m in enumerate(members):
        if m:
            acc = sum(ok for _, ok in m) / len(m)
            mean_conf = math.fsum(c for c, _ in m) / len(m)
        else:
            acc = mean_conf = None
        bins.append(CalibrationBin(edges[i], edges[i + 1], len(m), acc, mean_conf))
    return CalibrationCurve(tuple(bins))
