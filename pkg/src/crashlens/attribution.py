"""Shapley attribution: exact enumeration, a stratified complementary-contribution
estimator, and drivers for prompt parts (retraining) and sentence groups
(single prediction).

Players are numbered ``0..n-1``. The system prompt is never a player; it is
part of every coalition, so ``v(set())`` is the value of the system prompt
alone.
"""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .evalkit import compute_metrics
from .labels import vocabulary
from .predictor import (
    BaselineModel,
    ModelError,
    Players,
    Predictor,
    TrainerConfig,
    coalition_value,
    softmax,
    train_baseline,
)
from .textualize import OTHER, PART_NAMES, PromptDocument, join_prompt

logger = logging.getLogger(__name__)

DEFAULT_CAP = 20
DEFAULT_BUDGET = 4096


class AttributionError(RuntimeError):
    pass


@dataclass(frozen=True)
class CoalitionGame:
    """``value`` maps a frozenset of player indices to a real number.

    ``batch_value``, when given, maps an array of bitmasks to their values in
    one call and is used instead of ``value``.
    """

    n: int
    value: Callable[[frozenset], float]
    labels: tuple[str, ...] = ()
    batch_value: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("a game needs at least one player")
        if self.labels and len(self.labels) != self.n:
            raise ValueError("one label per player required")

    @property
    def player_labels(self) -> tuple[str, ...]:
        return self.labels or tuple(str(i) for i in range(self.n))


def mask_to_set(mask: int) -> frozenset:
    return frozenset(i for i in range(mask.bit_length()) if mask >> i & 1)


def set_to_mask(players: Iterable[int]) -> int:
    mask = 0
    for i in players:
        mask |= 1 << i
    return mask


def evaluate_masks(game: CoalitionGame, masks: Sequence[int], jobs: int = 1) -> np.ndarray:
    """Values for ``masks``, returned in the order given."""
    masks = np.asarray(masks, dtype=np.int64)
    if game.batch_value is not None:
        return np.asarray(game.batch_value(masks), dtype=float)
    subsets = [mask_to_set(int(m)) for m in masks]
    if jobs > 1 and len(subsets) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            values = list(pool.map(game.value, subsets))
    else:
        values = [game.value(s) for s in subsets]
    return np.array(values, dtype=float)


@dataclass(frozen=True)
class AttributionReport:
    phi: tuple[float, ...]
    method: str
    v_full: float
    v_base: float
    player_labels: tuple[str, ...]
    stderr: Optional[tuple[float, ...]] = None
    budget: Optional[int] = None
    seed: Optional[int] = None
    strata: Optional[tuple[int, ...]] = None
    evaluations: int = 0
    meta: Mapping = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.phi)

    @property
    def total(self) -> float:
        return math.fsum(self.phi)

    def by_label(self) -> dict[str, float]:
        return dict(zip(self.player_labels, self.phi))

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("phi", "player_labels", "stderr", "strata"):
            if d[key] is not None:
                d[key] = list(d[key])
        d["meta"] = dict(self.meta)
        return d

    @classmethod
    def from_dict(cls, data: Mapping) -> "AttributionReport":
        def tup(key):
            return tuple(data[key]) if data.get(key) is not None else None

        return cls(
            phi=tuple(data["phi"]),
            method=data["method"],
            v_full=data["v_full"],
            v_base=data["v_base"],
            player_labels=tuple(data["player_labels"]),
            stderr=tup("stderr"),
            budget=data.get("budget"),
            seed=data.get("seed"),
            strata=tup("strata"),
            evaluations=data.get("evaluations", 0),
            meta=dict(data.get("meta", {})),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["label", "phi", "stderr"])
        for i, (label, phi) in enumerate(zip(self.player_labels, self.phi)):
            w.writerow([label, repr(phi), "" if self.stderr is None else repr(self.stderr[i])])
        return buf.getvalue()


def shapley_weights(n: int) -> np.ndarray:
    """``|S|! (n-|S|-1)! / n!`` for ``|S| = 0..n-1``."""
    return np.array([1.0 / (n * math.comb(n - 1, s)) for s in range(n)])


def exact_shapley(game: CoalitionGame, cap: int = DEFAULT_CAP, jobs: int = 1) -> AttributionReport:
    """Enumerate all ``2**n`` coalitions once each and apply the Shapley formula."""
    n = game.n
    if n > cap:
        raise ValueError(f"exact enumeration over {n} players exceeds the cap of {cap}")
    masks = np.arange(1 << n, dtype=np.int64)
    values = evaluate_masks(game, masks, jobs)
    sizes = np.bitwise_count(masks)
    weights = shapley_weights(n)
    phi = []
    for i in range(n):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        contrib = weights[sizes[without]] * (values[without | bit] - values[without])
        phi.append(math.fsum(contrib.tolist()))
    return AttributionReport(
        phi=tuple(phi),
        method="exact",
        v_full=float(values[-1]),
        v_base=float(values[0]),
        player_labels=game.player_labels,
        evaluations=len(masks),
    )


def _family_plan(n: int) -> dict[int, dict]:
    """Sampling families: subsets of size ``f`` paired with their complements."""
    plan = {}
    for f in range(1, n // 2 + 1):
        half = 2 * f == n
        pairs = math.comb(n, f) // 2 if half else math.comb(n, f)
        per_round = 1 if half else math.ceil(n / f)
        plan[f] = {
            "pairs": pairs,
            "per_round": per_round,
            "weight": 1 if half else 2,
            "minimum": min(pairs, 2 * per_round),
        }
    return plan


def min_sampling_budget(n: int) -> int:
    """Smallest budget for which every player sees every coalition size."""
    return max(2 * n, 2 + 2 * sum(p["minimum"] for p in _family_plan(n).values()))


def _allocate(plan: dict[int, dict], samples: int) -> dict[int, int]:
    alloc = {f: p["minimum"] for f, p in plan.items()}
    extra = samples - sum(alloc.values())
    active = [f for f in plan if alloc[f] < plan[f]["pairs"]]
    while extra > 0 and active:
        total_w = sum(plan[f]["weight"] for f in active)
        granted = 0
        for f in active:
            give = min(plan[f]["pairs"] - alloc[f], extra * plan[f]["weight"] // total_w)
            alloc[f] += give
            granted += give
        extra -= granted
        active = [f for f in active if alloc[f] < plan[f]["pairs"]]
        if granted == 0:
            break
    return alloc


def _family_samples(n: int, f: int, count: int, exhaustive: bool, rng: np.random.Generator) -> list[int]:
    full = (1 << n) - 1
    if exhaustive:
        combos = itertools.combinations(range(n), f)
        if 2 * f == n:
            combos = (c for c in combos if c[0] == 0)
        return [set_to_mask(c) for c in combos]
    out: list[int] = []
    if 2 * f == n:
        while len(out) < count:
            out.append(set_to_mask(rng.permutation(n)[:f].tolist()))
        return out
    per_round = math.ceil(n / f)
    while len(out) < count:
        perm = rng.permutation(n).tolist()
        ring = perm + perm  # the last block wraps around
        for b in range(per_round):
            if len(out) == count:
                break
            out.append(set_to_mask(ring[b * f : (b + 1) * f]))
    assert all(0 < m < full for m in out)
    return out


def cc_sample_shapley(game: CoalitionGame, budget: int, seed: int = 0, jobs: int = 1) -> AttributionReport:
    """Size-stratified complementary-contribution estimate of Shapley values.

    Uses ``phi_i = 1/n * sum_k E[v(S) - v(N \\ S) | i in S, |S| = k]``. Every
    sampled pair ``(S, N \\ S)`` with ``|S| = f`` feeds stratum ``f`` of each
    member and stratum ``n - f`` of each non-member. Families whose
    complementary pairs fit in the allocation are enumerated exhaustively and
    contribute no variance. The extra budget is split evenly across coalition
    sizes. At most ``budget`` evaluations of the value function are made.
    """
    n = game.n
    if budget < min_sampling_budget(n):
        raise ValueError(f"budget {budget} below the minimum of {min_sampling_budget(n)} for {n} players")
    full = (1 << n) - 1
    rng = np.random.default_rng(seed)
    plan = _family_plan(n)
    alloc = _allocate(plan, (budget - 2) // 2)

    samples: dict[int, list[int]] = {}
    exhaustive: dict[int, bool] = {}
    for f in plan:
        exhaustive[f] = alloc[f] >= plan[f]["pairs"]
        samples[f] = _family_samples(n, f, alloc[f], exhaustive[f], rng)

    drawn = [m for ms in samples.values() for m in ms]
    needed = sorted({0, full, *drawn, *(full ^ m for m in drawn)})
    values = dict(zip(needed, evaluate_masks(game, needed, jobs).tolist()))

    # per player, per coalition size k = 1..n: collected complementary contributions
    collected: list[list[list[float]]] = [[[] for _ in range(n + 1)] for _ in range(n)]
    exact_stratum = np.zeros((n, n + 1), dtype=bool)
    cc_full = values[full] - values[0]
    for i in range(n):
        collected[i][n].append(cc_full)
        exact_stratum[i, n] = True
    for f, masks in samples.items():
        for mask in masks:
            cc = values[mask] - values[full ^ mask]
            for i in range(n):
                if mask >> i & 1:
                    collected[i][f].append(cc)
                else:
                    collected[i][n - f].append(-cc)
        if exhaustive[f]:
            exact_stratum[:, f] = True
            exact_stratum[:, n - f] = True

    phi, stderr = [], []
    for i in range(n):
        means, variances = [], []
        for k in range(1, n + 1):
            obs = collected[i][k]
            if not obs:
                raise AttributionError(f"player {i} has no samples at coalition size {k}")
            means.append(math.fsum(obs) / len(obs))
            if not exact_stratum[i, k] and len(obs) > 1:
                variances.append(float(np.var(obs, ddof=1)) / len(obs))
        phi.append(math.fsum(means) / n)
        stderr.append(math.sqrt(math.fsum(variances)) / n)

    return AttributionReport(
        phi=tuple(phi),
        method="cc_sampled",
        v_full=values[full],
        v_base=values[0],
        player_labels=game.player_labels,
        stderr=tuple(stderr),
        budget=budget,
        seed=seed,
        strata=tuple(alloc[f] for f in sorted(plan)),
        evaluations=len(needed),
    )


def shapley(
    game: CoalitionGame,
    method: str = "auto",
    budget: Optional[int] = None,
    seed: int = 0,
    cap: int = DEFAULT_CAP,
    jobs: int = 1,
) -> AttributionReport:
    """Exact when ``n <= cap`` (or ``method="exact"``), sampled otherwise."""
    if method not in ("auto", "exact", "sampled"):
        raise ValueError(f"unknown attribution method {method!r}")
    if method == "exact" or (method == "auto" and game.n <= cap):
        return exact_shapley(game, cap=max(cap, game.n) if method == "exact" else cap, jobs=jobs)
    return cc_sample_shapley(game, budget or DEFAULT_BUDGET, seed, jobs)


Metric = str  # "accuracy" | "f1"


def _score(metric: Metric, pred: Sequence[int], gold: Sequence[int], k: int) -> float:
    report = compute_metrics(pred, gold, k)
    if metric == "accuracy":
        return report.accuracy
    if metric == "f1":
        return report.f1
    raise ValueError(f"unknown metric {metric!r}; use 'accuracy' or 'f1'")


def training_stage_attribution(
    train: Sequence[tuple[PromptDocument, int]],
    val: Sequence[tuple[PromptDocument, int]],
    config: Optional[TrainerConfig] = None,
    metric: Metric = "f1",
    trainer: Optional[Callable] = None,
    jobs: int = 1,
) -> AttributionReport:
    """Attribute validation performance to the four content parts by retraining.

    Each of the 16 coalitions gets its own model, trained on prompts reduced
    to the system prompt plus the coalition's parts and scored on the
    validation prompts reduced the same way.
    """
    if not train or not val:
        raise ValueError("training and validation sets must be non-empty")
    task = train[0][0].task
    dataset = train[0][0].dataset
    k = len(vocabulary(task, dataset))
    config = config or TrainerConfig()
    trainer = trainer or (lambda corpus: train_baseline(corpus, task, dataset, config))

    def reduced(doc: PromptDocument, keep: frozenset) -> str:
        return join_prompt(doc.system, doc.reduced_parts(keep))

    def value(keep: frozenset) -> float:
        names = [PART_NAMES[i] for i in sorted(keep)] or ["system only"]
        try:
            model = trainer([(reduced(d, keep), y) for d, y in train])
            pred = [int(np.argmax(model.predict_proba(reduced(d, keep)))) for d, _ in val]
        except Exception as exc:
            raise AttributionError(f"retraining on coalition {names} failed: {exc}") from exc
        score = _score(metric, pred, [y for _, y in val], k)
        logger.info("coalition %s: %s = %.4f", names, metric, score)
        return score

    game = CoalitionGame(len(PART_NAMES), value, PART_NAMES)
    report = exact_shapley(game, jobs=jobs)
    return _with_meta(report, stage="training", metric=metric, task=task.value, dataset=dataset,
                      seed=config.seed)


def _with_meta(report: AttributionReport, **meta) -> AttributionReport:
    return AttributionReport(**{**asdict(report), "meta": {**report.meta, **meta}})


def _baseline_group_values(model: BaselineModel, doc: PromptDocument, target: int) -> Callable:
    """Vectorized coalition values for a bag-of-words model over sentence groups."""
    labels = doc.group_labels
    index = {label: i for i, label in enumerate(labels)}
    base = model.counts(doc.system)
    groups = np.zeros((len(labels), len(model.features)))
    for s in doc.sentences:
        counts = model.counts(s.raw)
        if s.group in index:
            groups[index[s.group]] += counts
        else:
            base = base + counts
    weights = np.asarray(model.weights)
    bits = np.array([1 << i for i in range(len(labels))], dtype=np.int64)

    def batch(masks: np.ndarray) -> np.ndarray:
        out = np.empty(len(masks))
        for start in range(0, len(masks), 4096):
            chunk = masks[start : start + 4096]
            member = ((chunk[:, None] & bits[None, :]) != 0).astype(float)
            present = (member @ groups + base) > 0
            X = np.hstack([present.astype(float), np.ones((len(chunk), 1))])
            out[start : start + len(chunk)] = softmax(X @ weights.T)[:, target]
        return out

    return batch


def inference_stage_attribution(
    doc: PromptDocument,
    model: Predictor,
    target: int,
    method: str = "auto",
    budget: Optional[int] = None,
    seed: int = 0,
    cap: int = DEFAULT_CAP,
    jobs: int = 1,
) -> AttributionReport:
    """Attribute the probability of ``target`` to the document's sentence groups."""
    if not doc.group_labels:
        raise ValueError("document has no sentence groups; run assign_groups first")
    k = len(vocabulary(doc.task, doc.dataset))
    if not 0 <= target < k:
        raise ValueError(f"target {target} outside 0..{k - 1}")

    def value(coalition: frozenset) -> float:
        return coalition_value(model, doc, coalition, Players.SENTENCE_GROUPS, target)

    if model.task != doc.task:
        raise ModelError(f"model predicts {model.task.value}, document is for {doc.task.value}")
    batch = _baseline_group_values(model, doc, target) if isinstance(model, BaselineModel) else None
    game = CoalitionGame(len(doc.group_labels), value, doc.group_labels, batch)
    report = shapley(game, method=method, budget=budget, seed=seed, cap=cap, jobs=jobs)
    unplayed = sum(1 for s in doc.sentences if s.group == OTHER)
    return _with_meta(report, stage="inference", crash_id=doc.crash_id, task=doc.task.value,
                      dataset=doc.dataset, target=target, unplayed_sentences=unplayed)
