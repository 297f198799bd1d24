"""Value functions over prompts: a bag-of-words logistic regression baseline
and a client for a remote model that reports special-token probabilities.
"""

from __future__ import annotations

import json
import logging
import math
import re
import threading
import time
from dataclasses import asdict, dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import httpx
import numpy as np

from .labels import Task, normalize_dataset, vocabulary
from .textualize import PromptDocument, join_prompt, join_sentences

logger = logging.getLogger(__name__)

MODEL_FORMAT = "crashlens-baseline"
MODEL_VERSION = 1
_TOKEN = re.compile(r"[a-z0-9]+")


class PredictorError(Exception):
    pass


class ModelError(PredictorError):
    """The model cannot serve the request (wrong task, bad corpus, ...)."""


class DegenerateCorpusError(ModelError):
    pass


class RemoteError(PredictorError):
    """Transport-level failure talking to a remote predictor."""


class RemoteTimeoutError(RemoteError):
    pass


class RemoteProtocolError(RemoteError):
    pass


def tokenize(text: str) -> list[str]:
    return _TOKEN.findall(text.lower())


@dataclass(frozen=True)
class ClassDistribution:
    task: Task
    tokens: tuple[str, ...]
    probs: tuple[float, ...]
    raw_mass: Optional[float] = None

    def __post_init__(self):
        if len(self.probs) != len(self.tokens):
            raise ValueError("one probability per vocabulary token required")
        if any(not (0.0 <= p <= 1.0) for p in self.probs):
            raise ValueError(f"probabilities outside [0, 1]: {self.probs}")
        if abs(math.fsum(self.probs) - 1.0) > 1e-9:
            raise ValueError(f"probabilities sum to {math.fsum(self.probs)!r}, not 1")

    @classmethod
    def from_array(cls, task: Task, tokens: Sequence[str], probs, raw_mass: Optional[float] = None):
        return cls(Task.parse(task), tuple(tokens), tuple(float(p) for p in probs), raw_mass)

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probs))

    @property
    def confidence(self) -> float:
        return max(self.probs)

    def prob(self, index: int) -> float:
        return self.probs[index]

    def to_dict(self) -> dict:
        return {
            "task": self.task.value,
            "tokens": list(self.tokens),
            "probs": list(self.probs),
            "predicted": self.predicted,
            "confidence": self.confidence,
            "raw_mass": self.raw_mass,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "ClassDistribution":
        return cls(Task.parse(data["task"]), tuple(data["tokens"]), tuple(data["probs"]), data.get("raw_mass"))


def softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss_and_grad(weights: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> tuple[float, np.ndarray]:
    """Mean multinomial cross-entropy plus ``l2/2 * ||W||^2`` (bias column excluded).

    ``X`` carries the bias as its last column; ``weights`` is ``classes x (features + 1)``.
    """
    n = X.shape[0]
    probs = softmax(X @ weights.T)
    loss = -np.mean(np.log(probs[np.arange(n), y] + 1e-300))
    reg = weights[:, :-1]
    loss += 0.5 * l2 * float(np.sum(reg * reg))
    delta = probs
    delta[np.arange(n), y] -= 1.0
    grad = delta.T @ X / n
    grad[:, :-1] += l2 * reg
    return float(loss), grad


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float = 0.5
    epochs: int = 300
    l2: float = 1e-4
    balance: bool = False
    seed: int = 0

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainerConfig":
        return cls(**{k: v for k, v in data.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True, eq=False)
class BaselineModel:
    task: Task
    dataset: str
    tokens: tuple[str, ...]
    features: tuple[str, ...]
    weights: np.ndarray
    config: TrainerConfig = field(default_factory=TrainerConfig)

    def __post_init__(self):
        self.weights.setflags(write=False)
        object.__setattr__(self, "_columns", {f: i for i, f in enumerate(self.features)})

    @property
    def n_classes(self) -> int:
        return len(self.tokens)

    def featurize(self, text: str) -> np.ndarray:
        x = np.zeros(len(self.features) + 1)
        for tok in tokenize(text):
            col = self._columns.get(tok)
            if col is not None:
                x[col] = 1.0
        x[-1] = 1.0
        return x

    def counts(self, text: str) -> np.ndarray:
        """Per-feature token counts without the bias entry."""
        x = np.zeros(len(self.features))
        for tok in tokenize(text):
            col = self._columns.get(tok)
            if col is not None:
                x[col] += 1.0
        return x

    def predict_proba(self, text: str) -> np.ndarray:
        return softmax(self.weights @ self.featurize(text))

    def distribution(
        self, system: str, parts: Optional[Sequence[str]] = None, sentences: Optional[Sequence] = None
    ) -> ClassDistribution:
        if sentences is not None:
            parts = join_sentences(sentences)
        text = join_prompt(system, parts or [])
        return ClassDistribution.from_array(self.task, self.tokens, self.predict_proba(text))

    def to_dict(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "task": self.task.value,
            "dataset": self.dataset,
            "tokens": list(self.tokens),
            "features": list(self.features),
            "weights": self.weights.tolist(),
            "config": asdict(self.config),
        }

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), separators=(",", ":")) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "BaselineModel":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        if data.get("format") != MODEL_FORMAT or data.get("version") != MODEL_VERSION:
            raise ModelError(f"{path}: not a {MODEL_FORMAT} v{MODEL_VERSION} file")
        weights = np.array(data["weights"], dtype=float)
        if weights.shape != (len(data["tokens"]), len(data["features"]) + 1):
            raise ModelError(f"{path}: weight matrix shape {weights.shape} does not match the feature map")
        return cls(
            Task.parse(data["task"]),
            data["dataset"],
            tuple(data["tokens"]),
            tuple(data["features"]),
            weights,
            TrainerConfig.from_dict(data.get("config", {})),
        )


def _text_of(item) -> str:
    return item.text if isinstance(item, PromptDocument) else str(item)


def train_baseline(
    corpus: Sequence[tuple[Union[PromptDocument, str], int]],
    task: Union[Task, str, None] = None,
    dataset: Optional[str] = None,
    config: Optional[TrainerConfig] = None,
) -> BaselineModel:
    """Fit multinomial logistic regression on word-presence features by gradient descent."""
    config = config or TrainerConfig()
    if not corpus:
        raise DegenerateCorpusError("empty training corpus")
    first = corpus[0][0]
    if task is None:
        if not isinstance(first, PromptDocument):
            raise ValueError("task is required when training on plain text")
        task = first.task
    task = Task.parse(task)
    dataset = normalize_dataset(dataset or (first.dataset if isinstance(first, PromptDocument) else "WA"))
    tokens = vocabulary(task, dataset).tokens

    texts = [_text_of(item) for item, _ in corpus]
    y = np.array([int(label) for _, label in corpus])
    if y.min() < 0 or y.max() >= len(tokens):
        raise ModelError(f"class index outside 0..{len(tokens) - 1}")
    present = np.unique(y)
    if len(present) < 2:
        raise DegenerateCorpusError(f"training corpus holds a single class ({int(present[0])})")

    features = tuple(sorted({tok for t in texts for tok in tokenize(t)}))
    columns = {f: i for i, f in enumerate(features)}
    X = np.zeros((len(texts), len(features) + 1))
    for row, text in enumerate(texts):
        for tok in tokenize(text):
            X[row, columns[tok]] = 1.0
    X[:, -1] = 1.0

    weights = np.zeros((len(tokens), len(features) + 1))
    rng = np.random.default_rng(config.seed)
    by_class = [np.flatnonzero(y == c) for c in present]
    per_class = math.ceil(len(y) / len(present))
    for _ in range(config.epochs):
        if config.balance:
            idx = np.concatenate([rng.choice(members, size=per_class, replace=True) for members in by_class])
            _, grad = loss_and_grad(weights, X[idx], y[idx], config.l2)
        else:
            _, grad = loss_and_grad(weights, X, y, config.l2)
        weights -= config.learning_rate * grad
    return BaselineModel(task, dataset, tokens, features, weights, config)


@dataclass(frozen=True)
class RemotePredictorSpec:
    endpoint: str
    task: Task
    dataset: str = "WA"
    timeout: float = 30.0
    retry: int = 2
    max_in_flight: int = 4

    def __post_init__(self):
        if not self.endpoint:
            raise ValueError("remote endpoint must be non-empty")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.retry < 0 or self.max_in_flight < 1:
            raise ValueError("retry must be >= 0 and max_in_flight >= 1")
        object.__setattr__(self, "task", Task.parse(self.task))
        object.__setattr__(self, "dataset", normalize_dataset(self.dataset))


_LIMITS: dict[str, threading.BoundedSemaphore] = {}
_LIMITS_LOCK = threading.Lock()


def _endpoint_limit(endpoint: str, size: int) -> threading.BoundedSemaphore:
    with _LIMITS_LOCK:
        sem = _LIMITS.get(endpoint)
        if sem is None:
            sem = _LIMITS[endpoint] = threading.BoundedSemaphore(size)
        return sem


class RemotePredictor:
    """Client for ``POST {task, system, parts|sentences, vocabulary} -> {probs}``."""

    def __init__(self, spec: RemotePredictorSpec, client: Optional[httpx.Client] = None):
        self.spec = spec
        self.tokens = vocabulary(spec.task, spec.dataset).tokens
        self._client = client or httpx.Client(timeout=spec.timeout)
        self._limit = _endpoint_limit(spec.endpoint, spec.max_in_flight)

    @property
    def task(self) -> Task:
        return self.spec.task

    def close(self) -> None:
        self._client.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def distribution(
        self, system: str, parts: Optional[Sequence[str]] = None, sentences: Optional[Sequence] = None
    ) -> ClassDistribution:
        body = {"task": self.spec.task.value, "system": system, "vocabulary": list(self.tokens)}
        if sentences is not None:
            body["sentences"] = [s.raw if hasattr(s, "raw") else str(s) for s in sentences]
        else:
            body["parts"] = list(parts or [])
        return self.parse_response(self._post(body))

    def _post(self, body: dict):
        last: Optional[Exception] = None
        for attempt in range(self.spec.retry + 1):
            try:
                with self._limit:
                    resp = self._client.post(self.spec.endpoint, json=body, timeout=self.spec.timeout)
            except httpx.TimeoutException as exc:
                last = RemoteTimeoutError(f"{self.spec.endpoint} timed out after {self.spec.timeout}s")
                last.__cause__ = exc
            except httpx.TransportError as exc:
                last = RemoteError(f"{self.spec.endpoint}: {exc}")
                last.__cause__ = exc
            else:
                if resp.status_code >= 500:
                    last = RemoteError(f"{self.spec.endpoint} answered HTTP {resp.status_code}")
                elif resp.status_code >= 400:
                    raise RemoteProtocolError(f"{self.spec.endpoint} rejected the request: HTTP {resp.status_code}")
                else:
                    try:
                        return resp.json()
                    except ValueError:
                        raise RemoteProtocolError(f"{self.spec.endpoint} returned a non-JSON body") from None
            logger.warning("remote attempt %d/%d failed: %s", attempt + 1, self.spec.retry + 1, last)
            if attempt < self.spec.retry:
                time.sleep(min(0.05 * 2**attempt, 1.0))
        assert last is not None
        raise last

    def parse_response(self, payload) -> ClassDistribution:
        if not isinstance(payload, dict) or not isinstance(payload.get("probs"), dict):
            raise RemoteProtocolError("response must be an object with a 'probs' mapping")
        raw = []
        for tok in self.tokens:
            value = payload["probs"].get(tok, 0.0)
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise RemoteProtocolError(f"probability for {tok} is not a number: {value!r}")
            if not math.isfinite(value) or value < 0:
                raise RemoteProtocolError(f"probability for {tok} is invalid: {value!r}")
            raw.append(float(value))
        mass = math.fsum(raw)
        if mass <= 0:
            raise RemoteProtocolError("no probability mass on the task vocabulary")
        probs = np.array(raw) / mass
        return ClassDistribution.from_array(self.spec.task, self.tokens, probs, raw_mass=mass)


Predictor = Union[BaselineModel, RemotePredictor]


class Players(str, Enum):
    PARTS = "parts"
    SENTENCE_GROUPS = "groups"


def _check_task(model: Predictor, doc: PromptDocument) -> None:
    if model.task != doc.task:
        raise ModelError(f"model predicts {model.task.value}, document is for {doc.task.value}")


def predict(model: Predictor, doc: PromptDocument) -> ClassDistribution:
    _check_task(model, doc)
    return model.distribution(doc.system, parts=list(doc.parts))


def coalition_value(
    model: Predictor,
    doc: PromptDocument,
    coalition: Iterable[int],
    players: Union[Players, str],
    target: int,
) -> float:
    """Probability of ``target`` given the system prompt plus the selected players.

    Players are 0-based: part indices (general, infrastructure, event, unit)
    or positions in ``doc.group_labels``.
    """
    _check_task(model, doc)
    players = Players(players)
    coalition = set(coalition)
    if players is Players.PARTS:
        n = len(doc.parts)
    else:
        if not doc.group_labels:
            raise ValueError("document has no sentence groups; run assign_groups first")
        n = len(doc.group_labels)
    bad = [i for i in coalition if not 0 <= i < n]
    if bad:
        raise ValueError(f"player indices {bad} outside 0..{n - 1}")
    if players is Players.PARTS:
        dist = model.distribution(doc.system, parts=doc.reduced_parts(coalition))
    else:
        labels = [doc.group_labels[i] for i in sorted(coalition)]
        dist = model.distribution(doc.system, sentences=doc.reduced_sentences(labels))
    if not 0 <= target < len(dist.probs):
        raise ValueError(f"target {target} outside 0..{len(dist.probs) - 1}")
    return dist.probs[target]
