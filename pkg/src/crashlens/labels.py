"""Prediction targets and their special-token vocabularies.

Class indices used throughout the package are 0-based positions in the
vocabulary returned by :func:`vocabulary`.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum, IntEnum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Optional, Union


class Task(str, Enum):
    INJURY = "Injury"
    SEVERITY = "Severity"
    TYPE = "Type"

    @classmethod
    def parse(cls, value: Union[str, "Task"]) -> "Task":
        if isinstance(value, Task):
            return value
        for task in cls:
            if task.value.lower() == str(value).strip().lower():
                return task
        raise ValueError(f"unknown task {value!r}; expected one of {[t.value for t in cls]}")


WASHINGTON = "WA"
ILLINOIS = "IL"

_DATASET_ALIASES = {
    "wa": WASHINGTON,
    "washington": WASHINGTON,
    "il": ILLINOIS,
    "illinois": ILLINOIS,
}

TYPE_CARDINALITY = {WASHINGTON: 14, ILLINOIS: 16}


def normalize_dataset(name: str) -> str:
    """Map dataset aliases to ``"WA"`` / ``"IL"``; other names pass through."""
    key = str(name).strip()
    return _DATASET_ALIASES.get(key.lower(), key)


class Injury(IntEnum):
    ZERO = 0
    ONE = 1
    TWO = 2
    THREE_PLUS = 3


class Severity(IntEnum):
    """KABCO levels, S1 = no apparent injury ... S5 = fatal."""

    S1 = 1
    S2 = 2
    S3 = 3
    S4 = 4
    S5 = 5


INJURY_TOKENS = ("<ZERO>", "<ONE>", "<TWO>", "<THREE AND MORE THAN THREE>")
SEVERITY_TOKENS = tuple(f"<S{k}>" for k in range(1, 6))


class LabelError(ValueError):
    """A raw source code that the codemap does not cover."""

    def __init__(self, code: str, what: str):
        super().__init__(f"unmapped {what} code {code!r}")
        self.code = code


@dataclass(frozen=True)
class TypeLabel:
    k: int  # 1-based, as in T_k
    name: str


@dataclass(frozen=True)
class LabelSet:
    injury: Injury
    severity: Severity
    type: TypeLabel

    def class_index(self, task: Task) -> int:
        task = Task.parse(task)
        if task is Task.INJURY:
            return int(self.injury)
        if task is Task.SEVERITY:
            return int(self.severity) - 1
        return self.type.k - 1


@dataclass(frozen=True)
class SpecialVocab:
    task: Task
    dataset: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("special tokens must be unique")

    def __len__(self) -> int:
        return len(self.tokens)

    def index(self, token: str) -> int:
        return self.tokens.index(token)

    def token(self, index: int) -> str:
        return self.tokens[index]


@dataclass(frozen=True)
class Codemap:
    """Raw source codes -> KABCO level and crash-type class, per dataset."""

    dataset: str
    severity: Mapping[str, int]
    type_classes: tuple[str, ...]
    type_codes: Mapping[str, str]

    def __post_init__(self):
        expected = TYPE_CARDINALITY.get(self.dataset)
        if expected is not None and len(self.type_classes) != expected:
            raise ValueError(
                f"{self.dataset} codemap lists {len(self.type_classes)} crash types, expected {expected}"
            )
        if len(set(self.type_classes)) != len(self.type_classes):
            raise ValueError("crash type classes must be unique")
        bad = {v for v in self.severity.values() if not 1 <= v <= 5}
        if bad:
            raise ValueError(f"severity levels out of range 1..5: {sorted(bad)}")
        unknown = set(self.type_codes.values()) - set(self.type_classes)
        if unknown:
            raise ValueError(f"type codes map to undeclared classes: {sorted(unknown)}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "Codemap":
        dataset = normalize_dataset(data["dataset"])
        type_classes = tuple(data["type_classes"])
        type_codes = {_norm(c): c for c in type_classes}
        type_codes.update({_norm(k): v for k, v in data.get("type_codes", {}).items()})
        severity = {_norm(k): int(v) for k, v in data["severity"].items()}
        return cls(dataset, severity, type_classes, type_codes)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Codemap":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _norm(code: str) -> str:
    return " ".join(str(code).strip().lower().split())


@lru_cache(maxsize=None)
def default_codemap(dataset: str) -> Codemap:
    dataset = normalize_dataset(dataset)
    ref = resources.files("crashlens") / "data" / dataset.lower() / "codemap.json"
    return Codemap.from_dict(json.loads(ref.read_text(encoding="utf-8")))


def derive_injury(count: int) -> Injury:
    if count < 0:
        raise ValueError("injury count must be non-negative")
    return Injury(min(int(count), 3))


def derive_severity(code: str, codemap: Codemap) -> Severity:
    try:
        return Severity(codemap.severity[_norm(code)])
    except KeyError:
        raise LabelError(code, "severity") from None


def derive_type(code: str, dataset: str, codemap: Optional[Codemap] = None) -> TypeLabel:
    dataset = normalize_dataset(dataset)
    codemap = codemap or default_codemap(dataset)
    if codemap.dataset != dataset:
        raise ValueError(f"codemap is for {codemap.dataset}, not {dataset}")
    try:
        name = codemap.type_codes[_norm(code)]
    except KeyError:
        raise LabelError(code, "crash type") from None
    return TypeLabel(codemap.type_classes.index(name) + 1, name)


def vocabulary(task: Union[Task, str], dataset: str) -> SpecialVocab:
    task = Task.parse(task)
    dataset = normalize_dataset(dataset)
    if task is Task.INJURY:
        tokens = INJURY_TOKENS
    elif task is Task.SEVERITY:
        tokens = SEVERITY_TOKENS
    else:
        k = TYPE_CARDINALITY.get(dataset)
        if k is None:
            k = len(default_codemap(dataset).type_classes)
        tokens = tuple(f"<T{i}>" for i in range(1, k + 1))
    return SpecialVocab(task, dataset, tokens)


def derive_labels(outcome: Mapping[str, str], dataset: str, codemap: Optional[Codemap] = None) -> LabelSet:
    """Build a :class:`LabelSet` from the raw outcome columns of a crash row.

    ``outcome`` needs ``injured`` (integer count), ``severity`` and
    ``crash_type`` (raw source codes).
    """
    codemap = codemap or default_codemap(dataset)
    try:
        count = int(str(outcome["injured"]).strip())
    except (KeyError, ValueError):
        raise LabelError(str(outcome.get("injured")), "injury count") from None
    return LabelSet(
        injury=derive_injury(count),
        severity=derive_severity(outcome.get("severity", ""), codemap),
        type=derive_type(outcome.get("crash_type", ""), dataset, codemap),
    )
