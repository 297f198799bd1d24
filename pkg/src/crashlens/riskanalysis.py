"""Conditional risk analysis over predicted confidences and group attributions.

A case's risk level is the probability its prediction puts on a severe
outcome. Three targets are reported side by side because the severe-outcome
combination is a choice: ``S4``, ``S5`` and their sum ``S4+S5``.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, fields
from enum import Enum
from importlib import resources
from itertools import product
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .attribution import AttributionReport
from .ingest import CrashEvent
from .predictor import ClassDistribution

BAC_LIMIT = 80.0  # mg/L
TARGETS = {"S4": (3,), "S5": (4,), "S4+S5": (3, 4)}
FACTORS = ("bac", "roadway", "work_zone", "user_type", "behavior")
_NUMBER = re.compile(r"[-+]?\d+(?:\.\d+)?")


class Bac(str, Enum):
    ZERO_OR_NOT_OFFERED = "ZeroOrNotOffered"
    UNDER_80 = "Under80"
    AT_LEAST_80 = "AtLeast80"


class Roadway(str, Enum):
    FREEWAY = "Freeway"
    NOT_FREEWAY = "NotFreeway"


class UserType(str, Enum):
    PED_OR_PEDALCYCLIST = "PedOrPedalcyclist"
    OTHER = "Other"


class Behavior(str, Enum):
    # declaration order doubles as severity rank when units disagree
    AGGRESSIVE = "Aggressive"
    IMPAIRMENT_RELATED = "ImpairmentRelated"
    TRAFFIC_RULES_VIOLATIONS = "TrafficRulesViolations"
    IMPROPER_DRIVING = "ImproperDriving"
    OTHERS = "Others"


@dataclass(frozen=True)
class ConditionVector:
    bac: Bac = Bac.ZERO_OR_NOT_OFFERED
    roadway: Roadway = Roadway.NOT_FREEWAY
    work_zone: bool = False
    user_type: UserType = UserType.OTHER
    behavior: Behavior = Behavior.OTHERS

    def to_dict(self) -> dict:
        return {f.name: (v.value if isinstance(v, Enum) else v) for f in fields(self) for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ConditionVector":
        return cls(
            Bac(data["bac"]), Roadway(data["roadway"]), bool(data["work_zone"]),
            UserType(data["user_type"]), Behavior(data["behavior"]),
        )


@dataclass(frozen=True)
class ConditionPattern:
    """A partial condition vector; ``None`` fields match anything."""

    bac: Optional[Bac] = None
    roadway: Optional[Roadway] = None
    work_zone: Optional[bool] = None
    user_type: Optional[UserType] = None
    behavior: Optional[Behavior] = None

    def matches(self, cv: ConditionVector) -> bool:
        return all(
            getattr(self, f.name) is None or getattr(self, f.name) == getattr(cv, f.name) for f in fields(self)
        )

    def describe(self) -> dict:
        return {f.name: (None if v is None else (v.value if isinstance(v, Enum) else v))
                for f in fields(self) for v in [getattr(self, f.name)]}


@dataclass(frozen=True)
class RiskRules:
    data: Mapping

    @classmethod
    def load(cls, path: Union[str, Path]) -> "RiskRules":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    @classmethod
    def default(cls) -> "RiskRules":
        ref = resources.files("crashlens") / "data" / "risk_rules.json"
        return cls(json.loads(ref.read_text(encoding="utf-8")))

    def keys(self, factor: str) -> list[str]:
        return list(self.data.get(factor, {}).get("keys", []))

    def values(self, factor: str, name: str) -> set[str]:
        return {_low(v) for v in self.data.get(factor, {}).get(name, [])}

    @property
    def behavior_map(self) -> dict[str, Behavior]:
        return {_low(k): Behavior(v) for k, v in self.data.get("behavior", {}).get("map", {}).items()}

    @property
    def factor_groups(self) -> dict[str, str]:
        return dict(self.data.get("factor_groups", {}))


def _low(text: str) -> str:
    return " ".join(str(text).lower().split())


def _values(event: CrashEvent, keys: Iterable[str]) -> list[str]:
    return [v for key in keys for v in event.lookup(key)]


def parse_bac(raw: str, not_offered: set[str] = frozenset()) -> Bac:
    text = _low(raw)
    if not text or text in not_offered:
        return Bac.ZERO_OR_NOT_OFFERED
    m = _NUMBER.search(text)
    if m is None:
        return Bac.ZERO_OR_NOT_OFFERED
    level = float(m.group())
    if level <= 0:
        return Bac.ZERO_OR_NOT_OFFERED
    return Bac.AT_LEAST_80 if level >= BAC_LIMIT else Bac.UNDER_80


_BAC_RANK = {Bac.ZERO_OR_NOT_OFFERED: 0, Bac.UNDER_80: 1, Bac.AT_LEAST_80: 2}


def extract_conditions(event: CrashEvent, rules: Optional[RiskRules] = None) -> ConditionVector:
    """Map raw attributes to the five factors; across units the riskiest value wins."""
    rules = rules or RiskRules.default()
    not_offered = rules.values("bac", "not_offered")
    bacs = [parse_bac(v, not_offered) for v in _values(event, rules.keys("bac"))]
    bac = max(bacs, key=_BAC_RANK.__getitem__, default=Bac.ZERO_OR_NOT_OFFERED)

    freeway = rules.values("roadway", "freeway")
    roadway = Roadway.FREEWAY if any(_low(v) in freeway for v in _values(event, rules.keys("roadway"))) \
        else Roadway.NOT_FREEWAY

    wz_true = rules.values("work_zone", "true")
    work_zone = any(_low(v) in wz_true for v in _values(event, rules.keys("work_zone")))

    vulnerable = rules.values("user_type", "vulnerable")
    user_type = UserType.PED_OR_PEDALCYCLIST if any(
        _low(v) in vulnerable for v in _values(event, rules.keys("user_type"))
    ) else UserType.OTHER

    bmap = rules.behavior_map
    order = list(Behavior)
    behaviors = [bmap.get(_low(v), Behavior.OTHERS) for v in _values(event, rules.keys("behavior"))]
    behavior = min(behaviors, key=order.index, default=Behavior.OTHERS)
    return ConditionVector(bac, roadway, work_zone, user_type, behavior)


@dataclass(frozen=True)
class RiskCase:
    conditions: ConditionVector
    dist: ClassDistribution
    # attribution per target name ("S4", "S5", optionally "S4+S5")
    reports: Mapping[str, AttributionReport]
    crash_id: str = ""

    def risk(self, target: str) -> float:
        return math.fsum(self.dist.probs[i] for i in TARGETS[target])

    def phi(self, target: str, group: str) -> Optional[float]:
        report = self.reports.get(target)
        if report is not None:
            return report.by_label().get(group)
        if target == "S4+S5" and "S4" in self.reports and "S5" in self.reports:
            # Shapley values are linear in the value function
            a = self.reports["S4"].by_label().get(group)
            b = self.reports["S5"].by_label().get(group)
            return None if a is None or b is None else a + b
        return None


@dataclass(frozen=True)
class RiskRow:
    condition: Union[ConditionVector, ConditionPattern]
    target: str
    case_count: int
    risk_level: float
    mean_phi: Mapping[str, Optional[float]]

    def __post_init__(self):
        if self.case_count < 1:
            raise ValueError("risk rows need at least one case")
        if not 0.0 <= self.risk_level <= 1.0 + 1e-12:
            raise ValueError("risk level outside [0, 1]")


def _mean(values: Sequence[float]) -> float:
    return math.fsum(values) / len(values)


def conditional_risk(
    cases: Sequence[RiskCase],
    pattern: ConditionPattern = ConditionPattern(),
    target: str = "S4+S5",
    factor_groups: Optional[Mapping[str, str]] = None,
) -> Optional[RiskRow]:
    """Mean risk and mean factor contributions over cases matching ``pattern``.

    Returns ``None`` when nothing matches.
    """
    if target not in TARGETS:
        raise ValueError(f"unknown target {target!r}; expected one of {list(TARGETS)}")
    factor_groups = factor_groups or RiskRules.default().factor_groups
    hits = [c for c in cases if pattern.matches(c.conditions)]
    if not hits:
        return None
    mean_phi: dict[str, Optional[float]] = {}
    for factor, group in factor_groups.items():
        vals = [v for c in hits for v in [c.phi(target, group)] if v is not None]
        mean_phi[factor] = _mean(vals) if vals else None
    return RiskRow(pattern, target, len(hits), _mean([c.risk(target) for c in hits]), mean_phi)


def risk_factors(cv: ConditionVector) -> int:
    """Count of high-risk factors present: drinking, work zone, freeway,
    pedestrian/pedalcyclist involvement, aggressive or impairment-related behavior."""
    return sum((
        cv.bac in (Bac.UNDER_80, Bac.AT_LEAST_80),
        cv.work_zone,
        cv.roadway is Roadway.FREEWAY,
        cv.user_type is UserType.PED_OR_PEDALCYCLIST,
        cv.behavior in (Behavior.AGGRESSIVE, Behavior.IMPAIRMENT_RELATED),
    ))


def risk_factor_count(cases: Sequence[RiskCase], target: str = "S4+S5") -> list[tuple[int, float, int]]:
    """``(factor count, mean risk level, case count)`` sorted by factor count."""
    groups: dict[int, list[float]] = {}
    for c in cases:
        groups.setdefault(risk_factors(c.conditions), []).append(c.risk(target))
    return [(k, _mean(sorted(v)), len(v)) for k, v in sorted(groups.items())]


def all_patterns() -> list[ConditionPattern]:
    """Every full combination of factor values (a complete disjoint family)."""
    return [
        ConditionPattern(*combo)
        for combo in product(list(Bac), list(Roadway), [False, True], list(UserType), list(Behavior))
    ]


def risk_table(
    cases: Sequence[RiskCase], target: str = "S4+S5", factor_groups: Optional[Mapping[str, str]] = None
) -> list[RiskRow]:
    rows = [conditional_risk(cases, p, target, factor_groups) for p in all_patterns()]
    return [r for r in rows if r is not None]


def risk_table_csv(rows: Sequence[RiskRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([*FACTORS, "target", "case_count", "risk_level", *(f"phi_{f}" for f in FACTORS)])
    for r in rows:
        cond = r.condition.describe() if isinstance(r.condition, ConditionPattern) else r.condition.to_dict()
        w.writerow([
            *("" if cond[f] is None else cond[f] for f in FACTORS),
            r.target, r.case_count, repr(r.risk_level),
            *("" if r.mean_phi.get(f) is None else repr(r.mean_phi[f]) for f in FACTORS),
        ])
    return buf.getvalue()


def factor_count_csv(curve: Sequence[tuple[int, float, int]], target: str) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["target", "risk_factors", "risk_level", "case_count"])
    for k, level, count in curve:
        w.writerow([target, k, repr(level), count])
    return buf.getvalue()
