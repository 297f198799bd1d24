import numpy as np
import pytest
from conftest import FIXTURES
from hypothesis import given, settings
from hypothesis import strategies as st

from crashlens.attribution import AttributionReport
from crashlens.ingest import CrashEvent
from crashlens.labels import SEVERITY_TOKENS, Task
from crashlens.predictor import ClassDistribution
from crashlens.riskanalysis import (
    Bac,
    Behavior,
    ConditionPattern,
    ConditionVector,
    RiskCase,
    RiskRow,
    RiskRules,
    Roadway,
    UserType,
    all_patterns,
    conditional_risk,
    extract_conditions,
    factor_count_csv,
    parse_bac,
    risk_factor_count,
    risk_factors,
    risk_table,
    risk_table_csv,
)

GROUPS = ("BAC", "Road Class", "Work Zone", "Person Info", "Driver Behavior")


@pytest.fixture(scope="module")
def rules():
    return RiskRules.load(FIXTURES / "risk_rules.json")


def event(unit=None, infrastructure=None, general=None):
    return CrashEvent("X", "WA", {"general": general or {}, "infrastructure": infrastructure or {},
                                  "event": {}, "unit": unit or {}})


def case(s4: float, s5: float, cv=ConditionVector(), phi=None):
    rest = (1.0 - s4 - s5) / 3
    probs = np.array([rest, rest, rest, s4, s5])
    dist = ClassDistribution.from_array(Task.SEVERITY, SEVERITY_TOKENS, probs)
    values = phi or dict.fromkeys(GROUPS, 0.0)
    report = AttributionReport(tuple(values.values()), "exact", 0.0, 0.0, tuple(values))
    return RiskCase(cv, dist, {"S4": report, "S5": report})


def test_bac_examples(rules):
    assert extract_conditions(event({"unit1.person1.bac": "95 mg/L"}), rules).bac is Bac.AT_LEAST_80
    assert extract_conditions(event(), rules).bac is Bac.ZERO_OR_NOT_OFFERED


@pytest.mark.parametrize("raw, expected", [
    ("0", Bac.ZERO_OR_NOT_OFFERED), ("not offered", Bac.ZERO_OR_NOT_OFFERED), ("", Bac.ZERO_OR_NOT_OFFERED),
    ("40", Bac.UNDER_80), ("79.9 mg/L", Bac.UNDER_80), ("80", Bac.AT_LEAST_80), ("120 mg/L", Bac.AT_LEAST_80),
])
def test_bac_boundaries(raw, expected):
    assert parse_bac(raw, {"not offered"}) is expected


def test_behavior_mapping(rules):
    cv = extract_conditions(event({"unit1.contributing_circumstance": "Reckless Driving"}), rules)
    assert cv.behavior is Behavior.AGGRESSIVE
    mixed = {"unit1.contributing_circumstance": "distracted driving",
             "unit2.contributing_circumstance": "impaired driving"}
    assert extract_conditions(event(mixed), rules).behavior is Behavior.IMPAIRMENT_RELATED
    unknown = {"unit1.contributing_circumstance": "looked twice"}
    assert extract_conditions(event(unknown), rules).behavior is Behavior.OTHERS


def test_bac_takes_riskiest_person(rules):
    unit = {"unit1.person1.bac": "30", "unit2.person1.bac": "90", "unit2.person2.bac": "refused"}
    assert extract_conditions(event(unit), rules).bac is Bac.AT_LEAST_80


def test_fixture_events(rules, fixture_events):
    by_id = {ev.crash_id: extract_conditions(ev, rules) for ev in fixture_events}
    c2 = by_id["C2"]
    assert (c2.bac, c2.work_zone, c2.user_type, c2.behavior) == (
        Bac.AT_LEAST_80, True, UserType.PED_OR_PEDALCYCLIST, Behavior.IMPAIRMENT_RELATED)
    assert by_id["C1"].roadway is Roadway.FREEWAY
    assert by_id["C3"].bac is Bac.ZERO_OR_NOT_OFFERED


def test_condition_vector_roundtrip():
    cv = ConditionVector(Bac.UNDER_80, Roadway.FREEWAY, True, UserType.OTHER, Behavior.AGGRESSIVE)
    assert ConditionVector.from_dict(cv.to_dict()) == cv


def test_mean_risk_and_phi():
    work = dict.fromkeys(GROUPS, 0.0)
    a = case(0.2, 0.4, phi={**work, "Work Zone": 0.1})
    b = case(0.3, 0.5, phi={**work, "Work Zone": 0.3})
    row = conditional_risk([a, b])
    assert row.risk_level == pytest.approx(0.7)
    assert row.case_count == 2
    # S4+S5 contributions are the sum of the per-class reports
    assert row.mean_phi["work_zone"] == pytest.approx(0.4)
    s5 = conditional_risk([a, b], target="S5")
    assert s5.risk_level == pytest.approx(0.45) and s5.mean_phi["work_zone"] == pytest.approx(0.2)


def test_no_match_is_empty_signal():
    assert conditional_risk([case(0.1, 0.1)], ConditionPattern(work_zone=True)) is None
    with pytest.raises(ValueError):
        RiskRow(ConditionPattern(), "S5", 0, 0.5, {})


def test_unknown_target():
    with pytest.raises(ValueError):
        conditional_risk([case(0.1, 0.1)], target="S3")


def test_factor_count_examples():
    cv = ConditionVector(Bac.AT_LEAST_80, Roadway.FREEWAY, True, UserType.OTHER, Behavior.OTHERS)
    assert risk_factors(cv) == 3
    assert risk_factors(ConditionVector()) == 0
    full = ConditionVector(Bac.UNDER_80, Roadway.FREEWAY, True, UserType.PED_OR_PEDALCYCLIST, Behavior.AGGRESSIVE)
    assert risk_factors(full) == 5


def flagged(k: int) -> ConditionVector:
    values = [Bac.UNDER_80, Roadway.FREEWAY, True, UserType.PED_OR_PEDALCYCLIST, Behavior.IMPAIRMENT_RELATED]
    base = list(ConditionVector().__dict__.values())
    return ConditionVector(*(values[i] if i < k else base[i] for i in range(5)))


def test_linear_factor_curve():
    cases = [case(0.0, 0.2 * k, flagged(k)) for k in range(6) for _ in range(3)]
    curve = risk_factor_count(cases, "S5")
    assert [k for k, _, _ in curve] == list(range(6))
    assert [c for _, _, c in curve] == [3] * 6
    assert all(level == pytest.approx(0.2 * k, abs=1e-12) for k, level, _ in curve)
    assert factor_count_csv(curve, "S5").splitlines()[0] == "target,risk_factors,risk_level,case_count"


condition_vectors = st.builds(ConditionVector, st.sampled_from(list(Bac)), st.sampled_from(list(Roadway)),
                              st.booleans(), st.sampled_from(list(UserType)), st.sampled_from(list(Behavior)))
cases_strategy = st.lists(st.tuples(condition_vectors, st.floats(0, 0.5), st.floats(0, 0.5)), min_size=1, max_size=40)


@settings(max_examples=40, deadline=None)
@given(cases_strategy)
def test_full_pattern_is_global_mean(rows):
    cases = [case(a, b, cv) for cv, a, b in rows]
    row = conditional_risk(cases)
    assert row.risk_level == pytest.approx(np.mean([a + b for _, a, b in rows]), abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(cases_strategy)
def test_pattern_family_partitions_cases(rows):
    cases = [case(a, b, cv) for cv, a, b in rows]
    assert sum(r.case_count for r in risk_table(cases)) == len(cases)
    by_bac = [conditional_risk(cases, ConditionPattern(bac=b)) for b in Bac]
    assert sum(r.case_count for r in by_bac if r) == len(cases)


@settings(max_examples=40, deadline=None)
@given(cases_strategy, st.randoms(use_true_random=False))
def test_factor_count_permutation_invariant(rows, rnd):
    cases = [case(a, b, cv) for cv, a, b in rows]
    shuffled = list(cases)
    rnd.shuffle(shuffled)
    assert risk_factor_count(cases) == risk_factor_count(shuffled)


def test_pattern_family_size_and_csv():
    assert len(all_patterns()) == 3 * 2 * 2 * 2 * 5
    table = risk_table([case(0.1, 0.2)])
    lines = risk_table_csv(table).splitlines()
    assert len(lines) == 2
    assert lines[1].startswith("ZeroOrNotOffered,NotFreeway,False,Other,Others,S4+S5,1,")
