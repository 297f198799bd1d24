import json
import logging
import shutil

import pytest
from conftest import FIXTURES, GOLDEN, fixture_paths
from hypothesis import given
from hypothesis import strategies as st

from crashlens.ingest import (
    CategoryMap,
    CrashEvent,
    IngestError,
    attach_annotations,
    default_category_maps,
    join_event,
    load_annotations,
    load_category_maps,
    parse_tables,
    read_events,
    reduce_categories,
    write_events,
)


def data_lines(path) -> int:
    with open(path, encoding="utf-8") as fh:
        return sum(1 for line in fh if line.strip()) - 1


def copy_fixtures(tmp_path):
    paths = {}
    for table, src in fixture_paths().items():
        paths[table] = tmp_path / src.name
        shutil.copy(src, paths[table])
    return paths


def test_counts_match_line_oracle(tables):
    expected = {t: data_lines(p) for t, p in fixture_paths().items()}
    assert expected == {"crash": 3, "vehicle": 5, "person": 6, "infrastructure": 2}
    assert tables.counts == expected
    assert tables.diagnostics == []


def test_duplicate_crash_id(tmp_path):
    paths = copy_fixtures(tmp_path)
    with open(paths["crash"], "a", encoding="utf-8") as fh:
        fh.write(open(paths["crash"], encoding="utf-8").read().splitlines()[2] + "\n")
    with pytest.raises(IngestError, match="C2"):
        parse_tables(paths)


def test_dangling_vehicle_row_rejected(tmp_path, caplog):
    paths = copy_fixtures(tmp_path)
    with open(paths["vehicle"], "a", encoding="utf-8") as fh:
        fh.write("C404,1,bus,2001,north,backing,none,none,none\n")
    with caplog.at_level(logging.WARNING):
        tables = parse_tables(paths)
    assert tables.counts["vehicle"] == 5
    assert any("C404" in d for d in tables.diagnostics)


def test_missing_file_and_column(tmp_path):
    paths = copy_fixtures(tmp_path)
    with pytest.raises(IngestError, match="not found"):
        parse_tables({**paths, "person": tmp_path / "nope.csv"})
    text = paths["person"].read_text().replace(",bac,", ",blood,")
    paths["person"].write_text(text)
    with pytest.raises(IngestError, match="bac"):
        parse_tables(paths)


def test_overlapping_segments_rejected(tmp_path):
    paths = copy_fixtures(tmp_path)
    with open(paths["infrastructure"], "a", encoding="utf-8") as fh:
        fh.write("R5,14.0,16.0,freeway,60 mph,4,12,10,none,1,level,asphalt\n")
    with pytest.raises(IngestError, match="overlapping"):
        parse_tables(paths)


def test_undeclared_columns_pass_through(tables):
    assert tables.crash["C1"]["report_officer"] == "A. Smith"


def test_join_matches_golden(tables):
    golden = json.loads((GOLDEN / "event_C1.json").read_text())
    ev = join_event(tables, "C1")
    assert ev.to_dict() == golden
    assert CrashEvent.from_dict(golden).canonical_json() == ev.canonical_json()


def test_units_in_index_order(tables):
    keys = list(join_event(tables, "C1").sections["unit"])
    assert keys[0].startswith("unit1.") and keys[-1].startswith("unit2.person1.")
    c2 = list(join_event(tables, "C2").sections["unit"])
    order = [k.rsplit(".", 1)[0] for k in c2]
    assert list(dict.fromkeys(order)) == ["unit1", "unit1.person1", "unit1.person2", "unit2", "unit3.person1"]


def test_segment_containment_and_boundary(tables):
    assert join_event(tables, "C1").sections["infrastructure"]["speed_limit"] == "60 mph"  # 12.4 in [10, 15)
    # 15.0 sits on the boundary and belongs to the segment starting there
    assert join_event(tables, "C2").sections["infrastructure"]["speed_limit"] == "35 mph"


def test_fallback_when_no_segment(tables):
    ev = join_event(tables, "C3")
    assert ev.warnings and "R99" in ev.warnings[0]
    assert ev.sections["infrastructure"]["roadway_type"] == "county road"
    assert ev.sections["infrastructure"]["weather"] == "unknown"


def test_join_unknown_crash(tables):
    with pytest.raises(IngestError):
        join_event(tables, "C9")


def test_join_deterministic(tables):
    assert join_event(tables, "C2").canonical_json() == join_event(tables, "C2").canonical_json()


def test_reduce_examples(tables):
    maps = default_category_maps()
    ev = join_event(tables, "C2")
    ev.sections["event"]["first_event"] = "pedalcyclist struck by vehicle"
    out = reduce_categories(ev, maps)
    assert out.sections["event"]["first_event"] == "pedalcyclist collisions"
    assert out.sections["general"] == ev.sections["general"]
    assert reduce_categories(out, maps).to_dict() == out.to_dict()


def test_category_map_invariants():
    with pytest.raises(ValueError, match="listed twice"):
        CategoryMap.build("weather", [(["rain"], "wet"), (["rain", "snow"], "cold")])
    with pytest.raises(ValueError, match="source"):
        CategoryMap.build("weather", [(["drizzle"], "rain"), (["rain"], "wet")])


values = st.sampled_from(["rain", "drizzle", "snow", "sleet", "clear", "fog"])


@given(st.permutations([("weather", ["drizzle"], "rain"), ("lighting", ["dusk"], "dark"),
                        ("road_surface", ["slush"], "icy")]), values)
def test_reduce_order_independent(specs, weather):
    ev = CrashEvent("X", "WA", {"general": {"a": "1"}, "infrastructure": {"weather": weather, "lighting": "dusk",
                                                                          "road_surface": "slush"},
                                "event": {"b": "2"}, "unit": {"unit1.c": "3"}})
    maps = [CategoryMap.build(a, [(src, tgt)]) for a, src, tgt in specs]
    once = reduce_categories(ev, maps)
    assert once.to_dict() == reduce_categories(ev, list(reversed(maps))).to_dict()
    assert reduce_categories(once, maps).to_dict() == once.to_dict()


def test_text_and_json_category_maps_agree(tmp_path):
    spec = [{"attribute": "weather", "sources": ["drizzle", "mist"], "target": "rain"}]
    path = tmp_path / "maps.json"
    path.write_text(json.dumps(spec))
    from_json = load_category_maps(path)
    (tmp_path / "maps.txt").write_text("weather | drizzle; mist | rain\n")
    assert from_json == load_category_maps(tmp_path / "maps.txt")


def test_annotations_merge_and_conflict(tables, caplog):
    with caplog.at_level(logging.INFO, logger="crashlens"):
        c2 = attach_annotations(join_event(tables, "C2"), FIXTURES / "annotations.csv")
    assert c2.annotations == {"lanes": "3", "intersection": "yes", "residential": "yes"}
    assert c2.sections["infrastructure"]["lanes"] == "3"  # segment said 2; annotation wins
    assert any("overrides" in r.message for r in caplog.records)
    c1 = attach_annotations(join_event(tables, "C1"), FIXTURES / "annotations.csv")
    assert c1.annotations["lanes"] == "4" and c1.annotations["intersection"] == "no"


def test_annotations_absent_and_malformed(tables, caplog):
    with caplog.at_level(logging.WARNING):
        data = load_annotations(FIXTURES / "annotations.csv")
    assert "C3" not in data
    assert any("malformed" in r.message for r in caplog.records)
    c3 = attach_annotations(join_event(tables, "C3"), data)
    assert c3.annotations == {}


def test_events_roundtrip(tmp_path, fixture_events):
    write_events(fixture_events, tmp_path / "events.jsonl")
    back = read_events(tmp_path / "events.jsonl")
    assert [e.to_dict() for e in back] == [e.to_dict() for e in fixture_events]


def test_event_validation():
    ev = CrashEvent("X", "WA", {"general": {"a": "1"}, "infrastructure": {}, "event": {"b": "2"}, "unit": {"c": "3"}})
    with pytest.raises(IngestError, match="empty"):
        ev.validate()
