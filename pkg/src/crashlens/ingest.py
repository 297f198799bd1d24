"""Load HSIS-style crash tables and join them into per-crash records."""

from __future__ import annotations

import bisect
import copy
import csv
import json
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .labels import normalize_dataset

logger = logging.getLogger(__name__)

SECTION_NAMES = ("general", "infrastructure", "event", "unit")
TABLE_NAMES = ("crash", "vehicle", "person", "infrastructure")
UNKNOWN = "unknown"
_BLANK = {"", "unknown", "na", "n/a", "null", "?"}

PathLike = Union[str, Path]


class IngestError(ValueError):
    pass


def normalize_value(value: Optional[str]) -> str:
    if value is None:
        return UNKNOWN
    text = " ".join(str(value).split())
    return UNKNOWN if text.lower() in _BLANK else text


def base_key(key: str) -> str:
    """``"unit2.person1.age"`` -> ``"age"``."""
    return key.rsplit(".", 1)[-1]


def entity_prefix(key: str) -> str:
    return key.rsplit(".", 1)[0] if "." in key else ""


@dataclass(frozen=True)
class TableSchema:
    """Column declarations for the four tables (see ``data/schema.json``)."""

    crash: Mapping
    vehicle: Mapping
    person: Mapping
    infrastructure: Mapping

    @classmethod
    def from_dict(cls, data: Mapping) -> "TableSchema":
        missing = [t for t in TABLE_NAMES if t not in data]
        if missing:
            raise IngestError(f"schema lacks tables: {missing}")
        sections = data["crash"].get("sections", {})
        unknown = set(sections) - {"general", "infrastructure", "event"}
        if unknown:
            raise IngestError(f"crash columns mapped to unknown sections {sorted(unknown)}")
        return cls(data["crash"], data["vehicle"], data["person"], data["infrastructure"])

    @classmethod
    def load(cls, path: PathLike) -> "TableSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    @classmethod
    def default(cls) -> "TableSchema":
        text = (resources.files("crashlens") / "data" / "schema.json").read_text(encoding="utf-8")
        return cls.from_dict(json.loads(text))

    def declared(self, table: str) -> list[str]:
        spec = getattr(self, table)
        if table == "crash":
            cols = [spec["id"], spec["route"], spec["milepost"]]
            for names in spec.get("sections", {}).values():
                cols.extend(names)
            cols.extend(spec.get("outcome", []))
            cols.extend(spec.get("fallback", {}).values())
            return _unique(cols)
        if table == "vehicle":
            return _unique([spec["id"], spec["unit"], *spec["columns"]])
        if table == "person":
            return _unique([spec["id"], spec["unit"], spec["person"], *spec["columns"]])
        return _unique([spec["route"], spec["begin"], spec["end"], *spec["columns"]])


def _unique(items: Iterable[str]) -> list[str]:
    return list(dict.fromkeys(items))


@dataclass(frozen=True)
class Segment:
    route: str
    begin: float
    end: float
    row: Mapping[str, str]


@dataclass
class RawTables:
    schema: TableSchema
    crash: dict[str, dict[str, str]]
    vehicle: dict[tuple, dict[str, str]]
    person: dict[tuple, dict[str, str]]
    infrastructure: dict[str, list[Segment]]
    diagnostics: list[str] = field(default_factory=list)

    @property
    def counts(self) -> dict[str, int]:
        return {
            "crash": len(self.crash),
            "vehicle": len(self.vehicle),
            "person": len(self.person),
            "infrastructure": sum(len(s) for s in self.infrastructure.values()),
        }

    def find_segment(self, route: str, milepost: float) -> Optional[Segment]:
        segments = self.infrastructure.get(route)
        if not segments:
            return None
        starts = [s.begin for s in segments]
        pos = bisect.bisect_right(starts, milepost) - 1
        if pos >= 0 and segments[pos].begin <= milepost < segments[pos].end:
            return segments[pos]
        return None


def _index(value: str):
    text = str(value).strip()
    try:
        return int(text)
    except ValueError:
        try:
            return float(text)
        except ValueError:
            return text


def _read_table(path: PathLike, declared: Sequence[str], name: str) -> list[dict[str, str]]:
    path = Path(path)
    if not path.is_file():
        raise IngestError(f"{name} table not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in declared if c not in header]
        if missing:
            raise IngestError(f"{name} table {path} lacks declared columns {missing}")
        rows = [{k: (v if v is not None else "") for k, v in row.items() if k is not None} for row in reader]
    logger.info("read %d %s rows from %s", len(rows), name, path)
    return rows


def parse_tables(paths: Mapping[str, PathLike], schema: Optional[TableSchema] = None) -> RawTables:
    """Read the four tables; rows with dangling crash ids are dropped with a diagnostic."""
    schema = schema or TableSchema.default()
    missing = [t for t in TABLE_NAMES if t not in paths]
    if missing:
        raise IngestError(f"no path given for tables {missing}")
    diagnostics: list[str] = []

    cs = schema.crash
    crash: dict[str, dict[str, str]] = {}
    for row in _read_table(paths["crash"], schema.declared("crash"), "crash"):
        cid = row[cs["id"]].strip()
        if cid in crash:
            raise IngestError(f"duplicate crash id {cid!r} in crash table")
        crash[cid] = row

    def _children(table: str, key_cols: Sequence[str]) -> dict[tuple, dict[str, str]]:
        out: dict[tuple, dict[str, str]] = {}
        for lineno, row in enumerate(_read_table(paths[table], schema.declared(table), table), start=2):
            cid = row[key_cols[0]].strip()
            if cid not in crash:
                msg = f"{table} row {lineno}: unknown crash id {cid!r}, row rejected"
                logger.warning(msg)
                diagnostics.append(msg)
                continue
            key = (cid, *(_index(row[c]) for c in key_cols[1:]))
            if key in out:
                raise IngestError(f"duplicate {table} key {key}")
            out[key] = row
        return out

    vehicle = _children("vehicle", [schema.vehicle["id"], schema.vehicle["unit"]])
    person = _children("person", [schema.person["id"], schema.person["unit"], schema.person["person"]])

    ins = schema.infrastructure
    infrastructure: dict[str, list[Segment]] = {}
    for row in _read_table(paths["infrastructure"], schema.declared("infrastructure"), "infrastructure"):
        try:
            begin, end = float(row[ins["begin"]]), float(row[ins["end"]])
        except ValueError:
            raise IngestError(f"non-numeric milepost range in infrastructure row {row}") from None
        if not begin < end:
            raise IngestError(f"empty milepost range [{begin}, {end}) on route {row[ins['route']]!r}")
        route = row[ins["route"]].strip()
        infrastructure.setdefault(route, []).append(Segment(route, begin, end, row))
    for route, segments in infrastructure.items():
        segments.sort(key=lambda s: (s.begin, s.end))
        for a, b in zip(segments, segments[1:]):
            if b.begin < a.end:
                raise IngestError(
                    f"overlapping segments on route {route!r}: [{a.begin}, {a.end}) and [{b.begin}, {b.end})"
                )

    tables = RawTables(schema, crash, vehicle, person, infrastructure, diagnostics)
    logger.info("parsed tables: %s", tables.counts)
    return tables


@dataclass
class CrashEvent:
    crash_id: str
    dataset: str
    sections: dict[str, dict[str, str]]
    gps: Optional[tuple[float, float]] = None
    annotations: dict[str, str] = field(default_factory=dict)
    outcome: dict[str, str] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def validate(self) -> None:
        if tuple(self.sections) != SECTION_NAMES:
            raise IngestError(f"crash {self.crash_id}: sections must be {SECTION_NAMES}, got {tuple(self.sections)}")
        for name, section in self.sections.items():
            if not section:
                raise IngestError(f"crash {self.crash_id}: section {name!r} is empty")

    def lookup(self, key: str) -> list[str]:
        """All values whose base attribute name is ``key``, in section order."""
        found = [v for sec in self.sections.values() for k, v in sec.items() if base_key(k) == key]
        if key in self.annotations:
            found.append(self.annotations[key])
        return found

    def to_dict(self) -> dict:
        return {
            "crash_id": self.crash_id,
            "dataset": self.dataset,
            "gps": list(self.gps) if self.gps else None,
            "sections": self.sections,
            "annotations": self.annotations,
            "outcome": self.outcome,
            "warnings": self.warnings,
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "CrashEvent":
        gps = data.get("gps")
        return cls(
            crash_id=data["crash_id"],
            dataset=data["dataset"],
            sections={k: dict(v) for k, v in data["sections"].items()},
            gps=tuple(gps) if gps else None,
            annotations=dict(data.get("annotations", {})),
            outcome=dict(data.get("outcome", {})),
            warnings=list(data.get("warnings", [])),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, separators=(",", ":"))


def _gps(row: Mapping[str, str], spec: Mapping) -> Optional[tuple[float, float]]:
    try:
        return float(row[spec["lat"]]), float(row[spec["lon"]])
    except (KeyError, TypeError, ValueError):
        return None


def join_event(tables: RawTables, crash_id: str, dataset: str = "WA") -> CrashEvent:
    """Join one crash with its segment, vehicles and persons."""
    if crash_id not in tables.crash:
        raise IngestError(f"crash id {crash_id!r} not in crash table")
    schema = tables.schema
    cs = schema.crash
    row = tables.crash[crash_id]
    cols = cs.get("sections", {})
    warnings: list[str] = []

    general = {c: normalize_value(row.get(c)) for c in cols.get("general", [])}
    event = {c: normalize_value(row.get(c)) for c in cols.get("event", [])}

    infrastructure: dict[str, str] = {}
    segment = None
    route = row[cs["route"]].strip()
    try:
        segment = tables.find_segment(route, float(row[cs["milepost"]]))
    except ValueError:
        pass
    if segment is not None:
        for c in schema.infrastructure["columns"]:
            infrastructure[c] = normalize_value(segment.row.get(c))
    else:
        msg = f"crash {crash_id}: no infrastructure segment on route {route!r} at milepost {row[cs['milepost']]!r}"
        logger.warning(msg)
        warnings.append(msg)
        for seg_col, crash_col in cs.get("fallback", {}).items():
            infrastructure[seg_col] = normalize_value(row.get(crash_col))
    for c in cols.get("infrastructure", []):
        infrastructure[c] = normalize_value(row.get(c))

    unit: dict[str, str] = {}
    vehicles = {k[1]: r for k, r in tables.vehicle.items() if k[0] == crash_id}
    persons = sorted(
        ((k[1:], r) for k, r in tables.person.items() if k[0] == crash_id),
        key=lambda item: tuple(_sort_key(i) for i in item[0]),
    )
    for u in sorted(set(vehicles) | {k[0] for k, _ in persons}, key=_sort_key):
        if u in vehicles:
            for c in schema.vehicle["columns"]:
                unit[f"unit{u}.{c}"] = normalize_value(vehicles[u].get(c))
        for (pu, p), prow in persons:
            if pu == u:
                for c in schema.person["columns"]:
                    unit[f"unit{u}.person{p}.{c}"] = normalize_value(prow.get(c))

    ev = CrashEvent(
        crash_id=crash_id,
        dataset=normalize_dataset(dataset),
        sections={"general": general, "infrastructure": infrastructure, "event": event, "unit": unit},
        gps=_gps(row, cs),
        outcome={c: row.get(c, "").strip() for c in cs.get("outcome", [])},
        warnings=warnings,
    )
    ev.validate()
    return ev


def _sort_key(value):
    return (0, value, "") if isinstance(value, (int, float)) else (1, 0, str(value))


def join_all(tables: RawTables, dataset: str = "WA") -> list[CrashEvent]:
    return [join_event(tables, cid, dataset) for cid in tables.crash]


@dataclass(frozen=True)
class CategoryMap:
    attribute: str
    merges: tuple[tuple[frozenset, str], ...]

    def __post_init__(self):
        seen: set[str] = set()
        for sources, _ in self.merges:
            overlap = seen & sources
            if overlap:
                raise ValueError(f"{self.attribute}: source values listed twice: {sorted(overlap)}")
            seen |= sources
        chained = {t.lower() for _, t in self.merges} & seen
        if chained:
            raise ValueError(f"{self.attribute}: target values also used as sources: {sorted(chained)}")

    @classmethod
    def build(cls, attribute: str, merges: Iterable[tuple[Iterable[str], str]]) -> "CategoryMap":
        return cls(attribute, tuple((frozenset(s.strip().lower() for s in src), tgt.strip()) for src, tgt in merges))

    def lookup(self, value: str) -> Optional[str]:
        low = value.strip().lower()
        for sources, target in self.merges:
            if low in sources:
                return target
        return None


def _merge_maps(maps: Sequence[CategoryMap]) -> dict[str, CategoryMap]:
    by_attr: dict[str, list] = {}
    for m in maps:
        by_attr.setdefault(m.attribute, []).extend(m.merges)
    return {a: CategoryMap(a, tuple(merges)) for a, merges in by_attr.items()}


def load_category_maps(path: PathLike) -> list[CategoryMap]:
    """Read category merges from JSON or from ``attribute | a; b | target`` lines."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    merges: list[tuple[str, list[str], str]] = []
    if path.suffix == ".json":
        for item in json.loads(text):
            merges.append((item["attribute"], item["sources"], item["target"]))
    else:
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            fields = [f.strip() for f in line.split("|")]
            if len(fields) != 3:
                raise ValueError(f"{path}:{lineno}: expected 'attribute | sources | target'")
            merges.append((fields[0], [s for s in fields[1].split(";") if s.strip()], fields[2]))
    grouped: dict[str, list] = {}
    for attr, sources, target in merges:
        grouped.setdefault(attr, []).append((sources, target))
    return [CategoryMap.build(a, m) for a, m in grouped.items()]


def default_category_maps() -> list[CategoryMap]:
    ref = resources.files("crashlens") / "data" / "category_maps.txt"
    with resources.as_file(ref) as p:
        return load_category_maps(p)


def reduce_categories(event: CrashEvent, maps: Sequence[CategoryMap]) -> CrashEvent:
    """Replace fine-grained attribute values by their merged category."""
    merged = _merge_maps(maps)
    out = copy.deepcopy(event)
    for section in out.sections.values():
        for key, value in section.items():
            cmap = merged.get(base_key(key))
            if cmap is not None:
                target = cmap.lookup(value)
                if target is not None:
                    section[key] = target
    for key, value in out.annotations.items():
        cmap = merged.get(key)
        if cmap is not None:
            target = cmap.lookup(value)
            if target is not None:
                out.annotations[key] = target
    return out


def load_annotations(path: PathLike) -> dict[str, dict[str, str]]:
    """Read ``crash_id,key,value`` rows; malformed rows are skipped with a warning."""
    out: dict[str, dict[str, str]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["crash_id", "key", "value"]:
            raise IngestError(f"{path}: annotations need a 'crash_id,key,value' header")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3 or not row[0].strip() or not row[1].strip():
                logger.warning("%s:%d: malformed annotation row %r skipped", path, lineno, row)
                continue
            out.setdefault(row[0].strip(), {})[row[1].strip()] = normalize_value(row[2])
    return out


def attach_annotations(
    event: CrashEvent, annotations: Union[PathLike, Mapping[str, Mapping[str, str]]]
) -> CrashEvent:
    """Merge satellite-derived facts into the event. Annotation values win conflicts."""
    if not isinstance(annotations, Mapping):
        annotations = load_annotations(annotations)
    facts = annotations.get(event.crash_id)
    if not facts:
        return event
    out = copy.deepcopy(event)
    for key, value in facts.items():
        for name, section in out.sections.items():
            if key in section and section[key] != value:
                logger.info(
                    "crash %s: annotation %s=%r overrides %s value %r", event.crash_id, key, value, name, section[key]
                )
                section[key] = value
        old = out.annotations.get(key)
        if old is not None and old != value:
            logger.info("crash %s: annotation %s=%r replaces %r", event.crash_id, key, value, old)
        out.annotations[key] = value
    return out


def write_events(events: Sequence[CrashEvent], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(ev.canonical_json() + "\n")


def read_events(path: PathLike) -> list[CrashEvent]:
    with open(path, encoding="utf-8") as fh:
        return [CrashEvent.from_dict(json.loads(line)) for line in fh if line.strip()]
