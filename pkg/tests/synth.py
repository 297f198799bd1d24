"""Synthetic events and corpora shared by the test modules."""

from __future__ import annotations

import numpy as np

from crashlens.ingest import CrashEvent
from crashlens.labels import Task
from crashlens.textualize import PART_NAMES, PromptDocument, default_taxonomy, textualize

# Values drawn for every attribute; several carry commas and decimals on purpose.
NOISE = ("alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "12,000", "3.5", "north, then west", "n/a-ish")

# one marker word per severity class; they never occur in the templates
MARKERS = ("quokka", "narwhal", "axolotl", "pangolin", "okapi")

SECTION_KEYS = {
    "general": ("date", "time", "day_of_week", "county", "city", "route_id", "milepost", "area_type",
                "functional_class", "intersection_related"),
    "infrastructure": ("speed_limit", "lanes", "roadway_type", "lane_width", "shoulder_width", "median_type",
                       "aadt", "terrain", "surface_type", "lighting", "weather", "road_surface", "work_zone"),
    "event": ("num_vehicles", "num_pedestrians", "first_event", "junction_relation"),
    "unit": ("unit1.vehicle_type", "unit1.vehicle_year", "unit1.direction", "unit1.maneuver",
             "unit1.contributing_circumstance", "unit1.defects", "unit1.airbag",
             "unit1.person1.person_type", "unit1.person1.age", "unit1.person1.sex", "unit1.person1.bac",
             "unit1.person1.restraint"),
}
ALL_KEYS = [(section, key) for section, keys in SECTION_KEYS.items() for key in keys]


def random_event(rng: np.random.Generator, crash_id: str, marker: str | None = None,
                 marker_at: tuple[str, str] | None = None, dataset: str = "WA") -> CrashEvent:
    sections = {
        name: {k: str(NOISE[rng.integers(len(NOISE))]) for k in keys} for name, keys in SECTION_KEYS.items()
    }
    if marker is not None:
        section, key = marker_at
        sections[section][key] = marker
    return CrashEvent(crash_id=crash_id, dataset=dataset, sections=sections)


def owning_group(key: str, dataset: str = "WA") -> str:
    base = key.rsplit(".", 1)[-1]
    return default_taxonomy(dataset).owner(base)


def separable_corpus(rng: np.random.Generator, size: int, dataset: str = "WA"):
    """Severity prompts whose class is fixed by a marker word placed in a random attribute."""
    corpus = []
    for j in range(size):
        label = j % len(MARKERS)
        at = ALL_KEYS[rng.integers(len(ALL_KEYS))]
        ev = random_event(rng, f"S{j}", MARKERS[label], at, dataset)
        corpus.append((textualize(ev, Task.SEVERITY), label))
    return corpus


def part_document(crash_id: str, parts: tuple[str, str, str, str], task: Task = Task.SEVERITY) -> PromptDocument:
    return PromptDocument(crash_id, "WA", task, "Predict the outcome.", tuple(parts))


def event_marker_dataset(rng: np.random.Generator, pairs: int):
    """Two-class data whose label is readable only from the event part.

    Each class-0 document has a class-1 twin with identical general,
    infrastructure and unit text, so those parts carry no label information.
    """
    docs = []
    for j in range(pairs):
        noise = [" ".join(rng.choice(NOISE[:6], size=3)) + "." for _ in range(3)]
        for label, word in ((0, "calm"), (1, "violent")):
            parts = (noise[0], noise[1], f"The impact was {word}.", noise[2])
            docs.append((part_document(f"E{j}-{label}", parts), label))
    return docs


def symmetric_dataset(rng: np.random.Generator, size: int):
    """Four identical parts per document, so every part is interchangeable."""
    docs = []
    for j in range(size):
        label = j % 2
        words = rng.choice(NOISE[:6], size=2).tolist() + [("calm", "violent")[label]]
        text = " ".join(words) + "."
        docs.append((part_document(f"Y{j}", (text,) * len(PART_NAMES)), label))
    return docs
