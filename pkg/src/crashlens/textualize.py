"""Render crash records into five-part prompts, split them into sentences
and label each sentence with a feature group.

Rendering is template driven and deterministic. Every rendered sentence
keeps the attribute key it came from, which is what group assignment uses.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

from .ingest import CrashEvent, SECTION_NAMES, base_key, entity_prefix
from .labels import Task, normalize_dataset

logger = logging.getLogger(__name__)

PART_NAMES = SECTION_NAMES
OTHER = "other"
WORD_TARGET = 100
_WORD_WARN = 150
_ENTITY = re.compile(r"unit(?P<unit>[^.]+)(?:\.person(?P<person>[^.]+))?$")

PathLike = Union[str, Path]


class TaxonomyError(ValueError):
    pass


@dataclass(frozen=True)
class Template:
    name: str
    patterns: tuple[tuple[str, str], ...]

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(k for k, _ in self.patterns)

    @classmethod
    def parse(cls, name: str, text: str) -> "Template":
        patterns = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            key, sep, pattern = line.partition(": ")
            if not sep or not key.strip():
                raise ValueError(f"template {name}:{lineno}: expected 'key: pattern'")
            patterns.append((key.strip(), pattern.strip()))
        keys = [k for k, _ in patterns]
        if len(set(keys)) != len(keys):
            raise ValueError(f"template {name} repeats a key")
        return cls(name, tuple(patterns))


@dataclass(frozen=True)
class TemplateSet:
    system: Mapping[Task, str]
    parts: Mapping[str, Template]

    @classmethod
    def load(cls, directory: PathLike) -> "TemplateSet":
        directory = Path(directory)
        parts = {}
        for name in PART_NAMES:
            parts[name] = Template.parse(name, (directory / f"{name}.txt").read_text(encoding="utf-8"))
        system_tpl = Template.parse("system", (directory / "system.txt").read_text(encoding="utf-8"))
        system = {Task.parse(k): v for k, v in system_tpl.patterns}
        missing = [t.value for t in Task if t not in system]
        if missing:
            raise ValueError(f"system prompts missing for tasks {missing}")
        return cls(system, parts)


def default_templates(dataset: str = "WA") -> TemplateSet:
    ref = resources.files("crashlens") / "data" / normalize_dataset(dataset).lower() / "templates"
    with resources.as_file(ref) as path:
        return TemplateSet.load(path)


@dataclass(frozen=True)
class GroupTaxonomy:
    dataset: str
    groups: tuple[tuple[str, tuple[str, ...]], ...]

    def __post_init__(self):
        labels = [label for label, _ in self.groups]
        if len(set(labels)) != len(labels):
            raise TaxonomyError("group labels must be unique")
        if OTHER in labels:
            raise TaxonomyError(f"{OTHER!r} is reserved for unmatched sentences")
        owner: dict[str, str] = {}
        for label, keys in self.groups:
            for key in keys:
                if key in owner:
                    raise TaxonomyError(f"attribute {key!r} owned by both {owner[key]!r} and {label!r}")
                owner[key] = label
        expected = {"WA": 14, "IL": 12}.get(self.dataset)
        if expected is not None and len(self.groups) != expected:
            raise TaxonomyError(f"{self.dataset} taxonomy needs {expected} groups, got {len(self.groups)}")
        object.__setattr__(self, "_owner", owner)

    @property
    def n(self) -> int:
        return len(self.groups)

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(label for label, _ in self.groups)

    def owner(self, key: str) -> Optional[str]:
        return self._owner.get(base_key(key))

    @classmethod
    def from_dict(cls, data: Mapping) -> "GroupTaxonomy":
        groups = tuple((g["label"], tuple(g["keys"])) for g in data["groups"])
        return cls(normalize_dataset(data["dataset"]), groups)

    @classmethod
    def load(cls, path: PathLike) -> "GroupTaxonomy":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def default_taxonomy(dataset: str = "WA") -> GroupTaxonomy:
    ref = resources.files("crashlens") / "data" / normalize_dataset(dataset).lower() / "taxonomy.json"
    return GroupTaxonomy.from_dict(json.loads(ref.read_text(encoding="utf-8")))


@dataclass(frozen=True)
class Sentence:
    text: str
    delim: str
    part: int
    key: str = ""
    group: Optional[str] = None

    @property
    def raw(self) -> str:
        return self.text + self.delim


@dataclass(frozen=True)
class PromptDocument:
    crash_id: str
    dataset: str
    task: Task
    system: str
    parts: tuple[str, ...]
    # per part: (attribute key, start, end) of every rendered sentence
    spans: tuple[tuple[tuple[str, int, int], ...], ...] = ()
    sentences: tuple[Sentence, ...] = ()
    group_labels: tuple[str, ...] = ()

    def __post_init__(self):
        if len(self.parts) != len(PART_NAMES):
            raise ValueError(f"a prompt has {len(PART_NAMES)} content parts, got {len(self.parts)}")

    @property
    def text(self) -> str:
        return join_prompt(self.system, self.parts)

    def part_sentences(self, part: int) -> list[Sentence]:
        return [s for s in self.sentences if s.part == part]

    def reduced_parts(self, keep: Iterable[int]) -> list[str]:
        """Part texts for a coalition of part indices (0 = general ... 3 = unit)."""
        keep = set(keep)
        return [p for i, p in enumerate(self.parts) if i in keep]

    def reduced_sentences(self, keep_groups: Iterable[str]) -> list[Sentence]:
        """Sentences of the selected groups plus unplayed ``other`` sentences."""
        keep = set(keep_groups) | {OTHER}
        return [s for s in self.sentences if s.group in keep]

    def to_dict(self) -> dict:
        return {
            "crash_id": self.crash_id,
            "dataset": self.dataset,
            "task": self.task.value,
            "system": self.system,
            "parts": list(self.parts),
            "spans": [[list(s) for s in part] for part in self.spans],
            "sentences": [
                {"text": s.text, "delim": s.delim, "part": s.part, "key": s.key, "group": s.group}
                for s in self.sentences
            ],
            "group_labels": list(self.group_labels),
        }

    @classmethod
    def from_dict(cls, data: Mapping) -> "PromptDocument":
        return cls(
            crash_id=data["crash_id"],
            dataset=data["dataset"],
            task=Task.parse(data["task"]),
            system=data["system"],
            parts=tuple(data["parts"]),
            spans=tuple(tuple((k, int(a), int(b)) for k, a, b in part) for part in data.get("spans", [])),
            sentences=tuple(Sentence(**s) for s in data.get("sentences", [])),
            group_labels=tuple(data.get("group_labels", [])),
        )


def join_prompt(system: str, parts: Sequence[str]) -> str:
    return "\n\n".join([system, *[p for p in parts if p]])


def join_sentences(sentences: Sequence[Sentence]) -> list[str]:
    """Rebuild part texts from (possibly reduced) sentences, in part order."""
    by_part: dict[int, list[str]] = {}
    for s in sentences:
        by_part.setdefault(s.part, []).append(s.raw)
    return ["".join(by_part[k]).rstrip() for k in sorted(by_part)]


def _entity_fields(prefix: str) -> dict[str, str]:
    m = _ENTITY.match(prefix) if prefix else None
    if not m:
        return {}
    out = {"unit": m.group("unit")}
    if m.group("person") is not None:
        out["person"] = m.group("person")
    return out


def _render_pieces(section: Mapping[str, str], template: Template) -> list[tuple[str, str]]:
    if not template.patterns:
        logger.warning("template %s references no keys", template.name)
        return []
    if not section:
        logger.warning("empty %s section", template.name)
        return []
    entities = list(dict.fromkeys(entity_prefix(k) for k in section))
    pieces = []
    for prefix in entities:
        fields = _entity_fields(prefix)
        for key, pattern in template.patterns:
            full = f"{prefix}.{key}" if prefix else key
            if full not in section:
                continue
            sentence = pattern.format_map({"value": section[full], **fields}).strip()
            if not sentence.endswith("."):
                sentence += "."
            pieces.append((full, sentence))
    skipped = {base_key(k) for k in section} - set(template.keys)
    if skipped:
        logger.debug("%s template has no pattern for %s", template.name, sorted(skipped))
    return pieces


def _assemble(pieces: Sequence[tuple[str, str]]) -> tuple[str, tuple[tuple[str, int, int], ...]]:
    spans = []
    pos = 0
    for i, (key, sentence) in enumerate(pieces):
        if i:
            pos += 1
        spans.append((key, pos, pos + len(sentence)))
        pos += len(sentence)
    text = " ".join(s for _, s in pieces)
    words = len(text.split())
    if words > _WORD_WARN:
        logger.warning("rendered part has %d words, target is about %d", words, WORD_TARGET)
    return text, tuple(spans)


def render_part(section: Mapping[str, str], template: Template) -> str:
    return _assemble(_render_pieces(section, template))[0]


def build_prompt(
    event: CrashEvent,
    task: Union[Task, str],
    templates: Optional[TemplateSet] = None,
    paraphrased: Optional[Mapping[str, Sequence[str]]] = None,
) -> PromptDocument:
    """Render the system prompt and the four content parts of ``event``.

    ``paraphrased`` optionally maps crash ids to externally written part
    texts; those replace the rendered parts and carry no key provenance, so
    their sentences end up in the ``other`` group.
    """
    task = Task.parse(task)
    templates = templates or default_templates(event.dataset)
    if paraphrased and event.crash_id in paraphrased:
        parts = tuple(paraphrased[event.crash_id])
        spans: tuple = tuple(() for _ in parts)
    else:
        texts, span_list = [], []
        for name in PART_NAMES:
            section = dict(event.sections[name])
            if name == "infrastructure":
                for key, value in event.annotations.items():
                    section.setdefault(key, value)
            text, sp = _assemble(_render_pieces(section, templates.parts[name]))
            texts.append(text)
            span_list.append(sp)
        parts, spans = tuple(texts), tuple(span_list)
    return PromptDocument(
        crash_id=event.crash_id,
        dataset=event.dataset,
        task=task,
        system=templates.system[task],
        parts=parts,
        spans=spans,
    )


def _is_split_point(text: str, i: int) -> bool:
    if text[i] not in ",.":
        return False
    # "12,000" and "12.4" stay whole
    return not (0 < i < len(text) - 1 and text[i - 1].isdigit() and text[i + 1].isdigit())


def split_text(text: str) -> list[tuple[str, str, int]]:
    """Split on commas and periods outside numbers -> (text, delimiter, start)."""
    out: list[tuple[str, str, int]] = []
    start = i = 0
    n = len(text)
    while i < n:
        if _is_split_point(text, i):
            j = i + 1
            while j < n and text[j].isspace():
                j += 1
            seg, delim = text[start:i], text[i:j]
            if not seg.strip() and out:
                prev_text, prev_delim, prev_start = out[-1]
                out[-1] = (prev_text, prev_delim + seg + delim, prev_start)
            else:
                out.append((seg, delim, start))
            start = i = j
            continue
        i += 1
    if start < n:
        out.append((text[start:], "", start))
    return out


def segment_sentences(doc: PromptDocument) -> PromptDocument:
    sentences = []
    for k, part in enumerate(doc.parts):
        spans = doc.spans[k] if k < len(doc.spans) else ()
        for seg, delim, start in split_text(part):
            key = next((key for key, a, b in spans if a <= start < b), "")
            sentences.append(Sentence(seg, delim, k, key))
    return replace(doc, sentences=tuple(sentences))


def assign_groups(doc: PromptDocument, taxonomy: GroupTaxonomy) -> PromptDocument:
    sentences = tuple(replace(s, group=(taxonomy.owner(s.key) if s.key else None) or OTHER) for s in doc.sentences)
    return replace(doc, sentences=sentences, group_labels=taxonomy.labels)


def textualize(
    event: CrashEvent,
    task: Union[Task, str],
    templates: Optional[TemplateSet] = None,
    taxonomy: Optional[GroupTaxonomy] = None,
    paraphrased: Optional[Mapping[str, Sequence[str]]] = None,
) -> PromptDocument:
    """``build_prompt`` -> ``segment_sentences`` -> ``assign_groups``."""
    doc = build_prompt(event, task, templates, paraphrased)
    return assign_groups(segment_sentences(doc), taxonomy or default_taxonomy(event.dataset))


def write_prompts(docs: Sequence[PromptDocument], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for doc in docs:
            fh.write(json.dumps(doc.to_dict(), ensure_ascii=False, separators=(",", ":")) + "\n")


def read_prompts(path: PathLike) -> list[PromptDocument]:
    with open(path, encoding="utf-8") as fh:
        return [PromptDocument.from_dict(json.loads(line)) for line in fh if line.strip()]
