"""Crash prompt pipeline. Each command reads and writes artifacts under --out-dir.

Every command writes ``<command>.manifest.json`` holding the config hash, the
seed and SHA-256 digests of its inputs and outputs. Every output embeds the
config hash: JSON objects carry a ``config_hash`` key, JSONL files open with a
header record and CSV files open with a ``# config_hash=...`` comment line.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Sequence

from . import __version__
from .attribution import AttributionError, AttributionReport, inference_stage_attribution, training_stage_attribution
from .evalkit import (
    SeverityFilter,
    SplitSpec,
    calibration_bins,
    compute_metrics,
    split_dataset,
)
from .ingest import (
    CrashEvent,
    IngestError,
    TableSchema,
    attach_annotations,
    default_category_maps,
    join_all,
    load_annotations,
    load_category_maps,
    parse_tables,
    reduce_categories,
)
from .labels import Codemap, LabelError, Task, default_codemap, derive_labels, normalize_dataset, vocabulary
from .predictor import (
    BaselineModel,
    ClassDistribution,
    ModelError,
    RemoteError,
    RemotePredictor,
    RemotePredictorSpec,
    TrainerConfig,
    predict,
    train_baseline,
)
from .riskanalysis import (
    TARGETS,
    RiskCase,
    RiskRules,
    extract_conditions,
    factor_count_csv,
    risk_factor_count,
    risk_table,
    risk_table_csv,
)
from .textualize import GroupTaxonomy, PromptDocument, TaxonomyError, TemplateSet, textualize

logger = logging.getLogger("crashlens")

ENDPOINT_ENV = "CRASHLENS_ENDPOINT"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4
EXIT_COMPUTE = 5


class ConfigError(Exception):
    """Bad configuration, bad flags or a missing upstream artifact."""


# file name -> producing command, used for actionable missing-artifact errors
PRODUCERS = {
    "events.jsonl": "ingest",
    "prompts.jsonl": "textualize",
    "labels.jsonl": "textualize",
    "split.json": "split",
    "model.json": "train-baseline",
    "predictions.jsonl": "evaluate",
    "attributions.jsonl": "attribute-event",
}


@dataclass
class RunConfig:
    dataset: str = "WA"
    task: str = "Severity"
    seed: int = 0
    paths: dict = field(default_factory=dict)
    predictor: dict = field(default_factory=lambda: {"kind": "baseline", "trainer": {}})
    attribution: dict = field(default_factory=lambda: {"method": "auto", "budget": None, "cap": 20, "metric": "f1"})
    split: dict = field(default_factory=lambda: {"ratios": [7, 1.5, 1.5], "severity_filter": None})
    eval_split: str = "test"
    base_dir: str = "."

    KNOWN_PATHS = (
        "crash", "vehicle", "person", "infrastructure", "annotations", "templates",
        "taxonomy", "codemap", "category_maps", "risk_rules", "schema", "split",
    )

    @classmethod
    def from_sources(cls, config_path: Optional[str], flags: argparse.Namespace) -> "RunConfig":
        data: dict = {}
        base = "."
        if config_path:
            try:
                data = json.loads(Path(config_path).read_text(encoding="utf-8"))
            except FileNotFoundError:
                raise ConfigError(f"config file {config_path} not found") from None
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config file {config_path} is not valid JSON: {exc}") from None
            base = str(Path(config_path).resolve().parent)
        cfg = cls(base_dir=base)
        for key, value in data.items():
            if key not in cls.__dataclass_fields__ or key == "base_dir":
                raise ConfigError(f"unknown config key {key!r}")
            if isinstance(getattr(cfg, key), dict) and isinstance(value, dict):
                getattr(cfg, key).update(value)
            else:
                setattr(cfg, key, value)
        if flags.dataset:
            cfg.dataset = flags.dataset
        if flags.task:
            cfg.task = flags.task
        if flags.seed is not None:
            cfg.seed = flags.seed
        if flags.predictor:
            cfg.predictor["kind"] = flags.predictor
        endpoint = flags.endpoint or os.environ.get(ENDPOINT_ENV)
        if endpoint:
            cfg.predictor["endpoint"] = endpoint
            if not flags.predictor:
                cfg.predictor["kind"] = "remote"
        if flags.budget is not None:
            cfg.attribution["budget"] = flags.budget
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            self.dataset = normalize_dataset(self.dataset)
            self.task = Task.parse(self.task).value
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if not isinstance(self.seed, int):
            raise ConfigError("seed must be an integer")
        unknown = set(self.paths) - set(self.KNOWN_PATHS)
        if unknown:
            raise ConfigError(f"unknown path keys {sorted(unknown)}")
        for key in self.paths:
            if not self.path(key).exists():
                raise ConfigError(f"configured {key} path {self.path(key)} does not exist")
        if self.predictor.get("kind") not in ("baseline", "remote"):
            raise ConfigError("predictor kind must be 'baseline' or 'remote'")
        if self.attribution.get("method", "auto") not in ("auto", "exact", "sampled"):
            raise ConfigError("attribution method must be auto, exact or sampled")
        if self.eval_split not in ("train", "val", "test"):
            raise ConfigError("eval_split must be train, val or test")

    def path(self, key: str) -> Path:
        p = Path(self.paths[key])
        return p if p.is_absolute() else Path(self.base_dir) / p

    def optional_path(self, key: str) -> Optional[Path]:
        return self.path(key) if key in self.paths else None

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical(self.to_dict()).encode()).hexdigest()[:16]

    @property
    def task_enum(self) -> Task:
        return Task(self.task)


def canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


class Workspace:
    """Artifact reads and writes for one run, tracking digests for the manifest."""

    def __init__(self, out_dir: Path, cfg: RunConfig, command: str):
        self.out = out_dir
        self.cfg = cfg
        self.command = command
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.out.mkdir(parents=True, exist_ok=True)

    # inputs
    def input_file(self, path: Path, name: Optional[str] = None) -> Path:
        self.inputs[name or Path(path).name] = digest(path)
        return path

    def artifact(self, name: str, hint: Optional[str] = None) -> Path:
        path = self.out / name
        if not path.exists():
            producer = PRODUCERS.get(name, "?")
            raise ConfigError(hint or f"{path} is missing; run `crashlens {producer}` first")
        return self.input_file(path, name)

    def read_jsonl(self, name: str) -> list[dict]:
        with open(self.artifact(name), encoding="utf-8") as fh:
            rows = [json.loads(line) for line in fh if line.strip()]
        return [r for r in rows if "_header" not in r]

    def read_json(self, name: str) -> dict:
        return json.loads(self.artifact(name).read_text(encoding="utf-8"))

    # outputs
    def _write(self, name: str, text: str) -> None:
        path = self.out / name
        path.write_text(text, encoding="utf-8")
        self.outputs[name] = digest(path)

    def write_json(self, name: str, obj: Mapping) -> None:
        self._write(name, json.dumps({"config_hash": self.cfg.hash, **obj}, indent=1, sort_keys=True) + "\n")

    def write_jsonl(self, name: str, rows: Iterable[Mapping]) -> None:
        header = {"_header": {"config_hash": self.cfg.hash, "seed": self.cfg.seed, "command": self.command}}
        lines = [canonical(header)] + [canonical(r) for r in rows]
        self._write(name, "\n".join(lines) + "\n")

    def write_csv(self, name: str, text: str) -> None:
        self._write(name, f"# config_hash={self.cfg.hash}\n{text}")

    def write_manifest(self, extra: Optional[Mapping] = None) -> Path:
        manifest = {
            "command": self.command,
            "version": __version__,
            "config_hash": self.cfg.hash,
            "seed": self.cfg.seed,
            "config": self.cfg.to_dict(),
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": dict(sorted(self.outputs.items())),
            **(extra or {}),
        }
        path = self.out / f"{self.command}.manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
        return path


# --- helpers shared by commands ------------------------------------------------


def _codemap(ws: Workspace) -> Codemap:
    p = ws.cfg.optional_path("codemap")
    return Codemap.load(ws.input_file(p)) if p else default_codemap(ws.cfg.dataset)


def _docs(ws: Workspace) -> dict[str, PromptDocument]:
    docs = {}
    for row in ws.read_jsonl("prompts.jsonl"):
        doc = PromptDocument.from_dict(row)
        if doc.task != ws.cfg.task_enum:
            raise ConfigError(
                f"prompts.jsonl was rendered for {doc.task.value}; rerun `crashlens textualize --task {ws.cfg.task}`"
            )
        docs[doc.crash_id] = doc
    return docs


def _labels(ws: Workspace) -> dict[str, int]:
    return {r["crash_id"]: int(r["label"]) for r in ws.read_jsonl("labels.jsonl")}


def _split_ids(ws: Workspace) -> dict[str, list[str]]:
    return ws.read_json("split.json")


def _labelled(ws: Workspace, ids: Sequence[str]) -> list[tuple[PromptDocument, int]]:
    docs, labels = _docs(ws), _labels(ws)
    return [(docs[i], labels[i]) for i in ids]


def _trainer_config(cfg: RunConfig) -> TrainerConfig:
    return TrainerConfig.from_dict({**cfg.predictor.get("trainer", {}), "seed": cfg.seed})


def _load_predictor(ws: Workspace):
    kind = ws.cfg.predictor.get("kind", "baseline")
    if kind == "remote":
        endpoint = ws.cfg.predictor.get("endpoint")
        if not endpoint:
            raise ConfigError(f"remote predictor selected but no endpoint given (--endpoint or ${ENDPOINT_ENV})")
        spec = RemotePredictorSpec(
            endpoint, ws.cfg.task_enum, ws.cfg.dataset,
            timeout=float(ws.cfg.predictor.get("timeout", 30.0)),
            retry=int(ws.cfg.predictor.get("retry", 2)),
            max_in_flight=int(ws.cfg.predictor.get("max_in_flight", 4)),
        )
        return RemotePredictor(spec)
    path = ws.artifact(
        "model.json",
        hint=f"no predictor available: {ws.out / 'model.json'} is missing; run `crashlens train-baseline` "
        f"or pass --endpoint / ${ENDPOINT_ENV} for a remote predictor",
    )
    model = BaselineModel.load(path)
    if model.task != ws.cfg.task_enum:
        raise ConfigError(f"model.json predicts {model.task.value}, run is for {ws.cfg.task}")
    return model


def _parallel(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _parse_target(value: str, tokens: Sequence[str]) -> int:
    if value.isdigit():
        idx = int(value)
    else:
        bare = value.strip("<>").upper()
        matches = [i for i, t in enumerate(tokens) if t.strip("<>").upper() == bare]
        if not matches:
            raise ConfigError(f"target {value!r} is not one of {list(tokens)}")
        idx = matches[0]
    if not 0 <= idx < len(tokens):
        raise ConfigError(f"target index {idx} outside 0..{len(tokens) - 1}")
    return idx


# --- commands -----------------------------------------------------------------


def cmd_ingest(ws: Workspace, args) -> None:
    cfg = ws.cfg
    missing = [t for t in ("crash", "vehicle", "person", "infrastructure") if t not in cfg.paths]
    if missing:
        raise ConfigError(f"ingest needs table paths for {missing} in the config 'paths' block")
    schema_path = cfg.optional_path("schema")
    schema = TableSchema.load(ws.input_file(schema_path)) if schema_path else TableSchema.default()
    paths = {t: ws.input_file(cfg.path(t)) for t in ("crash", "vehicle", "person", "infrastructure")}
    tables = parse_tables(paths, schema)
    maps_path = cfg.optional_path("category_maps")
    maps = load_category_maps(ws.input_file(maps_path)) if maps_path else default_category_maps()
    ann_path = cfg.optional_path("annotations")
    annotations = load_annotations(ws.input_file(ann_path)) if ann_path else {}
    events = []
    for ev in join_all(tables, cfg.dataset):
        ev = reduce_categories(attach_annotations(ev, annotations), maps)
        events.append(ev)
    ws.write_jsonl("events.jsonl", (e.to_dict() for e in events))
    ws.write_manifest({"counts": {**tables.counts, "events": len(events)}, "diagnostics": list(tables.diagnostics)})
    print(f"ingested {len(events)} events -> {ws.out / 'events.jsonl'}")


def cmd_textualize(ws: Workspace, args) -> None:
    cfg = ws.cfg
    events = [CrashEvent.from_dict(r) for r in ws.read_jsonl("events.jsonl")]
    tpl_path = cfg.optional_path("templates")
    templates = TemplateSet.load(tpl_path) if tpl_path else None
    tax_path = cfg.optional_path("taxonomy")
    taxonomy = GroupTaxonomy.load(ws.input_file(tax_path)) if tax_path else None
    codemap = _codemap(ws)
    docs, labels = [], []
    for ev in events:
        docs.append(textualize(ev, cfg.task_enum, templates, taxonomy))
        label = derive_labels(ev.outcome, ev.dataset, codemap).class_index(cfg.task_enum)
        labels.append({"crash_id": ev.crash_id, "label": label})
    ws.write_jsonl("prompts.jsonl", (d.to_dict() for d in docs))
    ws.write_jsonl("labels.jsonl", labels)
    ws.write_manifest({"documents": len(docs)})
    print(f"rendered {len(docs)} prompts -> {ws.out / 'prompts.jsonl'}")


def cmd_split(ws: Workspace, args) -> None:
    cfg = ws.cfg
    labels = _labels(ws)
    ids = sorted(labels)
    pinned = cfg.optional_path("split")
    if pinned is not None:
        _pinned_split(ws, pinned, ids)
        return
    flt = cfg.split.get("severity_filter")
    spec = SplitSpec(
        tuple(cfg.split.get("ratios", (7, 1.5, 1.5))),
        cfg.seed,
        SeverityFilter(**flt) if flt else None,
    )
    try:
        split = split_dataset(ids, spec, label_of=labels.__getitem__)
    except ValueError as exc:
        raise IngestError(str(exc)) from None
    ws.write_json("split.json", {"train": split.train, "val": split.val, "test": split.test,
                                 "dropped": split.dropped, "seed": cfg.seed})
    ws.write_manifest({"sizes": list(split.sizes)})
    print("split sizes train/val/test = {}/{}/{}".format(*split.sizes))


def _pinned_split(ws: Workspace, path: Path, ids: Sequence[str]) -> None:
    """Reuse a persisted crash-id split instead of drawing a new one."""
    data = json.loads(ws.input_file(path).read_text(encoding="utf-8"))
    parts = {k: list(data.get(k, [])) for k in ("train", "val", "test", "dropped")}
    seen: set[str] = set()
    for name, members in parts.items():
        for cid in members:
            if cid in seen:
                raise IngestError(f"pinned split {path}: {cid!r} appears twice")
            if cid not in ids:
                raise IngestError(f"pinned split {path}: unknown crash id {cid!r}")
            seen.add(cid)
    parts["dropped"] += [cid for cid in ids if cid not in seen]
    ws.write_json("split.json", {**parts, "seed": ws.cfg.seed, "pinned": True})
    ws.write_manifest({"sizes": [len(parts[k]) for k in ("train", "val", "test")]})
    print("pinned split sizes train/val/test = {}/{}/{}".format(*(len(parts[k]) for k in ("train", "val", "test"))))


def cmd_train_baseline(ws: Workspace, args) -> None:
    cfg = ws.cfg
    train = _labelled(ws, _split_ids(ws)["train"])
    model = train_baseline(train, cfg.task_enum, cfg.dataset, _trainer_config(cfg))
    ws.write_json("model.json", model.to_dict())
    ws.write_manifest({"train_size": len(train), "features": len(model.features)})
    print(f"trained baseline on {len(train)} prompts -> {ws.out / 'model.json'}")


def cmd_evaluate(ws: Workspace, args) -> None:
    cfg = ws.cfg
    predictor = _load_predictor(ws)
    rows = _labelled(ws, _split_ids(ws)[cfg.eval_split])
    if not rows:
        raise IngestError(f"{cfg.eval_split} split is empty")
    dists: list[ClassDistribution] = _parallel(lambda r: predict(predictor, r[0]), rows, args.jobs)
    pred = [d.predicted for d in dists]
    gold = [y for _, y in rows]
    vocab = vocabulary(cfg.task_enum, cfg.dataset)
    report = compute_metrics(pred, gold, len(vocab))
    ws.write_jsonl(
        "predictions.jsonl",
        ({"crash_id": d.crash_id, "gold": y, "dist": dist.to_dict()} for (d, y), dist in zip(rows, dists)),
    )
    ws.write_json("metrics.json", {"split": cfg.eval_split, "n": len(rows), **report.to_dict()})
    ws.write_csv("confusion.csv", report.confusion_csv(vocab.tokens))
    ws.write_manifest({"predictor": cfg.predictor.get("kind")})
    print(f"{cfg.eval_split}: accuracy={report.accuracy:.4f} f1={report.f1:.4f} (n={len(rows)})")


def cmd_calibration_report(ws: Workspace, args) -> None:
    rows = ws.read_jsonl("predictions.jsonl")
    curve = calibration_bins([ClassDistribution.from_dict(r["dist"]) for r in rows], [r["gold"] for r in rows])
    ws.write_json("calibration.json", curve.to_dict())
    ws.write_csv("calibration.csv", curve.to_csv())
    ws.write_manifest({"n": curve.total})
    print(f"calibration over {curve.total} predictions -> {ws.out / 'calibration.csv'}")


def cmd_attribute_event(ws: Workspace, args) -> None:
    cfg = ws.cfg
    predictor = _load_predictor(ws)
    docs = _docs(ws)
    ids = args.crash_id or _split_ids(ws)[cfg.eval_split]
    unknown = [i for i in ids if i not in docs]
    if unknown:
        raise IngestError(f"no prompts for crash ids {unknown}")
    tokens = vocabulary(cfg.task_enum, cfg.dataset).tokens
    fixed = [_parse_target(t, tokens) for t in args.target if t != "predicted"]
    use_predicted = not args.target or "predicted" in args.target
    att = cfg.attribution
    records, csv_rows = [], []
    for cid in ids:
        doc = docs[cid]
        targets = list(fixed)
        if use_predicted:
            targets.insert(0, predict(predictor, doc).predicted)
        for target in dict.fromkeys(targets):
            report = inference_stage_attribution(
                doc, predictor, target, method=att.get("method", "auto"), budget=att.get("budget"),
                seed=cfg.seed, cap=int(att.get("cap", 20)), jobs=args.jobs,
            )
            records.append({"crash_id": cid, "target": target, "token": tokens[target], "report": report.to_dict()})
            for i, label in enumerate(report.player_labels):
                se = "" if report.stderr is None else repr(report.stderr[i])
                csv_rows.append([cid, tokens[target], label, repr(report.phi[i]), se])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["crash_id", "target", "group", "phi", "stderr"])
    w.writerows(csv_rows)
    ws.write_jsonl("attributions.jsonl", records)
    ws.write_csv("attributions.csv", buf.getvalue())
    ws.write_manifest({"attributions": len(records)})
    print(f"attributed {len(records)} (crash, target) pairs -> {ws.out / 'attributions.jsonl'}")


def cmd_attribute_train(ws: Workspace, args) -> None:
    cfg = ws.cfg
    ids = _split_ids(ws)
    train, val = _labelled(ws, ids["train"]), _labelled(ws, ids["val"])
    metric = cfg.attribution.get("metric", "f1")
    report = training_stage_attribution(train, val, _trainer_config(cfg), metric=metric, jobs=args.jobs)
    ws.write_json("train_attribution.json", report.to_dict())
    ws.write_csv("train_attribution.csv", report.to_csv())
    ws.write_manifest({"metric": metric})
    print(" ".join(f"{k}={v:.4f}" for k, v in report.by_label().items()))


def cmd_risk_report(ws: Workspace, args) -> None:
    cfg = ws.cfg
    if cfg.task_enum is not Task.SEVERITY:
        raise ConfigError("risk-report needs the Severity task")
    rules_path = cfg.optional_path("risk_rules")
    rules = RiskRules.load(ws.input_file(rules_path)) if rules_path else RiskRules.default()
    events = {r["crash_id"]: CrashEvent.from_dict(r) for r in ws.read_jsonl("events.jsonl")}
    preds = ws.read_jsonl("predictions.jsonl")
    reports: dict[str, dict[str, AttributionReport]] = {}
    if (ws.out / "attributions.jsonl").exists():
        for r in ws.read_jsonl("attributions.jsonl"):
            name = r["token"].strip("<>")
            if name in TARGETS:
                reports.setdefault(r["crash_id"], {})[name] = AttributionReport.from_dict(r["report"])
    else:
        logger.warning("attributions.jsonl missing; factor contributions will be empty (run `crashlens attribute-event --target S4 --target S5`)")
    cases = [
        RiskCase(extract_conditions(events[p["crash_id"]], rules), ClassDistribution.from_dict(p["dist"]),
                 reports.get(p["crash_id"], {}), p["crash_id"])
        for p in preds
    ]
    conditions = [{"crash_id": c.crash_id, **c.conditions.to_dict()} for c in cases]
    ws.write_jsonl("conditions.jsonl", conditions)
    for target in TARGETS:
        slug = target.replace("+", "_")
        ws.write_csv(f"risk_table_{slug}.csv", risk_table_csv(risk_table(cases, target, rules.factor_groups)))
        ws.write_csv(f"risk_factor_count_{slug}.csv", factor_count_csv(risk_factor_count(cases, target), target))
    ws.write_manifest({"cases": len(cases)})
    print(f"risk tables for {len(cases)} cases -> {ws.out}")


COMMANDS: dict[str, tuple[Callable, str]] = {
    "ingest": (cmd_ingest, "join raw tables into canonical crash events"),
    "textualize": (cmd_textualize, "render events into prompts and derive labels"),
    "split": (cmd_split, "seeded train/val/test split"),
    "train-baseline": (cmd_train_baseline, "train the bag-of-words baseline predictor"),
    "evaluate": (cmd_evaluate, "predict the evaluation split and compute metrics"),
    "attribute-event": (cmd_attribute_event, "sentence-group attribution per event"),
    "attribute-train": (cmd_attribute_train, "prompt-part attribution by retraining"),
    "risk-report": (cmd_risk_report, "conditional risk tables and factor-count curve"),
    "calibration-report": (cmd_calibration_report, "confidence calibration bins"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--dataset", help="WA or IL")
    common.add_argument("--task", help="Injury, Severity or Type")
    common.add_argument("--seed", type=int)
    common.add_argument("--jobs", type=int, default=1, help="worker cap for parallel evaluation")
    common.add_argument("--predictor", choices=("baseline", "remote"))
    common.add_argument("--endpoint", help=f"remote predictor URL (overrides ${ENDPOINT_ENV})")
    common.add_argument("--budget", type=int, help="sampled-attribution evaluation budget")
    common.add_argument("--out-dir", default="out", help="artifact directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="crashlens", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, parents=[common], help=help_text)
        if name == "attribute-event":
            p.add_argument("--crash-id", action="append", default=[], help="attribute only these crashes")
            p.add_argument("--target", action="append", default=[],
                           help="class token, index or 'predicted' (repeatable; default predicted)")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        cfg = RunConfig.from_sources(args.config, args)
        ws = Workspace(Path(args.out_dir), cfg, args.command)
        COMMANDS[args.command][0](ws, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (IngestError, LabelError, TaxonomyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except RemoteError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except (ModelError, AttributionError, ArithmeticError, ValueError) as exc:
        print(f"computation error: {exc}", file=sys.stderr)
        return EXIT_COMPUTE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
