"""Command-line entry point: ``schema-dst <command> [flags]``.

Artifacts live under ``--out``::

    vocab.json, build.json        written by build
    examples/<task>-NNNNN.jsonl   written by build
    models/<task>.npz             written by train
    predictions/                  written by track
    report.json                   written by eval
    fewshot.json                  written by fewshot

Settings resolve as: command-line flag, then environment variable (paths
only), then ``--config`` JSON file, then built-in default.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

from .data import CorpusError, corpus_stats, dump_dialogues, dump_split, load_dialogues, load_schemas
from .features import Featurizer, FeaturizerConfig, Task, read_shards, write_shards
from .tokenization import WordTokenizer

logger = logging.getLogger("schema_dst")

TASK_CHOICES = [t.value for t in Task]
PATH_ENV = {
    "schemas": "SCHEMA_DST_SCHEMAS",
    "dialogues": "SCHEMA_DST_DIALOGUES",
    "out": "SCHEMA_DST_OUT",
    "train_schemas": "SCHEMA_DST_TRAIN_SCHEMAS",
    "predictions": "SCHEMA_DST_PREDICTIONS",
}


class CommandError(Exception):
    """A user-facing failure; the message is printed and the exit code is 1."""


@dataclass
class RunConfig:
    schemas: str | None = None
    dialogues: list[str] = field(default_factory=list)
    out: str = "schema_dst_run"
    train_schemas: str | None = None
    predictions: str | None = None
    task: str | None = None
    seed: int = 0
    fraction: float = 0.0
    recipe: str = "desk_scale"  # or "full": lr 2e-5, batch 128, 3 epochs
    train: dict = field(default_factory=dict)
    train_overrides: dict = field(default_factory=dict)
    encoder: dict = field(default_factory=dict)
    backbone: str | None = None
    thresholds: dict = field(default_factory=dict)
    max_seq_len: int = 256
    n_dialogues: int = 200
    n_services: int = 2

    @property
    def out_dir(self) -> Path:
        return Path(self.out)

    def tasks(self) -> list[Task]:
        return [Task(self.task)] if self.task else list(Task)


def _read_config_file(path: str) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            rec = json.load(fh)
    except FileNotFoundError:
        raise CommandError(f"{path}: config file not found") from None
    except json.JSONDecodeError as exc:
        raise CommandError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(rec, dict):
        raise CommandError(f"{path}: config must be a JSON object")
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(rec) - known)
    if unknown:
        raise CommandError(f"{path}: unknown config key(s) {unknown}")
    if isinstance(rec.get("dialogues"), str):
        rec["dialogues"] = [rec["dialogues"]]
    return rec


def resolve_config(args: argparse.Namespace, environ: os._Environ | dict = os.environ) -> RunConfig:
    values: dict = {}
    if getattr(args, "config", None):
        values.update(_read_config_file(args.config))
    for key, var in PATH_ENV.items():
        if environ.get(var):
            raw = environ[var]
            values[key] = raw.split(os.pathsep) if key == "dialogues" else raw
    for f in fields(RunConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            values[f.name] = flag
    cfg = RunConfig(**values)
    if cfg.task is not None and cfg.task not in TASK_CHOICES:
        raise CommandError(f"unknown task {cfg.task!r}; choose from {TASK_CHOICES}")
    return cfg


# ---------------------------------------------------------------------------
# helpers


def _schemas_path(cfg: RunConfig) -> str:
    if cfg.schemas:
        return cfg.schemas
    for d in cfg.dialogues:
        candidate = Path(d) / "schema.json"
        if candidate.is_file():
            return str(candidate)
    raise CommandError("no schemas given (use --schemas, or point --dialogues at a split directory with schema.json)")


def _load_corpus(cfg: RunConfig):
    if not cfg.dialogues:
        raise CommandError("no dialogues given (use --dialogues)")
    schemas = load_schemas(_schemas_path(cfg))
    paths = cfg.dialogues[0] if len(cfg.dialogues) == 1 else cfg.dialogues
    return schemas, load_dialogues(paths, schemas)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise CommandError(f"{path}: not found (run the '{producer}' command first)")
    return path


def _load_featurizer(cfg: RunConfig) -> Featurizer:
    tok = WordTokenizer.load(_require(cfg.out_dir / "vocab.json", "build"))
    with open(_require(cfg.out_dir / "build.json", "build"), encoding="utf-8") as fh:
        build = json.load(fh)
    return Featurizer(tok, FeaturizerConfig(**build["featurizer"]))


def _train_config(cfg: RunConfig, task: Task):
    from .training import DESK_SCALE, DESK_SCALE_TASK_OVERRIDES, TrainConfig

    if cfg.recipe == "desk_scale":
        params = {**DESK_SCALE, **DESK_SCALE_TASK_OVERRIDES.get(task, {})}
    elif cfg.recipe == "full":
        params = {}
    else:
        raise CommandError(f"unknown recipe {cfg.recipe!r} (expected 'desk_scale' or 'full')")
    params.update(cfg.train)
    params.update(cfg.train_overrides.get(task.value, {}))
    params["seed"] = cfg.seed
    try:
        return TrainConfig(task, **params)
    except TypeError as exc:
        raise CommandError(f"bad train settings: {exc}") from None


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2))


# ---------------------------------------------------------------------------
# commands


def cmd_stats(cfg: RunConfig) -> dict:
    schemas, dialogues = _load_corpus(cfg)
    reference = load_schemas(cfg.train_schemas) if cfg.train_schemas else None
    stats = corpus_stats(dialogues, schemas, reference).as_dict()
    _emit(stats)
    return stats


def cmd_build(cfg: RunConfig) -> dict:
    schemas, dialogues = _load_corpus(cfg)
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    tok = WordTokenizer.from_corpus(schemas, dialogues)
    tok.save(out / "vocab.json")
    fcfg = FeaturizerConfig(max_seq_len=cfg.max_seq_len)
    with open(out / "build.json", "w", encoding="utf-8") as fh:
        json.dump({"featurizer": asdict(fcfg), "n_dialogues": len(dialogues)}, fh, indent=2)
    featurizer = Featurizer(tok, fcfg)
    index = {s.service_name: s for s in schemas}
    counts = {}
    for task in cfg.tasks():
        examples = featurizer.corpus_examples(task, dialogues, index)
        write_shards(examples, out / "examples", task)
        counts[task.value] = len(examples)
    _emit({"vocab_size": tok.vocab_size, "examples": counts})
    return counts


def cmd_train(cfg: RunConfig) -> dict:
    from .encoder import EncoderConfig, load_backbone
    from .training import TaskModel, save_task_model, train_task

    tok = WordTokenizer.load(_require(cfg.out_dir / "vocab.json", "build"))
    enc_cfg = EncoderConfig(**{"vocab_size": tok.vocab_size, **cfg.encoder})
    (cfg.out_dir / "models").mkdir(parents=True, exist_ok=True)
    summary = {}
    for task in cfg.tasks():
        try:
            examples = read_shards(cfg.out_dir / "examples", task)
        except FileNotFoundError as exc:
            raise CommandError(str(exc)) from None
        tcfg = _train_config(cfg, task)
        model = TaskModel(task, load_backbone(cfg.backbone, enc_cfg)) if cfg.backbone else enc_cfg
        model, log = train_task(examples, tcfg, model)
        path = cfg.out_dir / "models" / f"{task.value}.npz"
        save_task_model(path, model, {"train": tcfg.to_json(), "log": log.to_json()})
        summary[task.value] = {"examples": log.n_examples, "final_loss": log.epoch_losses[-1] if log.epoch_losses else None}
        logger.info("wrote %s", path)
    _emit(summary)
    return summary


def cmd_track(cfg: RunConfig) -> Path:
    from .tracker import DialogueTracker, ModelPredictor, Thresholds
    from .training import load_task_model

    featurizer = _load_featurizer(cfg)
    models = {}
    for task in Task:
        path = _require(cfg.out_dir / "models" / f"{task.value}.npz", "train")
        models[task], _ = load_task_model(path)
    schemas, dialogues = _load_corpus(cfg)
    try:
        thresholds = Thresholds(**cfg.thresholds)
    except TypeError as exc:
        raise CommandError(f"bad thresholds: {exc}") from None
    tracker = DialogueTracker(featurizer, ModelPredictor(models), {s.service_name: s for s in schemas}, thresholds)
    predicted = [tracker.track_dialogue(d) for d in dialogues]
    out = Path(cfg.predictions) if cfg.predictions else cfg.out_dir / "predictions"
    dump_split(schemas, predicted, out)
    _emit({"dialogues": len(predicted), "predictions": str(out)})
    return out


def cmd_eval(cfg: RunConfig) -> dict:
    from .metrics import evaluate

    schemas, gold = _load_corpus(cfg)
    pred_path = Path(cfg.predictions) if cfg.predictions else cfg.out_dir / "predictions"
    _require(pred_path, "track")
    predicted = load_dialogues(pred_path, schemas)
    train_schemas = load_schemas(cfg.train_schemas) if cfg.train_schemas else schemas
    try:
        report = evaluate(gold, predicted, schemas, train_schemas)
    except ValueError as exc:
        raise CommandError(f"{pred_path}: {exc}") from None
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    with open(cfg.out_dir / "report.json", "w", encoding="utf-8") as fh:
        fh.write(report.dumps())
    _emit(report.to_json())
    return report.to_json()


def cmd_fewshot(cfg: RunConfig) -> dict:
    from .training import mix_few_shot

    _, dev = _load_corpus(cfg)
    try:
        _, remainder, split = mix_few_shot([], dev, cfg.fraction, cfg.seed)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    out = cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    manifest = split.to_json()
    with open(out / "fewshot.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2)
    dump_dialogues([d for d in dev if d.dialogue_id in split.moved_dialogue_ids], out / "fewshot_moved.json")
    dump_dialogues(remainder, out / "fewshot_eval.json")
    _emit({"moved": len(split.moved_dialogue_ids), "eval": len(split.eval_dialogue_ids)})
    return manifest


def cmd_synth(cfg: RunConfig) -> Path:
    from .synth import SynthConfig, synth_corpus

    try:
        scfg = SynthConfig(n_dialogues=cfg.n_dialogues, n_services=cfg.n_services, seed=cfg.seed)
    except ValueError as exc:
        raise CommandError(str(exc)) from None
    schemas, dialogues = synth_corpus(scfg)
    dump_split(schemas, dialogues, cfg.out_dir)
    _emit({"dialogues": len(dialogues), "services": [s.service_name for s in schemas], "out": str(cfg.out_dir)})
    return cfg.out_dir


COMMANDS = {
    "stats": cmd_stats,
    "build": cmd_build,
    "train": cmd_train,
    "track": cmd_track,
    "eval": cmd_eval,
    "fewshot": cmd_fewshot,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="schema-dst", description="Schema-guided dialogue state tracking toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        # default=None everywhere so unset flags fall through to env/config/defaults
        p.add_argument("--config", help="JSON file with RunConfig keys")
        p.add_argument("--schemas", help="schema.json path")
        p.add_argument("--dialogues", nargs="+", help="dialogue file(s) or split directory")
        p.add_argument("--out", help="artifact directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--train-schemas", dest="train_schemas", help="training schemas for seen/unseen buckets")
        return p

    common(sub.add_parser("stats", help="corpus statistics"))
    p = common(sub.add_parser("build", help="tokenizer vocabulary and example shards"))
    p.add_argument("--task", choices=TASK_CHOICES)
    p.add_argument("--max-seq-len", dest="max_seq_len", type=int)
    p = common(sub.add_parser("train", help="train task models from example shards"))
    p.add_argument("--task", choices=TASK_CHOICES)
    p.add_argument("--recipe", choices=["desk_scale", "full"])
    p.add_argument("--backbone", help="encoder weights (.npz) to start from")
    p = common(sub.add_parser("track", help="predict dialogue states"))
    p.add_argument("--predictions", help="output directory (default OUT/predictions)")
    p = common(sub.add_parser("eval", help="score predictions against gold"))
    p.add_argument("--predictions", help="predicted split directory (default OUT/predictions)")
    p = common(sub.add_parser("fewshot", help="sample dev dialogues to move into training"))
    p.add_argument("--fraction", type=float)
    p = common(sub.add_parser("synth", help="write a synthetic corpus"))
    p.add_argument("--n-dialogues", dest="n_dialogues", type=int)
    p.add_argument("--n-services", dest="n_services", type=int)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except (CommandError, CorpusError, FileNotFoundError, ValueError) as exc:
        print(f"schema-dst {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
