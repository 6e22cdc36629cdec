"""Typed data model and I/O for schema-guided dialogue corpora.

The on-disk layout follows the public challenge release: each split directory
holds one ``schema.json`` (a list of services) and any number of
``dialogues_NNN.json`` files (each a list of dialogues).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Iterator, Mapping, Sequence

USER = "USER"
SYSTEM = "SYSTEM"
NONE_INTENT = "NONE"

_SERVICE_FIELDS = {"service_name", "description", "slots", "intents"}
_SLOT_FIELDS = {"name", "description", "is_categorical", "possible_values"}
_INTENT_FIELDS = {
    "name",
    "description",
    "is_transactional",
    "required_slots",
    "optional_slots",
    "result_slots",
}
_DIALOGUE_FIELDS = {"dialogue_id", "services", "turns"}
_TURN_FIELDS = {"speaker", "utterance", "frames"}
_FRAME_FIELDS = {"service", "slots", "actions", "state", "service_call", "service_results"}
_SPAN_FIELDS = {"slot", "start", "exclusive_end"}
_ACTION_FIELDS = {"act", "slot", "values", "canonical_values"}
_STATE_FIELDS = {"active_intent", "requested_slots", "slot_values"}


class CorpusError(ValueError):
    """Base class for corpus loading problems."""


class DataFormatError(CorpusError):
    """A record is malformed (missing/unknown field, wrong type)."""


class ValidationError(CorpusError):
    """A record parsed but violates a data-model invariant."""


@dataclass(frozen=True)
class SlotDef:
    name: str
    description: str
    is_categorical: bool
    possible_values: tuple[str, ...] = ()


@dataclass(frozen=True)
class IntentDef:
    name: str
    description: str
    is_transactional: bool
    required_slots: tuple[str, ...]
    optional_slots: tuple[str, ...] = ()
    result_slots: tuple[str, ...] = ()
    # The release stores optional slots as {slot: default}; None means a plain list.
    optional_defaults: Mapping[str, str] | None = None

    @property
    def allowed_slots(self) -> frozenset[str]:
        return frozenset(self.required_slots) | frozenset(self.optional_slots)


@dataclass(frozen=True)
class ServiceSchema:
    service_name: str
    description: str
    slots: tuple[SlotDef, ...]
    intents: tuple[IntentDef, ...]

    @property
    def domain(self) -> str:
        return domain_of(self.service_name)

    @property
    def slot_names(self) -> list[str]:
        return [s.name for s in self.slots]

    @property
    def intent_names(self) -> list[str]:
        return [i.name for i in self.intents]

    def slot(self, name: str) -> SlotDef:
        for s in self.slots:
            if s.name == name:
                return s
        raise KeyError(f"{self.service_name} has no slot {name!r}")

    def intent(self, name: str) -> IntentDef:
        for i in self.intents:
            if i.name == name:
                return i
        raise KeyError(f"{self.service_name} has no intent {name!r}")

    def has_intent(self, name: str) -> bool:
        return any(i.name == name for i in self.intents)


@dataclass(frozen=True)
class Action:
    act: str
    slot: str | None = None
    values: tuple[str, ...] = ()
    canonical_values: tuple[str, ...] | None = None


@dataclass(frozen=True)
class SlotSpan:
    slot: str
    start: int
    exclusive_end: int


@dataclass(frozen=True)
class DialogueState:
    """Per-frame user state. ``slot_values`` maps a slot to its acceptable values."""

    active_intent: str = NONE_INTENT
    requested_slots: tuple[str, ...] = ()
    slot_values: Mapping[str, tuple[str, ...]] = field(default_factory=dict)

    def value(self, slot: str) -> str | None:
        vals = self.slot_values.get(slot)
        return vals[0] if vals else None


@dataclass(frozen=True)
class Frame:
    service: str
    slot_spans: tuple[SlotSpan, ...] = ()
    actions: tuple[Action, ...] = ()
    state: DialogueState | None = None
    service_call: Mapping[str, Any] | None = None
    service_results: tuple[Any, ...] | None = None

    def span_for(self, slot: str) -> SlotSpan | None:
        for sp in self.slot_spans:
            if sp.slot == slot:
                return sp
        return None


@dataclass(frozen=True)
class Turn:
    speaker: str
    utterance: str
    frames: tuple[Frame, ...] = ()

    def frame(self, service: str) -> Frame | None:
        for f in self.frames:
            if f.service == service:
                return f
        return None


@dataclass(frozen=True)
class Dialogue:
    dialogue_id: str
    services: tuple[str, ...]
    turns: tuple[Turn, ...]

    def user_turn_indices(self) -> list[int]:
        return [i for i, t in enumerate(self.turns) if t.speaker == USER]


@dataclass(frozen=True)
class CorpusStats:
    n_dialogues: int = 0
    n_domains: int = 0
    n_services: int = 0
    avg_turns_per_dialogue: float = 0.0
    avg_tokens_per_turn: float = 0.0
    pct_dialogues_with_unseen_apis: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {
            "n_dialogues": self.n_dialogues,
            "n_domains": self.n_domains,
            "n_services": self.n_services,
            "avg_turns_per_dialogue": self.avg_turns_per_dialogue,
            "avg_tokens_per_turn": self.avg_tokens_per_turn,
            "pct_dialogues_with_unseen_apis": self.pct_dialogues_with_unseen_apis,
        }


def domain_of(service_name: str) -> str:
    """``"Banks_1"`` -> ``"Banks"``."""
    return service_name.split("_", 1)[0]


# ---------------------------------------------------------------------------
# parsing helpers


def _check_fields(record: Any, allowed: set[str], required: set[str], where: str, strict: bool) -> None:
    if not isinstance(record, dict):
        raise DataFormatError(f"{where}: expected an object, got {type(record).__name__}")
    missing = required - record.keys()
    if missing:
        raise DataFormatError(f"{where}: missing field(s) {sorted(missing)}")
    unknown = record.keys() - allowed
    if unknown and strict:
        raise DataFormatError(f"{where}: unknown field(s) {sorted(unknown)}")


def _str_list(value: Any, where: str) -> tuple[str, ...]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise DataFormatError(f"{where}: expected a list of strings")
    return tuple(value)


def _expect(value: Any, typ: type | tuple[type, ...], where: str) -> Any:
    if not isinstance(value, typ) or (typ is int and isinstance(value, bool)):
        raise DataFormatError(f"{where}: expected {getattr(typ, '__name__', typ)}, got {type(value).__name__}")
    return value


def parse_service(record: Any, strict: bool = True) -> ServiceSchema:
    name = record.get("service_name", "<unnamed>") if isinstance(record, dict) else "<unnamed>"
    where = f"service {name!r}"
    _check_fields(record, _SERVICE_FIELDS, _SERVICE_FIELDS, where, strict)
    _expect(record["service_name"], str, f"{where} field 'service_name'")
    _expect(record["description"], str, f"{where} field 'description'")
    slots = []
    for i, s in enumerate(_expect(record["slots"], list, f"{where} field 'slots'")):
        sw = f"{where} field 'slots[{i}]'"
        _check_fields(s, _SLOT_FIELDS, _SLOT_FIELDS, sw, strict)
        slots.append(
            SlotDef(
                name=_expect(s["name"], str, f"{sw}.name"),
                description=_expect(s["description"], str, f"{sw}.description"),
                is_categorical=_expect(s["is_categorical"], bool, f"{sw}.is_categorical"),
                possible_values=_str_list(s["possible_values"], f"{sw}.possible_values"),
            )
        )
    intents = []
    for i, it in enumerate(_expect(record["intents"], list, f"{where} field 'intents'")):
        iw = f"{where} field 'intents[{i}]'"
        _check_fields(it, _INTENT_FIELDS, _INTENT_FIELDS - {"result_slots"}, iw, strict)
        opt = it["optional_slots"]
        if isinstance(opt, dict):
            defaults = {str(k): _expect(v, str, f"{iw}.optional_slots[{k}]") for k, v in opt.items()}
            optional = tuple(defaults)
        else:
            defaults = None
            optional = _str_list(opt, f"{iw}.optional_slots")
        intents.append(
            IntentDef(
                name=_expect(it["name"], str, f"{iw}.name"),
                description=_expect(it["description"], str, f"{iw}.description"),
                is_transactional=_expect(it["is_transactional"], bool, f"{iw}.is_transactional"),
                required_slots=_str_list(it["required_slots"], f"{iw}.required_slots"),
                optional_slots=optional,
                result_slots=_str_list(it.get("result_slots", []), f"{iw}.result_slots"),
                optional_defaults=defaults,
            )
        )
    schema = ServiceSchema(record["service_name"], record["description"], tuple(slots), tuple(intents))
    validate_service(schema)
    return schema


def validate_service(schema: ServiceSchema) -> None:
    where = f"service {schema.service_name!r}"
    if not schema.intents:
        raise ValidationError(f"{where}: at least one intent is required")
    seen: set[str] = set()
    for s in schema.slots:
        if s.name in seen:
            raise ValidationError(f"{where}: duplicate slot {s.name!r}")
        seen.add(s.name)
        if s.is_categorical and not s.possible_values:
            raise ValidationError(f"{where}: categorical slot {s.name!r} has no possible_values")
        if not s.is_categorical and s.possible_values:
            raise ValidationError(f"{where}: free-form slot {s.name!r} lists possible_values")
    intent_names: set[str] = set()
    for it in schema.intents:
        if it.name in intent_names:
            raise ValidationError(f"{where}: duplicate intent {it.name!r}")
        intent_names.add(it.name)
        for group in (it.required_slots, it.optional_slots, it.result_slots):
            for name in group:
                if name not in seen:
                    raise ValidationError(f"{where}: intent {it.name!r} references unknown slot {name!r}")
        both = set(it.required_slots) & set(it.optional_slots)
        if both:
            raise ValidationError(f"{where}: intent {it.name!r} lists {sorted(both)} as required and optional")


def parse_schemas(records: Any, strict: bool = True) -> list[ServiceSchema]:
    if not isinstance(records, list):
        raise DataFormatError("schema file: expected a list of services")
    schemas = [parse_service(r, strict) for r in records]
    names = [s.service_name for s in schemas]
    dupes = {n for n in names if names.count(n) > 1}
    if dupes:
        raise ValidationError(f"schema file: duplicate service name(s) {sorted(dupes)}")
    return schemas


def _read_json(path: str | os.PathLike) -> Any:
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON ({exc})") from None


def load_schemas(path: str | os.PathLike, strict: bool = True) -> list[ServiceSchema]:
    records = _read_json(path)
    try:
        return parse_schemas(records, strict)
    except CorpusError as exc:
        raise type(exc)(f"{path}: {exc}") from None


def _parse_state(rec: Any, where: str, strict: bool) -> DialogueState:
    _check_fields(rec, _STATE_FIELDS, _STATE_FIELDS, where, strict)
    sv = _expect(rec["slot_values"], dict, f"{where}.slot_values")
    values = {str(k): _str_list(v, f"{where}.slot_values[{k}]") for k, v in sv.items()}
    return DialogueState(
        active_intent=_expect(rec["active_intent"], str, f"{where}.active_intent"),
        requested_slots=_str_list(rec["requested_slots"], f"{where}.requested_slots"),
        slot_values=values,
    )


def _parse_frame(rec: Any, where: str, strict: bool) -> Frame:
    _check_fields(rec, _FRAME_FIELDS, {"service"}, where, strict)
    spans = []
    for i, sp in enumerate(_expect(rec.get("slots", []), list, f"{where}.slots")):
        sw = f"{where}.slots[{i}]"
        _check_fields(sp, _SPAN_FIELDS, _SPAN_FIELDS, sw, strict)
        spans.append(
            SlotSpan(
                _expect(sp["slot"], str, f"{sw}.slot"),
                _expect(sp["start"], int, f"{sw}.start"),
                _expect(sp["exclusive_end"], int, f"{sw}.exclusive_end"),
            )
        )
    actions = []
    for i, ac in enumerate(_expect(rec.get("actions", []), list, f"{where}.actions")):
        aw = f"{where}.actions[{i}]"
        _check_fields(ac, _ACTION_FIELDS, {"act"}, aw, strict)
        slot = ac.get("slot")
        slot = slot if slot else None
        canon = ac.get("canonical_values")
        actions.append(
            Action(
                act=_expect(ac["act"], str, f"{aw}.act"),
                slot=slot,
                values=_str_list(ac.get("values", []), f"{aw}.values"),
                canonical_values=None if canon is None else _str_list(canon, f"{aw}.canonical_values"),
            )
        )
    state = _parse_state(rec["state"], f"{where}.state", strict) if "state" in rec else None
    results = rec.get("service_results")
    return Frame(
        service=_expect(rec["service"], str, f"{where}.service"),
        slot_spans=tuple(spans),
        actions=tuple(actions),
        state=state,
        service_call=rec.get("service_call"),
        service_results=None if results is None else tuple(results),
    )


def parse_dialogue(
    rec: Any, schemas: Mapping[str, ServiceSchema] | None = None, strict: bool = True
) -> Dialogue:
    did = rec.get("dialogue_id", "<unknown>") if isinstance(rec, dict) else "<unknown>"
    where = f"dialogue {did!r}"
    _check_fields(rec, _DIALOGUE_FIELDS, _DIALOGUE_FIELDS, where, strict)
    turns = []
    for i, t in enumerate(_expect(rec["turns"], list, f"{where}.turns")):
        tw = f"{where} turn {i}"
        _check_fields(t, _TURN_FIELDS, _TURN_FIELDS, tw, strict)
        frames = tuple(
            _parse_frame(f, f"{tw} frame {j}", strict)
            for j, f in enumerate(_expect(t["frames"], list, f"{tw}.frames"))
        )
        turns.append(
            Turn(
                speaker=_expect(t["speaker"], str, f"{tw}.speaker"),
                utterance=_expect(t["utterance"], str, f"{tw}.utterance"),
                frames=frames,
            )
        )
    dialogue = Dialogue(
        dialogue_id=_expect(rec["dialogue_id"], str, f"{where}.dialogue_id"),
        services=_str_list(rec["services"], f"{where}.services"),
        turns=tuple(turns),
    )
    validate_dialogue(dialogue, schemas)
    return dialogue


def validate_dialogue(dialogue: Dialogue, schemas: Mapping[str, ServiceSchema] | None = None) -> None:
    where = f"dialogue {dialogue.dialogue_id!r}"
    services = set(dialogue.services)
    if schemas is not None:
        for s in dialogue.services:
            if s not in schemas:
                raise ValidationError(f"{where}: service {s!r} is not in the schema set")
    for i, turn in enumerate(dialogue.turns):
        expected = USER if i % 2 == 0 else SYSTEM
        if turn.speaker != expected:
            raise ValidationError(
                f"{where}: turn {i} speaker is {turn.speaker!r}, expected {expected!r} (speakers must alternate, starting with USER)"
            )
        for frame in turn.frames:
            fw = f"{where} turn {i} frame {frame.service!r}"
            if frame.service not in services:
                raise ValidationError(f"{fw}: service not listed in dialogue services")
            for sp in frame.slot_spans:
                if not 0 <= sp.start < sp.exclusive_end <= len(turn.utterance):
                    raise ValidationError(f"{fw}: span {sp} outside utterance of length {len(turn.utterance)}")
            for ac in frame.actions:
                if ac.values and ac.slot is None:
                    raise ValidationError(f"{fw}: action {ac.act} has values but no slot")
            if turn.speaker == USER and frame.state is None:
                raise ValidationError(f"{fw}: user frame has no state")
            if turn.speaker == SYSTEM and frame.state is not None:
                raise ValidationError(f"{fw}: system frame carries a state")
            if schemas is not None and frame.state is not None:
                _validate_state_names(frame.state, schemas[frame.service], fw)


def _validate_state_names(state: DialogueState, schema: ServiceSchema, where: str) -> None:
    names = set(schema.slot_names)
    if state.active_intent != NONE_INTENT and not schema.has_intent(state.active_intent):
        raise ValidationError(f"{where}: unknown intent {state.active_intent!r}")
    for s in list(state.requested_slots) + list(state.slot_values):
        if s not in names:
            raise ValidationError(f"{where}: unknown slot {s!r}")


def _dialogue_files(path: str | os.PathLike | Sequence[str | os.PathLike]) -> list[Path]:
    if isinstance(path, (str, os.PathLike)):
        p = Path(path)
        if p.is_dir():
            files = sorted(p.glob("dialogues_*.json"))
            if not files:
                raise FileNotFoundError(f"{p}: no dialogues_*.json files")
            return files
        return [p]
    return [Path(p) for p in path]


def load_dialogues(
    path: str | os.PathLike | Sequence[str | os.PathLike],
    schemas: Iterable[ServiceSchema] | None = None,
    strict: bool = True,
) -> list[Dialogue]:
    """Load dialogues from a file, a list of files, or a split directory."""
    index = None if schemas is None else {s.service_name: s for s in schemas}
    dialogues: list[Dialogue] = []
    for fp in _dialogue_files(path):
        records = _read_json(fp)
        if not isinstance(records, list):
            raise DataFormatError(f"{fp}: expected a list of dialogues")
        try:
            dialogues.extend(parse_dialogue(r, index, strict) for r in records)
        except CorpusError as exc:
            raise type(exc)(f"{fp}: {exc}") from None
    return dialogues


def load_split(split_dir: str | os.PathLike, strict: bool = True) -> tuple[list[ServiceSchema], list[Dialogue]]:
    schemas = load_schemas(Path(split_dir) / "schema.json", strict)
    return schemas, load_dialogues(split_dir, schemas, strict)


# ---------------------------------------------------------------------------
# serialization


def service_to_json(s: ServiceSchema) -> dict:
    intents = []
    for it in s.intents:
        rec = {
            "name": it.name,
            "description": it.description,
            "is_transactional": it.is_transactional,
            "required_slots": list(it.required_slots),
            "optional_slots": dict(it.optional_defaults) if it.optional_defaults is not None else list(it.optional_slots),
            "result_slots": list(it.result_slots),
        }
        intents.append(rec)
    return {
        "service_name": s.service_name,
        "description": s.description,
        "slots": [
            {
                "name": sl.name,
                "description": sl.description,
                "is_categorical": sl.is_categorical,
                "possible_values": list(sl.possible_values),
            }
            for sl in s.slots
        ],
        "intents": intents,
    }


def state_to_json(state: DialogueState) -> dict:
    return {
        "active_intent": state.active_intent,
        "requested_slots": list(state.requested_slots),
        "slot_values": {k: list(v) for k, v in state.slot_values.items()},
    }


def frame_to_json(f: Frame) -> dict:
    rec: dict[str, Any] = {"service": f.service}
    rec["slots"] = [{"slot": sp.slot, "start": sp.start, "exclusive_end": sp.exclusive_end} for sp in f.slot_spans]
    actions = []
    for a in f.actions:
        ar: dict[str, Any] = {"act": a.act, "slot": a.slot or "", "values": list(a.values)}
        if a.canonical_values is not None:
            ar["canonical_values"] = list(a.canonical_values)
        actions.append(ar)
    rec["actions"] = actions
    if f.state is not None:
        rec["state"] = state_to_json(f.state)
    if f.service_call is not None:
        rec["service_call"] = f.service_call
    if f.service_results is not None:
        rec["service_results"] = list(f.service_results)
    return rec


def dialogue_to_json(d: Dialogue) -> dict:
    return {
        "dialogue_id": d.dialogue_id,
        "services": list(d.services),
        "turns": [
            {"speaker": t.speaker, "utterance": t.utterance, "frames": [frame_to_json(f) for f in t.frames]}
            for t in d.turns
        ],
    }


def dump_schemas(schemas: Iterable[ServiceSchema], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([service_to_json(s) for s in schemas], fh, indent=2)


def dump_dialogues(dialogues: Iterable[Dialogue], path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([dialogue_to_json(d) for d in dialogues], fh, indent=2)


def dump_split(
    schemas: Sequence[ServiceSchema], dialogues: Sequence[Dialogue], split_dir: str | os.PathLike, per_file: int = 128
) -> None:
    out = Path(split_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_schemas(schemas, out / "schema.json")
    for k in range(max(1, -(-len(dialogues) // per_file))):
        dump_dialogues(dialogues[k * per_file : (k + 1) * per_file], out / f"dialogues_{k + 1:03d}.json")


# ---------------------------------------------------------------------------
# corpus views


def iter_user_frames(dialogue: Dialogue) -> Iterator[tuple[int, Turn, Frame]]:
    for i, turn in enumerate(dialogue.turns):
        if turn.speaker == USER:
            for frame in turn.frames:
                yield i, turn, frame


def whitespace_token_count(text: str) -> int:
    return len(text.split())


def corpus_stats(
    dialogues: Sequence[Dialogue],
    schemas: Sequence[ServiceSchema] = (),
    reference_train_schemas: Iterable[ServiceSchema] | None = None,
    speakers: Iterable[str] = (USER, SYSTEM),
) -> CorpusStats:
    """Corpus statistics; services/domains are those the dialogues use."""
    if not dialogues:
        return CorpusStats()
    known = {s.service_name for s in schemas}
    services = {s for d in dialogues for s in d.services}
    if known and not services <= known:
        raise ValidationError(f"dialogues use services missing from the schema: {sorted(services - known)}")
    counted = set(speakers)
    n_turns = sum(len(d.turns) for d in dialogues)
    tok_turns = [t for d in dialogues for t in d.turns if t.speaker in counted]
    n_tokens = sum(whitespace_token_count(t.utterance) for t in tok_turns)
    if reference_train_schemas is None:
        unseen = 0
    else:
        seen_names = {s.service_name for s in reference_train_schemas}
        unseen = sum(1 for d in dialogues if any(s not in seen_names for s in d.services))
    return CorpusStats(
        n_dialogues=len(dialogues),
        n_domains=len({domain_of(s) for s in services}),
        n_services=len(services),
        avg_turns_per_dialogue=n_turns / len(dialogues),
        avg_tokens_per_turn=n_tokens / len(tok_turns) if tok_turns else 0.0,
        pct_dialogues_with_unseen_apis=100.0 * unseen / len(dialogues),
    )


def split_seen_unseen(
    dialogues: Iterable[Dialogue], train_schemas: Iterable[ServiceSchema]
) -> tuple[list[Dialogue], list[Dialogue]]:
    names = {s.service_name for s in train_schemas}
    seen, unseen = [], []
    for d in dialogues:
        (unseen if any(s not in names for s in d.services) else seen).append(d)
    return seen, unseen
