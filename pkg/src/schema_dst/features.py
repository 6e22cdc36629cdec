"""Turn (dialogue history, schema) pairs into encoder inputs for the six tasks.

Every example starts with a reserved classification token, followed by task
specific regions:

    intent        [CLS] utterance | intent_1 | ... | intent_k
    categorical   [CLS] utterance | slot description | value_1 | ... | null
    free-form     [CLS] utterance | [NULL] | slot description
    requested     same layout as free-form
    in-domain     [CLS] service description | utterance | slot description
    cross-domain  [CLS] utterance | target slot | source slot

Description and candidate fragments end with ``[SEP]``; the utterance region is
``sys: <system> usr: <user> [SEP]``.
"""

from __future__ import annotations

import enum
import json
import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .data import (
    NONE_INTENT,
    SYSTEM,
    Action,
    Dialogue,
    DialogueState,
    Frame,
    IntentDef,
    ServiceSchema,
    SlotDef,
    Turn,
)
from .tokenization import SYS_MARKER, USR_MARKER, Token, Tokenizer, slot_phrase

NULL_CANDIDATE = "[NULL]"
NONE_INTENT_DESCRIPTION = "the user has no active intent"

EXAMPLE_FORMAT = "schema-dst-examples"
EXAMPLE_VERSION = 1


class Task(str, enum.Enum):
    INTENT = "intent"
    CATEGORICAL = "categorical"
    FREEFORM = "freeform"
    REQUESTED = "requested"
    INDOMAIN = "indomain_transfer"
    CROSSDOMAIN = "crossdomain_transfer"


class AttentionPattern(str, enum.Enum):
    FULL = "full"
    CANDIDATE_RESTRICTED = "candidate_restricted"


TASK_PATTERN = {
    Task.INTENT: AttentionPattern.CANDIDATE_RESTRICTED,
    Task.CATEGORICAL: AttentionPattern.CANDIDATE_RESTRICTED,
    Task.FREEFORM: AttentionPattern.FULL,
    Task.REQUESTED: AttentionPattern.FULL,
    Task.INDOMAIN: AttentionPattern.FULL,
    Task.CROSSDOMAIN: AttentionPattern.FULL,
}


@dataclass(frozen=True)
class ContextFeatureScheme:
    """Ordered binary features; feature k contributes bit ``2**k`` to the id."""

    task: Task
    feature_names: tuple[str, ...]

    @property
    def cardinality(self) -> int:
        return 2 ** len(self.feature_names)

    def pack(self, features: Mapping[str, bool] | Sequence[bool]) -> int:
        if isinstance(features, Mapping):
            unknown = set(features) - set(self.feature_names)
            if unknown:
                raise ValueError(f"{self.task.value}: unknown context features {sorted(unknown)}")
            bits = [bool(features.get(n, False)) for n in self.feature_names]
        else:
            bits = [bool(b) for b in features]
            if len(bits) != len(self.feature_names):
                raise ValueError(f"{self.task.value}: expected {len(self.feature_names)} features, got {len(bits)}")
        return sum(1 << k for k, b in enumerate(bits) if b)

    def unpack(self, feature_id: int) -> dict[str, bool]:
        return {n: bool(feature_id >> k & 1) for k, n in enumerate(self.feature_names)}


_SLOT_FEATURES = ("requested_by_system", "offered_by_system")
CONTEXT_SCHEMES = {
    Task.INTENT: ContextFeatureScheme(Task.INTENT, ("in_last_intent",)),
    Task.CATEGORICAL: ContextFeatureScheme(Task.CATEGORICAL, _SLOT_FEATURES),
    Task.FREEFORM: ContextFeatureScheme(Task.FREEFORM, _SLOT_FEATURES),
    Task.REQUESTED: ContextFeatureScheme(Task.REQUESTED, _SLOT_FEATURES),
    Task.INDOMAIN: ContextFeatureScheme(
        Task.INDOMAIN, ("optional_in_intent", "required_in_intent", "system_gave_value", "in_user_history")
    ),
    Task.CROSSDOMAIN: ContextFeatureScheme(
        Task.CROSSDOMAIN,
        (
            "continues_previous_service",
            "target_optional_in_intent",
            "target_required_in_intent",
            "target_in_frame_history",
            "source_in_source_state",
        ),
    ),
}
MAX_CONTEXT_FEATURES = max(s.cardinality for s in CONTEXT_SCHEMES.values())


# ---------------------------------------------------------------------------
# dialogue history


@dataclass(frozen=True)
class ValueMention:
    """A slot value seen in the history, ordered by (turn, action index)."""

    turn_index: int
    action_index: int
    value: str
    from_state: bool = False

    @property
    def order(self) -> tuple[int, int]:
        return (self.turn_index, self.action_index)


@dataclass(frozen=True)
class History:
    """Everything strictly before the current user turn.

    User states may be gold (training) or the tracker's own predictions
    (inference); the featurizer cannot tell the difference.
    """

    user_states: Mapping[str, tuple[tuple[int, DialogueState], ...]] = field(default_factory=dict)
    system_actions: Mapping[str, tuple[tuple[int, int, Action], ...]] = field(default_factory=dict)
    last_system_index: int = -1
    last_system_frames: Mapping[str, Frame] = field(default_factory=dict)
    previous_user_services: tuple[str, ...] = ()
    previous_user_index: int = -1

    def with_user_turn(self, turn_index: int, states: Mapping[str, DialogueState]) -> "History":
        merged = dict(self.user_states)
        for service, state in states.items():
            merged[service] = merged.get(service, ()) + ((turn_index, state),)
        return replace(
            self, user_states=merged, previous_user_services=tuple(states), previous_user_index=turn_index
        )

    def with_system_turn(self, turn_index: int, turn: Turn) -> "History":
        merged = dict(self.system_actions)
        for frame in turn.frames:
            acts = tuple((turn_index, k, a) for k, a in enumerate(frame.actions))
            merged[frame.service] = merged.get(frame.service, ()) + acts
        return replace(
            self,
            system_actions=merged,
            last_system_index=turn_index,
            last_system_frames={f.service: f for f in turn.frames},
        )

    def last_state(self, service: str) -> DialogueState | None:
        states = self.user_states.get(service)
        return states[-1][1] if states else None

    def last_intent(self, service: str) -> str | None:
        """Active intent of ``service`` in the immediately preceding user turn."""
        states = self.user_states.get(service)
        if not states or states[-1][0] != self.previous_user_index:
            return None
        return states[-1][1].active_intent

    def active_services(self) -> list[str]:
        seen = dict.fromkeys(list(self.user_states) + list(self.system_actions))
        return list(seen)

    def system_mentions(self, service: str, slot: str) -> list[ValueMention]:
        return [
            ValueMention(t, k, v)
            for t, k, a in self.system_actions.get(service, ())
            if a.slot == slot
            for v in a.values[:1]
        ]

    def state_mention(self, service: str, slot: str) -> ValueMention | None:
        states = self.user_states.get(service)
        if not states:
            return None
        t, state = states[-1]
        value = state.value(slot)
        return None if value is None else ValueMention(t, -1, value, from_state=True)

    def slot_in_user_history(self, service: str, slot: str) -> bool:
        return any(slot in st.slot_values for _, st in self.user_states.get(service, ()))

    def requested_by_system(self, service: str, slot: str) -> bool:
        frame = self.last_system_frames.get(service)
        return frame is not None and any(a.act == "REQUEST" and a.slot == slot for a in frame.actions)

    def offered_by_system(self, service: str, slot: str) -> bool:
        return bool(self.system_mentions(service, slot))

    def continues(self, service: str) -> bool:
        return service in self.previous_user_services


def resolve_most_recent(mentions: Iterable[ValueMention]) -> ValueMention:
    """Latest mention by turn, then action index; a later mention wins ties."""
    best = None
    for m in mentions:
        if best is None or m.order >= best.order:
            best = m
    if best is None:
        raise ValueError("no candidate value in the dialogue history")
    return best


def indomain_mentions(history: History, service: str, slot: str) -> list[ValueMention]:
    return history.system_mentions(service, slot)


def crossdomain_mentions(history: History, source_service: str, source_slot: str) -> list[ValueMention]:
    found = history.system_mentions(source_service, source_slot)
    state = history.state_mention(source_service, source_slot)
    if state is not None:
        found.append(state)
    return found


def crossdomain_candidates(
    history: History,
    service: str,
    schema: ServiceSchema,
    source_schemas: Mapping[str, ServiceSchema] | None = None,
) -> list[tuple[str, str, str]]:
    """(target slot, source service, source slot) for every valued slot of an earlier service.

    With ``source_schemas``, action slots that are not schema slots (such as
    the ``intent`` pseudo-slot of OFFER_INTENT) are skipped.
    """
    sources = []
    for src in history.active_services():
        if src == service:
            continue
        known = set(source_schemas[src].slot_names) if source_schemas is not None else None
        for slot in _valued_slots(history, src):
            if known is None or slot in known:
                sources.append((src, slot))
    return [(t.name, src, s) for t in schema.slots for src, s in sources]


@dataclass(frozen=True)
class TurnContext:
    """One user-turn frame plus what the featurizer may know about its past.

    ``gold_frame`` is set in training mode only. ``intent`` is the current
    turn's intent used by the transfer tasks (gold for training, predicted
    during tracking).
    """

    dialogue_id: str
    turn_index: int
    service: str
    system_utterance: str | None
    user_utterance: str
    history: History
    intent: str | None = None
    gold_frame: Frame | None = None

    @property
    def last_intent(self) -> str | None:
        return self.history.last_intent(self.service)


def gold_turn_contexts(dialogue: Dialogue) -> Iterator[TurnContext]:
    """Training-mode contexts: gold states feed the history."""
    history = History()
    for i, turn in enumerate(dialogue.turns):
        if turn.speaker == SYSTEM:
            history = history.with_system_turn(i, turn)
            continue
        sys_utt = dialogue.turns[i - 1].utterance if i > 0 else None
        for frame in turn.frames:
            yield TurnContext(
                dialogue.dialogue_id,
                i,
                frame.service,
                sys_utt,
                turn.utterance,
                history,
                intent=frame.state.active_intent,
                gold_frame=frame,
            )
        history = history.with_user_turn(i, {f.service: f.state for f in turn.frames})


# ---------------------------------------------------------------------------
# gold supervision


def _norm(value: str) -> str:
    return " ".join(value.lower().split())


def _values_match(candidate: str, gold: Iterable[str]) -> bool:
    return _norm(candidate) in {_norm(g) for g in gold}


def mentioned_in(value: str, utterance: str) -> bool:
    v = _norm(value)
    return bool(v) and re.search(rf"(?<!\w){re.escape(v)}(?!\w)", _norm(utterance)) is not None


def changed_slots(ctx: TurnContext) -> dict[str, tuple[str, ...]]:
    """Gold slot values that are new or different in the current turn."""
    assert ctx.gold_frame is not None and ctx.gold_frame.state is not None
    prev = ctx.history.last_state(ctx.service)
    before = prev.slot_values if prev is not None else {}
    return {
        s: v
        for s, v in ctx.gold_frame.state.slot_values.items()
        if set(map(_norm, v)) != set(map(_norm, before.get(s, ())))
    }


def utterance_sourced(ctx: TurnContext, slot: SlotDef, values: Sequence[str]) -> bool:
    if ctx.gold_frame.span_for(slot.name) is not None:
        return True
    return slot.is_categorical and any(mentioned_in(v, ctx.user_utterance) for v in values)


def indomain_label(ctx: TurnContext, slot: SlotDef) -> int:
    changed = changed_slots(ctx)
    if slot.name not in changed or utterance_sourced(ctx, slot, changed[slot.name]):
        return 0
    mentions = indomain_mentions(ctx.history, ctx.service, slot.name)
    return int(bool(mentions) and _values_match(resolve_most_recent(mentions).value, changed[slot.name]))


def crossdomain_label(ctx: TurnContext, slot: SlotDef, source_service: str, source_slot: str) -> int:
    changed = changed_slots(ctx)
    if slot.name not in changed or utterance_sourced(ctx, slot, changed[slot.name]):
        return 0
    mentions = crossdomain_mentions(ctx.history, source_service, source_slot)
    return int(bool(mentions) and _values_match(resolve_most_recent(mentions).value, changed[slot.name]))


def categorical_target_value(ctx: TurnContext, slot: SlotDef) -> str | None:
    """Gold value the categorical head should pick, or None for the null candidate."""
    changed = changed_slots(ctx)
    if slot.name not in changed:
        return None
    values = changed[slot.name]
    in_schema = [v for v in slot.possible_values if _values_match(v, values)]
    if not in_schema:
        return None
    if utterance_sourced(ctx, slot, values):
        return in_schema[0]
    transferable = any(
        _values_match(m.value, values) for m in indomain_mentions(ctx.history, ctx.service, slot.name)
    ) or any(
        _values_match(m.value, values)
        for src in ctx.history.active_services()
        if src != ctx.service
        for s in _valued_slots(ctx.history, src)
        for m in crossdomain_mentions(ctx.history, src, s)
    )
    return None if transferable else in_schema[0]


def _valued_slots(history: History, service: str) -> list[str]:
    state = history.last_state(service)
    slots = list(state.slot_values) if state is not None else []
    slots += [a.slot for _, _, a in history.system_actions.get(service, ()) if a.slot and a.values]
    return list(dict.fromkeys(slots))


# ---------------------------------------------------------------------------
# layout


Span = tuple[int, int]


@dataclass(frozen=True)
class FragmentLayout:
    """Token regions of one example; spans are half-open ``(start, end)``."""

    seq_len: int
    utterance_span: Span
    sys_span: Span
    usr_span: Span
    cls_position: int = 0
    null_position: int | None = None
    description_span: Span | None = None
    prefix_span: Span | None = None
    candidate_spans: tuple[tuple[str, Span], ...] = ()

    def regions(self) -> list[tuple[str, Span]]:
        out = [("cls", (self.cls_position, self.cls_position + 1)), ("utterance", self.utterance_span)]
        if self.prefix_span is not None:
            out.append(("prefix", self.prefix_span))
        if self.null_position is not None:
            out.append(("null", (self.null_position, self.null_position + 1)))
        if self.description_span is not None:
            out.append(("description", self.description_span))
        out.extend((f"candidate:{cid}", sp) for cid, sp in self.candidate_spans)
        return sorted(out, key=lambda r: r[1][0])

    def validate(self) -> None:
        pos = 0
        for name, (s, e) in self.regions():
            if s != pos or e <= s:
                raise ValueError(f"layout region {name} {(s, e)} does not tile the sequence at {pos}")
            pos = e
        if pos != self.seq_len:
            raise ValueError(f"layout covers {pos} tokens, sequence has {self.seq_len}")
        u0, u1 = self.utterance_span
        for s, e in (self.sys_span, self.usr_span):
            if not (u0 <= s <= e <= u1):
                raise ValueError("utterance content spans must lie inside the utterance region")

    @property
    def candidate_ids(self) -> list[str]:
        return [cid for cid, _ in self.candidate_spans]

    def span_region(self) -> list[int]:
        """Token indices a span may start/end on (utterance content, then null)."""
        idx = list(range(*self.sys_span)) + list(range(*self.usr_span))
        if self.null_position is not None:
            idx.append(self.null_position)
        return idx

    def to_json(self) -> dict:
        return {
            "seq_len": self.seq_len,
            "cls_position": self.cls_position,
            "utterance_span": list(self.utterance_span),
            "sys_span": list(self.sys_span),
            "usr_span": list(self.usr_span),
            "null_position": self.null_position,
            "description_span": None if self.description_span is None else list(self.description_span),
            "prefix_span": None if self.prefix_span is None else list(self.prefix_span),
            "candidate_spans": [[cid, list(sp)] for cid, sp in self.candidate_spans],
        }

    @classmethod
    def from_json(cls, rec: dict) -> "FragmentLayout":
        opt = lambda v: None if v is None else tuple(v)  # noqa: E731
        return cls(
            seq_len=rec["seq_len"],
            cls_position=rec["cls_position"],
            utterance_span=tuple(rec["utterance_span"]),
            sys_span=tuple(rec["sys_span"]),
            usr_span=tuple(rec["usr_span"]),
            null_position=rec["null_position"],
            description_span=opt(rec["description_span"]),
            prefix_span=opt(rec["prefix_span"]),
            candidate_spans=tuple((cid, tuple(sp)) for cid, sp in rec["candidate_spans"]),
        )


def build_attention_mask(
    layout: FragmentLayout, pattern: AttentionPattern, length: int | None = None
) -> np.ndarray:
    """``mask[q, k]`` is True when query ``q`` may attend to key ``k``.

    Positions at or beyond ``layout.seq_len`` are padding and get all-False
    rows and columns.
    """
    n = layout.seq_len if length is None else length
    if n < layout.seq_len:
        raise ValueError(f"mask length {n} shorter than the sequence ({layout.seq_len})")
    mask = np.zeros((n, n), dtype=bool)
    L = layout.seq_len
    if pattern == AttentionPattern.FULL or not layout.candidate_spans:
        mask[:L, :L] = True
        return mask
    shared = np.ones(L, dtype=bool)
    for _, (s, e) in layout.candidate_spans:
        shared[s:e] = False
    mask[np.flatnonzero(shared), :L] = True
    for _, (s, e) in layout.candidate_spans:
        mask[s:e, :L] = shared
        mask[s:e, s:e] = True
    return mask


def render_utterance(
    last_system_utterance: str | None, user_utterance: str, tokenizer: Tokenizer
) -> list[Token]:
    """Tokens of ``"sys: <system> usr: <user>"``; markers stay even when the system side is empty."""
    if not user_utterance:
        raise ValueError("user utterance must be non-empty")
    out = [replace(t, start=-1, end=-1, source=None) for t in tokenizer.tokenize(SYS_MARKER)]
    out += [replace(t, source="sys") for t in tokenizer.tokenize(last_system_utterance or "")]
    out += [replace(t, start=-1, end=-1, source=None) for t in tokenizer.tokenize(USR_MARKER)]
    out += [replace(t, source="usr") for t in tokenizer.tokenize(user_utterance)]
    return out


def align_char_span(tokens: Sequence[Token], start: int, end: int, source: str = "usr") -> Span | None:
    """Smallest token window (inclusive indices) whose character extent covers ``[start, end)``."""
    best = None
    idx = [i for i, t in enumerate(tokens) if t.source == source]
    for a in idx:
        if tokens[a].start > start:
            break
        if tokens[a].end <= start:
            continue
        for b in idx:
            if b < a:
                continue
            if tokens[b].end >= end:
                if best is None or (b - a) < (best[1] - best[0]):
                    best = (a, b)
                break
    return best


# ---------------------------------------------------------------------------
# examples


@dataclass(frozen=True)
class EncodedExample:
    task: Task
    token_ids: tuple[int, ...]
    segment_ids: tuple[int, ...]
    position_ids: tuple[int, ...]
    context_feature_ids: tuple[int, ...]
    layout: FragmentLayout
    # candidate index | (start, end) token indices | 0/1; None at inference
    target: int | tuple[int, int] | None
    provenance: tuple[str, int, str, str]
    # character offsets of utterance tokens into their source utterance
    char_offsets: tuple[tuple[int, int], ...] = ()

    @property
    def pattern(self) -> AttentionPattern:
        return TASK_PATTERN[self.task]

    @property
    def attention_mask(self) -> np.ndarray:
        return build_attention_mask(self.layout, self.pattern)

    def __len__(self) -> int:
        return len(self.token_ids)

    def to_json(self) -> dict:
        packed = np.packbits(self.attention_mask.reshape(-1)).tobytes().hex()
        target = list(self.target) if isinstance(self.target, tuple) else self.target
        return {
            "task": self.task.value,
            "token_ids": list(self.token_ids),
            "segment_ids": list(self.segment_ids),
            "position_ids": list(self.position_ids),
            "context_feature_ids": list(self.context_feature_ids),
            "attention_mask": packed,
            "layout": self.layout.to_json(),
            "target": target,
            "provenance": list(self.provenance),
            "char_offsets": [list(o) for o in self.char_offsets],
        }

    def to_bytes(self) -> bytes:
        return json.dumps(self.to_json(), sort_keys=True, separators=(",", ":")).encode()

    @classmethod
    def from_json(cls, rec: dict) -> "EncodedExample":
        target = rec["target"]
        ex = cls(
            task=Task(rec["task"]),
            token_ids=tuple(rec["token_ids"]),
            segment_ids=tuple(rec["segment_ids"]),
            position_ids=tuple(rec["position_ids"]),
            context_feature_ids=tuple(rec["context_feature_ids"]),
            layout=FragmentLayout.from_json(rec["layout"]),
            target=tuple(target) if isinstance(target, list) else target,
            provenance=tuple(rec["provenance"]),
            char_offsets=tuple(tuple(o) for o in rec["char_offsets"]),
        )
        n = len(ex.token_ids)
        stored = np.unpackbits(np.frombuffer(bytes.fromhex(rec["attention_mask"]), dtype=np.uint8))[: n * n]
        if not np.array_equal(stored.reshape(n, n).astype(bool), ex.attention_mask):
            raise ValueError(f"example {ex.provenance}: stored attention mask disagrees with its layout")
        return ex


class SequenceTooLong(ValueError):
    pass


@dataclass(frozen=True)
class FeaturizerConfig:
    max_seq_len: int = 256
    none_intent: bool = True


@dataclass
class _Piece:
    region: str
    tokens: list[Token]
    segment: int
    trim: str | None = None  # "left" / "right" / None
    sep: bool = True


class Featurizer:
    """Builds :class:`EncodedExample` objects; pure given tokenizer and config."""

    def __init__(self, tokenizer: Tokenizer, config: FeaturizerConfig = FeaturizerConfig()):
        self.tokenizer = tokenizer
        self.config = config
        self._tok_cache: dict[str, list[Token]] = {}

    # -- text pieces -------------------------------------------------------

    def _tok(self, text: str) -> list[Token]:
        if text not in self._tok_cache:
            self._tok_cache[text] = [replace(t, start=-1, end=-1, source=None) for t in self.tokenizer.tokenize(text)]
        return self._tok_cache[text]

    def _special(self, text: str) -> Token:
        return Token(text)

    def slot_tokens(self, slot: SlotDef) -> list[Token]:
        return self._tok(slot_phrase(slot.name)) + self._tok(slot.description)

    def intent_candidates(self, schema: ServiceSchema) -> list[tuple[str, list[Token]]]:
        cands = [(it.name, self._tok(it.description)) for it in schema.intents]
        if self.config.none_intent:
            cands.append((NONE_INTENT, self._tok(NONE_INTENT_DESCRIPTION)))
        return cands

    def value_candidates(self, slot: SlotDef) -> list[tuple[str, list[Token]]]:
        cands = [(v, self._tok(v)) for v in slot.possible_values]
        cands.append((NULL_CANDIDATE, [self._special(self.tokenizer.null_token)]))
        return cands

    # -- assembly ----------------------------------------------------------

    def _utterance_pieces(self, ctx: TurnContext) -> list[_Piece]:
        toks = render_utterance(ctx.system_utterance, ctx.user_utterance, self.tokenizer)
        i = len(self.tokenizer.tokenize(SYS_MARKER))
        j = i
        while j < len(toks) and toks[j].source == "sys":
            j += 1
        k = j
        while toks[k].source != "usr":
            k += 1
        return [
            _Piece("sys_marker", toks[:i], 0, sep=False),
            _Piece("sys", toks[i:j], 0, trim="left", sep=False),
            _Piece("usr_marker", toks[j:k], 0, sep=False),
            _Piece("usr", toks[k:], 0, sep=True),
        ]

    def _fit(self, pieces: list[_Piece]) -> None:
        limit = self.config.max_seq_len
        total = 1 + sum(len(p.tokens) + p.sep for p in pieces)
        overflow = total - limit
        if overflow <= 0:
            return
        for p in pieces:
            if p.trim == "left" and overflow > 0:
                k = min(overflow, len(p.tokens))
                p.tokens = p.tokens[k:]
                overflow -= k
        while overflow > 0:
            trimmable = [p for p in pieces if p.trim == "right" and len(p.tokens) > 1]
            if not trimmable:
                raise SequenceTooLong(
                    f"example needs {limit + overflow} tokens, max_seq_len is {limit}; the user utterance is never truncated"
                )
            longest = max(trimmable, key=lambda p: len(p.tokens))
            longest.tokens = longest.tokens[:-1]
            overflow -= 1

    def _assemble(
        self,
        task: Task,
        pieces: list[_Piece],
        ctx: TurnContext,
        name: str,
        target_fn,
        context_fn,
    ) -> EncodedExample:
        self._fit(pieces)
        tokens: list[Token] = [self._special(self.tokenizer.cls_token)]
        segments = [0]
        spans: dict[str, Span] = {}
        for p in pieces:
            start = len(tokens)
            tokens.extend(p.tokens)
            if p.sep:
                tokens.append(self._special(self.tokenizer.sep_token))
            segments.extend([p.segment] * (len(tokens) - start))
            spans[p.region] = (start, len(tokens))
        utt = (spans["sys_marker"][0], spans["usr"][1])
        candidates = tuple((p.region.split(":", 1)[1], spans[p.region]) for p in pieces if p.region.startswith("candidate:"))
        usr_content = (spans["usr"][0], spans["usr"][1] - 1)
        layout = FragmentLayout(
            seq_len=len(tokens),
            utterance_span=utt,
            sys_span=spans["sys"],
            usr_span=usr_content,
            null_position=spans["null"][0] if "null" in spans else None,
            description_span=spans.get("description"),
            prefix_span=spans.get("prefix"),
            candidate_spans=candidates,
        )
        return EncodedExample(
            task=task,
            token_ids=tuple(self.tokenizer.token_id(t.text) for t in tokens),
            segment_ids=tuple(segments),
            position_ids=tuple(range(len(tokens))),
            context_feature_ids=tuple(context_fn(layout)),
            layout=layout,
            target=target_fn(layout, tokens),
            provenance=(ctx.dialogue_id, ctx.turn_index, ctx.service, name),
            char_offsets=tuple(
                (t.start, t.end) if t.source in ("sys", "usr") else (-1, -1) for t in tokens
            ),
        )

    # -- context features --------------------------------------------------

    def context_ids(
        self,
        task: Task,
        schema: ServiceSchema,
        ctx: TurnContext,
        layout: FragmentLayout,
        name: str | None = None,
        source: tuple[str, str] | None = None,
    ) -> list[int]:
        scheme = CONTEXT_SCHEMES.get(task)
        if scheme is None:
            raise ValueError(f"unknown task {task!r}")
        n = layout.seq_len
        h = ctx.history
        if task == Task.INTENT:
            ids = [0] * n
            last = ctx.last_intent
            for cid, (s, e) in layout.candidate_spans:
                if last is not None and cid == last:
                    ids[s:e] = [1] * (e - s)
            return ids
        if task in (Task.CATEGORICAL, Task.FREEFORM, Task.REQUESTED):
            fid = scheme.pack(
                {
                    "requested_by_system": h.requested_by_system(ctx.service, name),
                    "offered_by_system": h.offered_by_system(ctx.service, name),
                }
            )
            return [fid] * n
        intent = _intent_def(schema, ctx.intent)
        optional = intent is not None and name in intent.optional_slots
        required = intent is not None and name in intent.required_slots
        if task == Task.INDOMAIN:
            fid = scheme.pack(
                {
                    "optional_in_intent": optional,
                    "required_in_intent": required,
                    "system_gave_value": h.offered_by_system(ctx.service, name),
                    "in_user_history": h.slot_in_user_history(ctx.service, name),
                }
            )
            return [fid] * n
        src_service, src_slot = source
        src_state = h.last_state(src_service)
        fid = scheme.pack(
            {
                "continues_previous_service": h.continues(ctx.service),
                "target_optional_in_intent": optional,
                "target_required_in_intent": required,
                "target_in_frame_history": h.slot_in_user_history(ctx.service, name),
                "source_in_source_state": src_state is not None and src_slot in src_state.slot_values,
            }
        )
        return [fid] * n

    # -- builders ----------------------------------------------------------

    def build_intent_example(self, ctx: TurnContext, schema: ServiceSchema) -> EncodedExample:
        cands = self.intent_candidates(schema)
        pieces = self._utterance_pieces(ctx)
        pieces += [_Piece(f"candidate:{cid}", list(toks), 1, trim="right") for cid, toks in cands]

        def target(layout, _tokens):
            if ctx.gold_frame is None:
                return None
            gold = ctx.gold_frame.state.active_intent
            ids = layout.candidate_ids
            if gold not in ids:
                raise ValueError(f"{ctx.dialogue_id} turn {ctx.turn_index}: intent {gold!r} has no candidate")
            return ids.index(gold)

        return self._assemble(
            Task.INTENT, pieces, ctx, "", target, lambda lay: self.context_ids(Task.INTENT, schema, ctx, lay)
        )

    def build_categorical_example(self, ctx: TurnContext, schema: ServiceSchema, slot: SlotDef) -> EncodedExample:
        if not slot.is_categorical:
            raise ValueError(f"slot {slot.name!r} is not categorical")
        pieces = self._utterance_pieces(ctx)
        pieces.append(_Piece("description", list(self.slot_tokens(slot)), 1, trim="right"))
        pieces += [_Piece(f"candidate:{cid}", list(toks), 1, trim="right") for cid, toks in self.value_candidates(slot)]

        def target(layout, _tokens):
            if ctx.gold_frame is None:
                return None
            value = categorical_target_value(ctx, slot)
            return layout.candidate_ids.index(NULL_CANDIDATE if value is None else value)

        return self._assemble(
            Task.CATEGORICAL,
            pieces,
            ctx,
            slot.name,
            target,
            lambda lay: self.context_ids(Task.CATEGORICAL, schema, ctx, lay, slot.name),
        )

    def _span_pieces(self, ctx: TurnContext, slot: SlotDef) -> list[_Piece]:
        pieces = self._utterance_pieces(ctx)
        pieces.append(_Piece("null", [self._special(self.tokenizer.null_token)], 0, sep=False))
        pieces.append(_Piece("description", list(self.slot_tokens(slot)), 1, trim="right"))
        return pieces

    def build_freeform_example(self, ctx: TurnContext, schema: ServiceSchema, slot: SlotDef) -> EncodedExample:
        if slot.is_categorical:
            raise ValueError(f"slot {slot.name!r} is categorical")

        def target(layout, tokens):
            if ctx.gold_frame is None:
                return None
            span = ctx.gold_frame.span_for(slot.name)
            null = (layout.null_position, layout.null_position)
            if span is None:
                return null
            window = align_char_span(tokens, span.start, span.exclusive_end, "usr")
            return null if window is None else window

        return self._assemble(
            Task.FREEFORM,
            self._span_pieces(ctx, slot),
            ctx,
            slot.name,
            target,
            lambda lay: self.context_ids(Task.FREEFORM, schema, ctx, lay, slot.name),
        )

    def build_requested_example(self, ctx: TurnContext, schema: ServiceSchema, slot: SlotDef) -> EncodedExample:
        def target(_layout, _tokens):
            if ctx.gold_frame is None:
                return None
            return int(slot.name in ctx.gold_frame.state.requested_slots)

        return self._assemble(
            Task.REQUESTED,
            self._span_pieces(ctx, slot),
            ctx,
            slot.name,
            target,
            lambda lay: self.context_ids(Task.REQUESTED, schema, ctx, lay, slot.name),
        )

    def build_indomain_transfer_example(
        self, ctx: TurnContext, schema: ServiceSchema, slot: SlotDef
    ) -> EncodedExample:
        if not indomain_mentions(ctx.history, ctx.service, slot.name):
            raise ValueError(f"slot {slot.name!r} has no system value to transfer")
        pieces = [_Piece("prefix", list(self._tok(schema.description)), 1, trim="right")]
        pieces += self._utterance_pieces(ctx)
        pieces.append(_Piece("description", list(self.slot_tokens(slot)), 1, trim="right"))

        def target(_layout, _tokens):
            return None if ctx.gold_frame is None else indomain_label(ctx, slot)

        return self._assemble(
            Task.INDOMAIN,
            pieces,
            ctx,
            slot.name,
            target,
            lambda lay: self.context_ids(Task.INDOMAIN, schema, ctx, lay, slot.name),
        )

    def build_crossdomain_transfer_example(
        self,
        ctx: TurnContext,
        schema: ServiceSchema,
        slot: SlotDef,
        source_schema: ServiceSchema,
        source_slot: SlotDef,
    ) -> EncodedExample:
        src = (source_schema.service_name, source_slot.name)
        if not crossdomain_mentions(ctx.history, *src):
            raise ValueError(f"source slot {src} carries no value")
        pieces = self._utterance_pieces(ctx)
        pieces.append(_Piece("description", list(self.slot_tokens(slot)), 1, trim="right"))
        pieces.append(_Piece(f"candidate:{src[0]}:{src[1]}", list(self.slot_tokens(source_slot)), 1, trim="right"))

        def target(_layout, _tokens):
            return None if ctx.gold_frame is None else crossdomain_label(ctx, slot, *src)

        return self._assemble(
            Task.CROSSDOMAIN,
            pieces,
            ctx,
            f"{slot.name}<-{src[0]}:{src[1]}",
            target,
            lambda lay: self.context_ids(Task.CROSSDOMAIN, schema, ctx, lay, slot.name, src),
        )

    # -- per-turn enumeration ----------------------------------------------

    def turn_examples(
        self, task: Task, ctx: TurnContext, schemas: Mapping[str, ServiceSchema]
    ) -> list[EncodedExample]:
        schema = schemas[ctx.service]
        if task == Task.INTENT:
            return [self.build_intent_example(ctx, schema)]
        if task == Task.CATEGORICAL:
            return [self.build_categorical_example(ctx, schema, s) for s in schema.slots if s.is_categorical]
        if task == Task.FREEFORM:
            return [self.build_freeform_example(ctx, schema, s) for s in schema.slots if not s.is_categorical]
        if task == Task.REQUESTED:
            return [self.build_requested_example(ctx, schema, s) for s in schema.slots]
        if task == Task.INDOMAIN:
            return [
                self.build_indomain_transfer_example(ctx, schema, s)
                for s in schema.slots
                if indomain_mentions(ctx.history, ctx.service, s.name)
            ]
        if task == Task.CROSSDOMAIN:
            return [
                self.build_crossdomain_transfer_example(
                    ctx, schema, schema.slot(t), schemas[src], schemas[src].slot(s)
                )
                for t, src, s in crossdomain_candidates(ctx.history, ctx.service, schema, schemas)
            ]
        raise ValueError(f"unknown task {task!r}")

    def corpus_examples(
        self, task: Task, dialogues: Iterable[Dialogue], schemas: Mapping[str, ServiceSchema]
    ) -> list[EncodedExample]:
        out: list[EncodedExample] = []
        for d in dialogues:
            for ctx in gold_turn_contexts(d):
                out.extend(self.turn_examples(task, ctx, schemas))
        return out


def _intent_def(schema: ServiceSchema, name: str | None) -> IntentDef | None:
    if name is None or name == NONE_INTENT or not schema.has_intent(name):
        return None
    return schema.intent(name)


# ---------------------------------------------------------------------------
# shard interchange


def write_shards(
    examples: Sequence[EncodedExample], out_dir: str | os.PathLike, task: Task, shard_size: int = 4096
) -> list[Path]:
    """JSON-lines shards: a header line, then one example per line."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for old in out.glob(f"{task.value}-*.jsonl"):
        old.unlink()
    paths = []
    n_shards = max(1, -(-len(examples) // shard_size))
    for k in range(n_shards):
        chunk = examples[k * shard_size : (k + 1) * shard_size]
        path = out / f"{task.value}-{k:05d}.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            header = {"format": EXAMPLE_FORMAT, "version": EXAMPLE_VERSION, "task": task.value, "count": len(chunk)}
            fh.write(json.dumps(header) + "\n")
            for ex in chunk:
                fh.write(ex.to_bytes().decode() + "\n")
        paths.append(path)
    return paths


def read_shards(in_dir: str | os.PathLike, task: Task) -> list[EncodedExample]:
    paths = sorted(Path(in_dir).glob(f"{task.value}-*.jsonl"))
    if not paths:
        raise FileNotFoundError(f"{in_dir}: no {task.value} example shards (run the 'build' command first)")
    out = []
    for path in paths:
        with open(path, encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            if header.get("format") != EXAMPLE_FORMAT or header.get("version") != EXAMPLE_VERSION:
                raise ValueError(f"{path}: not a {EXAMPLE_FORMAT} v{EXAMPLE_VERSION} shard")
            chunk = [EncodedExample.from_json(json.loads(line)) for line in fh if line.strip()]
        if len(chunk) != header["count"]:
            raise ValueError(f"{path}: header says {header['count']} examples, found {len(chunk)}")
        out.extend(chunk)
    return out
