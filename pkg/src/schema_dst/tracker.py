"""Inference pipeline: run the six models turn by turn and summarise their
outputs into per-frame dialogue states."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Protocol, Sequence

from .data import NONE_INTENT, SYSTEM, Dialogue, DialogueState, ServiceSchema, Turn
from .features import (
    NULL_CANDIDATE,
    EncodedExample,
    Featurizer,
    History,
    Task,
    TurnContext,
    crossdomain_candidates,
    crossdomain_mentions,
    indomain_mentions,
    resolve_most_recent,
)
from .heads import decode_span


@dataclass(frozen=True)
class Thresholds:
    categorical: float = 0.8
    freeform: float = 0.5
    requested: float = 0.9
    indomain: float = 0.85
    crossdomain: float = 0.9

    def __post_init__(self):
        for name, v in vars(self).items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"threshold {name}={v} outside [0, 1]")


@dataclass(frozen=True)
class CrossDomainPrediction:
    target_slot: str
    source_service: str
    source_slot: str
    probability: float
    value: str


@dataclass
class PredictionSet:
    """Raw model outputs for one user-turn frame."""

    intent: dict[str, float]
    categorical: dict[str, dict[str, float]] = field(default_factory=dict)
    freeform: dict[str, tuple[str | None, float]] = field(default_factory=dict)
    requested: dict[str, float] = field(default_factory=dict)
    indomain: dict[str, tuple[float, str]] = field(default_factory=dict)
    crossdomain: list[CrossDomainPrediction] = field(default_factory=list)


def _argmax(dist: Mapping[str, float]) -> tuple[str, float]:
    best = None
    for k, p in dist.items():
        if best is None or p > best[1]:
            best = (k, p)
    return best


def resolve_transfer_value(
    history: History, service: str, slot: str, source: tuple[str, str] | None = None
) -> str:
    """Most recently mentioned value: same-service system actions, or the source frame's state/actions."""
    mentions = indomain_mentions(history, service, slot) if source is None else crossdomain_mentions(history, *source)
    return resolve_most_recent(mentions).value


def summarize_turn(
    predictions: PredictionSet,
    thresholds: Thresholds,
    schema: ServiceSchema,
    previous_state: DialogueState | None,
) -> DialogueState:
    values: dict[str, tuple[str, ...]] = dict(previous_state.slot_values) if previous_state else {}
    intent = _argmax(predictions.intent)[0]
    touched: set[str] = set()
    for slot, dist in predictions.categorical.items():
        value, p = _argmax(dist)
        if value != NULL_CANDIDATE and p >= thresholds.categorical:
            values[slot] = (value,)
            touched.add(slot)
    for slot, (value, score) in predictions.freeform.items():
        if value is not None and score >= thresholds.freeform:
            values[slot] = (value,)
            touched.add(slot)
    transferred: set[str] = set()
    for slot, (p, value) in predictions.indomain.items():
        if slot not in touched and p >= thresholds.indomain:
            values[slot] = (value,)
            transferred.add(slot)
    best_cross: dict[str, CrossDomainPrediction] = {}
    for c in predictions.crossdomain:
        if c.target_slot in touched or c.target_slot in transferred or c.probability < thresholds.crossdomain:
            continue
        if c.target_slot not in best_cross or c.probability > best_cross[c.target_slot].probability:
            best_cross[c.target_slot] = c
    for slot, c in best_cross.items():
        values[slot] = (c.value,)
    allowed = schema.intent(intent).allowed_slots if intent != NONE_INTENT else frozenset()
    order = schema.slot_names
    values = {s: values[s] for s in order if s in values and s in allowed}
    requested = tuple(s for s in order if predictions.requested.get(s, 0.0) >= thresholds.requested)
    return DialogueState(active_intent=intent, requested_slots=requested, slot_values=values)


class Predictor(Protocol):
    def predict(self, task: Task, examples: Sequence[EncodedExample]) -> list: ...


class ModelPredictor:
    """Adapts six trained :class:`~schema_dst.training.TaskModel` objects."""

    def __init__(self, models: Mapping[Task, object], pad_id: int = 0, batch_size: int = 256):
        missing = set(Task) - set(models)
        if missing:
            raise ValueError(f"missing models for {sorted(t.value for t in missing)}")
        self.models = dict(models)
        self.pad_id = pad_id
        self.batch_size = batch_size

    def predict(self, task: Task, examples: Sequence[EncodedExample]) -> list:
        from .training import predict

        if not examples:
            return []
        return predict(self.models[task], examples, self.batch_size, self.pad_id)


@dataclass
class DialogueTracker:
    featurizer: Featurizer
    predictor: Predictor
    schemas: Mapping[str, ServiceSchema]
    thresholds: Thresholds = Thresholds()
    max_span_len: int = 12

    def predict_frame(self, ctx: TurnContext) -> PredictionSet:
        f, p = self.featurizer, self.predictor
        schema = self.schemas[ctx.service]
        ex = f.build_intent_example(ctx, schema)
        probs = p.predict(Task.INTENT, [ex])[0]
        intent_dist = dict(zip(ex.layout.candidate_ids, map(float, probs)))
        preds = PredictionSet(intent=intent_dist)
        ctx = replace(ctx, intent=_argmax(intent_dist)[0])

        cat = f.turn_examples(Task.CATEGORICAL, ctx, self.schemas)
        for ex, probs in zip(cat, p.predict(Task.CATEGORICAL, cat)):
            preds.categorical[ex.provenance[3]] = dict(zip(ex.layout.candidate_ids, map(float, probs)))

        utterances = {"sys": ctx.system_utterance or "", "usr": ctx.user_utterance}
        ff = f.turn_examples(Task.FREEFORM, ctx, self.schemas)
        for ex, (ps, pe) in zip(ff, p.predict(Task.FREEFORM, ff)):
            span, score = decode_span(ps, pe, ex.layout.span_region(), ex.layout.null_position, self.max_span_len)
            value = None if span is None else _span_text(ex, span, utterances)
            preds.freeform[ex.provenance[3]] = (value or None, score)

        req = f.turn_examples(Task.REQUESTED, ctx, self.schemas)
        for ex, prob in zip(req, p.predict(Task.REQUESTED, req)):
            preds.requested[ex.provenance[3]] = float(prob)

        ind = f.turn_examples(Task.INDOMAIN, ctx, self.schemas)
        for ex, prob in zip(ind, p.predict(Task.INDOMAIN, ind)):
            slot = ex.provenance[3]
            preds.indomain[slot] = (float(prob), resolve_transfer_value(ctx.history, ctx.service, slot))

        pairs = crossdomain_candidates(ctx.history, ctx.service, schema, self.schemas)
        cross = f.turn_examples(Task.CROSSDOMAIN, ctx, self.schemas)
        for (t, src, s), prob in zip(pairs, p.predict(Task.CROSSDOMAIN, cross)):
            value = resolve_transfer_value(ctx.history, ctx.service, t, (src, s))
            preds.crossdomain.append(CrossDomainPrediction(t, src, s, float(prob), value))
        return preds

    def track(self, dialogue: Dialogue) -> list[dict[str, DialogueState]]:
        """Predicted states per user turn (service -> state), in turn order."""
        for s in dialogue.services:
            if s not in self.schemas:
                raise KeyError(f"dialogue {dialogue.dialogue_id}: no schema for service {s!r}")
        history = History()
        out = []
        for i, turn in enumerate(dialogue.turns):
            if turn.speaker == SYSTEM:
                history = history.with_system_turn(i, turn)
                continue
            sys_utt = dialogue.turns[i - 1].utterance if i > 0 else None
            states = {}
            for frame in turn.frames:
                ctx = TurnContext(dialogue.dialogue_id, i, frame.service, sys_utt, turn.utterance, history)
                preds = self.predict_frame(ctx)
                states[frame.service] = summarize_turn(
                    preds, self.thresholds, self.schemas[frame.service], history.last_state(frame.service)
                )
            history = history.with_user_turn(i, states)
            out.append(states)
        return out

    def track_dialogue(self, dialogue: Dialogue) -> Dialogue:
        """The input dialogue with every user frame's state replaced by the prediction."""
        return with_predicted_states(dialogue, self.track(dialogue))


def track_dialogue(
    dialogue: Dialogue,
    predictor: Predictor,
    schemas: Mapping[str, ServiceSchema],
    featurizer: Featurizer,
    thresholds: Thresholds = Thresholds(),
) -> list[dict[str, DialogueState]]:
    return DialogueTracker(featurizer, predictor, schemas, thresholds).track(dialogue)


def with_predicted_states(dialogue: Dialogue, states: Sequence[Mapping[str, DialogueState]]) -> Dialogue:
    user_turns = dialogue.user_turn_indices()
    if len(user_turns) != len(states):
        raise ValueError(f"{dialogue.dialogue_id}: {len(states)} predicted turns for {len(user_turns)} user turns")
    turns = list(dialogue.turns)
    for i, st in zip(user_turns, states):
        t = turns[i]
        turns[i] = Turn(t.speaker, t.utterance, tuple(replace(f, state=st[f.service]) for f in t.frames))
    return replace(dialogue, turns=tuple(turns))


def _span_text(ex: EncodedExample, span: tuple[int, int], utterances: Mapping[str, str]) -> str:
    a, b = span
    lay = ex.layout
    src = "sys" if lay.sys_span[0] <= a < lay.sys_span[1] else "usr"
    return utterances[src][ex.char_offsets[a][0] : ex.char_offsets[b][1]]
