"""The four dialogue-state-tracking metrics and the seen/unseen breakdown.

All metrics are computed per user-turn frame. A metric with no eligible items
reports 1.0 and is flagged in ``warnings``.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

from rapidfuzz.distance import Levenshtein

from .data import Dialogue, DialogueState, ServiceSchema, iter_user_frames, split_seen_unseen

logger = logging.getLogger(__name__)

ACTIVE_INTENT_ACCURACY = "Active intent accuracy"
REQUESTED_SLOTS_F1 = "Requested slots F1"
AVERAGE_GOAL_ACCURACY = "Average goal accuracy"
JOINT_GOAL_ACCURACY = "Joint goal accuracy"
METRIC_NAMES = (ACTIVE_INTENT_ACCURACY, REQUESTED_SLOTS_F1, AVERAGE_GOAL_ACCURACY, JOINT_GOAL_ACCURACY)
BUCKETS = ("All APIs", "Seen APIs", "Unseen APIs")


def normalize_value(s: str) -> str:
    return " ".join(s.casefold().split())


def fuzzy_score(predicted: str, gold: str) -> float:
    """1 - normalised Levenshtein distance after case folding and whitespace collapsing."""
    a, b = normalize_value(predicted), normalize_value(gold)
    if a == b:
        return 1.0
    return Levenshtein.normalized_similarity(a, b)


@dataclass(frozen=True)
class FrameItem:
    """One aligned (gold, predicted) user-turn frame."""

    dialogue_id: str
    turn_index: int
    service: str
    gold: DialogueState
    pred: DialogueState


def slot_score(slot: str, gold: DialogueState, pred: DialogueState, schema: ServiceSchema) -> float:
    refs = gold.slot_values.get(slot, ())
    hyp = pred.slot_values.get(slot, ())
    if not hyp:
        return 0.0
    value = hyp[0]
    if schema.slot(slot).is_categorical:
        return float(value in refs)
    return max(fuzzy_score(value, r) for r in refs)


def _mean(xs: Sequence[float]) -> tuple[float, int]:
    return (sum(xs) / len(xs), len(xs)) if xs else (1.0, 0)


def active_intent_accuracy(items: Sequence[FrameItem]) -> float:
    return _active_intent(items)[0]


def _active_intent(items):
    return _mean([float(it.gold.active_intent == it.pred.active_intent) for it in items])


def turn_requested_f1(gold: Iterable[str], pred: Iterable[str]) -> float | None:
    """F1 of one turn, None when both sets are empty (turn skipped)."""
    g, p = set(gold), set(pred)
    if not g and not p:
        return None
    tp = len(g & p)
    precision = tp / len(p) if p else 0.0
    recall = tp / len(g) if g else 0.0
    return 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)


def requested_slots_f1(items: Sequence[FrameItem]) -> float:
    return _requested(items)[0]


def _requested(items):
    scores = [turn_requested_f1(it.gold.requested_slots, it.pred.requested_slots) for it in items]
    return _mean([s for s in scores if s is not None])


def average_goal_accuracy(items: Sequence[FrameItem], schemas: Mapping[str, ServiceSchema]) -> float:
    return _average_goal(items, schemas)[0]


def _average_goal(items, schemas):
    scores = [
        slot_score(slot, it.gold, it.pred, schemas[it.service])
        for it in items
        for slot, vals in it.gold.slot_values.items()
        if vals
    ]
    return _mean(scores)


def turn_joint_score(item: FrameItem, schema: ServiceSchema) -> float:
    gold_slots = {s for s, v in item.gold.slot_values.items() if v}
    pred_slots = {s for s, v in item.pred.slot_values.items() if v}
    if pred_slots - gold_slots:
        return 0.0
    score = 1.0
    for slot in gold_slots:
        score *= slot_score(slot, item.gold, item.pred, schema)
    return score


def joint_goal_accuracy(items: Sequence[FrameItem], schemas: Mapping[str, ServiceSchema]) -> float:
    return _joint_goal(items, schemas)[0]


def _joint_goal(items, schemas):
    return _mean([turn_joint_score(it, schemas[it.service]) for it in items])


def align(gold: Sequence[Dialogue], predicted: Sequence[Dialogue]) -> list[FrameItem]:
    """Pair every gold user frame with its prediction; raises listing what is missing."""
    pred_index: dict[tuple[str, int, str], DialogueState] = {}
    for d in predicted:
        for i, _, frame in iter_user_frames(d):
            if frame.state is not None:
                pred_index[(d.dialogue_id, i, frame.service)] = frame.state
    items, missing = [], []
    for d in gold:
        for i, _, frame in iter_user_frames(d):
            key = (d.dialogue_id, i, frame.service)
            if key not in pred_index:
                missing.append(key)
                continue
            items.append(FrameItem(d.dialogue_id, i, frame.service, frame.state, pred_index[key]))
    if missing:
        shown = ", ".join(f"{did} turn {i} ({svc})" for did, i, svc in missing[:20])
        more = f" and {len(missing) - 20} more" if len(missing) > 20 else ""
        raise ValueError(f"predictions do not cover {len(missing)} user turn frame(s): {shown}{more}")
    return items


@dataclass
class BucketReport:
    metrics: dict[str, float]
    n_frames: int
    n_dialogues: int
    warnings: list[str] = field(default_factory=list)


@dataclass
class MetricReport:
    buckets: dict[str, BucketReport]

    def __getitem__(self, bucket: str) -> BucketReport:
        return self.buckets[bucket]

    @property
    def active_intent_acc(self) -> float:
        return self.buckets[BUCKETS[0]].metrics[ACTIVE_INTENT_ACCURACY]

    @property
    def requested_slot_f1(self) -> float:
        return self.buckets[BUCKETS[0]].metrics[REQUESTED_SLOTS_F1]

    @property
    def average_goal_acc(self) -> float:
        return self.buckets[BUCKETS[0]].metrics[AVERAGE_GOAL_ACCURACY]

    @property
    def joint_goal_acc(self) -> float:
        return self.buckets[BUCKETS[0]].metrics[JOINT_GOAL_ACCURACY]

    def to_json(self) -> dict:
        return {
            name: {**b.metrics, "n_frames": b.n_frames, "n_dialogues": b.n_dialogues, "warnings": b.warnings}
            for name, b in self.buckets.items()
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2)


def bucket_report(items: Sequence[FrameItem], schemas: Mapping[str, ServiceSchema], n_dialogues: int) -> BucketReport:
    computed = {
        ACTIVE_INTENT_ACCURACY: _active_intent(items),
        REQUESTED_SLOTS_F1: _requested(items),
        AVERAGE_GOAL_ACCURACY: _average_goal(items, schemas),
        JOINT_GOAL_ACCURACY: _joint_goal(items, schemas),
    }
    warnings = [f"{name}: no eligible items, reported as 1.0" for name, (_, n) in computed.items() if n == 0]
    for w in warnings:
        logger.warning(w)
    return BucketReport({k: v for k, (v, _) in computed.items()}, len(items), n_dialogues, warnings)


def evaluate(
    gold: Sequence[Dialogue],
    predicted: Sequence[Dialogue],
    schemas: Iterable[ServiceSchema],
    train_schemas: Iterable[ServiceSchema],
) -> MetricReport:
    index = {s.service_name: s for s in schemas}
    train_schemas = list(train_schemas)
    items = align(gold, predicted)
    seen, unseen = split_seen_unseen(gold, train_schemas)
    buckets = {}
    for name, dialogues in zip(BUCKETS, (gold, seen, unseen)):
        ids = {d.dialogue_id for d in dialogues}
        buckets[name] = bucket_report([it for it in items if it.dialogue_id in ids], index, len(dialogues))
    return MetricReport(buckets)
