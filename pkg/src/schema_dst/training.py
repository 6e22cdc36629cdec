"""Task models, losses, the training loop and the few-shot dev-mixing split."""

from __future__ import annotations

import logging
import math
import os
import random
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

from .data import Dialogue
from .encoder import Encoder, EncoderConfig, load_backbone, load_weights, save_weights
from .features import EncodedExample, Task, build_attention_mask
from .heads import FragmentScorer, SequenceClassifier, SpanHead, pool_candidates

logger = logging.getLogger(__name__)

FRAGMENT_TASKS = (Task.INTENT, Task.CATEGORICAL)
SPAN_TASKS = (Task.FREEFORM,)
BINARY_TASKS = (Task.REQUESTED, Task.INDOMAIN, Task.CROSSDOMAIN)
SAMPLED_TASKS = BINARY_TASKS


@dataclass(frozen=True)
class TrainConfig:
    task: Task
    learning_rate: float = 2e-5
    batch_size: int = 128
    max_epochs: int = 3
    seed: int = 0
    warmup_fraction: float = 0.1
    weight_decay: float = 0.01
    max_grad_norm: float = 1.0
    negative_ratio: int = 3

    def __post_init__(self):
        if self.learning_rate <= 0 or self.batch_size <= 0 or self.max_epochs < 0:
            raise ValueError("learning_rate and batch_size must be positive, max_epochs non-negative")
        object.__setattr__(self, "task", Task(self.task))

    def to_json(self) -> dict:
        d = asdict(self)
        d["task"] = self.task.value
        return d


# Recipe for the small from-scratch encoder: a pretrained backbone copes with
# the defaults above, a randomly initialised one needs a larger step size and
# more passes. Categorical value matching learns slowest.
DESK_SCALE = {"learning_rate": 1e-3, "batch_size": 32, "max_epochs": 8}
DESK_SCALE_TASK_OVERRIDES = {Task.CATEGORICAL: {"max_epochs": 30}}


def desk_scale_config(task: Task, seed: int = 0, **overrides) -> TrainConfig:
    task = Task(task)
    params = {**DESK_SCALE, **DESK_SCALE_TASK_OVERRIDES.get(task, {}), **overrides}
    return TrainConfig(task, seed=seed, **params)


class TaskModel(nn.Module):
    """One encoder plus the head its task needs; six are trained independently."""

    def __init__(self, task: Task, encoder: Encoder):
        super().__init__()
        self.task = Task(task)
        self.encoder = encoder
        h = encoder.config.hidden_dim
        if self.task in FRAGMENT_TASKS:
            self.head = FragmentScorer(h)
        elif self.task in SPAN_TASKS:
            self.head = SpanHead(h)
        else:
            self.head = SequenceClassifier(h)

    @classmethod
    def create(cls, task: Task, config: EncoderConfig) -> "TaskModel":
        return cls(task, Encoder(config))

    def forward(self, batch: dict):
        reps = self.encoder(
            batch["token_ids"],
            batch["segment_ids"],
            batch["position_ids"],
            batch["context_ids"],
            batch["attention_mask"],
            batch["token_mask"],
        )
        if self.task in FRAGMENT_TASKS:
            return self.head(pool_candidates(reps, batch["membership"]), batch["candidate_mask"])
        if self.task in SPAN_TASKS:
            return self.head(reps, batch["span_valid"])
        return self.head(reps[:, 0])


def collate(examples: Sequence[EncodedExample], pad_id: int = 0) -> dict:
    if not examples:
        raise ValueError("empty batch")
    task = examples[0].task
    B, L = len(examples), max(len(ex) for ex in examples)

    def padded(attr, fill):
        out = torch.full((B, L), fill, dtype=torch.long)
        for b, ex in enumerate(examples):
            out[b, : len(ex)] = torch.tensor(getattr(ex, attr))
        return out

    batch = {
        "token_ids": padded("token_ids", pad_id),
        "segment_ids": padded("segment_ids", 0),
        "position_ids": padded("position_ids", 0),
        "context_ids": padded("context_feature_ids", 0),
        "token_mask": torch.zeros(B, L, dtype=torch.bool),
        "attention_mask": torch.from_numpy(
            np.stack([build_attention_mask(ex.layout, ex.pattern, L) for ex in examples])
        ),
    }
    for b, ex in enumerate(examples):
        batch["token_mask"][b, : len(ex)] = True
    have_targets = all(ex.target is not None for ex in examples)
    if task in FRAGMENT_TASKS:
        C = max(len(ex.layout.candidate_spans) for ex in examples)
        membership = torch.zeros(B, C, L, dtype=torch.bool)
        for b, ex in enumerate(examples):
            for c, (_, (s, e)) in enumerate(ex.layout.candidate_spans):
                membership[b, c, s:e] = True
        batch["membership"] = membership
        batch["candidate_mask"] = membership.any(-1)
        if have_targets:
            batch["target"] = torch.tensor([ex.target for ex in examples])
    elif task in SPAN_TASKS:
        valid = torch.zeros(B, L, dtype=torch.bool)
        for b, ex in enumerate(examples):
            valid[b, ex.layout.span_region()] = True
        batch["span_valid"] = valid
        if have_targets:
            batch["target"] = torch.tensor([list(ex.target) for ex in examples])
    elif have_targets:
        batch["target"] = torch.tensor([int(ex.target) for ex in examples])
    return batch


def task_loss(log_probs, targets: torch.Tensor, task: Task) -> torch.Tensor:
    """Mean cross-entropy; the span task averages the start and end terms."""
    if Task(task) in SPAN_TASKS:
        ls, le = log_probs
        start = -ls.gather(1, targets[:, :1]).mean()
        end = -le.gather(1, targets[:, 1:2]).mean()
        return (start + end) / 2
    return -log_probs.gather(1, targets[:, None]).mean()


def sample_negatives(
    examples: Sequence[EncodedExample], ratio: int, seed: int
) -> list[EncodedExample]:
    """Keep all positives; per (dialogue, turn, service) keep up to ``ratio`` negatives per positive (at least one)."""
    rng = random.Random(seed)
    groups: dict[tuple, list[EncodedExample]] = {}
    for ex in examples:
        groups.setdefault(ex.provenance[:3], []).append(ex)
    kept = []
    for key in groups:
        group = groups[key]
        pos = [ex for ex in group if ex.target]
        neg = [ex for ex in group if not ex.target]
        k = min(len(neg), max(ratio * len(pos), 1))
        chosen = set(rng.sample(range(len(neg)), k))
        keep = set(map(id, pos)) | {id(neg[i]) for i in chosen}
        kept.extend(ex for ex in group if id(ex) in keep)
    return kept


@dataclass
class TrainLog:
    epoch_losses: list[float] = field(default_factory=list)
    n_examples: int = 0
    n_steps: int = 0

    def to_json(self) -> dict:
        return asdict(self)


def _seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def train_task(
    examples: Sequence[EncodedExample],
    config: TrainConfig,
    model: TaskModel | EncoderConfig,
    pad_id: int = 0,
    on_epoch: Callable[[int, float], None] | None = None,
) -> tuple[TaskModel, TrainLog]:
    """Fine-tune one task model with AdamW and a linear warmup/decay schedule."""
    if not examples:
        raise ValueError(f"no training examples for task {config.task.value}")
    wrong = {ex.task for ex in examples} - {config.task}
    if wrong:
        raise ValueError(f"examples for {sorted(t.value for t in wrong)} passed to a {config.task.value} run")
    _seed_everything(config.seed)
    if isinstance(model, EncoderConfig):
        model = TaskModel.create(config.task, model)
    if config.task in SAMPLED_TASKS:
        examples = sample_negatives(examples, config.negative_ratio, config.seed)
    log = TrainLog(n_examples=len(examples))
    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    total = steps_per_epoch * config.max_epochs
    warmup = int(config.warmup_fraction * total)
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        (no_decay if p.ndim < 2 or "norm" in name else decay).append(p)
    opt = torch.optim.AdamW(
        [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
        lr=config.learning_rate,
    )

    def lr_factor(step):
        if step < warmup:
            return (step + 1) / (warmup + 1)
        return max(0.0, (total - step) / max(1, total - warmup))

    sched = torch.optim.lr_scheduler.LambdaLR(opt, lr_factor)
    rng = random.Random(config.seed)
    order = list(range(len(examples)))
    for epoch in range(config.max_epochs):
        model.train()
        rng.shuffle(order)
        losses = []
        for k in range(steps_per_epoch):
            batch = collate([examples[i] for i in order[k * config.batch_size : (k + 1) * config.batch_size]], pad_id)
            loss = task_loss(model(batch), batch["target"], config.task)
            opt.zero_grad()
            loss.backward()
            nn.utils.clip_grad_norm_(model.parameters(), config.max_grad_norm)
            opt.step()
            sched.step()
            losses.append(loss.item())
            log.n_steps += 1
        log.epoch_losses.append(float(np.mean(losses)))
        logger.info("%s epoch %d loss %.4f", config.task.value, epoch + 1, log.epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, log.epoch_losses[-1])
    model.eval()
    return model, log


@torch.no_grad()
def predict(model: TaskModel, examples: Sequence[EncodedExample], batch_size: int = 256, pad_id: int = 0) -> list:
    """Per-example probabilities: candidate vector, (p_start, p_end) pair, or P(positive)."""
    model.eval()
    out: list = []
    for k in range(0, len(examples), batch_size):
        chunk = examples[k : k + batch_size]
        batch = collate(chunk, pad_id)
        res = model(batch)
        for b, ex in enumerate(chunk):
            n = len(ex)
            if model.task in FRAGMENT_TASKS:
                out.append(res[b, : len(ex.layout.candidate_spans)].exp().numpy())
            elif model.task in SPAN_TASKS:
                out.append((res[0][b, :n].exp().numpy(), res[1][b, :n].exp().numpy()))
            else:
                out.append(float(res[b, 1].exp()))
    return out


# ---------------------------------------------------------------------------
# checkpoints


def save_task_model(path: str | os.PathLike, model: TaskModel, extra: dict | None = None) -> None:
    tensors = {f"encoder.{k}": v for k, v in model.encoder.state_dict().items()}
    tensors.update({f"head.{k}": v for k, v in model.head.state_dict().items()})
    header = {"task": model.task.value, "config": model.encoder.config.to_json(), **(extra or {})}
    save_weights(path, tensors, header)


def load_task_model(path: str | os.PathLike) -> tuple[TaskModel, dict]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{path}: checkpoint not found (run the 'train' command first)")
    header, arrays = load_weights(path)
    config = EncoderConfig(**header["config"])
    encoder = load_backbone({k: v for k, v in arrays.items() if k.startswith("encoder.")}, config, prefix="encoder.")
    model = TaskModel(Task(header["task"]), encoder)
    head_state = {k[len("head."):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("head.")}
    model.head.load_state_dict(head_state)
    model.eval()
    return model, header


# ---------------------------------------------------------------------------
# few-shot dev mixing


@dataclass(frozen=True)
class FewShotSplit:
    fraction: float
    seed: int
    moved_dialogue_ids: frozenset[str]
    eval_dialogue_ids: frozenset[str]

    def to_json(self) -> dict:
        return {
            "fraction": self.fraction,
            "seed": self.seed,
            "moved_dialogue_ids": sorted(self.moved_dialogue_ids),
            "eval_dialogue_ids": sorted(self.eval_dialogue_ids),
        }


def n_moved(fraction: float, n: int) -> int:
    """``round(fraction * n)`` with halves rounded up."""
    return int(math.floor(fraction * n + 0.5))


def mix_few_shot(
    train: Sequence[Dialogue], dev: Sequence[Dialogue], fraction: float, seed: int
) -> tuple[list[Dialogue], list[Dialogue], FewShotSplit]:
    """Move a uniform sample of dev dialogues into training; the rest is the eval set."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"fraction must lie in [0, 1], got {fraction}")
    ids = [d.dialogue_id for d in dev]
    if len(set(ids)) != len(ids):
        raise ValueError("dev dialogue ids must be unique")
    moved = set(random.Random(seed).sample(ids, n_moved(fraction, len(ids))))
    moved_dialogues = [d for d in dev if d.dialogue_id in moved]
    remainder = [d for d in dev if d.dialogue_id not in moved]
    split = FewShotSplit(fraction, seed, frozenset(moved), frozenset(ids) - moved)
    return list(train) + moved_dialogues, remainder, split
