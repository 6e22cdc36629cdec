"""Prediction heads over encoder token representations.

* fragment scorer: max-pool each candidate fragment, score it with
  ``v . tanh(W r + b)`` and softmax over the real candidates;
* span head: start/end distributions from dot products with learned vectors;
* sequence classifier: 2-way softmax over the leading classification token.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np
import torch
from torch import nn

Span = tuple[int, int]


def pool_fragment(reps: torch.Tensor, span: Span) -> torch.Tensor:
    """Elementwise max over rows ``span[0]:span[1]`` of an ``(L, H)`` tensor."""
    start, end = span
    if not 0 <= start < end <= reps.shape[-2]:
        raise ValueError(f"fragment span {span} is empty or outside a sequence of length {reps.shape[-2]}")
    return reps[..., start:end, :].max(dim=-2).values


def pool_candidates(reps: torch.Tensor, membership: torch.Tensor) -> torch.Tensor:
    """Batched max-pooling: ``reps (B, L, H)``, ``membership (B, C, L)`` -> ``(B, C, H)``.

    Candidates without any member token (batch padding) pool to zeros.
    """
    masked = reps[:, None, :, :].masked_fill(~membership[..., None], float("-inf"))
    pooled = masked.max(dim=2).values
    return torch.where(membership.any(-1, keepdim=True), pooled, 0.0)


class FragmentScorer(nn.Module):
    def __init__(self, hidden_dim: int):
        super().__init__()
        self.W = nn.Linear(hidden_dim, hidden_dim)
        self.v = nn.Linear(hidden_dim, 1, bias=False)
        nn.init.normal_(self.W.weight, std=0.02)
        nn.init.zeros_(self.W.bias)
        nn.init.normal_(self.v.weight, std=0.02)

    def scores(self, r: torch.Tensor) -> torch.Tensor:
        return self.v(torch.tanh(self.W(r))).squeeze(-1)

    def forward(self, r: torch.Tensor, candidate_mask: torch.Tensor) -> torch.Tensor:
        """Log-probabilities ``(B, C)``; padded candidates get ``-inf``."""
        if not candidate_mask.any(-1).all():
            raise ValueError("every example needs at least one real candidate")
        s = self.scores(r).masked_fill(~candidate_mask, float("-inf"))
        return torch.log_softmax(s, dim=-1)


def score_fragments(
    r_vectors: torch.Tensor | Sequence[torch.Tensor],
    scorer: FragmentScorer,
    candidate_mask: torch.Tensor | None = None,
) -> torch.Tensor:
    """Candidate distribution for one example from its pooled vectors ``(C, H)``."""
    r = torch.stack(list(r_vectors)) if not isinstance(r_vectors, torch.Tensor) else r_vectors
    if candidate_mask is None:
        candidate_mask = torch.ones(r.shape[0], dtype=torch.bool)
    if r.shape[0] == 0:
        raise ValueError("need at least one candidate")
    return scorer(r[None], candidate_mask[None])[0].exp()


class SpanHead(nn.Module):
    def __init__(self, hidden_dim: int):
        super().__init__()
        self.start = nn.Parameter(torch.randn(hidden_dim) * 0.02)
        self.end = nn.Parameter(torch.randn(hidden_dim) * 0.02)

    def forward(self, reps: torch.Tensor, valid: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Start/end log-probabilities restricted to ``valid`` positions ``(B, L)``."""
        if not valid.any(-1).all():
            raise ValueError("span region is empty")
        ls = (reps @ self.start).masked_fill(~valid, float("-inf"))
        le = (reps @ self.end).masked_fill(~valid, float("-inf"))
        return torch.log_softmax(ls, -1), torch.log_softmax(le, -1)


def span_distributions(reps: torch.Tensor, head: SpanHead, valid_region: Sequence[int]):
    """``(p_start, p_end)`` over a single ``(L, H)`` sequence; zero outside the region."""
    if len(valid_region) == 0:
        raise ValueError("span region is empty")
    valid = torch.zeros(reps.shape[0], dtype=torch.bool)
    valid[list(valid_region)] = True
    ls, le = head(reps[None], valid[None])
    return ls[0].exp(), le[0].exp()


def decode_span(
    p_start: Sequence[float],
    p_end: Sequence[float],
    region: Sequence[int],
    null_position: int | None,
    max_span_len: int | float = 12,
) -> tuple[Span | None, float]:
    """Best ``(start, end)`` (inclusive) by ``p_start[i] * p_end[j]``, or ``None`` if null wins.

    A span is admissible when ``i <= j``, ``j - i < max_span_len`` and every
    token in ``i..j`` lies in ``region`` (the null position excluded). Ties go
    to the smallest start, then the smallest end; the null pair sits after the
    utterance so it loses ties.
    """
    ps = np.asarray(p_start, dtype=float)
    pe = np.asarray(p_end, dtype=float)
    content = sorted(i for i in region if i != null_position)
    allowed = set(content)
    best: Span | None = None
    best_score = -math.inf
    for i in content:
        j = i
        while j in allowed and j - i < max_span_len:
            score = ps[i] * pe[j]
            if score > best_score:
                best, best_score = (i, j), score
            j += 1
    if null_position is not None:
        null_score = ps[null_position] * pe[null_position]
        if null_score > best_score:
            return None, float(null_score)
    return best, float(best_score)


class SequenceClassifier(nn.Module):
    def __init__(self, hidden_dim: int):
        super().__init__()
        self.linear = nn.Linear(hidden_dim, 2)
        nn.init.normal_(self.linear.weight, std=0.02)
        nn.init.zeros_(self.linear.bias)

    def forward(self, cls_rep: torch.Tensor) -> torch.Tensor:
        """Log-probabilities of (negative, positive)."""
        return torch.log_softmax(self.linear(cls_rep), dim=-1)


def classify_sequence(cls_rep: torch.Tensor, head: SequenceClassifier) -> torch.Tensor:
    return head(cls_rep)[..., 1].exp()
