"""Bidirectional self-attention encoder with a fourth (context-feature) embedding.

The layer stack follows the BERT post-norm layout so that pretrained BERT
weights can be loaded through :func:`tensors_from_bert`; the extra
context-feature table is zero-initialised when absent, which leaves the
pretrained network's outputs unchanged at step 0.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass
from typing import Mapping

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

WEIGHTS_FORMAT = "schema-dst-weights"
WEIGHTS_VERSION = 1
CONTEXT_TABLE = "embeddings.context.weight"


@dataclass(frozen=True)
class EncoderConfig:
    vocab_size: int
    n_segments: int = 2
    n_context_features: int = 32
    max_positions: int = 512
    hidden_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    feedforward_dim: int = 256
    dropout: float = 0.1
    layer_norm_eps: float = 1e-12

    def __post_init__(self):
        for name in ("vocab_size", "n_segments", "n_context_features", "max_positions", "hidden_dim", "n_layers", "n_heads", "feedforward_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"EncoderConfig.{name} must be positive")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} is not divisible by n_heads {self.n_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @classmethod
    def toy(cls, vocab_size: int, **overrides) -> "EncoderConfig":
        return cls(vocab_size=vocab_size, **overrides)

    def to_json(self) -> dict:
        return asdict(self)


class SelfAttention(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.hidden_dim // cfg.n_heads
        self.query = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.key = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.value = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.output = nn.Linear(cfg.hidden_dim, cfg.hidden_dim)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        B, L, H = x.shape

        def heads(t):
            return t.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = heads(self.query(x)), heads(self.key(x)), heads(self.value(x))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        allowed = mask[:, None, :, :]
        scores = scores.masked_fill(~allowed, float("-inf"))
        # fully masked (padding) rows would be NaN; they get zero weights instead
        has_key = allowed.any(-1, keepdim=True)
        weights = torch.where(has_key, torch.softmax(scores.masked_fill(~has_key, 0.0), dim=-1), 0.0)
        ctx = (self.dropout(weights) @ v).transpose(1, 2).reshape(B, L, H)
        return self.output(ctx), weights


class EncoderLayer(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.attention = SelfAttention(cfg)
        self.attention_norm = nn.LayerNorm(cfg.hidden_dim, eps=cfg.layer_norm_eps)
        self.ffn = nn.ModuleDict(
            {"inner": nn.Linear(cfg.hidden_dim, cfg.feedforward_dim), "outer": nn.Linear(cfg.feedforward_dim, cfg.hidden_dim)}
        )
        self.ffn_norm = nn.LayerNorm(cfg.hidden_dim, eps=cfg.layer_norm_eps)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        a, weights = self.attention(x, mask)
        x = self.attention_norm(x + self.dropout(a))
        f = self.ffn["outer"](F.gelu(self.ffn["inner"](x)))
        return self.ffn_norm(x + self.dropout(f)), weights


class Embeddings(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.token = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.segment = nn.Embedding(cfg.n_segments, cfg.hidden_dim)
        self.position = nn.Embedding(cfg.max_positions, cfg.hidden_dim)
        self.context = nn.Embedding(cfg.n_context_features, cfg.hidden_dim)
        self.norm = nn.LayerNorm(cfg.hidden_dim, eps=cfg.layer_norm_eps)


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.config = cfg
        self.embeddings = Embeddings(cfg)
        self.dropout = nn.Dropout(cfg.dropout)
        self.layers = nn.ModuleList(EncoderLayer(cfg) for _ in range(cfg.n_layers))
        self.reset_parameters()

    def reset_parameters(self, std: float = 0.02) -> None:
        for m in self.modules():
            if isinstance(m, (nn.Linear, nn.Embedding)):
                nn.init.normal_(m.weight, std=std)
            if isinstance(m, nn.Linear) and m.bias is not None:
                nn.init.zeros_(m.bias)
            if isinstance(m, nn.LayerNorm):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)

    def embed(self, token_ids, segment_ids, position_ids, context_ids) -> torch.Tensor:
        """Sum of the four embedding lookups (before normalisation)."""
        e = self.embeddings
        for name, ids, table in (
            ("token", token_ids, e.token),
            ("segment", segment_ids, e.segment),
            ("position", position_ids, e.position),
            ("context feature", context_ids, e.context),
        ):
            if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.num_embeddings):
                raise ValueError(f"{name} id out of range [0, {table.num_embeddings})")
        return e.token(token_ids) + e.segment(segment_ids) + e.position(position_ids) + e.context(context_ids)

    def forward(
        self,
        token_ids: torch.Tensor,
        segment_ids: torch.Tensor,
        position_ids: torch.Tensor,
        context_ids: torch.Tensor,
        attention_mask: torch.Tensor,
        token_mask: torch.Tensor | None = None,
        return_attention: bool = False,
    ):
        """Encode a batch; ``attention_mask[b, q, k]`` permits query q to see key k."""
        B, L = token_ids.shape
        if attention_mask.shape != (B, L, L):
            raise ValueError(f"attention mask shape {tuple(attention_mask.shape)} != {(B, L, L)}")
        attention_mask = attention_mask.bool()
        if token_mask is None:
            token_mask = torch.ones(B, L, dtype=torch.bool, device=token_ids.device)
        starved = token_mask.bool() & ~attention_mask.any(-1)
        if starved.any():
            b, q = (int(i) for i in starved.nonzero()[0])
            raise ValueError(f"query {q} of batch item {b} has no permitted keys")
        x = self.dropout(self.embeddings.norm(self.embed(token_ids, segment_ids, position_ids, context_ids)))
        all_weights = []
        for layer in self.layers:
            x, w = layer(x, attention_mask)
            all_weights.append(w)
        return (x, all_weights) if return_attention else x


# ---------------------------------------------------------------------------
# weight interchange


def save_weights(path: str | os.PathLike, tensors: Mapping[str, torch.Tensor], header: Mapping) -> None:
    """``.npz`` of named arrays plus a JSON ``__header__`` (format, version, config, ...)."""
    head = {"format": WEIGHTS_FORMAT, "version": WEIGHTS_VERSION, **header}
    arrays = {k: v.detach().cpu().numpy() for k, v in tensors.items()}
    with open(path, "wb") as fh:
        np.savez(fh, __header__=np.array(json.dumps(head, sort_keys=True)), **arrays)


def load_weights(path: str | os.PathLike) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        if "__header__" not in z.files:
            raise ValueError(f"{path}: missing __header__ (not a {WEIGHTS_FORMAT} artifact)")
        header = json.loads(str(z["__header__"]))
        arrays = {k: z[k] for k in z.files if k != "__header__"}
    if header.get("format") != WEIGHTS_FORMAT or header.get("version") != WEIGHTS_VERSION:
        raise ValueError(f"{path}: expected {WEIGHTS_FORMAT} v{WEIGHTS_VERSION}, got {header.get('format')} v{header.get('version')}")
    return header, arrays


def save_encoder(path, encoder: Encoder) -> None:
    save_weights(path, encoder.state_dict(), {"config": encoder.config.to_json()})


def load_backbone(
    weights: str | os.PathLike | Mapping[str, np.ndarray | torch.Tensor],
    config: EncoderConfig,
    prefix: str = "",
) -> Encoder:
    """Build an encoder from an artifact path or a name -> array mapping.

    A missing context-feature table is zero-initialised; any other missing
    tensor or shape disagreement raises with expected vs found shapes.
    """
    if isinstance(weights, (str, os.PathLike)):
        _, weights = load_weights(weights)
    found = {k[len(prefix):]: v for k, v in weights.items() if k.startswith(prefix)}
    encoder = Encoder(config)
    expected = encoder.state_dict()
    tok = found.get("embeddings.token.weight")
    if tok is not None and tuple(tok.shape)[1:] != (config.hidden_dim,):
        raise ValueError(
            f"hidden_dim mismatch: config has hidden_dim {config.hidden_dim}, artifact has hidden_dim {tuple(tok.shape)[1]}"
        )
    problems = []
    state = {}
    for name, ref in expected.items():
        if name not in found:
            if name == CONTEXT_TABLE:
                state[name] = torch.zeros_like(ref)
                continue
            problems.append(f"{name}: missing (expected shape {tuple(ref.shape)})")
            continue
        arr = torch.as_tensor(np.asarray(found[name]))
        if tuple(arr.shape) != tuple(ref.shape):
            problems.append(f"{name}: expected shape {tuple(ref.shape)}, found {tuple(arr.shape)}")
            continue
        state[name] = arr.to(ref.dtype)
    extra = sorted(set(found) - set(expected))
    if extra:
        problems.append(f"unexpected tensors: {extra}")
    if problems:
        raise ValueError("backbone weights do not match the encoder config:\n  " + "\n  ".join(problems))
    encoder.load_state_dict(state)
    return encoder


_BERT_RULES = [
    (r"embeddings\.word_embeddings\.weight", "embeddings.token.weight"),
    (r"embeddings\.position_embeddings\.weight", "embeddings.position.weight"),
    (r"embeddings\.token_type_embeddings\.weight", "embeddings.segment.weight"),
    (r"embeddings\.LayerNorm\.(weight|bias)", r"embeddings.norm.\1"),
    (r"encoder\.layer\.(\d+)\.attention\.self\.(query|key|value)\.(weight|bias)", r"layers.\1.attention.\2.\3"),
    (r"encoder\.layer\.(\d+)\.attention\.output\.dense\.(weight|bias)", r"layers.\1.attention.output.\2"),
    (r"encoder\.layer\.(\d+)\.attention\.output\.LayerNorm\.(weight|bias)", r"layers.\1.attention_norm.\2"),
    (r"encoder\.layer\.(\d+)\.intermediate\.dense\.(weight|bias)", r"layers.\1.ffn.inner.\2"),
    (r"encoder\.layer\.(\d+)\.output\.dense\.(weight|bias)", r"layers.\1.ffn.outer.\2"),
    (r"encoder\.layer\.(\d+)\.output\.LayerNorm\.(weight|bias)", r"layers.\1.ffn_norm.\2"),
]


def tensors_from_bert(state_dict: Mapping[str, torch.Tensor]) -> dict[str, np.ndarray]:
    """Rename a Hugging Face BERT state dict into this encoder's tensor names."""
    out = {}
    for name, value in state_dict.items():
        name = name.removeprefix("bert.")
        for pattern, repl in _BERT_RULES:
            if re.fullmatch(pattern, name):
                out[re.sub(pattern, repl, name)] = value.detach().cpu().numpy()
                break
    return out


def config_from_bert(hf_config, n_context_features: int = 32, dropout: float | None = None) -> EncoderConfig:
    if getattr(hf_config, "hidden_act", "gelu") != "gelu":
        raise ValueError(f"unsupported activation {hf_config.hidden_act!r}")
    return EncoderConfig(
        vocab_size=hf_config.vocab_size,
        n_segments=hf_config.type_vocab_size,
        n_context_features=n_context_features,
        max_positions=hf_config.max_position_embeddings,
        hidden_dim=hf_config.hidden_size,
        n_layers=hf_config.num_hidden_layers,
        n_heads=hf_config.num_attention_heads,
        feedforward_dim=hf_config.intermediate_size,
        dropout=hf_config.hidden_dropout_prob if dropout is None else dropout,
        layer_norm_eps=hf_config.layer_norm_eps,
    )
