"""CSC fusion: self-attention over part + object tokens, cross-attention to context."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn


def attention(queries: torch.Tensor, keys: torch.Tensor, values: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d)) V over the last two dims; one output row per query."""
    if keys.shape[-2] == 0:
        raise ValueError("attention needs at least one key")
    if keys.shape[-2] != values.shape[-2]:
        raise ValueError("keys and values must have the same count")
    if queries.shape[-1] != keys.shape[-1]:
        raise ValueError("queries and keys must share their dimension")
    logits = queries @ keys.transpose(-2, -1) / math.sqrt(queries.shape[-1])
    return torch.softmax(logits, dim=-1) @ values


class AttentionBlock(nn.Module):
    """``x + Att(x W_q, kv W_k) W_v W_o``, optionally layer-normed. Projections carry no bias."""

    def __init__(self, dim: int, heads: int = 1, layer_norm: bool = True):
        super().__init__()
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.heads = heads
        self.q = nn.Linear(dim, dim, bias=False)
        self.k = nn.Linear(dim, dim, bias=False)
        self.v = nn.Linear(dim, dim, bias=False)
        self.o = nn.Linear(dim, dim, bias=False)
        self.norm = nn.LayerNorm(dim) if layer_norm else nn.Identity()
        # the residual branch starts silent, so every variant begins as the plain object token
        nn.init.zeros_(self.o.weight)

    def attend(self, x: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        B, Lq, D = x.shape
        Lk = kv.shape[1]
        h = self.heads
        q = self.q(x).view(B, Lq, h, D // h).transpose(1, 2)
        k = self.k(kv).view(B, Lk, h, D // h).transpose(1, 2)
        v = self.v(kv).view(B, Lk, h, D // h).transpose(1, 2)
        out = attention(q, k, v).transpose(1, 2).reshape(B, Lq, D)
        return self.o(out)

    def forward(self, x: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        return self.norm(x + self.attend(x, kv))


@dataclass(frozen=True)
class FusionConfig:
    dim: int = 64
    use_parts: bool = True
    use_context: bool = True
    mode: str = "attention"     # or "concat" (multi-region split-and-concatenate baseline)
    heads: int = 1
    layer_norm: bool = True
    num_parts: int = 4
    readout: str = "object"     # "object": the object token after attention; "mean": mean of all tokens

    @property
    def variant(self) -> str:
        if self.mode == "concat":
            return "multi_region"
        return {(False, False): "semantic", (True, False): "semantic+compositional",
                (False, True): "semantic+contextual", (True, True): "full"}[
                    (self.use_parts, self.use_context)]


VARIANTS = {
    "semantic": dict(use_parts=False, use_context=False),
    "semantic+compositional": dict(use_parts=True, use_context=False),
    "semantic+contextual": dict(use_parts=False, use_context=True),
    "full": dict(use_parts=True, use_context=True),
    "multi_region": dict(use_parts=True, use_context=False, mode="concat"),
}


class CSCFusion(nn.Module):
    def __init__(self, config: FusionConfig = FusionConfig()):
        super().__init__()
        self.config = config
        D = config.dim
        self.self_attn = AttentionBlock(D, config.heads, config.layer_norm)
        self.cross_attn = AttentionBlock(D, config.heads, config.layer_norm)
        self.project = nn.Linear(D, D)
        if config.mode == "concat":
            self.concat_project = nn.Linear(D * (config.num_parts + 1), D)
        elif config.mode != "attention":
            raise ValueError(f"unknown fusion mode {config.mode!r}")
        if config.readout not in ("object", "mean"):
            raise ValueError(f"unknown readout {config.readout!r}")

    def forward(self, part_feats: torch.Tensor, semantic: torch.Tensor,
                context: torch.Tensor) -> torch.Tensor:
        """Batched fuse: ``(B, N_P, D), (B, D), (B, D) -> (B, D)``.

        ``part_feats`` / ``context`` may be None when the variant ignores them.
        """
        D = self.config.dim
        if semantic.shape[-1] != D:
            raise ValueError(f"semantic feature has length {semantic.shape[-1]}, expected {D}")
        if self.config.mode == "concat":
            _check(part_feats, D, "part")
            flat = torch.cat([semantic.unsqueeze(1), part_feats], dim=1).flatten(1)
            return self.concat_project(flat)

        tokens = semantic.unsqueeze(1)
        if self.config.use_parts:
            _check(part_feats, D, "part")
            tokens = torch.cat([part_feats, tokens], dim=1)
        tokens = self.self_attn(tokens, tokens)
        if self.config.readout == "object":
            tokens = tokens[:, -1:]
        if self.config.use_context:
            _check(context, D, "context")
            tokens = self.cross_attn(tokens, context.unsqueeze(1))
        return self.project(tokens.mean(dim=1))

    def cross(self, query: torch.Tensor, key_value: torch.Tensor) -> torch.Tensor:
        """Att(query, key_value) with the shared cross-attention block, batched ``(B, D)``."""
        return self.cross_attn(query.unsqueeze(1), key_value.unsqueeze(1))[:, 0]


def _check(t, D, what):
    if t is None:
        raise ValueError(f"{what} features required by this fusion variant")
    if t.shape[-1] != D:
        raise ValueError(f"{what} feature has length {t.shape[-1]}, expected {D}")


def fuse(part_feats: torch.Tensor, semantic_feat: torch.Tensor, context_feat: torch.Tensor,
         fusion: CSCFusion) -> torch.Tensor:
    """Single-detection convenience wrapper around :class:`CSCFusion`."""
    parts = None if part_feats is None else part_feats.unsqueeze(0)
    ctx = None if context_feat is None else context_feat.unsqueeze(0)
    return fusion(parts, semantic_feat.unsqueeze(0), ctx)[0]
