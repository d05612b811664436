"""Empathy-aware decoder, generation/diversity losses and greedy decoding."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .knowledge import BOS_ID, CLS_ID, EOS_ID, PAD_ID
from .neural import FeedForward, MultiHeadAttention

MAX_DECODE_STEPS = 30
DIVERSITY_EPS = 0.01
DEFAULT_GAMMA = (1.0, 1.0, 1.0, 1.5)


@dataclass
class DecoderMemory:
    fused_context: torch.Tensor  # (B, L, d)
    context_mask: torch.Tensor  # (B, L) True on real rows
    cs_memory: torch.Tensor  # (B, K, d)
    cs_mask: torch.Tensor
    ec_memory: torch.Tensor  # (B, V, d)
    ec_mask: torch.Tensor

    def select(self, rows) -> "DecoderMemory":
        return DecoderMemory(*(getattr(self, f)[rows] for f in self.__dataclass_fields__))


@dataclass
class GenerationOutput:
    tokens: list[int]
    log_probs: list[float]
    terminated: bool


class EmpathyFusion(nn.Module):
    """ReLU MLP over ``[S_X[i]; r_cog; r_aff]`` back to model width."""

    def __init__(self, d_model: int):
        super().__init__()
        self.proj = nn.Linear(3 * d_model, d_model)

    def forward(self, states, r_cog, r_aff):
        return fuse_empathy_signals(states, r_cog, r_aff, self.proj)


def fuse_empathy_signals(states, r_cog, r_aff, proj: nn.Linear):
    length = states.shape[-2]
    signals = torch.cat([r_cog, r_aff], dim=-1).unsqueeze(-2).expand(*states.shape[:-2], length, -1)
    return F.relu(proj(torch.cat([states, signals], dim=-1)))


def causal_mask(length: int, device=None) -> torch.Tensor:
    return torch.ones(length, length, dtype=torch.bool, device=device).tril()


class DecoderLayer(nn.Module):
    """Masked self-attention, two knowledge cross-attentions, context cross-attention, FFN."""

    def __init__(self, d_model: int, num_heads: int, d_ff: int, dropout: float = 0.0, concepts_first: bool = False):
        super().__init__()
        self.self_attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.cs_attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.ec_attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.ctx_attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.ffn = FeedForward(d_model, d_ff, dropout)
        self.norms = nn.ModuleList(nn.LayerNorm(d_model) for _ in range(5))
        self.dropout = nn.Dropout(dropout)
        self.concepts_first = concepts_first

    def _sublayer(self, idx, x, out):
        return self.norms[idx](x + self.dropout(out))

    def forward(self, x, self_mask, memory: DecoderMemory):
        lq = x.shape[1]
        attns = {}
        a, attns["self"] = self.self_attn(x, x, x, self_mask)
        x = self._sublayer(0, x, a)
        order = ("ec", "cs") if self.concepts_first else ("cs", "ec")
        for slot, name in enumerate(order, start=1):
            mem = memory.cs_memory if name == "cs" else memory.ec_memory
            mask = memory.cs_mask if name == "cs" else memory.ec_mask
            attn = self.cs_attn if name == "cs" else self.ec_attn
            a, attns[name] = attn(x, mem, mem, mask[:, None, :].expand(-1, lq, -1))
            x = self._sublayer(slot, x, a)
        mask = memory.context_mask[:, None, :].expand(-1, lq, -1)
        a, attns["context"] = self.ctx_attn(x, memory.fused_context, memory.fused_context, mask)
        x = self._sublayer(3, x, a)
        x = self._sublayer(4, x, self.ffn(x))
        return x, attns


class Decoder(nn.Module):
    def __init__(self, embedding, vocab_size: int, d_model: int, num_layers: int, num_heads: int, d_ff: int,
                 dropout: float = 0.0, concepts_first: bool = False):
        super().__init__()
        self.embedding = embedding
        self.layers = nn.ModuleList(
            DecoderLayer(d_model, num_heads, d_ff, dropout, concepts_first) for _ in range(num_layers)
        )
        self.output = nn.Linear(d_model, vocab_size)
        self.dropout = nn.Dropout(dropout)

    def forward(self, inputs, memory: DecoderMemory, return_attn: bool = False):
        length = inputs.shape[1]
        self_mask = causal_mask(length, inputs.device)[None] & (inputs != PAD_ID)[:, None, :]
        x = self.dropout(self.embedding(inputs))
        attns = []
        for layer in self.layers:
            x, w = layer(x, self_mask, memory)
            attns.append(w)
        logits = self.output(x)
        return (logits, attns) if return_attn else logits


def token_nll(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Per-position NLL; PAD positions are zero."""
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), reduction="none")
    nll = nll.view(targets.shape)
    return nll.masked_fill(targets == PAD_ID, 0.0)


def generation_loss(logits, targets, reduction: str = "mean") -> torch.Tensor:
    """Teacher-forced NLL; ``mean`` is per non-PAD token, ``sum`` feeds perplexity."""
    n_tokens = (targets != PAD_ID).sum()
    if int(n_tokens) == 0:
        raise ValueError("target contains only padding")
    total = token_nll(logits, targets).sum()
    if reduction == "sum":
        return total
    return total / n_tokens


def frequency_weights(counts, eps: float = DIVERSITY_EPS) -> torch.Tensor:
    """``max(eps, 1 - count / max_count)`` per vocabulary entry."""
    counts = torch.as_tensor(counts, dtype=torch.float64)
    top = counts.max()
    if float(top) <= 0:
        return torch.ones_like(counts)
    return torch.clamp(1.0 - counts / top, min=eps)


def diversity_loss(logits, targets, freq_weights: torch.Tensor) -> torch.Tensor:
    """Frequency-weighted NLL with weights rescaled to mean one over the batch's target tokens."""
    real = targets != PAD_ID
    if int(real.sum()) == 0:
        raise ValueError("target contains only padding")
    w = freq_weights.to(logits.dtype)[targets]
    w = w / w[real].mean()
    return (token_nll(logits, targets) * w).masked_fill(~real, 0.0).sum() / real.sum()


def applied_weights(targets, freq_weights) -> torch.Tensor:
    real = targets != PAD_ID
    w = freq_weights[targets]
    return (w / w[real].mean())[real]


BANNED_OUTPUT_IDS = (PAD_ID, BOS_ID, CLS_ID)


@torch.no_grad()
def greedy_decode(step_logits, max_steps: int = MAX_DECODE_STEPS, device=None) -> GenerationOutput:
    """Argmax decoding from BOS.

    ``step_logits(prefix)`` maps a ``(1, m)`` prefix of ids to ``(1, m, V)``
    logits; only the last row is used. PAD/BOS/CLS are never emitted.
    """
    prefix = [BOS_ID]
    tokens, log_probs = [], []
    for _ in range(max_steps):
        logits = step_logits(torch.tensor([prefix], dtype=torch.long, device=device))[0, -1]
        logits = logits.clone()
        logits[list(BANNED_OUTPUT_IDS)] = float("-inf")
        lp = torch.log_softmax(logits, dim=-1)
        nxt = int(torch.argmax(lp))
        if nxt == EOS_ID:
            return GenerationOutput(tokens, log_probs, True)
        tokens.append(nxt)
        log_probs.append(float(lp[nxt]))
        prefix.append(nxt)
    return GenerationOutput(tokens, log_probs, False)


def total_loss(align, emo, gen, div, gamma=DEFAULT_GAMMA):
    g1, g2, g3, g4 = gamma
    return g1 * align + g2 * emo + g3 * gen + g4 * div
