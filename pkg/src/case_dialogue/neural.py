"""Transformer building blocks: encoders and the two graph transformers."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .graphs import CS_TAGS, NONE
from .knowledge import PAD_ID

NUM_CS_RELATIONS = len(CS_TAGS) - 1  # every tag but "none"


def masked_softmax(logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Softmax over the last axis restricted to ``mask``.

    Masked entries are exactly zero; rows with nothing unmasked are all zero
    instead of NaN.
    """
    logits = logits.masked_fill(~mask, float("-inf"))
    has_any = mask.any(dim=-1, keepdim=True)
    logits = torch.where(has_any, logits, torch.zeros_like(logits))
    weights = torch.softmax(logits, dim=-1)
    return torch.where(mask, weights, torch.zeros_like(weights))


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with a boolean mask and optional additive key bias.

    ``mask`` is ``(B, Lq, Lk)`` with True where attention is allowed.
    ``key_bias`` is ``(B, Lk)`` and is added to every logit toward that key
    after scaling.
    """

    def __init__(self, d_model: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        if d_model % num_heads:
            raise ValueError("d_model must be divisible by num_heads")
        self.num_heads = num_heads
        self.head_dim = d_model // num_heads
        self.query = nn.Linear(d_model, d_model)
        self.key = nn.Linear(d_model, d_model)
        self.value = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, query, key, value, mask, key_bias=None):
        q = self._split(self.query(query))
        k = self._split(self.key(key))
        v = self._split(self.value(value))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_bias is not None:
            logits = logits + key_bias[:, None, None, :]
        weights = masked_softmax(logits, mask[:, None, :, :])
        ctx = self.dropout(weights) @ v
        b, _, lq, _ = ctx.shape
        ctx = ctx.transpose(1, 2).reshape(b, lq, -1)
        return self.out(ctx), weights


class RelationEmbeddingBank(nn.Module):
    """Two learnable vectors per graph relation tag, one per edge direction.

    Direction 0 is used for the query/key of the lower-indexed endpoint
    (including self-loops), direction 1 for the higher-indexed one.
    """

    def __init__(self, d_model: int, num_relations: int = NUM_CS_RELATIONS):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(num_relations, 2, d_model).uniform_(-0.1, 0.1))

    def slots(self, relation: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Row indices into ``weight.view(-1, d)`` for ``l_{i->k}`` and ``l_{k->i}``."""
        n = relation.shape[-1]
        tag = (relation - 1).clamp(min=0)
        idx = torch.arange(n, device=relation.device)
        forward = (idx[:, None] <= idx[None, :]).long()
        out_dir = 1 - forward  # i -> k seen from vertex i
        in_dir = 1 - forward.T  # k -> i seen from vertex k, indexed [i, k]
        return tag * 2 + out_dir, tag * 2 + in_dir

    def lookup(self, relation: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """``(l_{i->k}, l_{k->i})`` as two ``(..., N, N, d)`` tensors."""
        flat = self.weight.reshape(-1, self.weight.shape[-1])
        out_slot, in_slot = self.slots(relation)
        return flat[out_slot], flat[in_slot]


class RelationalMultiHeadAttention(nn.Module):
    """Attention whose query and key inputs carry per-edge relation embeddings.

    For the pair (i, k) the logit is ``W_q(v_i + l_{i->k}) . W_k(v_k + l_{k->i}) / sqrt(d_h)``.
    The product is expanded into four terms so only ``(N, N)`` score maps are
    materialised, never ``(N, N, d)`` inputs. ``x`` is ``(B, N, d)``,
    ``relation`` is ``(B, N, N)``.
    """

    def __init__(self, d_model: int, num_heads: int, dropout: float = 0.0):
        super().__init__()
        self.mha = MultiHeadAttention(d_model, num_heads, dropout)

    def forward(self, x, relation, bank: RelationEmbeddingBank):
        mha = self.mha
        h, dh = mha.num_heads, mha.head_dim
        b, n, _ = x.shape
        table = bank.weight.reshape(-1, bank.weight.shape[-1])  # (S, d)
        rq = (table @ mha.query.weight.T).view(-1, h, dh).transpose(0, 1)  # (H, S, dh)
        rk = (table @ mha.key.weight.T).view(-1, h, dh).transpose(0, 1)
        q = mha._split(mha.query(x))  # (B, H, N, dh)
        k = mha._split(mha.key(x))
        out_slot, in_slot = bank.slots(relation)  # (B, N, N)
        out_idx = out_slot[:, None].expand(-1, h, -1, -1)
        in_idx = in_slot[:, None].expand(-1, h, -1, -1)
        logits = q @ k.transpose(-1, -2)
        logits = logits + torch.gather(q @ rk.transpose(-1, -2)[None], -1, in_idx)
        logits = logits + torch.gather(rq[None] @ k.transpose(-1, -2), 2, out_idx)
        rr = rq @ rk.transpose(-1, -2)  # (H, S, S)
        logits = logits + rr[:, out_slot, in_slot].permute(1, 0, 2, 3)
        weights = masked_softmax(logits / math.sqrt(dh), (relation != NONE)[:, None])
        v = mha._split(mha.value(x))
        ctx = (mha.dropout(weights) @ v).transpose(1, 2).reshape(b, n, -1)
        return mha.out(ctx), weights


class FeedForward(nn.Module):
    def __init__(self, d_model: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(d_model, d_ff)
        self.fc2 = nn.Linear(d_ff, d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.gelu(self.fc1(x))))


class EncoderLayer(nn.Module):
    """Post-norm transformer layer; also the vanilla graph transformer layer."""

    def __init__(self, d_model: int, num_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.attn = MultiHeadAttention(d_model, num_heads, dropout)
        self.ffn = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, mask, key_bias=None):
        a, weights = self.attn(x, x, x, mask, key_bias)
        x = self.norm1(x + self.dropout(a))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x, weights


class RelationalEncoderLayer(nn.Module):
    def __init__(self, d_model: int, num_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.attn = RelationalMultiHeadAttention(d_model, num_heads, dropout)
        self.ffn = FeedForward(d_model, d_ff, dropout)
        self.norm1 = nn.LayerNorm(d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x, relation, bank):
        a, weights = self.attn(x, relation, bank)
        x = self.norm1(x + self.dropout(a))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x, weights


class TransformerEncoder(nn.Module):
    def __init__(self, d_model: int, num_layers: int, num_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.layers = nn.ModuleList(EncoderLayer(d_model, num_heads, d_ff, dropout) for _ in range(num_layers))

    def forward(self, x, mask, key_bias=None, return_attn: bool = False):
        attns = []
        for layer in self.layers:
            x, w = layer(x, mask, key_bias)
            attns.append(w)
        return (x, attns) if return_attn else x


class RelationalGraphEncoder(nn.Module):
    """Relation-enhanced graph transformer; accepts ``(N, d)`` or batched ``(B, N, d)``."""

    def __init__(self, d_model: int, num_layers: int, num_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.bank = RelationEmbeddingBank(d_model)
        self.layers = nn.ModuleList(
            RelationalEncoderLayer(d_model, num_heads, d_ff, dropout) for _ in range(num_layers)
        )

    def forward(self, x, relation, return_attn: bool = False):
        single = x.dim() == 2
        if single:
            x, relation = x[None], relation[None]
        if relation.shape[-1] != x.shape[-2] or relation.shape[-2] != relation.shape[-1]:
            raise ValueError("relation matrix must be square and match the vertex count")
        if not bool((relation != NONE).any(dim=-1).all()):
            raise ValueError("every vertex needs at least one edge")
        attns = []
        for layer in self.layers:
            x, w = layer(x, relation, self.bank)
            attns.append(w)
        if single:
            x = x[0]
        return (x, attns) if return_attn else x


class IntensityGraphEncoder(nn.Module):
    """Vanilla graph transformer; vertex intensity is an additive key bias."""

    def __init__(self, d_model: int, num_layers: int, num_heads: int, d_ff: int, dropout: float = 0.0):
        super().__init__()
        self.encoder = TransformerEncoder(d_model, num_layers, num_heads, d_ff, dropout)

    def forward(self, x, relation, intensity, return_attn: bool = False):
        single = x.dim() == 2
        if single:
            x, relation, intensity = x[None], relation[None], intensity[None]
        if intensity.shape[-1] != x.shape[-2]:
            raise ValueError("intensity length must equal the vertex count")
        adjacency = relation != NONE
        if not bool(adjacency.any(dim=-1).all()):
            raise ValueError("every vertex needs at least one edge")
        x, attns = self.encoder(x, adjacency, intensity, return_attn=True)
        if single:
            x = x[0]
        return (x, attns) if return_attn else x


class EmbeddingTable(nn.Module):
    """Word, position and two-entry vertex-type embeddings sharing one width."""

    def __init__(self, vocab_size: int, d_model: int, max_positions: int = 512, pretrained=None):
        super().__init__()
        self.word = nn.Embedding(vocab_size, d_model, padding_idx=PAD_ID)
        if pretrained is not None:
            with torch.no_grad():
                self.word.weight.copy_(torch.as_tensor(pretrained, dtype=self.word.weight.dtype))
        self.position = nn.Embedding(max_positions, d_model)
        nn.init.normal_(self.position.weight, std=0.02)
        self.vertex_type = nn.Embedding(2, d_model)
        nn.init.normal_(self.vertex_type.weight, std=0.02)
        self.max_positions = max_positions

    def forward(self, ids, positions=None, types=None):
        if bool((ids < 0).any()) or bool((ids >= self.word.num_embeddings).any()):
            raise IndexError("token id out of vocabulary range")
        if positions is None:
            positions = torch.arange(ids.shape[-1], device=ids.device).expand_as(ids)
        if bool((positions >= self.max_positions).any()):
            raise IndexError(f"position exceeds the table size {self.max_positions}")
        x = self.word(ids) + self.position(positions)
        if types is not None:
            x = x + self.vertex_type(types)
        return x


def padding_mask(ids: torch.Tensor) -> torch.Tensor:
    """``(B, L)`` ids -> ``(B, L, L)`` self-attention mask over non-PAD keys."""
    keys = ids != PAD_ID
    return keys[:, None, :].expand(-1, ids.shape[1], -1)


def pad_batch(seqs, pad: int = PAD_ID, device=None) -> torch.Tensor:
    width = max(len(s) for s in seqs)
    out = torch.full((len(seqs), width), pad, dtype=torch.long, device=device)
    for row, s in enumerate(seqs):
        out[row, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out
