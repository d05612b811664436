"""Knowledge discernment, alignment estimators and emotion prediction.

The mutual-information terms follow the InfoNCE shape: a positive score
counted twice against two log-sum-exp partition terms, one per side of the
pair. Callers minimise the negated estimate.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

EPS = 1e-12
DEFAULT_ALPHA = 0.2


class PosteriorInInference(RuntimeError):
    pass


class DiscernmentMLP(nn.Module):
    """tanh-activated projection of a context summary used by the prior."""

    def __init__(self, d_model: int):
        super().__init__()
        self.proj = nn.Linear(d_model, d_model)

    def forward(self, x):
        return torch.tanh(self.proj(x))


class BagOfWordsHead(nn.Module):
    def __init__(self, d_model: int, vocab_size: int):
        super().__init__()
        self.hidden = nn.Linear(2 * d_model, d_model)
        self.out = nn.Linear(d_model, vocab_size)

    def forward(self, r_cog, r_emo):
        return self.out(torch.tanh(self.hidden(torch.cat([r_cog, r_emo], dim=-1))))


def prior_distribution(knowledge: torch.Tensor, s_x: torch.Tensor, phi: nn.Module) -> torch.Tensor:
    if knowledge.shape[0] == 0:
        raise ValueError("prior needs at least one knowledge vector")
    return torch.softmax(knowledge @ phi(s_x), dim=0)


def posterior_distribution(knowledge: torch.Tensor, s_y: torch.Tensor, training: bool) -> torch.Tensor:
    if not training:
        raise PosteriorInInference("the posterior uses the gold response and is train-only")
    if knowledge.shape[0] == 0:
        raise ValueError("posterior needs at least one knowledge vector")
    return torch.softmax(knowledge @ s_y, dim=0)


def weighted_sum(probs: torch.Tensor, vectors: torch.Tensor) -> torch.Tensor:
    return probs @ vectors


def kl_loss(posterior: torch.Tensor, prior: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """``sum post * log(post / prior)`` with ``0 log 0 = 0``."""
    if posterior.shape != prior.shape:
        raise ValueError(f"length mismatch: {tuple(posterior.shape)} vs {tuple(prior.shape)}")
    log_ratio = torch.log(posterior.clamp(min=eps)) - torch.log(prior.clamp(min=eps))
    terms = torch.where(posterior > 0, posterior * log_ratio, torch.zeros_like(posterior))
    return terms.sum()


def response_bag(response_ids, special_ids) -> list[int]:
    """Bag of response tokens without specials; duplicates kept."""
    special = set(special_ids)
    return [t for t in response_ids if t not in special]


def bow_loss(r_cog_post, r_emo_post, bag: torch.Tensor, head: BagOfWordsHead) -> torch.Tensor:
    if bag.numel() == 0:
        raise ValueError("bag-of-words target is empty")
    log_probs = torch.log_softmax(head(r_cog_post, r_emo_post), dim=-1)
    return -log_probs[bag].mean()


def bilinear_score(a: torch.Tensor, b: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    """``sigmoid(a^T W b)``, broadcasting over leading axes."""
    return torch.sigmoid(((a @ weight) * b).sum(-1))


def _score_matrix(a: torch.Tensor, b: torch.Tensor, weight: torch.Tensor) -> torch.Tensor:
    # (P, d) x (Q, d) -> (P, Q) of sigmoid(a_p^T W b_q)
    return torch.sigmoid(a @ weight @ b.T)


def _masked_logsumexp(scores: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any(dim=-1).all()):
        raise ValueError("every positive pair needs at least one negative on each side")
    return torch.logsumexp(scores.masked_fill(~mask, float("-inf")), dim=-1)


def mim_estimate(
    anchors: torch.Tensor,
    partners: torch.Tensor,
    neg_partners: torch.Tensor,
    neg_partner_mask: torch.Tensor,
    neg_anchors: torch.Tensor,
    neg_anchor_mask: torch.Tensor,
    weight: torch.Tensor,
) -> torch.Tensor:
    """Per-pair estimate ``2 f(a, b) - lse_b~ f(a, b~) - lse_a~ f(a~, b)``.

    ``anchors[p]`` and ``partners[p]`` form positive pair p. Row p of each
    mask selects which negatives apply to that pair.
    """
    positive = bilinear_score(anchors, partners, weight)
    partner_term = _masked_logsumexp(_score_matrix(anchors, neg_partners, weight), neg_partner_mask)
    anchor_term = _masked_logsumexp(_score_matrix(partners, neg_anchors, weight.T), neg_anchor_mask)
    return 2.0 * positive - partner_term - anchor_term


def coarse_mim_loss(r_cog, r_emo, neg_emo, neg_cog, weight) -> torch.Tensor:
    """Negated coarse estimate for one (r_cog, r_emo) pair."""
    neg_emo = torch.atleast_2d(neg_emo)
    neg_cog = torch.atleast_2d(neg_cog)
    if neg_emo.shape[0] == 0 or neg_cog.shape[0] == 0:
        raise ValueError("coarse alignment needs at least one negative on each side")
    est = mim_estimate(
        r_cog[None],
        r_emo[None],
        neg_emo,
        torch.ones(1, neg_emo.shape[0], dtype=torch.bool, device=neg_emo.device),
        neg_cog,
        torch.ones(1, neg_cog.shape[0], dtype=torch.bool, device=neg_cog.device),
        weight,
    )
    return -est[0]


def fine_mim_loss(
    cs_vectors: torch.Tensor,
    sources,
    er_vectors: torch.Tensor,
    neg_er: torch.Tensor,
    neg_er_mask: torch.Tensor,
    neg_cs: torch.Tensor,
    neg_cs_mask: torch.Tensor,
    weight: torch.Tensor,
) -> torch.Tensor:
    """Negated sum over knowledge vertices of the pair estimate with ``er_{source}``.

    ``sources[p]`` is the sub-utterance index i of knowledge vertex p.
    """
    sources = torch.as_tensor(sources, dtype=torch.long, device=cs_vectors.device)
    if sources.numel() and int(sources.max()) >= er_vectors.shape[0]:
        raise ValueError(f"no reaction vector for sub-utterance {int(sources.max())}")
    partners = er_vectors[sources]
    return -mim_estimate(cs_vectors, partners, neg_er, neg_er_mask, neg_cs, neg_cs_mask, weight).sum()


def affect_gate(r_emo: torch.Tensor, er_0: torch.Tensor, w_aff: torch.Tensor):
    mu = torch.sigmoid(torch.cat([r_emo, er_0], dim=-1) @ w_aff)
    r_aff = mu * r_emo + (1.0 - mu) * er_0
    return r_aff, mu


def emotion_classify(r_aff: torch.Tensor, w_emo: torch.Tensor) -> torch.Tensor:
    """Label distribution ``softmax(W_emo r_aff)``."""
    return torch.softmax(emotion_logits(r_aff, w_emo), dim=-1)


def emotion_logits(r_aff, w_emo):
    return r_aff @ w_emo.T


def emotion_loss(logits: torch.Tensor, label) -> torch.Tensor:
    """``-log P(label)`` computed from logits (log-softmax for stability)."""
    num_classes = logits.shape[-1]
    label = torch.as_tensor(label, dtype=torch.long, device=logits.device)
    if bool((label < 0).any()) or bool((label >= num_classes).any()):
        raise ValueError(f"label id outside [0, {num_classes})")
    if logits.dim() == 1:
        return F.cross_entropy(logits[None], label.reshape(1))
    return F.cross_entropy(logits, label)


def predict_label(probs: torch.Tensor) -> int:
    return int(torch.argmax(probs, dim=-1))


def align_loss_total(bow, kl, coarse, fine, alpha: float = DEFAULT_ALPHA):
    return bow + kl + coarse + alpha * fine
