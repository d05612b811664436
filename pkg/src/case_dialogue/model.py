"""Sample featurisation and the assembled cognition/affection model."""

from __future__ import annotations

from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from . import alignment as A
from .config import TrainConfig
from .generator import (
    Decoder,
    DecoderMemory,
    EmpathyFusion,
    GenerationOutput,
    diversity_loss,
    frequency_weights,
    generation_loss,
    greedy_decode,
    total_loss,
)
from .graphs import CONCEPT, SELF_LOOP, build_cognition_graph, build_emotion_concept_graph, truncate_graph
from .knowledge import (
    BOS_ID,
    CLS_ID,
    EOS_ID,
    PAD_ID,
    REACTION_RELATION,
    SPECIAL_TOKENS,
    CommonsenseCache,
    ConceptStore,
    DialogueSample,
    Vocabulary,
    segment_last_utterance,
)
from .neural import (
    EmbeddingTable,
    IntensityGraphEncoder,
    RelationalGraphEncoder,
    TransformerEncoder,
    pad_batch,
    padding_mask,
)

LOSS_NAMES = ("bow", "kl", "coarse", "fine", "align", "emo", "gen", "div", "total")


@dataclass
class SampleFeatures:
    sample_id: str
    context_ids: torch.Tensor  # (n+1,) with CLS first
    cs_texts: torch.Tensor  # (V_cs, L) CLS-prefixed, padded
    cs_relation: torch.Tensor
    num_utterances: int
    cs_sources: torch.Tensor  # (|K_CS|,)
    ec_ids: torch.Tensor
    ec_positions: torch.Tensor
    ec_types: torch.Tensor
    ec_relation: torch.Tensor
    ec_intensity: torch.Tensor
    reaction_ids: torch.Tensor  # (t+1, L_r)
    response_ids: torch.Tensor  # (M,)
    bag: torch.Tensor
    label: int  # -1 when unknown


def _fit_context(sample: DialogueSample, max_tokens: int) -> DialogueSample:
    """Keep the most recent utterances so the context fits the position table."""
    context = list(sample.context)
    while len(context) > 1 and sum(map(len, context)) > max_tokens:
        context.pop(0)
    if len(context[0]) > max_tokens:
        context[0] = context[0][-max_tokens:]
    return replace(sample, context=tuple(context))


def featurize(
    sample: DialogueSample,
    vocab: Vocabulary,
    cache: CommonsenseCache,
    store: ConceptStore,
    cfg: TrainConfig,
) -> SampleFeatures:
    sample = _fit_context(sample, cfg.max_positions - 1)
    cs_graph = truncate_graph(build_cognition_graph(sample, cache), cfg.max_vertices)
    ec_graph = truncate_graph(build_emotion_concept_graph(sample, store, None, cfg.n_prime), cfg.max_vertices)

    cs_texts = [[CLS_ID] + vocab.encode(text.split())[: cfg.max_positions - 1] for text in cs_graph.vertices]
    reactions = []
    for seg in segment_last_utterance(sample.last_utterance):
        toks = [tok for k in cache.lookup(" ".join(seg), REACTION_RELATION) for tok in k.split()]
        reactions.append(vocab.encode(toks or ["none"])[: cfg.max_positions])
    response = vocab.encode(sample.response)[: cfg.max_positions - 1]
    special = {vocab.stoi[t] for t in SPECIAL_TOKENS}
    bag = A.response_bag(response, special)
    return SampleFeatures(
        sample_id=sample.sample_id,
        context_ids=torch.tensor([CLS_ID] + vocab.encode(sample.context_tokens)),
        cs_texts=pad_batch(cs_texts),
        cs_relation=torch.tensor(cs_graph.relation),
        num_utterances=cs_graph.num_utterances,
        cs_sources=torch.tensor(cs_graph.knowledge_sources, dtype=torch.long),
        ec_ids=torch.tensor([CLS_ID] + vocab.encode(ec_graph.vertices[1:])),
        ec_positions=torch.tensor(ec_graph.positions),
        ec_types=torch.tensor([1 if t == CONCEPT else 0 for t in ec_graph.vertex_type]),
        ec_relation=torch.tensor(ec_graph.relation),
        ec_intensity=torch.tensor(ec_graph.intensity, dtype=torch.float64),
        reaction_ids=pad_batch(reactions),
        response_ids=torch.tensor(response, dtype=torch.long),
        bag=torch.tensor(bag, dtype=torch.long),
        label=vocab.label_to_id.get(sample.emotion, -1),
    )


def _stack_rows(rows: list[torch.Tensor]):
    width = max(r.shape[0] for r in rows)
    out = rows[0].new_zeros(len(rows), width, rows[0].shape[-1])
    mask = torch.zeros(len(rows), width, dtype=torch.bool)
    for b, r in enumerate(rows):
        out[b, : r.shape[0]] = r
        mask[b, : r.shape[0]] = True
    return out, mask


def _stack_relations(relations: list[torch.Tensor], width: int) -> torch.Tensor:
    """Pad relation matrices; padded vertices get only a self-loop."""
    out = torch.zeros(len(relations), width, width, dtype=torch.long)
    out[:, torch.arange(width), torch.arange(width)] = SELF_LOOP
    for b, rel in enumerate(relations):
        n = rel.shape[0]
        out[b, :n, :n] = rel
    return out


@dataclass
class Encoded:
    states: torch.Tensor  # S_X
    knowledge: torch.Tensor  # cs_i over K_CS
    sources: torch.Tensor
    concepts: torch.Tensor  # ec_i over V_EC
    prior_cs: torch.Tensor
    prior_ec: torch.Tensor
    r_cog: torch.Tensor
    r_emo: torch.Tensor
    er: torch.Tensor  # er_0..er_t
    r_aff: torch.Tensor
    mu: torch.Tensor
    emotion_logits: torch.Tensor
    fused: torch.Tensor  # S'_X
    posterior_cs: torch.Tensor | None = None
    posterior_ec: torch.Tensor | None = None
    r_cog_post: torch.Tensor | None = None
    r_emo_post: torch.Tensor | None = None


class CASEModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab_size: int, num_labels: int, pretrained=None, freq_counts=None):
        super().__init__()
        torch.manual_seed(cfg.seed)
        self.cfg = cfg
        d, layers, heads, dff, p = cfg.d_model, cfg.num_layers, cfg.num_heads, cfg.d_ff, cfg.dropout
        self.embedding = EmbeddingTable(vocab_size, d, cfg.max_positions, pretrained)
        self.context_encoder = TransformerEncoder(d, layers, heads, dff, p)
        self.cognition_encoder = TransformerEncoder(d, layers, heads, dff, p)
        self.reaction_encoder = TransformerEncoder(d, layers, heads, dff, p)
        self.fusion_encoder = TransformerEncoder(d, layers, heads, dff, p)
        self.reaction_proj = nn.Linear(2 * d, d)
        self.cs_graph = RelationalGraphEncoder(d, layers, heads, dff, p)
        self.ec_graph = IntensityGraphEncoder(d, layers, heads, dff, p)
        self.phi_cs = A.DiscernmentMLP(d)
        self.phi_ec = A.DiscernmentMLP(d)
        self.bow_head = A.BagOfWordsHead(d, vocab_size)
        bound = d ** -0.5
        self.w_coarse = nn.Parameter(torch.empty(d, d).uniform_(-bound, bound))
        self.w_fine = nn.Parameter(torch.empty(d, d).uniform_(-bound, bound))
        self.w_aff = nn.Parameter(torch.empty(2 * d).uniform_(-bound, bound))
        self.w_emo = nn.Parameter(torch.empty(num_labels, d).uniform_(-bound, bound))
        self.empathy_fusion = EmpathyFusion(d)
        self.decoder = Decoder(self.embedding, vocab_size, d, layers, heads, dff, p, cfg.concepts_first)
        self.dropout = nn.Dropout(p)
        counts = torch.zeros(vocab_size) if freq_counts is None else torch.as_tensor(freq_counts)
        self.register_buffer("freq_weights", frequency_weights(counts, cfg.diversity_eps).float())

    @property
    def dtype(self):
        return self.w_coarse.dtype

    # encoders ---------------------------------------------------------

    def encode_context(self, ids: torch.Tensor, return_attn: bool = False):
        """``(B, L)`` CLS-prefixed ids -> ``(B, L, d)`` states; row 0 is the summary."""
        x = self.dropout(self.embedding(ids))
        return self.context_encoder(x, padding_mask(ids), return_attn=return_attn)

    def encode_sentences(self, ids: torch.Tensor) -> torch.Tensor:
        x = self.dropout(self.embedding(ids))
        return self.cognition_encoder(x, padding_mask(ids))[:, 0]

    def encode_sentence_batch(self, texts) -> torch.Tensor:
        """CLS state of the cognition encoder for each token-id list."""
        if any(len(t) == 0 for t in texts):
            raise ValueError("cannot encode an empty text")
        return self.encode_sentences(pad_batch([[CLS_ID] + list(t) for t in texts]))

    def encode_reaction(self, ids: torch.Tensor) -> torch.Tensor:
        """Mean-pooled reaction encoder states, one row per concatenated reaction sequence."""
        if ids.shape[-1] == 0:
            raise ValueError("empty reaction sequence")
        real = (ids != PAD_ID).to(self.dtype)
        if bool((real.sum(-1) == 0).any()):
            raise ValueError("empty reaction sequence")
        h = self.reaction_encoder(self.dropout(self.embedding(ids)), padding_mask(ids))
        return (h * real[..., None]).sum(1) / real.sum(1, keepdim=True)

    def fuse_reaction_context(self, states: torch.Tensor, h_er: torch.Tensor) -> torch.Tensor:
        """``states`` (L, d), ``h_er`` (R, d) -> er (R, d) from the CLS position."""
        r, length = h_er.shape[0], states.shape[0]
        joined = torch.cat([states[None].expand(r, -1, -1), h_er[:, None, :].expand(-1, length, -1)], dim=-1)
        x = self.reaction_proj(joined)
        mask = torch.ones(r, length, length, dtype=torch.bool, device=x.device)
        return self.fusion_encoder(x, mask)[:, 0]

    def encode_batch(self, feats: list[SampleFeatures], training: bool) -> list[Encoded]:
        """Encode a batch, running every encoder once over padded inputs."""
        n_b = len(feats)
        ctx_ids = pad_batch([f.context_ids.tolist() for f in feats])
        states_all = self.encode_context(ctx_ids)
        ctx_len = [f.context_ids.shape[0] for f in feats]

        cs_counts = [f.cs_texts.shape[0] for f in feats]
        width = max(f.cs_texts.shape[1] for f in feats)
        cs_texts = torch.cat([F.pad(f.cs_texts, (0, width - f.cs_texts.shape[1]), value=PAD_ID) for f in feats])
        cs_init = self.encode_sentences(cs_texts).split(cs_counts)
        if self.cfg.use_cs_graph:
            x, mask = _stack_rows(cs_init)
            rel = _stack_relations([f.cs_relation for f in feats], x.shape[1])
            cs_all = self.cs_graph(x, rel)
            cs_nodes = [cs_all[b, : cs_counts[b]] for b in range(n_b)]
        else:
            cs_nodes = list(cs_init)

        ec_init = [
            self.dropout(self.embedding(f.ec_ids, f.ec_positions, f.ec_types)) for f in feats
        ]
        if self.cfg.use_ec_graph:
            x, mask = _stack_rows(ec_init)
            rel = _stack_relations([f.ec_relation for f in feats], x.shape[1])
            eta = x.new_zeros(n_b, x.shape[1])
            for b, f in enumerate(feats):
                eta[b, : f.ec_intensity.shape[0]] = f.ec_intensity.to(self.dtype)
            ec_all = self.ec_graph(x, rel, eta)
            concepts_list = [ec_all[b, : ec_init[b].shape[0]] for b in range(n_b)]
        else:
            concepts_list = ec_init

        react_counts = [f.reaction_ids.shape[0] for f in feats]
        width = max(f.reaction_ids.shape[1] for f in feats)
        react = torch.cat([F.pad(f.reaction_ids, (0, width - f.reaction_ids.shape[1]), value=PAD_ID) for f in feats])
        h_er = self.encode_reaction(react).split(react_counts)
        er_list = self._fuse_reactions(states_all, ctx_len, h_er)

        if training:
            y = pad_batch([[CLS_ID] + f.response_ids.tolist() for f in feats])
            s_y_cog = self.encode_sentences(y)
            s_y_ctx = self.encode_context(y)[:, 0]

        encs = []
        for b, f in enumerate(feats):
            states = states_all[b, : ctx_len[b]]
            s_x = states[0]
            knowledge = cs_nodes[b][f.num_utterances:]
            concepts = concepts_list[b]
            prior_cs = A.prior_distribution(knowledge, s_x, self.phi_cs)
            prior_ec = A.prior_distribution(concepts, s_x, self.phi_ec)
            r_cog = A.weighted_sum(prior_cs, knowledge)
            r_emo = A.weighted_sum(prior_ec, concepts)
            er = er_list[b]
            r_aff, mu = A.affect_gate(r_emo, er[0], self.w_aff)
            enc = Encoded(
                states=states, knowledge=knowledge, sources=f.cs_sources, concepts=concepts,
                prior_cs=prior_cs, prior_ec=prior_ec, r_cog=r_cog, r_emo=r_emo, er=er,
                r_aff=r_aff, mu=mu, emotion_logits=A.emotion_logits(r_aff, self.w_emo),
                fused=self.empathy_fusion(states, r_cog, r_aff),
            )
            if training:
                enc.posterior_cs = A.posterior_distribution(knowledge, s_y_cog[b], training)
                enc.posterior_ec = A.posterior_distribution(concepts, s_y_ctx[b], training)
                enc.r_cog_post = A.weighted_sum(enc.posterior_cs, knowledge)
                enc.r_emo_post = A.weighted_sum(enc.posterior_ec, concepts)
            encs.append(enc)
        return encs

    def _fuse_reactions(self, states_all, ctx_len, h_er):
        """Batched ``fuse_reaction_context`` over every (sample, sub-utterance) pair."""
        rows, masks = [], []
        length = states_all.shape[1]
        for b, h in enumerate(h_er):
            r = h.shape[0]
            rows.append(torch.cat([states_all[b][None].expand(r, -1, -1), h[:, None, :].expand(-1, length, -1)], -1))
            key = torch.arange(length) < ctx_len[b]
            masks.append(key[None, None, :].expand(r, length, -1))
        x = self.reaction_proj(torch.cat(rows))
        er = self.fusion_encoder(x, torch.cat(masks))[:, 0]
        return list(er.split([h.shape[0] for h in h_er]))

    def encode(self, f: SampleFeatures, training: bool) -> Encoded:
        return self.encode_batch([f], training)[0]

    # decoding ---------------------------------------------------------

    def memory(self, encs: list[Encoded]) -> DecoderMemory:
        fused, fmask = _stack_rows([e.fused for e in encs])
        cs, cmask = _stack_rows([e.knowledge for e in encs])
        ec, emask = _stack_rows([e.concepts for e in encs])
        return DecoderMemory(fused, fmask, cs, cmask, ec, emask)

    @staticmethod
    def teacher_forcing(feats: list[SampleFeatures]):
        inputs = pad_batch([[BOS_ID] + f.response_ids.tolist() for f in feats])
        targets = pad_batch([f.response_ids.tolist() + [EOS_ID] for f in feats])
        return inputs, targets

    # losses -----------------------------------------------------------

    def _coarse(self, encs):
        if not self.cfg.use_coarse or len(encs) < 2:
            return torch.zeros((), dtype=self.dtype)
        r_cog = torch.stack([e.r_cog for e in encs])
        r_emo = torch.stack([e.r_emo for e in encs])
        others = ~torch.eye(len(encs), dtype=torch.bool)
        est = A.mim_estimate(r_cog, r_emo, r_emo, others, r_cog, others, self.w_coarse)
        return -est.mean()

    def _fine(self, encs):
        if not self.cfg.use_fine:
            return torch.zeros((), dtype=self.dtype)
        terms = []
        for b, e in enumerate(encs):
            other_er0 = [o.er[0:1] for k, o in enumerate(encs) if k != b]
            other_cs = [o.knowledge for k, o in enumerate(encs) if k != b]
            neg_er = torch.cat([e.er] + other_er0)
            neg_cs = torch.cat([e.knowledge] + other_cs)
            src = e.sources
            t1, kk = e.er.shape[0], e.knowledge.shape[0]
            er_idx = torch.arange(neg_er.shape[0])
            er_mask = (er_idx[None, :] >= t1) | (er_idx[None, :] != src[:, None])
            cs_src = torch.cat([src, torch.full((neg_cs.shape[0] - kk,), -1, dtype=torch.long)])
            cs_mask = cs_src[None, :] != src[:, None]
            terms.append(A.fine_mim_loss(e.knowledge, src, e.er, neg_er, er_mask, neg_cs, cs_mask, self.w_fine))
        return torch.stack(terms).mean()

    def forward(self, feats: list[SampleFeatures], training: bool = True, phase: int = 2) -> dict:
        """Loss components for a batch.

        ``phase=1`` computes only the bag-of-words term (and needs
        ``training``). Without ``training`` the posterior-dependent terms are
        absent and ``gen_sum``/``n_tokens`` support perplexity.
        """
        encs = self.encode_batch(feats, training)
        out = {}
        if training:
            out["bow"] = torch.stack(
                [A.bow_loss(e.r_cog_post, e.r_emo_post, f.bag, self.bow_head) for e, f in zip(encs, feats)]
            ).mean()
            if phase == 1:
                out["total"] = out["bow"]
                return out
            out["kl"] = torch.stack(
                [A.kl_loss(e.posterior_cs, e.prior_cs) + A.kl_loss(e.posterior_ec, e.prior_ec) for e in encs]
            ).mean()
        elif phase == 1:
            raise A.PosteriorInInference("pretraining needs the gold response")
        out["coarse"] = self._coarse(encs)
        out["fine"] = self._fine(encs)
        labels = [f.label for f in feats]
        if all(lab >= 0 for lab in labels):
            out["emo"] = A.emotion_loss(torch.stack([e.emotion_logits for e in encs]), labels)
        inputs, targets = self.teacher_forcing(feats)
        logits = self.decoder(inputs, self.memory(encs))
        out["gen"] = generation_loss(logits, targets)
        out["div"] = diversity_loss(logits, targets, self.freq_weights)
        out["gen_sum"] = generation_loss(logits, targets, reduction="sum")
        out["n_tokens"] = int((targets != PAD_ID).sum())
        out["emotion_pred"] = [int(torch.argmax(e.emotion_logits)) for e in encs]
        if training:
            out["align"] = A.align_loss_total(out["bow"], out["kl"], out["coarse"], out["fine"], self.cfg.alpha)
            out["total"] = total_loss(out["align"], out["emo"], out["gen"], out["div"], self.cfg.gamma)
        return out

    # inference --------------------------------------------------------

    @torch.no_grad()
    def predict(self, feats: list[SampleFeatures], max_steps: int | None = None):
        """Greedy responses and predicted label ids."""
        max_steps = self.cfg.max_decode if max_steps is None else max_steps
        results = []
        for f in feats:
            enc = self.encode(f, training=False)
            mem = self.memory([enc])
            out: GenerationOutput = greedy_decode(lambda prefix: self.decoder(prefix, mem), max_steps)
            results.append((int(torch.argmax(enc.emotion_logits)), out))
        return results
