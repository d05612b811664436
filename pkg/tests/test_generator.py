import math

import pytest
import torch
import torch.nn.functional as F

from case_dialogue.generator import (
    DIVERSITY_EPS,
    Decoder,
    DecoderLayer,
    DecoderMemory,
    EmpathyFusion,
    applied_weights,
    causal_mask,
    diversity_loss,
    frequency_weights,
    generation_loss,
    greedy_decode,
    total_loss,
)
from case_dialogue.knowledge import BOS_ID, EOS_ID, PAD_ID
from case_dialogue.neural import EmbeddingTable

D = 8
V = 20


def _memory(b=1, lc=5, kc=4, ke=3, dtype=torch.float32, gen=None):
    gen = gen or torch.Generator().manual_seed(0)
    r = lambda *s: torch.randn(*s, generator=gen, dtype=dtype)  # noqa: E731
    return DecoderMemory(
        r(b, lc, D), torch.ones(b, lc, dtype=torch.bool),
        r(b, kc, D), torch.ones(b, kc, dtype=torch.bool),
        r(b, ke, D), torch.ones(b, ke, dtype=torch.bool),
    )


def test_fusion_shapes_and_zero_weights():
    fusion = EmpathyFusion(D)
    assert fusion.proj.in_features == 3 * D
    states = torch.randn(7, D)
    out = fusion(states, torch.randn(D), torch.randn(D))
    assert out.shape == (7, D)
    torch.nn.init.zeros_(fusion.proj.weight)
    torch.nn.init.zeros_(fusion.proj.bias)
    assert torch.all(fusion(states, torch.randn(D), torch.randn(D)) == 0)


def test_fusion_depends_on_affect_everywhere():
    torch.manual_seed(0)
    fusion = EmpathyFusion(D)
    states, r_cog = torch.randn(7, D), torch.randn(D)
    a = fusion(states, r_cog, torch.randn(D))
    b = fusion(states, r_cog, torch.randn(D))
    assert all(not torch.allclose(a[i], b[i]) for i in range(7))


def test_decoder_causality():
    torch.manual_seed(0)
    dec = Decoder(EmbeddingTable(V, D), V, D, 2, 2, 4 * D).eval()
    mem = _memory()
    x = torch.tensor([[BOS_ID, 7, 8, 9, 10, 11]])
    base = dec(x, mem)
    for m in range(x.shape[1] - 1):
        y = x.clone()
        y[0, m + 1 :] = torch.randint(5, V, (x.shape[1] - m - 1,))
        assert torch.allclose(dec(y, mem)[0, : m + 1], base[0, : m + 1], atol=1e-6)


def test_decoder_sublayer_order_and_rows():
    torch.manual_seed(1)
    layer = DecoderLayer(D, 2, 4 * D).eval()
    mem = _memory(b=2)
    x = torch.randn(2, 4, D)
    _, attns = layer(x, causal_mask(4)[None].expand(2, -1, -1), mem)
    assert list(attns) == ["self", "cs", "ec", "context"]
    for w in attns.values():
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5)
    assert torch.all(attns["self"][..., torch.triu(torch.ones(4, 4, dtype=torch.bool), 1)] == 0)
    assert all(float(attns[k].detach().sum()) > 0 for k in ("cs", "ec"))
    swapped = DecoderLayer(D, 2, 4 * D, concepts_first=True).eval()
    _, attns = swapped(x, causal_mask(4)[None].expand(2, -1, -1), mem)
    assert list(attns) == ["self", "ec", "cs", "context"]


def test_single_zero_row_memories_oracle():
    """One all-zero row per knowledge memory: each cross-attention adds out(value(0)) = W_o b_v + b_o."""
    torch.manual_seed(2)
    layer = DecoderLayer(D, 2, 4 * D).double().eval()
    lq = 3
    x = torch.randn(1, lq, D, dtype=torch.float64)
    zero = torch.zeros(1, 1, D, dtype=torch.float64)
    ctx = torch.randn(1, 4, D, dtype=torch.float64)
    ones = lambda n: torch.ones(1, n, dtype=torch.bool)  # noqa: E731
    mem = DecoderMemory(ctx, ones(4), zero, ones(1), zero, ones(1))
    out, _ = layer(x, causal_mask(lq)[None], mem)

    def attend(mha, q, kv, mask):
        h, dh = mha.num_heads, mha.head_dim
        qq = (q @ mha.query.weight.T + mha.query.bias).view(lq, h, dh).transpose(0, 1)
        kk = (kv @ mha.key.weight.T + mha.key.bias).view(-1, h, dh).transpose(0, 1)
        vv = (kv @ mha.value.weight.T + mha.value.bias).view(-1, h, dh).transpose(0, 1)
        logits = (qq @ kk.transpose(-1, -2)) / math.sqrt(dh)
        logits = logits.masked_fill(~mask, float("-inf"))
        ctx_ = (torch.softmax(logits, -1) @ vv).transpose(0, 1).reshape(lq, -1)
        return ctx_ @ mha.out.weight.T + mha.out.bias

    def ln(i, v):
        return F.layer_norm(v, (D,), layer.norms[i].weight, layer.norms[i].bias)

    h = ln(0, x[0] + attend(layer.self_attn, x[0], x[0], causal_mask(lq)))
    const_cs = layer.cs_attn.out.weight @ layer.cs_attn.value.bias + layer.cs_attn.out.bias
    h = ln(1, h + const_cs)
    const_ec = layer.ec_attn.out.weight @ layer.ec_attn.value.bias + layer.ec_attn.out.bias
    h = ln(2, h + const_ec)
    h = ln(3, h + attend(layer.ctx_attn, h, ctx[0], torch.ones(lq, 4, dtype=torch.bool)))
    h = ln(4, h + layer.ffn.fc2(F.gelu(layer.ffn.fc1(h))))
    assert torch.allclose(out[0], h, atol=1e-12)


# losses -------------------------------------------------------------------------


def test_generation_loss_cases():
    targets = torch.tensor([[5, 6, EOS_ID, PAD_ID]])
    uniform = torch.zeros(1, 4, V)
    assert float(generation_loss(uniform, targets)) == pytest.approx(math.log(V), abs=1e-6)
    perfect = torch.full((1, 4, V), -1e4)
    for m, t in enumerate(targets[0].tolist()):
        perfect[0, m, t] = 1e4
    assert float(generation_loss(perfect, targets)) == 0.0
    with pytest.raises(ValueError):
        generation_loss(uniform, torch.zeros(1, 4, dtype=torch.long))


def test_generation_loss_brute_force():
    torch.manual_seed(0)
    logits = torch.randn(2, 5, V, dtype=torch.float64)
    targets = torch.tensor([[5, 6, 7, EOS_ID, PAD_ID], [8, EOS_ID, PAD_ID, PAD_ID, PAD_ID]])
    total, n = 0.0, 0
    for b in range(2):
        for m in range(5):
            t = int(targets[b, m])
            if t == PAD_ID:
                continue
            row = logits[b, m].tolist()
            z = math.log(sum(math.exp(v) for v in row))
            total += z - row[t]
            n += 1
    assert float(generation_loss(logits, targets)) == pytest.approx(total / n, abs=1e-6)
    assert float(generation_loss(logits, targets, "sum")) == pytest.approx(total, abs=1e-6)


def test_diversity_reduces_to_nll_with_unit_weights():
    torch.manual_seed(0)
    logits = torch.randn(2, 5, V, dtype=torch.float64)
    targets = torch.tensor([[5, 6, 7, EOS_ID, PAD_ID], [8, EOS_ID, PAD_ID, PAD_ID, PAD_ID]])
    ones = torch.ones(V, dtype=torch.float64)
    assert float(diversity_loss(logits, targets, ones)) == pytest.approx(float(generation_loss(logits, targets)), abs=1e-12)


def test_frequency_weights():
    counts = torch.tensor([0, 0, 0, 0, 0, 10, 5, 1, 0], dtype=torch.float64)
    w = frequency_weights(counts)
    assert float(w[5]) == DIVERSITY_EPS
    assert float(w[6]) == pytest.approx(0.5)
    assert float(w[7]) == pytest.approx(0.9)
    assert float(w[8]) == 1.0
    targets = torch.tensor([[5, 6, 7, 8], [5, 5, PAD_ID, PAD_ID]])
    applied = applied_weights(targets, w)
    assert float(applied.mean()) == pytest.approx(1.0, abs=1e-6)
    raw = [float(w[t]) for t in (5, 6, 7, 8, 5, 5)]
    assert applied.tolist() == pytest.approx([r / (sum(raw) / 6) for r in raw])


def test_greedy_decode_eos_and_cap():
    def always(token):
        def step(prefix):
            logits = torch.zeros(1, prefix.shape[1], V)
            logits[..., token] = 5.0
            return logits
        return step

    out = greedy_decode(always(EOS_ID))
    assert out.tokens == [] and out.terminated
    out = greedy_decode(always(9))
    assert len(out.tokens) == 30 and not out.terminated
    assert greedy_decode(always(PAD_ID)).tokens[0] not in (PAD_ID, BOS_ID)


def test_greedy_decode_deterministic():
    torch.manual_seed(0)
    dec = Decoder(EmbeddingTable(V, D), V, D, 1, 2, 4 * D).eval()
    mem = _memory()
    a = greedy_decode(lambda p: dec(p, mem))
    b = greedy_decode(lambda p: dec(p, mem))
    assert a == b
    assert len(a.tokens) <= 30 and PAD_ID not in a.tokens


def test_total_loss():
    assert total_loss(1, 1, 1, 1) == 4.5
    assert total_loss(1, 1, 1, 7, (1, 1, 1, 0)) == 3
    assert total_loss(2, 4, 6, 8) == 2 * total_loss(1, 2, 3, 4)
