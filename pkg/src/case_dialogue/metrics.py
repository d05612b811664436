"""Automatic evaluation: perplexity, Distinct-n and emotion accuracy."""

from __future__ import annotations

import math
from typing import Sequence

import torch


def distinct_n(responses: Sequence[Sequence[str]], n: int) -> float:
    """Distinct n-grams over total n-gram occurrences, pooled across responses."""
    if n < 1:
        raise ValueError("n must be positive")
    grams = [tuple(r[i : i + n]) for r in responses for i in range(len(r) - n + 1)]
    if not grams:
        raise ValueError(f"no {n}-grams in the given responses")
    return len(set(grams)) / len(grams)


def _batches(items, size):
    for start in range(0, len(items), size):
        yield items[start : start + size]


@torch.no_grad()
def evaluate_ppl(model, feats, batch_size: int = 16) -> float:
    """``exp(total NLL / total target tokens)`` under teacher forcing."""
    if not feats:
        raise ValueError("cannot evaluate perplexity on empty data")
    was_training = model.training
    model.eval()
    nll, tokens = 0.0, 0
    try:
        for batch in _batches(feats, batch_size):
            out = model(batch, training=False)
            nll += float(out["gen_sum"])
            tokens += out["n_tokens"]
    finally:
        model.train(was_training)
    return math.exp(nll / tokens)


def accuracy(predicted: Sequence[int], gold: Sequence[int]) -> float:
    if not gold:
        raise ValueError("cannot compute accuracy on empty data")
    if len(predicted) != len(gold):
        raise ValueError("prediction and gold lengths differ")
    return sum(int(p == g) for p, g in zip(predicted, gold)) / len(gold)


@torch.no_grad()
def emotion_accuracy(model, feats, batch_size: int = 16) -> float:
    if not feats:
        raise ValueError("cannot compute accuracy on empty data")
    was_training = model.training
    model.eval()
    preds = []
    try:
        for batch in _batches(feats, batch_size):
            encs = model.encode_batch(batch, training=False)
            preds.extend(int(torch.argmax(e.emotion_logits)) for e in encs)
    finally:
        model.train(was_training)
    return accuracy(preds, [f.label for f in feats])


@torch.no_grad()
def generate(model, feats, vocab):
    """Greedy responses as token lists plus predicted label names."""
    was_training = model.training
    model.eval()
    try:
        results = model.predict(feats)
    finally:
        model.train(was_training)
    return [(vocab.labels[label], vocab.decode(out.tokens)) for label, out in results]


def evaluate(model, feats, vocab, batch_size: int = 16) -> dict:
    """PPL, Dist-1/2 over greedy outputs, and emotion accuracy."""
    generations = generate(model, feats, vocab)
    responses = [tokens for _, tokens in generations]
    metrics = {
        "ppl": evaluate_ppl(model, feats, batch_size),
        "dist1": _safe_distinct(responses, 1),
        "dist2": _safe_distinct(responses, 2),
        "acc": emotion_accuracy(model, feats, batch_size),
    }
    return metrics, generations


def _safe_distinct(responses, n):
    try:
        return distinct_n(responses, n)
    except ValueError:
        return 0.0


def format_table(metrics: dict) -> str:
    keys = ("ppl", "dist1", "dist2", "acc")
    header = " | ".join(f"{k:>8}" for k in keys)
    row = " | ".join(f"{metrics[k]:>8.4f}" for k in keys)
    return f"{header}\n{'-' * len(header)}\n{row}"
