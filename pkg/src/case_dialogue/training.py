"""Data preparation and the two training phases."""

from __future__ import annotations

import copy
import logging
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import torch

from .config import TrainConfig
from .knowledge import (
    ALL_RELATIONS,
    SPECIAL_TOKENS,
    CommonsenseCache,
    ConceptStore,
    KnowledgeError,
    VadLexicon,
    Vocabulary,
    build_vocab,
    load_corpus,
    load_word_vectors,
    segment_last_utterance,
)
from .metrics import evaluate_ppl
from .model import CASEModel, featurize

log = logging.getLogger(__name__)

CACHE_FILE = "commonsense.json"
CONCEPTS_FILE = "concepts.tsv"
RAW_CONCEPTS_FILE = "concepts_raw.tsv"
VAD_FILE = "vad.tsv"
VOCAB_FILE = "vocab.json"
VECTORS_FILE = "vectors.txt"


class TrainingDiverged(RuntimeError):
    pass


def split_path(data_dir, split: str) -> Path:
    data_dir = Path(data_dir)
    path = data_dir / f"{split}.jsonl"
    if not path.exists() and split in ("valid", "dev"):
        alt = data_dir / f"{'dev' if split == 'valid' else 'valid'}.jsonl"
        if alt.exists():
            return alt
    return path


def _sub_utterance_texts(samples):
    return [" ".join(seg) for s in samples for seg in segment_last_utterance(s.last_utterance)]


def preprocess(data_dir, cfg: TrainConfig, allow_missing: bool = False) -> dict:
    """Validate knowledge coverage, compute concept intensities and write the vocabulary.

    Raises ``KnowledgeError`` when a sub-utterance has no cached knowledge,
    unless ``allow_missing``.
    """
    data_dir = Path(data_dir)
    train = load_corpus(split_path(data_dir, "train"), "train")
    cache = CommonsenseCache.load(data_dir / CACHE_FILE, cfg.l)
    samples = list(train)
    for split in ("valid", "test"):
        path = split_path(data_dir, split)
        if path.exists():
            samples.extend(load_corpus(path, split, {s.emotion for s in train}))
    missing = cache.missing(_sub_utterance_texts(samples), ALL_RELATIONS)
    if missing and not allow_missing:
        text, rel = missing[0]
        raise KnowledgeError(f"{len(missing)} cache entries missing, first: {rel} for {text!r}")

    raw = data_dir / RAW_CONCEPTS_FILE
    if raw.exists():
        store = ConceptStore.build(ConceptStore.read_raw(raw), VadLexicon.load(data_dir / VAD_FILE))
        store.save(data_dir / CONCEPTS_FILE)
    else:
        store = ConceptStore.load(data_dir / CONCEPTS_FILE)

    extra = [k.split() for key in cache.keys() for k in cache.lookup(*key)]
    extra += [[c] for c in store.inventory()]
    vocab = build_vocab(train, cfg.min_freq, extra)
    vocab.save(data_dir / VOCAB_FILE)
    return {
        "samples": len(samples),
        "vocab": len(vocab),
        "labels": len(vocab.labels),
        "missing": len(missing),
        "concepts": len(store.inventory()),
    }


@dataclass
class Resources:
    vocab: Vocabulary
    cache: CommonsenseCache
    store: ConceptStore
    data_dir: Path
    _feats: dict = field(default_factory=dict)

    @classmethod
    def load(cls, data_dir, cfg: TrainConfig, vocab: Vocabulary | None = None) -> "Resources":
        data_dir = Path(data_dir)
        if vocab is None:
            if not (data_dir / VOCAB_FILE).exists():
                raise KnowledgeError(f"{data_dir / VOCAB_FILE} missing; run preprocess first")
            vocab = Vocabulary.load(data_dir / VOCAB_FILE)
        cache = CommonsenseCache.load(data_dir / CACHE_FILE, cfg.l)
        store = ConceptStore.load(data_dir / CONCEPTS_FILE)
        return cls(vocab, cache, store, data_dir)

    def samples(self, split: str, require_response: bool = True):
        return load_corpus(split_path(self.data_dir, split), split, self.vocab.labels, require_response)

    def features(self, split: str, cfg: TrainConfig):
        if split not in self._feats:
            self._feats[split] = [featurize(s, self.vocab, self.cache, self.store, cfg) for s in self.samples(split)]
        return self._feats[split]

    def response_counts(self) -> torch.Tensor:
        """Training-response token counts, used by the diversity weights."""
        counts = Counter(tok for s in self.samples("train") for tok in s.response if tok not in SPECIAL_TOKENS)
        out = torch.zeros(len(self.vocab))
        for tok, n in counts.items():
            out[self.vocab.stoi.get(tok, self.vocab.stoi[SPECIAL_TOKENS[1]])] += n
        return out

    def pretrained(self, dim: int):
        path = self.data_dir / VECTORS_FILE
        if not path.exists():
            return None
        matrix, found = load_word_vectors(path, self.vocab, dim)
        log.info("loaded %d pretrained vectors", found)
        return torch.tensor(matrix)


def build_model(res: Resources, cfg: TrainConfig) -> CASEModel:
    return CASEModel(cfg, len(res.vocab), len(res.vocab.labels), res.pretrained(cfg.d_model), res.response_counts())


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Inverse-square-root schedule with linear warm-up, peaking at ``base_lr``."""
    step = max(step, 1)
    w = cfg.warmup_steps
    return cfg.base_lr * math.sqrt(w) * min(step ** -0.5, step * w ** -1.5)


def make_optimizer(model, cfg: TrainConfig):
    opt = torch.optim.Adam(
        model.parameters(), lr=lr_at(1, cfg), betas=(cfg.adam_beta1, cfg.adam_beta2), eps=cfg.adam_eps
    )
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda i: lr_at(i + 1, cfg) / lr_at(1, cfg))
    return opt, sched


def batches_forever(items, batch_size: int, seed: int):
    """Reshuffle every epoch with a seeded RNG; yields lists."""
    rng = random.Random(seed)
    order = list(range(len(items)))
    while True:
        rng.shuffle(order)
        for start in range(0, len(order), batch_size):
            yield [items[i] for i in order[start : start + batch_size]]


def _step(model, opt, sched, loss, cfg):
    if not torch.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {float(loss.detach())}")
    opt.zero_grad()
    loss.backward()
    if cfg.max_grad_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.max_grad_norm)
    opt.step()
    sched.step()


def _floats(out: dict) -> dict:
    return {k: float(v.detach()) for k, v in out.items() if torch.is_tensor(v) and v.dim() == 0}


def pretrain_phase(model: CASEModel, feats, cfg: TrainConfig, steps: int | None = None) -> list[dict]:
    """Phase 1: optimise only the bag-of-words objective."""
    steps = cfg.pretrain_steps if steps is None else steps
    history = []
    if steps == 0:
        return history
    if not feats:
        raise ValueError("no training samples")
    model.train()
    opt, sched = make_optimizer(model, cfg)
    stream = batches_forever(feats, cfg.batch_size, cfg.seed)
    for step in range(1, steps + 1):
        out = model(next(stream), training=True, phase=1)
        _step(model, opt, sched, out["total"], cfg)
        history.append({"step": step, **_floats(out)})
        if step % cfg.eval_every == 0 or step == steps:
            log.info("pretrain step %d bow %.4f", step, history[-1]["bow"])
    return history


@dataclass
class TrainResult:
    history: list
    evals: list
    best_ppl: float
    best_step: int
    stopped_early: bool


def train_phase(
    model: CASEModel,
    feats,
    valid_feats,
    cfg: TrainConfig,
    steps: int | None = None,
    on_improve=None,
) -> TrainResult:
    """Phase 2: optimise the total objective with early stopping on validation PPL.

    ``on_improve(model, optimizer, step)`` is called whenever validation
    perplexity improves; the best weights are restored before returning.
    """
    steps = cfg.train_steps if steps is None else steps
    if not feats:
        raise ValueError("no training samples")
    opt, sched = make_optimizer(model, cfg)
    stream = batches_forever(feats, cfg.batch_size, cfg.seed + 1)
    history, evals = [], []
    best_ppl, best_step, best_state, bad = math.inf, 0, None, 0
    stopped = False
    for step in range(1, steps + 1):
        model.train()
        out = model(next(stream), training=True, phase=2)
        _step(model, opt, sched, out["total"], cfg)
        rec = {"step": step, **_floats(out)}
        history.append(rec)
        if step % cfg.eval_every and step != steps:
            continue
        ppl = evaluate_ppl(model, valid_feats, cfg.batch_size) if valid_feats else math.exp(rec["gen"])
        evals.append({"step": step, "valid_ppl": ppl})
        log.info(
            "step %d total %.4f align %.4f emo %.4f gen %.4f div %.4f valid ppl %.3f",
            step, rec["total"], rec["align"], rec.get("emo", float("nan")), rec["gen"], rec["div"], ppl,
        )
        if ppl < best_ppl:
            best_ppl, best_step, bad = ppl, step, 0
            best_state = copy.deepcopy(model.state_dict())
            if on_improve is not None:
                on_improve(model, opt, step)
        else:
            bad += 1
            if bad >= cfg.patience:
                stopped = True
                log.info("early stop at step %d (best %d)", step, best_step)
                break
    if best_state is not None:
        model.load_state_dict(best_state)
    return TrainResult(history, evals, best_ppl, best_step, stopped)
