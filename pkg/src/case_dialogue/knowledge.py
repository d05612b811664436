"""Corpus, commonsense cache, concept store, VAD lexicon and vocabulary."""

from __future__ import annotations

import json
import math
import random
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

COGNITION_RELATIONS = ("xIntent", "xNeed", "xWant", "xEffect")
REACTION_RELATION = "xReact"
ALL_RELATIONS = COGNITION_RELATIONS + (REACTION_RELATION,)

KEY_SEP = "␟"
TERMINAL_CHARS = frozenset(".!?")
MAX_SEGMENTS = 6

PAD, UNK, BOS, EOS, CLS = "[PAD]", "[UNK]", "[BOS]", "[EOS]", "[CLS]"
SPECIAL_TOKENS = (PAD, UNK, BOS, EOS, CLS)
PAD_ID, UNK_ID, BOS_ID, EOS_ID, CLS_ID = range(5)

SPLITS = ("train", "valid", "dev", "test")


class KnowledgeError(ValueError):
    pass


class CorpusError(KnowledgeError):
    def __init__(self, path, line_no: int, reason: str):
        super().__init__(f"{path}:{line_no}: {reason}")
        self.line_no = line_no


class CacheMiss(KeyError):
    def __init__(self, text: str, relation: str):
        super().__init__(f"no commonsense entry for ({text!r}, {relation})")
        self.text = text
        self.relation = relation


@dataclass(frozen=True)
class DialogueSample:
    sample_id: str
    context: tuple[tuple[str, ...], ...]
    response: tuple[str, ...]
    emotion: str
    speakers: tuple[str, ...] = ()

    def __post_init__(self):
        if not self.context:
            raise KnowledgeError(f"sample {self.sample_id}: empty context")
        if any(len(u) == 0 for u in self.context):
            raise KnowledgeError(f"sample {self.sample_id}: empty utterance in context")
        if not self.response:
            raise KnowledgeError(f"sample {self.sample_id}: empty response")

    @property
    def last_utterance(self) -> tuple[str, ...]:
        return self.context[-1]

    @property
    def context_tokens(self) -> list[str]:
        return [tok for utt in self.context for tok in utt]

    def to_json(self) -> dict:
        return {
            "id": self.sample_id,
            "context": [list(u) for u in self.context],
            "speakers": list(self.speakers),
            "response": list(self.response),
            "emotion": self.emotion,
        }


def _parse_sample(obj, path, line_no: int, require_response: bool = True) -> DialogueSample:
    if not isinstance(obj, dict):
        raise CorpusError(path, line_no, "expected a JSON object")
    required = ["id", "context", "response", "emotion"] if require_response else ["id", "context"]
    for key in required:
        if key not in obj:
            raise CorpusError(path, line_no, f"missing field {key!r}")
    context = obj["context"]
    if not isinstance(context, list) or not all(isinstance(u, list) for u in context):
        raise CorpusError(path, line_no, "'context' must be a list of token lists")
    response = obj.get("response") or []
    if require_response and (not isinstance(response, list) or not response):
        raise CorpusError(path, line_no, "'response' must be a non-empty token list")
    try:
        return DialogueSample(
            sample_id=str(obj["id"]),
            context=tuple(tuple(str(t) for t in u) for u in context),
            # generation inputs may omit the response; a placeholder keeps the invariant
            response=tuple(str(t) for t in response) if response else (EOS,),
            emotion=str(obj.get("emotion", "")),
            speakers=tuple(str(s) for s in obj.get("speakers", [])),
        )
    except KnowledgeError as exc:
        raise CorpusError(path, line_no, str(exc)) from None


def load_corpus(
    path,
    split: str = "train",
    labels: Iterable[str] | None = None,
    require_response: bool = True,
) -> list[DialogueSample]:
    """Read a JSONL corpus file in file order.

    For non-train splits pass the training label set as ``labels``; unseen
    emotions then raise.
    """
    if split not in SPLITS:
        raise KnowledgeError(f"unknown split {split!r}")
    known = set(labels) if labels is not None else None
    samples = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(path, line_no, f"invalid JSON ({exc.msg})") from None
            sample = _parse_sample(obj, path, line_no, require_response)
            if known is not None and split != "train" and sample.emotion not in known:
                if require_response:
                    raise CorpusError(path, line_no, f"emotion {sample.emotion!r} not in training label set")
            samples.append(sample)
    return samples


def write_corpus(samples: Iterable[DialogueSample], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def _is_terminal(token: str) -> bool:
    return bool(token) and all(ch in TERMINAL_CHARS for ch in token)


def segment_last_utterance(utterance: Sequence[str], max_segments: int = MAX_SEGMENTS) -> list[list[str]]:
    """Return ``[u_0, u_1, ..., u_t]`` where u_0 is the whole utterance.

    Boundaries fall after runs of sentence-final punctuation tokens.
    Segments past ``max_segments`` are merged into the last kept one.
    """
    tokens = list(utterance)
    if not tokens:
        raise KnowledgeError("cannot segment an empty utterance")
    segments: list[list[str]] = []
    current: list[str] = []
    for idx, tok in enumerate(tokens):
        current.append(tok)
        nxt = tokens[idx + 1] if idx + 1 < len(tokens) else None
        if _is_terminal(tok) and (nxt is None or not _is_terminal(nxt)):
            segments.append(current)
            current = []
    if current:
        segments.append(current)
    if len(segments) > max_segments:
        tail = [tok for seg in segments[max_segments - 1:] for tok in seg]
        segments = segments[: max_segments - 1] + [tail]
    return [tokens] + segments


def cache_key(text: str, relation: str) -> str:
    return f"{text}{KEY_SEP}{relation}"


class CommonsenseCache:
    """Precomputed COMET inferences keyed by (text, relation)."""

    def __init__(self, entries: dict[tuple[str, str], Sequence[str]], l: int | None = None):
        if l is None:
            l = len(next(iter(entries.values()))) if entries else 0
        if any(len(v) != l for v in entries.values()):
            raise KnowledgeError(f"every cache entry must hold exactly {l} strings")
        for (_, rel) in entries:
            if rel not in ALL_RELATIONS:
                raise KnowledgeError(f"unknown relation {rel!r}")
        self.l = l
        self._entries = {k: tuple(v) for k, v in entries.items()}

    def __len__(self):
        return len(self._entries)

    def __contains__(self, key) -> bool:
        return key in self._entries

    def __eq__(self, other):
        return isinstance(other, CommonsenseCache) and self._entries == other._entries

    def keys(self):
        return self._entries.keys()

    def lookup(self, text: str, relation: str) -> list[str]:
        if relation not in ALL_RELATIONS:
            raise KnowledgeError(f"unknown relation {relation!r}")
        try:
            return list(self._entries[(text, relation)])
        except KeyError:
            raise CacheMiss(text, relation) from None

    def missing(self, texts: Iterable[str], relations: Sequence[str] = ALL_RELATIONS) -> list[tuple[str, str]]:
        return [(t, r) for t in texts for r in relations if (t, r) not in self._entries]

    @classmethod
    def load(cls, path, l: int | None = None) -> "CommonsenseCache":
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
        entries = {}
        for key, value in raw.items():
            text, sep, rel = key.rpartition(KEY_SEP)
            if not sep:
                raise KnowledgeError(f"malformed cache key {key!r}")
            entries[(text, rel)] = value
        return cls(entries, l)

    def save(self, path) -> None:
        raw = {cache_key(t, r): list(v) for (t, r), v in sorted(self._entries.items())}
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(raw, fh, ensure_ascii=False, indent=0)


class FallbackCache(CommonsenseCache):
    """Cache wrapper for interactive use: misses yield ``l`` copies of ``filler``."""

    def __init__(self, base: CommonsenseCache, filler: str = "none"):
        self.l = base.l
        self._entries = base._entries
        self.filler = filler
        self.misses = 0

    def lookup(self, text: str, relation: str) -> list[str]:
        try:
            return super().lookup(text, relation)
        except CacheMiss:
            self.misses += 1
            return [self.filler] * self.l


def lookup_commonsense(cache: CommonsenseCache, text: str, relation: str) -> list[str]:
    return cache.lookup(text, relation)


@dataclass
class VadLexicon:
    entries: dict[str, tuple[float, float, float]] = field(default_factory=dict)

    def __post_init__(self):
        for word, vad in self.entries.items():
            if len(vad) != 3 or not all(0.0 <= x <= 1.0 for x in vad):
                raise KnowledgeError(f"VAD scores for {word!r} must be three values in [0, 1]")

    def __contains__(self, word) -> bool:
        return word in self.entries

    def get(self, word):
        return self.entries.get(word)

    @classmethod
    def load(cls, path) -> "VadLexicon":
        entries = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 4:
                    if not line.strip():
                        continue
                    raise KnowledgeError(f"{path}:{line_no}: expected word<TAB>V<TAB>A<TAB>D")
                try:
                    entries[parts[0]] = (float(parts[1]), float(parts[2]), float(parts[3]))
                except ValueError:
                    # NRC_VAD ships with a header row
                    if line_no == 1:
                        continue
                    raise KnowledgeError(f"{path}:{line_no}: non-numeric VAD score") from None
        return cls(entries)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for word, (v, a, d) in sorted(self.entries.items()):
                fh.write(f"{word}\t{v!r}\t{a!r}\t{d!r}\n")


def raw_intensity(valence: float, arousal: float) -> float:
    return math.hypot(valence - 0.5, arousal / 2.0)


def intensity_bounds(words: Iterable[str], lexicon: VadLexicon) -> tuple[float, float]:
    values = [raw_intensity(*lexicon.entries[w][:2]) for w in set(words) if w in lexicon]
    if not values:
        raise KnowledgeError("no concept in the inventory is covered by the VAD lexicon")
    return min(values), max(values)


def emotion_intensity(word: str, lexicon: VadLexicon, minmax_bounds: tuple[float, float]) -> float:
    """Min-max normalised ``||[V - 0.5, A / 2]||``; 0 for words outside the lexicon."""
    lo, hi = minmax_bounds
    if not lo < hi:
        raise KnowledgeError(f"degenerate intensity bounds ({lo}, {hi})")
    vad = lexicon.get(word)
    if vad is None:
        return 0.0
    value = (raw_intensity(vad[0], vad[1]) - lo) / (hi - lo)
    return min(1.0, max(0.0, value))


@dataclass(frozen=True)
class ConceptEdge:
    concept: str
    relation: str
    weight: float
    eta: float


def _concept_order(edge: ConceptEdge):
    return (-edge.eta, edge.concept)


class ConceptStore:
    """Per-token ConceptNet neighbours annotated with emotion intensity."""

    def __init__(self, triples: dict[str, Iterable[ConceptEdge]]):
        self.triples: dict[str, list[ConceptEdge]] = {}
        for token, edges in triples.items():
            edges = list(edges)
            for e in edges:
                if not 0.0 <= e.eta <= 1.0:
                    raise KnowledgeError(f"intensity of {e.concept!r} outside [0, 1]")
                if e.weight < 0:
                    raise KnowledgeError(f"negative weight on ({token}, {e.concept})")
            self.triples[token] = sorted(edges, key=_concept_order)

    def __eq__(self, other):
        return isinstance(other, ConceptStore) and self.triples == other.triples

    def concepts(self, token: str) -> list[ConceptEdge]:
        return self.triples.get(token, [])

    def inventory(self) -> list[str]:
        return sorted({e.concept for edges in self.triples.values() for e in edges})

    @classmethod
    def build(cls, raw: Iterable[tuple[str, str, str, float]], lexicon: VadLexicon) -> "ConceptStore":
        """Annotate raw (token, concept, relation, weight) rows with intensity."""
        raw = list(raw)
        bounds = intensity_bounds((c for _, c, _, _ in raw), lexicon)
        grouped: dict[str, list[ConceptEdge]] = {}
        for token, concept, relation, weight in raw:
            eta = emotion_intensity(concept, lexicon, bounds)
            grouped.setdefault(token, []).append(ConceptEdge(concept, relation, float(weight), eta))
        return cls(grouped)

    @staticmethod
    def read_raw(path) -> list[tuple[str, str, str, float]]:
        rows = []
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 4:
                    raise KnowledgeError(f"{path}:{line_no}: expected token<TAB>concept<TAB>relation<TAB>weight")
                rows.append((parts[0], parts[1], parts[2], float(parts[3])))
        return rows

    @classmethod
    def load(cls, path) -> "ConceptStore":
        grouped: dict[str, list[ConceptEdge]] = {}
        with open(path, encoding="utf-8") as fh:
            for line_no, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 5:
                    raise KnowledgeError(f"{path}:{line_no}: expected 5 tab-separated fields")
                token, concept, relation, weight, eta = parts
                grouped.setdefault(token, []).append(ConceptEdge(concept, relation, float(weight), float(eta)))
        return cls(grouped)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for token in sorted(self.triples):
                for e in self.triples[token]:
                    fh.write(f"{token}\t{e.concept}\t{e.relation}\t{e.weight!r}\t{e.eta!r}\n")


def select_concepts(token: str, store: ConceptStore, n_prime: int) -> list[tuple[str, float]]:
    if n_prime < 1:
        raise KnowledgeError("n_prime must be at least 1")
    return [(e.concept, e.eta) for e in store.concepts(token)[:n_prime]]


class Vocabulary:
    def __init__(self, tokens: Sequence[str], labels: Sequence[str]):
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise KnowledgeError("vocabulary must start with the reserved special tokens")
        if len(set(tokens)) != len(tokens):
            raise KnowledgeError("duplicate token in vocabulary")
        if len(set(labels)) != len(labels):
            raise KnowledgeError("duplicate emotion label")
        self.itos = list(tokens)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        self.labels = list(labels)
        self.label_to_id = {e: i for i, e in enumerate(self.labels)}

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.itos == other.itos and self.labels == other.labels

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.stoi.get(t, UNK_ID) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def label_id(self, label: str) -> int:
        try:
            return self.label_to_id[label]
        except KeyError:
            raise KnowledgeError(f"unknown emotion label {label!r}") from None

    def to_json(self) -> dict:
        return {"tokens": self.itos, "labels": self.labels}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["tokens"], obj["labels"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=False), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def build_vocab(
    samples: Sequence[DialogueSample],
    min_freq: int = 1,
    extra_texts: Iterable[Sequence[str]] = (),
) -> Vocabulary:
    """Build the token and label vocabulary from the training split.

    ``extra_texts`` (knowledge strings, concepts) are added after corpus
    tokens regardless of frequency so graph vertices do not collapse to UNK.
    """
    if not samples:
        raise KnowledgeError("cannot build a vocabulary from zero samples")
    counts: Counter[str] = Counter()
    for s in samples:
        for utt in s.context:
            counts.update(utt)
        counts.update(s.response)
    tokens = list(SPECIAL_TOKENS)
    seen = set(tokens)
    # Counter preserves first-insertion order
    for tok, n in counts.items():
        if n >= min_freq and tok not in seen:
            tokens.append(tok)
            seen.add(tok)
    for text in extra_texts:
        for tok in text:
            if tok not in seen:
                tokens.append(tok)
                seen.add(tok)
    labels = sorted({s.emotion for s in samples})
    return Vocabulary(tokens, labels)


def load_word_vectors(path, vocab: Vocabulary, dim: int, seed: int = 0):
    """Return a ``len(vocab) x dim`` list-of-lists embedding matrix.

    Rows for words missing from the file are drawn from U(-0.1, 0.1) with a
    fixed seed; the PAD row is zero.
    """
    rng = random.Random(seed)
    matrix = [[rng.uniform(-0.1, 0.1) for _ in range(dim)] for _ in range(len(vocab))]
    matrix[PAD_ID] = [0.0] * dim
    found = 0
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                parts = line.rstrip().split(" ")
                if len(parts) != dim + 1:
                    continue
                idx = vocab.stoi.get(parts[0])
                if idx is None or idx == PAD_ID:
                    continue
                matrix[idx] = [float(x) for x in parts[1:]]
                found += 1
    return matrix, found
