import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from case_dialogue.knowledge import (
    ALL_RELATIONS,
    SPECIAL_TOKENS,
    CacheMiss,
    CommonsenseCache,
    ConceptEdge,
    ConceptStore,
    CorpusError,
    DialogueSample,
    FallbackCache,
    KnowledgeError,
    VadLexicon,
    Vocabulary,
    build_vocab,
    emotion_intensity,
    intensity_bounds,
    load_corpus,
    load_word_vectors,
    lookup_commonsense,
    raw_intensity,
    segment_last_utterance,
    select_concepts,
    write_corpus,
)


def _sample(i, context, response="ok .", emotion="sad"):
    return DialogueSample(f"s{i}", tuple(tuple(u.split()) for u in context), tuple(response.split()), emotion)


def _write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# corpus -------------------------------------------------------------------


def test_empty_corpus_file(tmp_path):
    p = tmp_path / "train.jsonl"
    p.write_text("")
    assert load_corpus(p) == []


def test_corpus_preserves_order(tmp_path):
    samples = [_sample(i, ["hello there", f"turn {i} ."]) for i in range(3)]
    write_corpus(samples, tmp_path / "train.jsonl")
    loaded = load_corpus(tmp_path / "train.jsonl")
    assert [s.sample_id for s in loaded] == ["s0", "s1", "s2"]
    assert loaded == samples


def test_missing_response_names_line(tmp_path):
    good = json.dumps({"id": "a", "context": [["hi"]], "response": ["yo"], "emotion": "sad"})
    bad = json.dumps({"id": "b", "context": [["hi"]], "emotion": "sad"})
    _write_lines(tmp_path / "train.jsonl", [good, bad])
    with pytest.raises(CorpusError) as err:
        load_corpus(tmp_path / "train.jsonl")
    assert err.value.line_no == 2
    assert "2" in str(err.value)


def test_unseen_label_in_test_split(tmp_path):
    _write_lines(tmp_path / "test.jsonl", [json.dumps({"id": "a", "context": [["x"]], "response": ["y"], "emotion": "new"})])
    with pytest.raises(CorpusError):
        load_corpus(tmp_path / "test.jsonl", "test", labels=["sad"])


def test_malformed_json_line(tmp_path):
    _write_lines(tmp_path / "train.jsonl", ["{not json"])
    with pytest.raises(CorpusError) as err:
        load_corpus(tmp_path / "train.jsonl")
    assert err.value.line_no == 1


def test_sample_invariants():
    with pytest.raises(KnowledgeError):
        DialogueSample("x", (), ("a",), "sad")
    with pytest.raises(KnowledgeError):
        DialogueSample("x", (("a",), ()), ("a",), "sad")
    with pytest.raises(KnowledgeError):
        DialogueSample("x", (("a",),), (), "sad")


# segmentation -------------------------------------------------------------


@pytest.mark.parametrize(
    "text, expected",
    [
        ("i am fine .", [["i", "am", "fine", "."]]),
        ("i lost . i cried .", [["i", "lost", "."], ["i", "cried", "."]]),
        ("wow !!! really ?", [["wow", "!!!"], ["really", "?"]]),
        ("no punctuation here", [["no", "punctuation", "here"]]),
        ("a . ! b", [["a", ".", "!"], ["b"]]),
    ],
)
def test_segmentation_examples(text, expected):
    segs = segment_last_utterance(text.split())
    assert segs[0] == text.split()
    assert segs[1:] == expected


def test_segmentation_cap_merges_tail():
    toks = " ".join(f"s{k} ." for k in range(9)).split()
    segs = segment_last_utterance(toks, max_segments=6)
    assert len(segs) - 1 == 6
    assert segs[-1] == " ".join(f"s{k} ." for k in range(5, 9)).split()


word = st.sampled_from(["a", "b", "cat", ".", "!", "?", "!!", "?!", "..."])


@settings(max_examples=200, deadline=None)
@given(st.lists(word, min_size=1, max_size=30))
def test_segmentation_partitions_input(tokens):
    segs = segment_last_utterance(tokens)
    assert segs[0] == tokens
    assert 1 <= len(segs) - 1 <= 6
    assert all(segs[1:])
    assert [t for s in segs[1:] for t in s] == tokens
    oracle = oracles.segment(tokens)
    if len(oracle) <= 6:
        assert segs[1:] == oracle


# commonsense cache --------------------------------------------------------


def _cache(l=5):
    return CommonsenseCache({("i lost .", r): [f"{r}-{j}" for j in range(l)] for r in ALL_RELATIONS})


def test_lookup_returns_l_strings_and_is_pure():
    cache = _cache()
    a = lookup_commonsense(cache, "i lost .", "xIntent")
    assert len(a) == 5
    assert a == lookup_commonsense(cache, "i lost .", "xIntent")


def test_cache_miss_identifies_key():
    with pytest.raises(CacheMiss) as err:
        _cache().lookup("unknown", "xNeed")
    assert err.value.text == "unknown" and err.value.relation == "xNeed"


def test_cache_rejects_wrong_length_and_relation():
    with pytest.raises(KnowledgeError):
        CommonsenseCache({("a", "xIntent"): ["1", "2"], ("a", "xNeed"): ["1"]})
    with pytest.raises(KnowledgeError):
        CommonsenseCache({("a", "oEffect"): ["1"]})
    with pytest.raises(KnowledgeError):
        CommonsenseCache({("a", "xIntent"): ["1", "2"]}, l=5)


def test_cache_round_trip(tmp_path):
    cache = _cache()
    cache.save(tmp_path / "c.json")
    assert CommonsenseCache.load(tmp_path / "c.json") == cache


def test_fallback_cache_fills_misses():
    fb = FallbackCache(_cache())
    assert fb.lookup("nothing", "xWant") == ["none"] * 5
    assert fb.misses == 1
    assert fb.lookup("i lost .", "xWant")[0] == "xWant-0"


# intensity ----------------------------------------------------------------


def test_intensity_examples():
    lex = VadLexicon({"calm": (0.5, 0.0, 0.3), "ecstatic": (1.0, 1.0, 0.9), "meh": (0.6, 0.2, 0.5)})
    assert raw_intensity(0.5, 0.0) == 0.0
    assert raw_intensity(1.0, 1.0) == pytest.approx(0.70711, abs=1e-5)
    bounds = intensity_bounds(["calm", "ecstatic", "meh"], lex)
    assert bounds == (0.0, pytest.approx(math.sqrt(0.5)))
    assert emotion_intensity("calm", lex, bounds) == 0.0
    assert emotion_intensity("ecstatic", lex, bounds) == 1.0
    assert emotion_intensity("meh", lex, bounds) == pytest.approx(math.hypot(0.1, 0.1) / math.sqrt(0.5))
    assert emotion_intensity("absent", lex, bounds) == 0.0


def test_intensity_rejects_degenerate_bounds():
    with pytest.raises(KnowledgeError):
        emotion_intensity("x", VadLexicon(), (0.3, 0.3))


unit = st.floats(0.0, 1.0)


@settings(max_examples=200, deadline=None)
@given(unit, unit, unit, unit)
def test_intensity_monotone_in_norm(v1, a1, v2, a2):
    lex = VadLexicon({"w1": (v1, a1, 0.5), "w2": (v2, a2, 0.5), "lo": (0.5, 0.0, 0.5), "hi": (1.0, 1.0, 0.5)})
    bounds = intensity_bounds(lex.entries, lex)
    e1, e2 = (emotion_intensity(w, lex, bounds) for w in ("w1", "w2"))
    assert 0.0 <= e1 <= 1.0
    if raw_intensity(v1, a1) > raw_intensity(v2, a2):
        assert e1 >= e2


def test_vad_lexicon_validation_and_header(tmp_path):
    with pytest.raises(KnowledgeError):
        VadLexicon({"w": (1.2, 0.0, 0.0)})
    p = tmp_path / "vad.tsv"
    p.write_text("Word\tValence\tArousal\tDominance\nhappy\t0.9\t0.6\t0.7\n")
    lex = VadLexicon.load(p)
    assert "happy" in lex and "Word" not in lex


# concepts -----------------------------------------------------------------


def _store(n, seed=0):
    import random

    rng = random.Random(seed)
    edges = [ConceptEdge(f"c{k:02d}", "RelatedTo", 1.0, round(rng.random(), 1)) for k in range(n)]
    return ConceptStore({"tok": edges}), edges


def test_select_concepts_fewer_than_cap():
    store, _ = _store(3)
    assert len(select_concepts("tok", store, 10)) == 3


def test_select_concepts_top_ten_of_twelve():
    store, edges = _store(12, seed=3)
    oracle = sorted(((e.concept, e.eta) for e in edges), key=lambda p: (-p[1], p[0]))[:10]
    assert select_concepts("tok", store, 10) == oracle


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 100), st.integers(1, 15), st.integers(0, 10_000))
def test_select_concepts_matches_sort_oracle(n, n_prime, seed):
    store, edges = _store(n, seed)
    got = select_concepts("tok", store, n_prime)
    etas = [e for _, e in got]
    assert etas == sorted(etas, reverse=True)
    assert got == sorted(((e.concept, e.eta) for e in edges), key=lambda p: (-p[1], p[0]))[:n_prime]


def test_select_concepts_edge_cases():
    store, _ = _store(3)
    assert select_concepts("missing", store, 10) == []
    with pytest.raises(KnowledgeError):
        select_concepts("tok", store, 0)


def test_concept_store_round_trip(tmp_path):
    store, _ = _store(12)
    store.save(tmp_path / "c.tsv")
    assert ConceptStore.load(tmp_path / "c.tsv") == store


def test_concept_store_build_from_raw():
    lex = VadLexicon({"joy": (1.0, 0.8, 0.5), "dull": (0.5, 0.0, 0.5)})
    store = ConceptStore.build([("t", "dull", "R", 1.0), ("t", "joy", "R", 1.0), ("t", "x", "R", 1.0)], lex)
    assert [(e.concept, e.eta) for e in store.concepts("t")] == [("joy", 1.0), ("dull", 0.0), ("x", 0.0)]


# vocabulary ---------------------------------------------------------------


def test_vocab_min_freq():
    samples = [DialogueSample("0", (("a", "b"),), ("b", "c"), "x")]
    v1 = build_vocab(samples, 1)
    assert set(v1.itos) == {"a", "b", "c"} | set(SPECIAL_TOKENS)
    v2 = build_vocab(samples, 2)
    assert set(v2.itos) == {"b"} | set(SPECIAL_TOKENS)
    assert v1.labels == ["x"]


def test_vocab_deterministic_and_round_trip(tmp_path):
    samples = [_sample(i, ["hi there", "how are you ?"], "fine thanks", e) for i, e in enumerate(["sad", "joy"])]
    v = build_vocab(samples)
    assert v == build_vocab(samples)
    assert [v.stoi[t] for t in SPECIAL_TOKENS] == list(range(5))
    v.save(tmp_path / "v.json")
    w = Vocabulary.load(tmp_path / "v.json")
    assert w == v and w.labels == ["joy", "sad"]
    assert all(w.stoi[w.itos[i]] == i for i in range(len(w)))


def test_vocab_empty_raises():
    with pytest.raises(KnowledgeError):
        build_vocab([])


def test_vocab_unknown_maps_to_unk():
    v = build_vocab([_sample(0, ["a"], "b")])
    assert v.encode(["a", "zzz"]) == [v.stoi["a"], 1]


def test_word_vectors_fallback(tmp_path):
    v = build_vocab([_sample(0, ["a b"], "c")])
    p = tmp_path / "vec.txt"
    p.write_text("a 1 2 3\nq 4 5 6\nbad 1\n")
    matrix, found = load_word_vectors(p, v, 3)
    assert found == 1
    assert matrix[v.stoi["a"]] == [1.0, 2.0, 3.0]
    assert matrix[0] == [0.0, 0.0, 0.0]
    assert all(-0.1 <= x <= 0.1 for x in matrix[v.stoi["b"]])
    assert load_word_vectors(p, v, 3)[0] == matrix
