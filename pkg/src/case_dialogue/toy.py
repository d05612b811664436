"""Synthetic desk-scale corpus with matching knowledge resources.

Every emotion class has its own cue words, commonsense pools and concepts,
so the classes are separable and a small model can memorise the responses.
"""

from __future__ import annotations

import random
from pathlib import Path

from .knowledge import (
    ALL_RELATIONS,
    CommonsenseCache,
    ConceptStore,
    DialogueSample,
    VadLexicon,
    segment_last_utterance,
    write_corpus,
)

EMOTIONS = {
    "joyful": {
        "cues": ["happy", "great", "wonderful", "excited"],
        "events": ["i got the job", "my sister visited", "we won the game", "i passed the exam", "the trip was fun"],
        "replies": ["that is wonderful news", "congratulations to you", "so glad for you", "what a great day"],
        "pools": {
            "xIntent": ["to celebrate", "to be happy", "to share joy", "to have fun", "to succeed"],
            "xNeed": ["to work hard", "to prepare", "to try", "to practice", "to plan"],
            "xWant": ["to party", "to tell friends", "to smile", "to dance", "to relax"],
            "xEffect": ["gets praised", "smiles", "laughs", "feels proud", "cheers"],
            "xReact": ["happy", "proud", "glad", "excited", "joyful"],
        },
        "concepts": [("happy", "delight"), ("great", "joy"), ("wonderful", "bliss"), ("excited", "thrill")],
    },
    "sad": {
        "cues": ["sad", "lost", "cried", "lonely"],
        "events": ["my dog died", "i lost my wallet", "my friend moved away", "i failed the test", "the rain ruined it"],
        "replies": ["i am so sorry", "that sounds really hard", "sorry for your loss", "i hope it gets better"],
        "pools": {
            "xIntent": ["to grieve", "to be comforted", "to remember", "to cope", "to mourn"],
            "xNeed": ["to care", "to love", "to own it", "to try", "to hope"],
            "xWant": ["to cry", "to be alone", "to get help", "to rest", "to talk"],
            "xEffect": ["cries", "weeps", "sighs", "feels empty", "mourns"],
            "xReact": ["sad", "upset", "lonely", "hurt", "down"],
        },
        "concepts": [("sad", "sorrow"), ("lost", "grief"), ("cried", "tears"), ("lonely", "despair")],
    },
    "afraid": {
        "cues": ["scared", "dark", "storm", "nervous"],
        "events": ["i heard a noise", "the lights went out", "a storm hit town", "i walked home late", "the dog growled"],
        "replies": ["that sounds scary", "stay safe out there", "i would be scared too", "glad you are okay"],
        "pools": {
            "xIntent": ["to be safe", "to hide", "to escape", "to protect", "to check"],
            "xNeed": ["to lock doors", "to listen", "to look", "to stay", "to wait"],
            "xWant": ["to run", "to call help", "to hide away", "to leave", "to sleep"],
            "xEffect": ["shakes", "trembles", "screams", "freezes", "sweats"],
            "xReact": ["scared", "afraid", "nervous", "anxious", "terrified"],
        },
        "concepts": [("scared", "fear"), ("dark", "dread"), ("storm", "panic"), ("nervous", "terror")],
    },
    "angry": {
        "cues": ["angry", "furious", "broke", "unfair"],
        "events": ["someone stole my bike", "my boss yelled", "the neighbor broke my fence", "they cut the line",
                   "my order was wrong"],
        "replies": ["that is so unfair", "i would be furious", "that is really rude", "they should apologize"],
        "pools": {
            "xIntent": ["to complain", "to get even", "to be heard", "to fight", "to argue"],
            "xNeed": ["to notice", "to see it", "to wait", "to pay", "to ask"],
            "xWant": ["to yell", "to report it", "to get refund", "to leave", "to punch"],
            "xEffect": ["yells", "shouts", "fumes", "storms off", "glares"],
            "xReact": ["angry", "mad", "annoyed", "furious", "upset"],
        },
        "concepts": [("angry", "rage"), ("furious", "wrath"), ("broke", "outrage"), ("unfair", "hate")],
    },
}

NEUTRAL_VAD = {"day": (0.55, 0.3, 0.5), "home": (0.6, 0.25, 0.5), "thing": (0.5, 0.1, 0.5)}


def make_toy_samples(n: int = 10, seed: int = 0) -> list[DialogueSample]:
    rng = random.Random(seed)
    names = list(EMOTIONS)
    samples = []
    for idx in range(n):
        emotion = names[idx % len(names)]
        profile = EMOTIONS[emotion]
        k = idx // len(names)
        cue = profile["cues"][k % len(profile["cues"])]
        event = profile["events"][k % len(profile["events"])]
        first = f"hi there , i feel {cue} today .".split()
        if idx % 2:
            last = f"{event} . i am {cue} !".split()
        else:
            last = f"{event} and i am so {cue} .".split()
        reply = profile["replies"][k % len(profile["replies"])].split()
        extra = rng.choice(["!", ".", "."])
        context = (tuple(first), tuple("oh , what happened ?".split()), tuple(last))
        samples.append(
            DialogueSample(
                sample_id=f"toy-{idx}",
                context=context,
                response=tuple(reply + [extra]),
                emotion=emotion,
                speakers=("speaker", "listener", "speaker"),
            )
        )
    return samples


def make_toy_cache(samples, l: int = 5, extra_texts=()) -> CommonsenseCache:
    entries = {}
    for s in samples:
        profile = EMOTIONS.get(s.emotion, EMOTIONS["joyful"])
        texts = [" ".join(seg) for seg in segment_last_utterance(s.last_utterance)]
        for offset, text in enumerate(texts):
            for rel in ALL_RELATIONS:
                pool = profile["pools"][rel]
                entries[(text, rel)] = [pool[(offset + j) % len(pool)] for j in range(l)]
    for text in extra_texts:
        for rel in ALL_RELATIONS:
            entries.setdefault((text, rel), ["none"] * l)
    return CommonsenseCache(entries, l)


def make_toy_lexicon() -> VadLexicon:
    entries = dict(NEUTRAL_VAD)
    base = {"joyful": (0.95, 0.7), "sad": (0.1, 0.35), "afraid": (0.1, 0.85), "angry": (0.12, 0.9)}
    for emotion, profile in EMOTIONS.items():
        v, a = base[emotion]
        for rank, (_, concept) in enumerate(profile["concepts"]):
            entries[concept] = (v, max(0.0, a - 0.05 * rank), 0.5)
    return VadLexicon(entries)


def make_toy_concepts() -> list[tuple[str, str, str, float]]:
    rows = []
    for profile in EMOTIONS.values():
        for token, concept in profile["concepts"]:
            rows.append((token, concept, "RelatedTo", 1.0))
            rows.append((token, "day", "RelatedTo", 0.5))
    rows.append(("home", "thing", "RelatedTo", 0.2))
    return rows


def write_toy_dataset(directory, n: int = 10, seed: int = 0, l: int = 5) -> Path:
    """Write train/valid/test JSONL plus knowledge files; all splits share the toy samples."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    samples = make_toy_samples(n, seed)
    for split in ("train", "valid", "test"):
        write_corpus(samples, out / f"{split}.jsonl")
    make_toy_cache(samples, l).save(out / "commonsense.json")
    lexicon = make_toy_lexicon()
    lexicon.save(out / "vad.tsv")
    with open(out / "concepts_raw.tsv", "w", encoding="utf-8") as fh:
        for row in make_toy_concepts():
            fh.write("\t".join(map(str, row)) + "\n")
    ConceptStore.build(make_toy_concepts(), lexicon).save(out / "concepts.tsv")
    return out
