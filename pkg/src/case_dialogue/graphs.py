"""Heterogeneous graph construction over a dialogue sample.

Relation matrices are stored as nested tuples of small integer tags so that
graphs are hashable, comparable and cheap to convert to tensors.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Sequence

from .knowledge import (
    COGNITION_RELATIONS,
    CommonsenseCache,
    ConceptStore,
    DialogueSample,
    KnowledgeError,
    VadLexicon,
    segment_last_utterance,
    select_concepts,
)

CS_TAGS = ("none", "self_loop", "global", "temporal") + COGNITION_RELATIONS
EC_TAGS = ("none", "self_loop", "global", "temporal", "emotional_concept")
NONE, SELF_LOOP, GLOBAL, TEMPORAL = 0, 1, 2, 3
CS_REL_TAG = {r: 4 + k for k, r in enumerate(COGNITION_RELATIONS)}
EMOTIONAL_CONCEPT = 4

TOKEN, CONCEPT, CLS_VERTEX = 0, 1, 2

DEFAULT_MAX_VERTICES = 512


class GraphError(ValueError):
    pass


def _empty(n: int) -> list[list[int]]:
    rel = [[NONE] * n for _ in range(n)]
    for a in range(n):
        rel[a][a] = SELF_LOOP
    return rel


def _link(rel: list[list[int]], a: int, b: int, tag: int) -> None:
    rel[a][b] = tag
    rel[b][a] = tag


def _freeze(rel) -> tuple[tuple[int, ...], ...]:
    return tuple(tuple(row) for row in rel)


@dataclass(frozen=True)
class CognitionGraph:
    vertices: tuple[str, ...]
    num_utterances: int  # t + 1
    relation: tuple[tuple[int, ...], ...]
    provenance: tuple[tuple[int, str, int], ...]  # (i, relation, j) per knowledge vertex, j is 1-based

    @property
    def t(self) -> int:
        return self.num_utterances - 1

    @property
    def knowledge_index(self) -> range:
        return range(self.num_utterances, len(self.vertices))

    @property
    def knowledge_sources(self) -> list[int]:
        return [i for i, _, _ in self.provenance]

    def to_json(self) -> dict:
        return _graph_json(self.vertices, self.relation, CS_TAGS, [0.0] * len(self.vertices))


@dataclass(frozen=True)
class EmotionConceptGraph:
    vertices: tuple[str, ...]
    num_tokens: int  # n
    relation: tuple[tuple[int, ...], ...]
    intensity: tuple[float, ...]
    vertex_type: tuple[int, ...]
    anchor: tuple[int, ...]  # source token vertex for each concept vertex, in vertex order
    positions: tuple[int, ...]

    @property
    def concept_index(self) -> range:
        return range(1 + self.num_tokens, len(self.vertices))

    def to_json(self) -> dict:
        return _graph_json(self.vertices, self.relation, EC_TAGS, list(self.intensity))


def _graph_json(vertices, relation, tags, eta) -> dict:
    edges = [
        [a, b, tags[relation[a][b]]]
        for a in range(len(vertices))
        for b in range(a, len(vertices))
        if relation[a][b] != NONE
    ]
    return {"vertices": list(vertices), "edges": edges, "eta": eta}


def dump_graph(graph, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(graph.to_json(), fh, ensure_ascii=False, indent=1)


def build_cognition_graph(
    sample: DialogueSample,
    cache: CommonsenseCache,
    relations: Sequence[str] = COGNITION_RELATIONS,
) -> CognitionGraph:
    segments = segment_last_utterance(sample.last_utterance)
    utter_texts = [" ".join(seg) for seg in segments]
    vertices = list(utter_texts)
    provenance = []
    for i, text in enumerate(utter_texts):
        for r in relations:
            for j, k in enumerate(cache.lookup(text, r), start=1):
                vertices.append(k)
                provenance.append((i, r, j))

    n_utt = len(utter_texts)
    rel = _empty(len(vertices))
    for i in range(1, n_utt):
        _link(rel, 0, i, GLOBAL)
    for i in range(1, n_utt - 1):
        _link(rel, i, i + 1, TEMPORAL)
    for offset, (i, r, _) in enumerate(provenance):
        _link(rel, i, n_utt + offset, CS_REL_TAG[r])
    return CognitionGraph(tuple(vertices), n_utt, _freeze(rel), tuple(provenance))


def build_emotion_concept_graph(
    sample: DialogueSample,
    store: ConceptStore,
    vad: VadLexicon | None = None,
    n_prime: int = 10,
) -> EmotionConceptGraph:
    """CLS, then the concatenated context tokens, then selected concepts.

    Concepts are grouped by anchor token in order, each group in descending
    intensity. Concepts with zero intensity carry no emotional signal and are
    skipped. ``vad`` is accepted for interface symmetry; intensities come
    precomputed from the store.
    """
    if n_prime < 1:
        raise GraphError("n_prime must be at least 1")
    tokens = sample.context_tokens
    n = len(tokens)
    vertices = ["[CLS]"] + tokens
    intensity = [0.0] * (1 + n)
    vtype = [CLS_VERTEX] + [TOKEN] * n
    positions = list(range(1 + n))
    anchors = []
    for pos, tok in enumerate(tokens, start=1):
        for concept, eta in select_concepts(tok, store, n_prime):
            if eta <= 0.0:
                continue
            vertices.append(concept)
            intensity.append(eta)
            vtype.append(CONCEPT)
            positions.append(pos)
            anchors.append(pos)

    rel = _empty(len(vertices))
    for v in range(1, len(vertices)):
        _link(rel, 0, v, GLOBAL)
    for pos in range(1, n):
        _link(rel, pos, pos + 1, TEMPORAL)
    for offset, pos in enumerate(anchors):
        _link(rel, pos, 1 + n + offset, EMOTIONAL_CONCEPT)
    return EmotionConceptGraph(
        tuple(vertices), n, _freeze(rel), tuple(intensity), tuple(vtype), tuple(anchors), tuple(positions)
    )


def _submatrix(relation, keep: list[int]):
    return tuple(tuple(relation[a][b] for b in keep) for a in keep)


def truncate_graph(graph, max_vertices: int = DEFAULT_MAX_VERTICES):
    """Drop the lowest-priority knowledge/concept vertices until the bound holds."""
    if isinstance(graph, CognitionGraph):
        minimum = graph.num_utterances
    elif isinstance(graph, EmotionConceptGraph):
        minimum = 1 + graph.num_tokens
    else:
        raise TypeError(f"cannot truncate {type(graph).__name__}")
    if max_vertices < minimum:
        raise GraphError(f"bound {max_vertices} is below the structural minimum {minimum}")
    excess = len(graph.vertices) - max_vertices
    if excess <= 0:
        return graph

    if isinstance(graph, CognitionGraph):
        offset = graph.num_utterances
        order = sorted(range(len(graph.provenance)), key=lambda k: (graph.provenance[k][2], k), reverse=True)
        dropped = {offset + k for k in order[:excess]}
        keep = [v for v in range(len(graph.vertices)) if v not in dropped]
        return replace(
            graph,
            vertices=tuple(graph.vertices[v] for v in keep),
            relation=_submatrix(graph.relation, keep),
            provenance=tuple(graph.provenance[v - offset] for v in keep[offset:]),
        )

    offset = 1 + graph.num_tokens
    concept_ids = list(graph.concept_index)
    order = sorted(concept_ids, key=lambda v: (graph.intensity[v], -v))
    dropped = set(order[:excess])
    keep = [v for v in range(len(graph.vertices)) if v not in dropped]
    return replace(
        graph,
        vertices=tuple(graph.vertices[v] for v in keep),
        relation=_submatrix(graph.relation, keep),
        intensity=tuple(graph.intensity[v] for v in keep),
        vertex_type=tuple(graph.vertex_type[v] for v in keep),
        anchor=tuple(graph.anchor[v - offset] for v in keep[offset:]),
        positions=tuple(graph.positions[v] for v in keep),
    )


def check_symmetric(relation) -> bool:
    n = len(relation)
    return all((relation[a][b] != NONE) == (relation[b][a] != NONE) for a in range(n) for b in range(n))


__all__ = [
    "CS_TAGS",
    "EC_TAGS",
    "CognitionGraph",
    "EmotionConceptGraph",
    "GraphError",
    "KnowledgeError",
    "build_cognition_graph",
    "build_emotion_concept_graph",
    "check_symmetric",
    "dump_graph",
    "truncate_graph",
]
