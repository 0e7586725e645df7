"""Immutable triple store with adjacency and node-frequency indexes."""

from __future__ import annotations

import io
import json
import math
import os
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

from .errors import GraphFormatError, UnknownEntityError

CACHE_MAGIC = b"PKGX-KG v1\n"


@dataclass(frozen=True, order=True)
class Triple:
    subject: str
    relation: str
    object: str

    def __post_init__(self):
        if not (self.subject and self.relation and self.object):
            raise GraphFormatError(f"empty identifier in triple {self!r}")


@dataclass(frozen=True, order=True)
class Hypothesis:
    """A predicted link (subject, relation, object) to be explained."""

    subject: str
    relation: str
    object: str

    def __str__(self):
        return f"({self.subject}, {self.relation}, {self.object})"

    @classmethod
    def parse(cls, text: str) -> "Hypothesis":
        parts = [p.strip() for p in text.replace("\t", ",").split(",")]
        if len(parts) != 3 or not all(parts):
            raise GraphFormatError(f"hypothesis must be 'subject,relation,object', got {text!r}")
        return cls(*parts)


def _readonly(arr):
    arr.setflags(write=False)
    return arr


class KnowledgeGraph:
    """Directed multigraph G = (E, R, F).

    Entities and relations get integer ids in first-seen order. Out-adjacency
    is stored CSR-style and sorted by (relation id, object id).
    """

    def __init__(self, entities, relations, triples):
        self.entities: tuple[str, ...] = tuple(entities)
        self.relations: tuple[str, ...] = tuple(relations)
        self.entity_index = {e: i for i, e in enumerate(self.entities)}
        self.relation_index = {r: i for i, r in enumerate(self.relations)}
        tri = np.asarray(triples, dtype=np.int64).reshape(-1, 3)
        self.triples = _readonly(tri)

        n = len(self.entities)
        freq = np.bincount(tri[:, 0], minlength=n) + np.bincount(tri[:, 2], minlength=n)
        self.node_frequency = _readonly(freq.astype(np.int64))

        order = np.lexsort((tri[:, 2], tri[:, 1], tri[:, 0]))
        srt = tri[order]
        self._out_rel = _readonly(srt[:, 1].copy())
        self._out_obj = _readonly(srt[:, 2].copy())
        offsets = np.zeros(n + 1, dtype=np.int64)
        np.cumsum(np.bincount(srt[:, 0], minlength=n), out=offsets[1:])
        self._out_offsets = _readonly(offsets)

        total = 2 * len(tri)
        with np.errstate(divide="ignore"):
            if total > 1:
                surprisal = -np.log(freq / total) / math.log(total)
            else:
                surprisal = np.ones(n)
        self._surprisal = _readonly(np.where(freq > 0, surprisal, 1.0))

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        return len(self.relations)

    @property
    def num_triples(self) -> int:
        return len(self.triples)

    def __repr__(self):
        return (
            f"KnowledgeGraph(|E|={self.num_entities}, |R|={self.num_relations}, "
            f"|F|={self.num_triples})"
        )

    def __eq__(self, other):
        if not isinstance(other, KnowledgeGraph):
            return NotImplemented
        return (
            self.entities == other.entities
            and self.relations == other.relations
            and np.array_equal(self.triples, other.triples)
        )

    __hash__ = None

    def entity_id(self, e: str) -> int:
        try:
            return self.entity_index[e]
        except KeyError:
            raise UnknownEntityError(f"unknown entity {e!r}") from None

    def relation_id(self, r: str) -> int:
        try:
            return self.relation_index[r]
        except KeyError:
            raise UnknownEntityError(f"unknown relation {r!r}") from None

    def out_edges(self, eid: int) -> tuple[np.ndarray, np.ndarray]:
        """Return (relation ids, object ids) leaving entity ``eid``."""
        lo, hi = self._out_offsets[eid], self._out_offsets[eid + 1]
        return self._out_rel[lo:hi], self._out_obj[lo:hi]

    def out_degree(self, eid: int) -> int:
        return int(self._out_offsets[eid + 1] - self._out_offsets[eid])

    def iter_triples(self) -> Iterator[Triple]:
        for s, r, o in self.triples:
            yield Triple(self.entities[s], self.relations[r], self.entities[o])

    def has_triple(self, s: str, r: str, o: str) -> bool:
        if s not in self.entity_index or o not in self.entity_index or r not in self.relation_index:
            return False
        rels, objs = self.out_edges(self.entity_index[s])
        return bool(np.any((rels == self.relation_index[r]) & (objs == self.entity_index[o])))

    def surprisal_array(self) -> np.ndarray:
        return self._surprisal

    def check_hypothesis(self, h: Hypothesis, require_object=True) -> None:
        self.entity_id(h.subject)
        self.relation_id(h.relation)
        if require_object:
            self.entity_id(h.object)

    # -- serialization ---------------------------------------------------

    def to_bytes(self) -> bytes:
        body = {
            "entities": list(self.entities),
            "relations": list(self.relations),
            "triples": self.triples.tolist(),
        }
        return CACHE_MAGIC + json.dumps(body, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_bytes(cls, blob: bytes) -> "KnowledgeGraph":
        if not blob.startswith(CACHE_MAGIC):
            head = blob.split(b"\n", 1)[0][:32]
            raise GraphFormatError(f"not a PKGX-KG v1 cache (header {head!r})")
        try:
            body = json.loads(blob[len(CACHE_MAGIC):].decode("utf-8"))
            return cls(body["entities"], body["relations"], body["triples"])
        except (ValueError, KeyError, TypeError) as exc:
            raise GraphFormatError(f"corrupt graph cache: {exc}") from exc

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "KnowledgeGraph":
        with open(path, "rb") as fh:
            return cls.from_bytes(fh.read())


def _iter_lines(stream) -> Iterable[str]:
    if isinstance(stream, (str, os.PathLike)):
        with open(stream, encoding="utf-8") as fh:
            yield from fh
    elif isinstance(stream, bytes):
        yield from io.StringIO(stream.decode("utf-8"))
    else:
        yield from stream


def parse_triple_lines(stream) -> Iterator[tuple[int, Triple]]:
    """Yield (line number, Triple) from TSV text, skipping blanks and ``#`` comments."""
    for lineno, raw in enumerate(_iter_lines(stream), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise GraphFormatError(f"expected 3 tab-separated fields, got {len(fields)}", lineno)
        fields = [f.strip() for f in fields]
        if not all(fields):
            raise GraphFormatError("empty identifier", lineno)
        yield lineno, Triple(*fields)


def load_triples(stream) -> KnowledgeGraph:
    """Build a graph from TSV lines (an iterable of str, a path, or bytes)."""
    ent: dict[str, int] = {}
    rel: dict[str, int] = {}
    seen: set[tuple[int, int, int]] = set()
    rows = []
    for _, t in parse_triple_lines(stream):
        s = ent.setdefault(t.subject, len(ent))
        r = rel.setdefault(t.relation, len(rel))
        o = ent.setdefault(t.object, len(ent))
        key = (s, r, o)
        if key not in seen:
            seen.add(key)
            rows.append(key)
    if not rows:
        raise GraphFormatError("empty graph: no triples in input")
    return KnowledgeGraph(list(ent), list(rel), rows)


def load_hypotheses(stream) -> list[Hypothesis]:
    return [Hypothesis(t.subject, t.relation, t.object) for _, t in parse_triple_lines(stream)]


def neighbors(kg: KnowledgeGraph, e: str) -> list[tuple[str, str]]:
    rels, objs = kg.out_edges(kg.entity_id(e))
    return [(kg.relations[r], kg.entities[o]) for r, o in zip(rels, objs)]


def node_surprisal(kg: KnowledgeGraph, e: str) -> float:
    """-log(freq/2|F|) / log(2|F|); 1.0 for nodes seen exactly once."""
    return float(kg.surprisal_array()[kg.entity_id(e)])
