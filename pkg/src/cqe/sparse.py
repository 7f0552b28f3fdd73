"""Inverted index with BM25 scoring for bag-of-words retrieval.

Scoring uses the non-negative idf variant ln(1 + (N - df + 0.5)/(df + 0.5))
and the saturated term frequency tf*(k1+1)/(tf + k1*(1 - b + b*len/avglen)).
Query terms keep their multiplicity: repeated terms add weight.
"""

from __future__ import annotations

import math
import struct
from bisect import bisect_left
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from .corpus import Corpus, tokenize
from .ranking import RankedList

MAGIC = b"CQESPIDX"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class BM25Config:
    k1: float = 0.82
    b: float = 0.68

    def __post_init__(self) -> None:
        if not (self.k1 >= 0.0):
            raise ValueError(f"k1 must be >= 0, got {self.k1}")
        if not (0.0 <= self.b <= 1.0):
            raise ValueError(f"b must be in [0, 1], got {self.b}")


class InvertedIndex:
    """Term postings plus the document statistics BM25 needs.

    Postings map term -> [(ordinal, term frequency)] sorted by ordinal;
    ordinals follow corpus order and map back to passage ids.
    """

    def __init__(
        self,
        ids: list[str],
        doc_lengths: list[int],
        postings: dict[str, list[tuple[int, int]]],
        config: BM25Config,
    ):
        if len(ids) != len(doc_lengths):
            raise ValueError("ids and doc_lengths must have equal length")
        self.ids = list(ids)
        self.doc_lengths = list(doc_lengths)
        self.postings = postings
        self.config = config
        self.doc_count = len(ids)
        self.avg_doc_length = sum(doc_lengths) / len(doc_lengths) if doc_lengths else 0.0
        self._ordinal = {pid: i for i, pid in enumerate(ids)}

    def ordinal(self, passage_id: str) -> int:
        try:
            return self._ordinal[passage_id]
        except KeyError:
            raise ValueError(f"unknown passage id {passage_id!r}") from None

    def __contains__(self, passage_id: str) -> bool:
        return passage_id in self._ordinal


def build_index(corpus: Corpus, config: BM25Config | None = None) -> InvertedIndex:
    """Index a tokenized corpus; the corpus must be non-empty."""
    if len(corpus) == 0:
        raise ValueError("cannot index an empty corpus")
    config = config or BM25Config()
    ids = []
    doc_lengths = []
    postings: dict[str, list[tuple[int, int]]] = {}
    for ordinal, passage in enumerate(corpus):
        tokens = tokenize(passage.text)
        ids.append(passage.id)
        doc_lengths.append(len(tokens))
        for term, tf in sorted(Counter(tokens).items()):
            postings.setdefault(term, []).append((ordinal, tf))
    return InvertedIndex(ids, doc_lengths, postings, config)


def _idf(doc_count: int, df: int) -> float:
    return math.log(1.0 + (doc_count - df + 0.5) / (df + 0.5))


def _tf_weight(tf: int, doc_length: int, avg_doc_length: float, config: BM25Config) -> float:
    norm = 1.0 - config.b + config.b * (doc_length / avg_doc_length)
    return tf * (config.k1 + 1.0) / (tf + config.k1 * norm)


def bm25_score(index: InvertedIndex, query_tokens: Iterable[str], passage_id: str) -> float:
    """BM25 score of one passage for a query token multiset.

    Terms absent from the passage contribute 0; the score is additive
    over query-term multiplicity.
    """
    ordinal = index.ordinal(passage_id)
    doc_length = index.doc_lengths[ordinal]
    score = 0.0
    for term, multiplicity in Counter(query_tokens).items():
        plist = index.postings.get(term)
        if not plist:
            continue
        pos = bisect_left(plist, (ordinal,))
        if pos == len(plist) or plist[pos][0] != ordinal:
            continue
        tf = plist[pos][1]
        idf = _idf(index.doc_count, len(plist))
        score += multiplicity * idf * _tf_weight(tf, doc_length, index.avg_doc_length, index.config)
    return score


def search_sparse(index: InvertedIndex, query_tokens: Iterable[str], k: int) -> RankedList:
    """Top-k BM25 retrieval; only documents with score > 0 are returned."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    accum: dict[int, float] = {}
    for term, multiplicity in Counter(query_tokens).items():
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = _idf(index.doc_count, len(plist))
        for ordinal, tf in plist:
            weight = _tf_weight(tf, index.doc_lengths[ordinal], index.avg_doc_length, index.config)
            accum[ordinal] = accum.get(ordinal, 0.0) + multiplicity * idf * weight
    scored = [(index.ids[o], s) for o, s in accum.items() if s > 0.0]
    return RankedList.from_scores(scored, tag="sparse", k=k)


# ---------------------------------------------------------------------------
# Binary persistence. Layout (all integers little-endian):
#   magic "CQESPIDX", format version u32, then tagged sections, each
#   4-byte ASCII tag + u64 payload length + payload:
#     CONF  k1 f64, b f64
#     IDMP  count u64, then per id: u32 byte length + UTF-8 bytes
#     DLEN  count u64, then count x u32 token counts
#     POST  term count u64, then per term: u32 byte length + UTF-8 bytes,
#           u64 postings count, then pairs (ordinal u32, tf u32)
# Unknown sections are skipped on read.
# ---------------------------------------------------------------------------


def save_index(index: InvertedIndex, path: str) -> None:
    sections: list[tuple[bytes, bytes]] = []
    sections.append((b"CONF", struct.pack("<dd", index.config.k1, index.config.b)))

    parts = [struct.pack("<Q", index.doc_count)]
    for pid in index.ids:
        raw = pid.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)) + raw)
    sections.append((b"IDMP", b"".join(parts)))

    sections.append(
        (b"DLEN", struct.pack("<Q", index.doc_count) + struct.pack(f"<{index.doc_count}I", *index.doc_lengths))
    )

    parts = [struct.pack("<Q", len(index.postings))]
    for term in sorted(index.postings):
        raw = term.encode("utf-8")
        plist = index.postings[term]
        parts.append(struct.pack("<I", len(raw)) + raw + struct.pack("<Q", len(plist)))
        for ordinal, tf in plist:
            parts.append(struct.pack("<II", ordinal, tf))
    sections.append((b"POST", b"".join(parts)))

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        for tag, payload in sections:
            fh.write(tag)
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_index(path: str) -> InvertedIndex:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a sparse index file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 8)
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported index format version {version}")

    sections: dict[bytes, bytes] = {}
    offset = 12
    while offset < len(data):
        tag = data[offset : offset + 4]
        (length,) = struct.unpack_from("<Q", data, offset + 4)
        offset += 12
        sections[tag] = data[offset : offset + length]
        offset += length

    for tag in (b"CONF", b"IDMP", b"DLEN", b"POST"):
        if tag not in sections:
            raise ValueError(f"{path}: missing section {tag.decode()}")

    k1, b = struct.unpack("<dd", sections[b"CONF"])

    buf = sections[b"IDMP"]
    (count,) = struct.unpack_from("<Q", buf, 0)
    pos = 8
    ids = []
    for _ in range(count):
        (nbytes,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        ids.append(buf[pos : pos + nbytes].decode("utf-8"))
        pos += nbytes

    buf = sections[b"DLEN"]
    (count_l,) = struct.unpack_from("<Q", buf, 0)
    if count_l != count:
        raise ValueError(f"{path}: doc length count {count_l} != id count {count}")
    doc_lengths = list(struct.unpack_from(f"<{count_l}I", buf, 8))

    buf = sections[b"POST"]
    (n_terms,) = struct.unpack_from("<Q", buf, 0)
    pos = 8
    postings: dict[str, list[tuple[int, int]]] = {}
    for _ in range(n_terms):
        (nbytes,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        term = buf[pos : pos + nbytes].decode("utf-8")
        pos += nbytes
        (n_post,) = struct.unpack_from("<Q", buf, pos)
        pos += 8
        plist = []
        for _ in range(n_post):
            ordinal, tf = struct.unpack_from("<II", buf, pos)
            pos += 8
            plist.append((ordinal, tf))
        postings[term] = plist

    return InvertedIndex(ids, doc_lengths, postings, BM25Config(k1, b))
