"""Rank fusion: min-substitution score combination and reciprocal rank fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .ranking import RankedList


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.1
    rrf_k: float = 60.0

    def __post_init__(self) -> None:
        if not (self.alpha >= 0.0):
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not (self.rrf_k > 0.0):
            raise ValueError(f"rrf_k must be > 0, got {self.rrf_k}")


def hybrid_combine(
    sparse: RankedList, dense: RankedList, config: FusionConfig | None = None
) -> RankedList:
    """Combine sparse and dense lists as alpha * sparse score + dense score.

    A document missing from one list takes that list's minimum observed
    score as a substitute. The output covers the full union of both lists;
    callers truncate to the depth they need.
    """
    config = config or FusionConfig()
    if not sparse.entries or not dense.entries:
        raise ValueError("hybrid_combine requires two non-empty lists")
    sp = sparse.scores()
    ds = dense.scores()
    min_sp = min(sp.values())
    min_ds = min(ds.values())
    combined = [
        (docid, config.alpha * sp.get(docid, min_sp) + ds.get(docid, min_ds))
        for docid in sp.keys() | ds.keys()
    ]
    return RankedList.from_scores(combined, tag="hybrid")


def rrf(lists: Sequence[RankedList], config: FusionConfig | None = None) -> RankedList:
    """Reciprocal rank fusion: score(d) = sum over lists of 1/(rrf_k + rank)."""
    config = config or FusionConfig()
    if not lists:
        raise ValueError("rrf requires at least one list")
    accum: dict[str, float] = {}
    for ranked in lists:
        for entry in ranked:
            accum[entry.docid] = accum.get(entry.docid, 0.0) + 1.0 / (config.rrf_k + entry.rank)
    return RankedList.from_scores(accum.items(), tag="rrf")
