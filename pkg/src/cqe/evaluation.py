"""TREC-style effectiveness evaluation.

Implements nDCG with linear gains and a log2(rank+1) discount, recall at a
cutoff counting judgments at or above a minimum grade, per-query win/tie
comparison, and a two-sided paired t-test. Run and qrels files use the
standard whitespace-separated TREC formats.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import betainc

from .ranking import RankedEntry, RankedList

Qrels = dict[str, dict[str, int]]

MAX_GRADE = 4
TIE_EPS = 1e-9


@dataclass
class MetricReport:
    """Per-query metric values; the mean is over evaluated queries only."""

    metric_name: str
    cutoff: int
    per_query: dict[str, float]

    @property
    def mean(self) -> float:
        if not self.per_query:
            return 0.0
        return sum(self.per_query.values()) / len(self.per_query)


def _evaluable_qids(run: Mapping[str, RankedList], qrels: Mapping[str, Mapping[str, int]]):
    for qid in sorted(run):
        if qid not in qrels:
            warnings.warn(f"query {qid!r} has no judgments; excluded from evaluation")
            continue
        yield qid


def _dcg(grades: Sequence[int]) -> float:
    return sum(g / math.log2(r + 1) for r, g in enumerate(grades, start=1))


def ndcg(
    run: Mapping[str, RankedList], qrels: Mapping[str, Mapping[str, int]], cutoff: int
) -> MetricReport:
    """Normalized discounted cumulative gain at a cutoff.

    Queries whose judgments carry zero total grade are excluded from the
    report, as are run queries absent from the qrels (with a warning).
    """
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    per_query: dict[str, float] = {}
    for qid in _evaluable_qids(run, qrels):
        judged = qrels[qid]
        if sum(judged.values()) == 0:
            continue
        gains = [judged.get(e.docid, 0) for e in run[qid].entries[:cutoff]]
        ideal = sorted(judged.values(), reverse=True)[:cutoff]
        per_query[qid] = _dcg(gains) / _dcg(ideal)
    return MetricReport("ndcg", cutoff, per_query)


def recall_at(
    run: Mapping[str, RankedList],
    qrels: Mapping[str, Mapping[str, int]],
    cutoff: int = 1000,
    min_grade: int = 2,
) -> MetricReport:
    """Fraction of passages graded >= min_grade retrieved within the cutoff."""
    if cutoff < 1:
        raise ValueError(f"cutoff must be >= 1, got {cutoff}")
    per_query: dict[str, float] = {}
    for qid in _evaluable_qids(run, qrels):
        positives = {d for d, g in qrels[qid].items() if g >= min_grade}
        if not positives:
            continue
        retrieved = {e.docid for e in run[qid].entries[:cutoff]}
        per_query[qid] = len(retrieved & positives) / len(positives)
    return MetricReport("recall", cutoff, per_query)


def win_tie(system: MetricReport, baseline: MetricReport) -> tuple[int, int]:
    """Count queries where the system beats or ties the baseline.

    A win needs a margin above 1e-9; differences within 1e-9 are ties.
    """
    if system.per_query.keys() != baseline.per_query.keys():
        raise ValueError("win_tie requires reports over the same query set")
    wins = ties = 0
    for qid, value in system.per_query.items():
        diff = value - baseline.per_query[qid]
        if diff > TIE_EPS:
            wins += 1
        elif abs(diff) <= TIE_EPS:
            ties += 1
    return wins, ties


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test over per-query values.

    Returns (t, p) with p computed from the Student-t distribution with
    n-1 degrees of freedom via the regularized incomplete beta function.
    All-zero differences give (0.0, 1.0).
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired_t_test requires two equal-length 1-D sequences")
    n = a.shape[0]
    if n < 2:
        raise ValueError(f"paired_t_test requires n >= 2, got {n}")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    dof = n - 1
    p = float(betainc(dof / 2.0, 0.5, dof / (dof + t * t)))
    return t, p


# ---------------------------------------------------------------------------
# TREC file formats. Run: "qid Q0 docid rank score tag"; qrels:
# "qid 0 docid grade". UTF-8, LF endings, single spaces.
# ---------------------------------------------------------------------------


def write_run(path: str, runs: Mapping[str, RankedList], tag: str | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(runs):
            ranked = runs[qid]
            line_tag = tag or ranked.tag
            for e in ranked:
                fh.write(f"{qid} Q0 {e.docid} {e.rank} {float(e.score)!r} {line_tag}\n")


def read_run(path: str) -> dict[str, RankedList]:
    """Parse a TREC run file into per-query ranked lists.

    Score-order or rank-numbering violations produce warnings; duplicate
    documents within a query are errors.
    """
    grouped: dict[str, list[RankedEntry]] = {}
    tags: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 6:
                raise ValueError(f"{path}:{lineno}: expected 6 fields, got {len(fields)}")
            qid, _, docid, rank, score, tag = fields
            grouped.setdefault(qid, []).append(RankedEntry(docid, float(score), int(rank)))
            tags[qid] = tag

    runs: dict[str, RankedList] = {}
    for qid, entries in grouped.items():
        docids = [e.docid for e in entries]
        if len(set(docids)) != len(docids):
            raise ValueError(f"{path}: duplicate docid for query {qid!r}")
        for i, e in enumerate(entries):
            if e.rank != i + 1:
                warnings.warn(f"{path}: query {qid!r} rank {e.rank} at position {i + 1}")
                break
        if any(entries[i].score < entries[i + 1].score for i in range(len(entries) - 1)):
            warnings.warn(f"{path}: query {qid!r} scores are not non-increasing")
        runs[qid] = RankedList(entries, tags[qid])
    return runs


def write_qrels(qrels: Mapping[str, Mapping[str, int]], path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for qid in sorted(qrels):
            for docid in sorted(qrels[qid]):
                fh.write(f"{qid} 0 {docid} {qrels[qid][docid]}\n")


def read_qrels(path: str) -> Qrels:
    qrels: Qrels = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 fields, got {len(fields)}")
            qid, _, docid, grade = fields
            g = int(grade)
            if not (0 <= g <= MAX_GRADE):
                raise ValueError(f"{path}:{lineno}: grade {g} outside 0..{MAX_GRADE}")
            if docid in qrels.get(qid, {}):
                raise ValueError(f"{path}:{lineno}: duplicate judgment for {qid!r}/{docid!r}")
            qrels.setdefault(qid, {})[docid] = g
    return qrels
