"""Deterministic planted dataset for demos and end-to-end verification.

Each session revolves around one topic token that appears in its first
utterance (and in every manual rewrite). Passages containing a topic token
cluster around that token's direction in the hash-embedding space, so the
cosine teacher reliably prefers them; a shared "filler" token appears in
every session's context as a distractor that predicts nothing. The last
turn of each session is held out from training.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .corpus import Corpus, Passage, save_corpus
from .core import Session, Turn, save_sessions
from .dense import PassageEmbeddingStore, save_embeddings
from .evaluation import Qrels, write_qrels
from .trainer import CosineTeacher, HashingTextEmbedder

DISTRACTOR_TOKEN = "filler"

_FOLLOWUP_TURNS = [
    "why did it change over time",
    "what happened after that",
    "how did it end",
    "who was involved in it",
]


@dataclass
class PlantedDataset:
    corpus: Corpus
    sessions: list[Session]
    store: PassageEmbeddingStore
    qrels: Qrels
    teacher: CosineTeacher
    held_out_qids: list[str]
    topic_tokens: list[str]
    distractor_token: str


def make_planted_dataset(
    seed: int = 7,
    n_sessions: int = 10,
    turns_per_session: int = 3,
    cluster_size: int = 6,
    n_background: int = 40,
    dim: int = 32,
) -> PlantedDataset:
    if turns_per_session < 2:
        raise ValueError("need at least 2 turns per session to hold one out")
    if turns_per_session - 1 > len(_FOLLOWUP_TURNS):
        raise ValueError(f"at most {len(_FOLLOWUP_TURNS) + 1} turns per session")
    rng = np.random.default_rng(seed)
    words = [f"word{i}" for i in range(30)]
    topics = [f"topic{s}" for s in range(n_sessions)]

    passages = []
    for s, topic in enumerate(topics):
        for c in range(cluster_size):
            fillers = " ".join(rng.choice(words, size=5, replace=True))
            passages.append(Passage(f"P{s:02d}C{c}", f"{topic} {fillers}"))
    for i in range(n_background):
        fillers = " ".join(rng.choice(words, size=6, replace=True))
        passages.append(Passage(f"BG{i:02d}", fillers))
    corpus = Corpus(passages)

    embedder = HashingTextEmbedder(dim)
    vectors = np.stack([embedder.embed(p.text) for p in corpus])
    vectors /= np.linalg.norm(vectors, axis=1, keepdims=True)
    store = PassageEmbeddingStore([p.id for p in corpus], vectors.astype(np.float32))
    teacher = CosineTeacher(store, embedder)

    sessions = []
    qrels: Qrels = {}
    held_out = []
    for s, topic in enumerate(topics):
        turns = [Turn(f"{topic} {DISTRACTOR_TOKEN} overview", f"{topic} {DISTRACTOR_TOKEN} overview")]
        for t in range(1, turns_per_session):
            raw = _FOLLOWUP_TURNS[t - 1]
            turns.append(Turn(raw, f"{raw} {topic}"))
        session = Session(f"s{s}", turns)
        sessions.append(session)
        held_out.append(session.qid(turns_per_session - 1))
        cluster = {f"P{s:02d}C{c}": 3 if c % 2 == 0 else 2 for c in range(cluster_size)}
        for t in range(turns_per_session):
            qrels[session.qid(t)] = dict(cluster)

    return PlantedDataset(
        corpus=corpus,
        sessions=sessions,
        store=store,
        qrels=qrels,
        teacher=teacher,
        held_out_qids=held_out,
        topic_tokens=topics,
        distractor_token=DISTRACTOR_TOKEN,
    )


def write_planted_dataset(dataset: PlantedDataset, directory: str) -> dict[str, str]:
    """Materialize the dataset files a CLI pipeline consumes.

    Returns the paths written: corpus, sessions, store manifest, full
    qrels, and qrels restricted to the held-out turns.
    """
    os.makedirs(directory, exist_ok=True)
    paths = {
        "corpus": os.path.join(directory, "corpus.jsonl"),
        "sessions": os.path.join(directory, "sessions.jsonl"),
        "store": os.path.join(directory, "store.json"),
        "qrels": os.path.join(directory, "qrels.txt"),
        "qrels_held_out": os.path.join(directory, "qrels_held_out.txt"),
    }
    save_corpus(dataset.corpus, paths["corpus"])
    save_sessions(dataset.sessions, paths["sessions"])
    save_embeddings(dataset.store, paths["store"])
    write_qrels(dataset.qrels, paths["qrels"])
    held = {q: dataset.qrels[q] for q in dataset.held_out_qids}
    write_qrels(held, paths["qrels_held_out"])
    return paths
