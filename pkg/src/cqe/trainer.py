"""Weak-label construction and desk-scale query-encoder training.

Labels are built by retrieving BM25 candidates for each turn's rewritten
query and letting a teacher rescore them; the top teacher picks become
pseudo-positives. Training fine-tunes a small token-table query encoder
against a frozen passage store with an in-batch softmax objective,
optionally sampling negatives from the teacher-reranked pool and
optionally distilling the teacher's score distribution instead of using
one-hot positives. Plain gradient descent keeps every run bitwise
reproducible for a fixed seed.
"""

from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .corpus import Corpus, Passage, tokenize
from .core import Session, TokenEmbeddingMatrix
from .dense import PassageEmbeddingStore
from .sparse import InvertedIndex, search_sparse

UNK_TOKEN = "<unk>"


# ---------------------------------------------------------------------------
# Teachers
# ---------------------------------------------------------------------------


class HashingTextEmbedder:
    """Deterministic text embedder: tokens map to hash-seeded unit vectors.

    The embedding of a text is the mean of its token vectors, so related
    texts share components. Stable across processes and platforms.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError(f"dim must be >= 1, got {dim}")
        self.dim = dim
        self._cache: dict[str, np.ndarray] = {}

    def token_vector(self, token: str) -> np.ndarray:
        vec = self._cache.get(token)
        if vec is None:
            seed = int.from_bytes(hashlib.sha256(token.encode("utf-8")).digest()[:8], "little")
            vec = np.random.default_rng(seed).standard_normal(self.dim)
            vec /= np.linalg.norm(vec)
            self._cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        tokens = tokenize(text)
        if not tokens:
            return np.zeros(self.dim)
        return np.mean([self.token_vector(t) for t in tokens], axis=0)


class CosineTeacher:
    """Scores a passage by cosine between its stored vector and the embedded query."""

    def __init__(self, store: PassageEmbeddingStore, embedder: HashingTextEmbedder | None = None):
        self._store = store
        self._embedder = embedder or HashingTextEmbedder(store.dim)
        if self._embedder.dim != store.dim:
            raise ValueError("embedder and store dimensions differ")

    def score(self, query_text: str, passage: Passage) -> float:
        q = self._embedder.embed(query_text)
        v = self._store.vector(passage.id).astype(np.float64)
        nq = np.linalg.norm(q)
        nv = np.linalg.norm(v)
        if nq == 0.0 or nv == 0.0:
            return 0.0
        return float(q @ v / (nq * nv))


class TableTeacher:
    """File-backed score table keyed by (query text, passage id)."""

    def __init__(self, table: dict[tuple[str, str], float]):
        self._table = dict(table)

    @classmethod
    def from_file(cls, path: str) -> TableTeacher:
        """Read JSON-lines of {"query", "id", "score"} records."""
        table: dict[tuple[str, str], float] = {}
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                try:
                    obj = json.loads(line)
                    table[(obj["query"], obj["id"])] = float(obj["score"])
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad score record: {exc}") from None
        return cls(table)

    def score(self, query_text: str, passage: Passage) -> float:
        try:
            return self._table[(query_text, passage.id)]
        except KeyError:
            raise ValueError(
                f"no teacher score for query {query_text!r} and passage {passage.id!r}"
            ) from None


# ---------------------------------------------------------------------------
# Weak labels
# ---------------------------------------------------------------------------


@dataclass
class TurnLabels:
    """Pseudo-relevance labels for one query turn."""

    qid: str
    rewrite: str
    positives: list[str]
    bm25_pool: list[str]
    teacher_pool: list[tuple[str, float]]


@dataclass
class WeakLabelSet:
    turns: list[TurnLabels] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.turns)

    def __iter__(self):
        return iter(self.turns)

    def get(self, qid: str) -> TurnLabels:
        for t in self.turns:
            if t.qid == qid:
                return t
        raise KeyError(f"no labels for turn {qid!r}")


def build_weak_labels(
    corpus: Corpus,
    sessions: Sequence[Session],
    index: InvertedIndex,
    teacher,
    candidate_depth: int = 1000,
    pool_size: int = 200,
) -> WeakLabelSet:
    """Label every rewritten turn with teacher-picked positives.

    Per turn: retrieve BM25 candidates for the rewrite (up to
    candidate_depth, capped at the corpus size), rescore the pool with the
    teacher, keep the teacher's top 3 as positives, and record the top
    pool_size ids of both orderings. Turns with fewer than 3 candidates
    are skipped with a warning.
    """
    turns = []
    for session in sessions:
        for i, turn in enumerate(session.turns):
            qid = session.qid(i)
            if turn.manual_rewrite is None:
                raise ValueError(f"turn {qid!r} has no manual rewrite")
            depth = min(candidate_depth, len(corpus))
            candidates = search_sparse(index, tokenize(turn.manual_rewrite), depth)
            if len(candidates) < 3:
                warnings.warn(
                    f"skipping turn {qid!r}: only {len(candidates)} retrievable candidates"
                )
                continue
            rescored = sorted(
                (
                    (e.docid, float(teacher.score(turn.manual_rewrite, corpus[e.docid])))
                    for e in candidates
                ),
                key=lambda it: (-it[1], it[0]),
            )
            turns.append(
                TurnLabels(
                    qid=qid,
                    rewrite=turn.manual_rewrite,
                    positives=[d for d, _ in rescored[:3]],
                    bm25_pool=candidates.docids()[:pool_size],
                    teacher_pool=rescored[:pool_size],
                )
            )
    return WeakLabelSet(turns)


def save_weak_labels(labels: WeakLabelSet, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for t in labels:
            obj = {
                "qid": t.qid,
                "rewrite": t.rewrite,
                "positives": t.positives,
                "bm25_pool": t.bm25_pool,
                "teacher_pool": [{"id": d, "score": s} for d, s in t.teacher_pool],
            }
            fh.write(json.dumps(obj, ensure_ascii=False))
            fh.write("\n")


def load_weak_labels(path: str) -> WeakLabelSet:
    turns = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
                turns.append(
                    TurnLabels(
                        qid=obj["qid"],
                        rewrite=obj["rewrite"],
                        positives=list(obj["positives"]),
                        bm25_pool=list(obj["bm25_pool"]),
                        teacher_pool=[(r["id"], float(r["score"])) for r in obj["teacher_pool"]],
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: bad label record: {exc}") from None
    return WeakLabelSet(turns)


# ---------------------------------------------------------------------------
# Triplet sampling
# ---------------------------------------------------------------------------


@dataclass
class TrainingInstance:
    """One (conversational query, positive, negative) training triplet."""

    qid: str
    context_tokens: list[str]
    query_tokens: list[str]
    rewrite: str
    positive_id: str
    negative_id: str
    teacher_scores: dict[str, float] | None = None

    def __post_init__(self) -> None:
        if self.positive_id == self.negative_id:
            raise ValueError("positive and negative must differ")


class TripletSampler:
    """Samples triplets: uniform positives, per-epoch no-replacement negatives.

    Negatives come from the BM25 pool, or from the teacher-reranked pool
    when hard negatives are enabled, always excluding the positives. Each
    turn's negatives are consumed without replacement; :meth:`reset`
    starts a new epoch, and an exhausted pool restarts with a warning.
    """

    def __init__(
        self,
        labels: WeakLabelSet,
        sessions: Sequence[Session],
        rng: np.random.Generator,
        use_hard_negatives: bool = False,
    ):
        self._labels = {t.qid: t for t in labels.turns}
        self._turn_map: dict[str, tuple[Session, int]] = {}
        for session in sessions:
            for i in range(len(session.turns)):
                self._turn_map[session.qid(i)] = (session, i)
        for qid in self._labels:
            if qid not in self._turn_map:
                raise ValueError(f"labels refer to unknown turn {qid!r}")
        self._rng = rng
        self._hard = use_hard_negatives
        self._queues: dict[str, list[str]] = {}
        self._filled: set[str] = set()

    def reset(self) -> None:
        """Start a new epoch: all negative pools are replenished."""
        self._queues.clear()
        self._filled.clear()

    def sample(self, qid: str) -> TrainingInstance:
        try:
            lab = self._labels[qid]
        except KeyError:
            raise ValueError(f"no labels for turn {qid!r}") from None
        positive = lab.positives[int(self._rng.integers(len(lab.positives)))]

        queue = self._queues.get(qid)
        if not queue:
            pool = [d for d, _ in lab.teacher_pool] if self._hard else list(lab.bm25_pool)
            positives = set(lab.positives)
            eligible = [d for d in pool if d not in positives]
            if not eligible:
                raise ValueError(f"turn {qid!r} has no eligible negatives")
            if qid in self._filled:
                warnings.warn(f"negative pool for turn {qid!r} exhausted; restarting")
            order = self._rng.permutation(len(eligible))
            queue = [eligible[i] for i in order]
            self._queues[qid] = queue
            self._filled.add(qid)
        negative = queue.pop()

        session, turn_index = self._turn_map[qid]
        context_tokens, query_tokens = session.tokens_for_turn(turn_index)
        return TrainingInstance(
            qid=qid,
            context_tokens=context_tokens,
            query_tokens=query_tokens,
            rewrite=lab.rewrite,
            positive_id=positive,
            negative_id=negative,
        )


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def _log_softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def contrastive_loss(
    query_vecs: np.ndarray,
    passage_vecs: np.ndarray,
    positive_indices: Sequence[int],
    tau: float,
) -> tuple[float, np.ndarray]:
    """In-batch softmax loss over temperature-scaled inner products.

    Each query is scored against every batch passage; the loss is the mean
    negative log-probability of its single positive. Returns the loss and
    its gradient with respect to each query vector.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be > 0, got {tau}")
    query_vecs = np.asarray(query_vecs, dtype=np.float64)
    passage_vecs = np.asarray(passage_vecs, dtype=np.float64)
    n_queries = query_vecs.shape[0]
    n_passages = passage_vecs.shape[0]
    pos = list(positive_indices)
    if len(pos) != n_queries or any(p is None or not (0 <= p < n_passages) for p in pos):
        raise ValueError("each query needs exactly one positive index into the batch pool")

    logp = _log_softmax(query_vecs @ passage_vecs.T / tau)
    rows = np.arange(n_queries)
    loss = float(-logp[rows, pos].mean())
    probs = np.exp(logp)
    grad = (probs @ passage_vecs - passage_vecs[pos]) / (n_queries * tau)
    return loss, grad


def distill_loss(
    student_scores: np.ndarray, teacher_scores: np.ndarray, tau: float
) -> tuple[float, np.ndarray]:
    """KL divergence from the teacher's to the student's softmaxed scores.

    Both score vectors are softmax-normalized at temperature tau; the loss
    is KL(teacher || student). Returns the loss and its gradient with
    respect to the student scores.
    """
    if tau <= 0.0:
        raise ValueError(f"tau must be > 0, got {tau}")
    student = np.asarray(student_scores, dtype=np.float64)
    teacher = np.asarray(teacher_scores, dtype=np.float64)
    if student.shape != teacher.shape or student.ndim != 1:
        raise ValueError("student and teacher score lists must have equal length")
    if student.shape[0] < 2:
        raise ValueError("distillation needs at least 2 scores")

    log_s = _log_softmax(student / tau)
    log_t = _log_softmax(teacher / tau)
    p_t = np.exp(log_t)
    loss = float(np.sum(p_t * (log_t - log_s)))
    grad = (np.exp(log_s) - p_t) / tau
    return loss, grad


# ---------------------------------------------------------------------------
# Toy query encoder
# ---------------------------------------------------------------------------


class ToyQueryEncoder:
    """Trainable token-table encoder: row lookup followed by a shared projection.

    encode() emits a token embedding matrix whose rows are
    embedding[token] @ projection; unknown tokens share a dedicated row.
    Small enough to train by hand yet exercises the full pooled-scoring
    path, including per-token norm adaptation.
    """

    def __init__(self, vocab: dict[str, int], embedding: np.ndarray, projection: np.ndarray):
        embedding = np.asarray(embedding, dtype=np.float64)
        projection = np.asarray(projection, dtype=np.float64)
        if embedding.ndim != 2:
            raise ValueError("embedding table must be 2-D")
        dim = embedding.shape[1]
        if projection.shape != (dim, dim):
            raise ValueError(f"projection must be {dim}x{dim}")
        if UNK_TOKEN not in vocab:
            raise ValueError(f"vocabulary must include {UNK_TOKEN!r}")
        if sorted(vocab.values()) != list(range(embedding.shape[0])):
            raise ValueError("vocabulary indices must cover the embedding rows exactly")
        self.vocab = dict(vocab)
        self.embedding = embedding
        self.projection = projection
        self._unk = vocab[UNK_TOKEN]

    @classmethod
    def create(cls, tokens, dim: int, seed: int = 0) -> ToyQueryEncoder:
        """Random-initialized encoder over the given token inventory."""
        vocab = {UNK_TOKEN: 0}
        for t in sorted(set(tokens)):
            if t not in vocab:
                vocab[t] = len(vocab)
        rng = np.random.default_rng(seed)
        embedding = rng.standard_normal((len(vocab), dim)) / math.sqrt(dim)
        return cls(vocab, embedding, np.eye(dim))

    @property
    def dim(self) -> int:
        return self.embedding.shape[1]

    def token_indices(self, tokens: Sequence[str]) -> np.ndarray:
        return np.array([self.vocab.get(t, self._unk) for t in tokens], dtype=np.int64)

    def encode(self, context_tokens: Sequence[str], query_tokens: Sequence[str]) -> TokenEmbeddingMatrix:
        tokens = list(context_tokens) + list(query_tokens)
        if not tokens:
            raise ValueError("cannot encode an empty turn")
        rows = self.embedding[self.token_indices(tokens)] @ self.projection
        return TokenEmbeddingMatrix(tokens, rows, len(context_tokens))

    def copy(self) -> ToyQueryEncoder:
        return ToyQueryEncoder(self.vocab, self.embedding.copy(), self.projection.copy())

    def save(self, manifest_path: str) -> None:
        """Manifest JSON plus f32 parameter blobs and a vocab line file."""
        base = manifest_path[:-5] if manifest_path.endswith(".json") else manifest_path
        with open(manifest_path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump({"dim": self.dim, "vocab_size": len(self.vocab), "dtype": "f32le"}, fh)
            fh.write("\n")
        with open(base + ".emb.f32", "wb") as fh:
            fh.write(self.embedding.astype("<f4").tobytes())
        with open(base + ".proj.f32", "wb") as fh:
            fh.write(self.projection.astype("<f4").tobytes())
        by_index = sorted(self.vocab, key=self.vocab.get)
        with open(base + ".vocab", "w", encoding="utf-8", newline="\n") as fh:
            for token in by_index:
                fh.write(token)
                fh.write("\n")

    @classmethod
    def load(cls, manifest_path: str) -> ToyQueryEncoder:
        base = manifest_path[:-5] if manifest_path.endswith(".json") else manifest_path
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
        dim = manifest["dim"]
        vocab_size = manifest["vocab_size"]
        if manifest.get("dtype") != "f32le":
            raise ValueError(f"{manifest_path}: unsupported dtype {manifest.get('dtype')!r}")
        embedding = np.fromfile(base + ".emb.f32", dtype="<f4")
        if embedding.size != vocab_size * dim:
            raise ValueError(f"{base}.emb.f32: size does not match {vocab_size}x{dim}")
        projection = np.fromfile(base + ".proj.f32", dtype="<f4")
        if projection.size != dim * dim:
            raise ValueError(f"{base}.proj.f32: size does not match {dim}x{dim}")
        with open(base + ".vocab", encoding="utf-8") as fh:
            tokens = fh.read().splitlines()
        if len(tokens) != vocab_size:
            raise ValueError(f"{base}.vocab: {len(tokens)} tokens != declared {vocab_size}")
        vocab = {t: i for i, t in enumerate(tokens)}
        return cls(
            vocab,
            embedding.astype(np.float64).reshape(vocab_size, dim),
            projection.astype(np.float64).reshape(dim, dim),
        )


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    """Desk-scale training settings; defaults suit corpora of a few hundred passages."""

    tau: float = 1.0
    learning_rate: float = 0.5
    batch_size: int = 10
    steps: int = 1200
    seed: int = 0
    use_hard_negatives: bool = False
    use_soft_labels: bool = False

    def __post_init__(self) -> None:
        if not (self.tau > 0.0):
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.learning_rate < 0.0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")


@dataclass
class TrainResult:
    encoder: ToyQueryEncoder
    losses: list[float]


def batch_gradients(
    encoder: ToyQueryEncoder,
    instances: Sequence[TrainingInstance],
    pool_ids: Sequence[str],
    passage_vecs: np.ndarray,
    tau: float,
    use_soft_labels: bool = False,
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and parameter gradients for one batch against fixed passages.

    Query vectors are the pooled encoder rows for each instance's
    context+query tokens; gradients flow back through the pooling mean and
    the shared projection into the embedding table. With soft labels the
    objective is the mean distillation loss over per-query score vectors
    (teacher scores must be attached to each instance); otherwise it is
    the in-batch softmax loss.
    """
    index_of = {pid: i for i, pid in enumerate(pool_ids)}
    passage_vecs = np.asarray(passage_vecs, dtype=np.float64)
    n_queries = len(instances)

    token_idx = []
    query_vecs = np.empty((n_queries, encoder.dim))
    for i, inst in enumerate(instances):
        idx = encoder.token_indices(list(inst.context_tokens) + list(inst.query_tokens))
        if idx.size == 0:
            raise ValueError(f"turn {inst.qid!r} has no tokens to encode")
        token_idx.append(idx)
        rows = encoder.embedding[idx] @ encoder.projection
        # same anchored mean as core.pool; the gradient is 1/n per row either way
        query_vecs[i] = rows[0] + (rows - rows[0]).mean(axis=0)

    if use_soft_labels:
        total = 0.0
        grad_q = np.empty_like(query_vecs)
        for i, inst in enumerate(instances):
            if inst.teacher_scores is None:
                raise ValueError(f"instance {inst.qid!r} lacks teacher scores")
            student = query_vecs[i] @ passage_vecs.T
            teacher = np.array([inst.teacher_scores[pid] for pid in pool_ids])
            item_loss, grad_s = distill_loss(student, teacher, tau)
            total += item_loss
            grad_q[i] = grad_s @ passage_vecs
        loss = total / n_queries
        grad_q /= n_queries
    else:
        positives = [index_of[inst.positive_id] for inst in instances]
        loss, grad_q = contrastive_loss(query_vecs, passage_vecs, positives, tau)

    grad_embedding = np.zeros_like(encoder.embedding)
    grad_projection = np.zeros_like(encoder.projection)
    for i, idx in enumerate(token_idx):
        per_row = grad_q[i] / idx.size
        grad_projection += np.outer(encoder.embedding[idx].sum(axis=0), per_row)
        np.add.at(grad_embedding, idx, per_row @ encoder.projection.T)
    return loss, grad_embedding, grad_projection


def train(
    encoder: ToyQueryEncoder,
    labels: WeakLabelSet,
    sessions: Sequence[Session],
    store: PassageEmbeddingStore,
    config: TrainConfig,
    teacher=None,
    corpus: Corpus | None = None,
) -> TrainResult:
    """Gradient-descent fine-tuning of the query encoder; passages stay frozen.

    Batches cycle through the labeled turns in order; each full pass is an
    epoch and resets the no-replacement negative pools. Soft-label runs
    need a teacher and the corpus so every in-batch query-passage pair can
    be scored. Fully deterministic for a fixed seed.
    """
    if config.use_soft_labels and (teacher is None or corpus is None):
        raise ValueError("soft-label training requires a teacher and the corpus")
    order = [t.qid for t in labels.turns]
    if not order:
        raise ValueError("no labeled turns to train on")
    missing = sorted(
        {pid for t in labels.turns for pid in t.positives + t.bm25_pool if pid not in store}
        | {pid for t in labels.turns for pid, _ in t.teacher_pool if pid not in store}
    )
    if missing:
        raise ValueError(f"passage store is missing labeled ids: {missing[:5]}")

    rng = np.random.default_rng(config.seed)
    sampler = TripletSampler(labels, sessions, rng, config.use_hard_negatives)
    losses: list[float] = []
    cursor = 0
    for step in range(config.steps):
        batch = []
        for _ in range(config.batch_size):
            if cursor == len(order):
                cursor = 0
                sampler.reset()
            batch.append(sampler.sample(order[cursor]))
            cursor += 1

        pool_ids: list[str] = []
        seen: set[str] = set()
        for inst in batch:
            for pid in (inst.positive_id, inst.negative_id):
                if pid not in seen:
                    seen.add(pid)
                    pool_ids.append(pid)
        passage_vecs = np.stack([store.vector(pid).astype(np.float64) for pid in pool_ids])

        if config.use_soft_labels:
            for inst in batch:
                inst.teacher_scores = {
                    pid: float(teacher.score(inst.rewrite, corpus[pid])) for pid in pool_ids
                }

        loss, grad_emb, grad_proj = batch_gradients(
            encoder, batch, pool_ids, passage_vecs, config.tau, config.use_soft_labels
        )
        if not math.isfinite(loss):
            raise RuntimeError(f"non-finite loss at step {step}")
        losses.append(loss)
        encoder.embedding -= config.learning_rate * grad_emb
        encoder.projection -= config.learning_rate * grad_proj
    return TrainResult(encoder, losses)
