"""Passage corpus: tokenization, JSON-lines loading, and id lookup."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from typing import Iterable, Iterator

_TOKEN_RE = re.compile(r"[A-Za-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Split text into lowercase tokens.

    A token is a maximal run of ASCII alphanumeric characters; every other
    character acts as a separator. No stemming or stopword removal, so the
    rule is deterministic and cheap.
    """
    return [m.group(0).lower() for m in _TOKEN_RE.finditer(text)]


@dataclass(frozen=True)
class Passage:
    """One searchable text unit with a whitespace-free unique id."""

    id: str
    text: str

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("passage id must be non-empty")
        if any(c.isspace() for c in self.id):
            raise ValueError(f"passage id {self.id!r} contains whitespace")


class Corpus:
    """Immutable ordered collection of passages with lookup by id."""

    def __init__(self, passages: Iterable[Passage]):
        self._passages = list(passages)
        self._by_id: dict[str, Passage] = {}
        for p in self._passages:
            if p.id in self._by_id:
                raise ValueError(f"duplicate passage id {p.id!r}")
            self._by_id[p.id] = p

    @property
    def passages(self) -> list[Passage]:
        return list(self._passages)

    @property
    def count(self) -> int:
        return len(self._passages)

    def __len__(self) -> int:
        return len(self._passages)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self._passages)

    def __contains__(self, passage_id: str) -> bool:
        return passage_id in self._by_id

    def __getitem__(self, passage_id: str) -> Passage:
        try:
            return self._by_id[passage_id]
        except KeyError:
            raise KeyError(f"unknown passage id {passage_id!r}") from None

    def get(self, passage_id: str) -> Passage | None:
        return self._by_id.get(passage_id)


def load_corpus(path: str) -> Corpus:
    """Read a JSON-lines corpus file: one {"id", "text"} object per line.

    Line order is preserved. Malformed lines are reported with their
    1-based line number; duplicate or empty ids are rejected.
    """
    passages = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{lineno}: malformed JSON line: {exc}") from None
            if not isinstance(obj, dict):
                raise ValueError(f"{path}:{lineno}: expected a JSON object")
            pid = obj.get("id")
            text = obj.get("text")
            if not isinstance(pid, str) or not isinstance(text, str):
                raise ValueError(f'{path}:{lineno}: "id" and "text" must be strings')
            if pid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate passage id {pid!r}")
            seen.add(pid)
            passages.append(Passage(pid, text))
    return Corpus(passages)


def save_corpus(corpus: Corpus, path: str) -> None:
    """Write a corpus as UTF-8 JSON-lines with LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in corpus:
            fh.write(json.dumps({"id": p.id, "text": p.text}, ensure_ascii=False))
            fh.write("\n")
