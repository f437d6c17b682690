"""BM25 memory over image-text pairs.

The memory is a list of (caption, image_ref) pairs; captions are the keys
a query is matched against and image refs are the values carried along.
Scoring is Okapi BM25 with the non-negative log(1 + ...) IDF, so every
score is >= 0 and only documents sharing a term with the query can score
above zero.
"""

from __future__ import annotations

import json
import logging
import re
from bisect import bisect_left
from dataclasses import dataclass, field
from math import log
from pathlib import Path

from .serialization import CorruptFileError, FrameReader, FrameWriter

logger = logging.getLogger(__name__)

INDEX_MAGIC = b"VIMI-IDX1"
INDEX_VERSION = 1

_TOKEN_RE = re.compile(r"[^\W_]+", re.UNICODE)


class DuplicateIdError(Exception):
    """Two corpus pairs share an id."""


class UnknownDocError(Exception):
    """Requested doc_id is not in the index."""


class InvalidKError(Exception):
    """retrieve() called with K < 1."""


class CorruptIndexError(CorruptFileError):
    """Index file failed magic/checksum/structure validation."""


class CorpusFormatError(Exception):
    """A corpus JSONL line could not be parsed."""

    def __init__(self, line_no: int, reason: str):
        super().__init__(f"corpus line {line_no}: {reason}")
        self.line_no = line_no


@dataclass(frozen=True)
class ImageTextPair:
    """One memory entry: the caption is the key, the image ref the value."""

    id: str
    caption: str
    image_ref: str


@dataclass(frozen=True)
class BM25Params:
    k1: float = 1.2
    b: float = 0.75


@dataclass(frozen=True)
class RetrievalResult:
    query: str
    pairs: list[tuple[ImageTextPair, float]]

    def __len__(self) -> int:
        return len(self.pairs)

    def to_dict(self) -> dict:
        return {
            "query": self.query,
            "results": [
                {"id": p.id, "caption": p.caption, "image_ref": p.image_ref, "score": s}
                for p, s in self.pairs
            ],
        }


def tokenize(text: str) -> list[str]:
    """Lowercase and split on Unicode non-alphanumeric boundaries.

    Underscore counts as a boundary. Total function: any input (including
    empty) yields a list, possibly empty.
    """
    return _TOKEN_RE.findall(text.lower())


@dataclass
class RetrievalIndex:
    """Inverted index over a corpus of image-text pairs.

    Documents are held sorted by id, so internal indices ascend with ids
    and posting lists sorted by index are also sorted by doc id. Immutable
    after build; safe for concurrent readers.
    """

    params: BM25Params
    docs: list[ImageTextPair] = field(default_factory=list)
    doc_lengths: list[int] = field(default_factory=list)
    postings: dict[str, list[tuple[int, int]]] = field(default_factory=dict)
    avg_doc_len: float = 0.0

    @property
    def doc_count(self) -> int:
        return len(self.docs)

    def doc_index(self, doc_id: str) -> int:
        i = bisect_left(self.docs, doc_id, key=lambda p: p.id)
        if i == len(self.docs) or self.docs[i].id != doc_id:
            raise UnknownDocError(f"doc_id {doc_id!r} not in index")
        return i

    def idf(self, term: str) -> float:
        df = len(self.postings.get(term, ()))
        if df == 0:
            return 0.0
        return log((self.doc_count - df + 0.5) / (df + 0.5) + 1.0)

    def term_frequency(self, term: str, doc_index: int) -> int:
        plist = self.postings.get(term)
        if not plist:
            return 0
        i = bisect_left(plist, doc_index, key=lambda e: e[0])
        if i < len(plist) and plist[i][0] == doc_index:
            return plist[i][1]
        return 0

    def validate(self) -> None:
        """Assert the structural invariants; used by tests and after load."""
        if self.doc_count > 0:
            total = sum(self.doc_lengths)
            assert abs(total / self.doc_count - self.avg_doc_len) < 1e-9
            assert self.avg_doc_len > 0
        assert len(self.doc_lengths) == self.doc_count
        ids = [p.id for p in self.docs]
        assert ids == sorted(ids)
        for plist in self.postings.values():
            assert all(0 <= i < self.doc_count for i, _ in plist)
            assert all(plist[j][0] < plist[j + 1][0] for j in range(len(plist) - 1))


def build_index(corpus: list[ImageTextPair], params: BM25Params = BM25Params()) -> RetrievalIndex:
    """Tokenize a corpus into an inverted index.

    Pairs whose caption tokenizes to nothing are skipped with a warning.
    Raises DuplicateIdError on id collisions.
    """
    seen: set[str] = set()
    for pair in corpus:
        if pair.id in seen:
            raise DuplicateIdError(f"duplicate pair id {pair.id!r}")
        seen.add(pair.id)

    kept: list[tuple[ImageTextPair, list[str]]] = []
    for pair in corpus:
        terms = tokenize(pair.caption)
        if not terms:
            logger.warning("skipping pair %r: caption tokenizes to empty", pair.id)
            continue
        kept.append((pair, terms))
    kept.sort(key=lambda item: item[0].id)

    index = RetrievalIndex(params=params)
    index.docs = [pair for pair, _ in kept]
    index.doc_lengths = [len(terms) for _, terms in kept]
    for doc_idx, (_, terms) in enumerate(kept):
        counts: dict[str, int] = {}
        for t in terms:
            counts[t] = counts.get(t, 0) + 1
        for term, tf in counts.items():
            index.postings.setdefault(term, []).append((doc_idx, tf))
    if index.doc_count:
        index.avg_doc_len = sum(index.doc_lengths) / index.doc_count
    return index


def bm25_score(index: RetrievalIndex, query_terms: list[str], doc_id: str) -> float:
    """Okapi BM25 score of one document against a tokenized query.

    Repeated query terms contribute once per occurrence. Terms absent from
    the document (or the whole index) contribute zero.
    """
    doc_idx = index.doc_index(doc_id)
    return _score_doc(index, query_terms, doc_idx)


def _score_doc(index: RetrievalIndex, query_terms: list[str], doc_idx: int) -> float:
    k1, b = index.params.k1, index.params.b
    length_norm = k1 * (1.0 - b + b * index.doc_lengths[doc_idx] / index.avg_doc_len)
    score = 0.0
    for term in query_terms:
        tf = index.term_frequency(term, doc_idx)
        if tf == 0:
            continue
        score += index.idf(term) * tf * (k1 + 1.0) / (tf + length_norm)
    return score


def retrieve(
    index: RetrievalIndex, query: str, k: int, exclude_self: str | None = None
) -> RetrievalResult:
    """Top-K pairs by BM25 score, ties broken by ascending doc id.

    Only positive-scoring documents are returned, so the result may be
    shorter than K. `exclude_self` drops the pair with that exact id,
    letting a caller keep a query's own memory entry out of its context.
    """
    if k < 1:
        raise InvalidKError(f"K must be >= 1, got {k}")
    terms = tokenize(query)
    k1, b = index.params.k1, index.params.b

    scores: dict[int, float] = {}
    for term in set(terms):
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        occurrences = terms.count(term)
        for doc_idx, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_lengths[doc_idx] / index.avg_doc_len)
            contrib = occurrences * idf * tf * (k1 + 1.0) / (tf + norm)
            scores[doc_idx] = scores.get(doc_idx, 0.0) + contrib

    candidates = [(s, i) for i, s in scores.items() if s > 0.0]
    if exclude_self is not None:
        candidates = [(s, i) for s, i in candidates if index.docs[i].id != exclude_self]
    candidates.sort(key=lambda e: (-e[0], e[1]))
    top = candidates[:k]
    return RetrievalResult(query=query, pairs=[(index.docs[i], s) for s, i in top])


def save_index(index: RetrievalIndex, path: str | Path) -> None:
    """Persist an index; the byte layout is canonical, so saving the same
    index twice produces identical files."""
    w = FrameWriter(INDEX_MAGIC, INDEX_VERSION)
    w.write_u64(index.doc_count)
    w.write_f64(index.avg_doc_len)
    w.write_f64(index.params.k1)
    w.write_f64(index.params.b)

    terms = sorted(index.postings)
    term_section = bytearray()
    term_section += _u64(len(terms))
    for term in terms:
        raw = term.encode("utf-8")
        term_section += _u32(len(raw)) + raw
    w.write_u64(len(term_section))
    w.write_bytes(bytes(term_section))

    post_section = bytearray()
    for term in terms:
        plist = index.postings[term]
        post_section += _u64(len(plist))
        for doc_idx, tf in plist:
            post_section += _u64(doc_idx) + _u32(tf)
    w.write_u64(len(post_section))
    w.write_bytes(bytes(post_section))

    doc_section = bytearray()
    doc_section += _u64(index.doc_count)
    for pair, length in zip(index.docs, index.doc_lengths):
        for text in (pair.id, pair.caption, pair.image_ref):
            raw = text.encode("utf-8")
            doc_section += _u32(len(raw)) + raw
        doc_section += _u64(length)
    w.write_u64(len(doc_section))
    w.write_bytes(bytes(doc_section))

    Path(path).write_bytes(w.finish())


def load_index(path: str | Path) -> RetrievalIndex:
    """Load a persisted index, raising CorruptIndexError on any framing,
    checksum, or structural damage."""
    try:
        data = Path(path).read_bytes()
    except OSError:
        raise
    try:
        r = FrameReader(data, INDEX_MAGIC, expect_version=INDEX_VERSION)
        doc_count = r.read_u64()
        avg_doc_len = r.read_f64()
        params = BM25Params(k1=r.read_f64(), b=r.read_f64())

        r.read_u64()  # term section byte length
        n_terms = r.read_u64()
        terms = [r.read_str() for _ in range(n_terms)]

        r.read_u64()  # postings section byte length
        postings: dict[str, list[tuple[int, int]]] = {}
        for term in terms:
            n = r.read_u64()
            postings[term] = [(r.read_u64(), r.read_u32()) for _ in range(n)]

        r.read_u64()  # doc section byte length
        n_docs = r.read_u64()
        if n_docs != doc_count:
            raise CorruptIndexError("doc section count disagrees with header")
        docs: list[ImageTextPair] = []
        doc_lengths: list[int] = []
        for _ in range(n_docs):
            pair = ImageTextPair(id=r.read_str(), caption=r.read_str(), image_ref=r.read_str())
            docs.append(pair)
            doc_lengths.append(r.read_u64())
        if not r.at_end():
            raise CorruptIndexError("trailing bytes after doc section")
    except CorruptFileError as exc:
        raise CorruptIndexError(str(exc)) from exc

    index = RetrievalIndex(
        params=params,
        docs=docs,
        doc_lengths=doc_lengths,
        postings=postings,
        avg_doc_len=avg_doc_len,
    )
    index.validate()
    return index


def load_corpus_jsonl(path: str | Path) -> list[ImageTextPair]:
    """Read a corpus of {"id", "caption", "image_ref"} objects, one per line.

    Blank lines are skipped. Raises CorpusFormatError with the offending
    line number on malformed input.
    """
    pairs: list[ImageTextPair] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusFormatError(line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict):
                raise CorpusFormatError(line_no, "expected a JSON object")
            try:
                pairs.append(
                    ImageTextPair(
                        id=str(obj["id"]), caption=str(obj["caption"]), image_ref=str(obj["image_ref"])
                    )
                )
            except KeyError as exc:
                raise CorpusFormatError(line_no, f"missing field {exc.args[0]!r}") from exc
    return pairs


def _u32(v: int) -> bytes:
    return v.to_bytes(4, "little")


def _u64(v: int) -> bytes:
    return v.to_bytes(8, "little")
