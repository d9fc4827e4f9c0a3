"""Inverted index, BM25 scoring against the weight-expanded query, and
budgeted corpus selection.

The index file is a versioned little-endian binary: magic ``DFIDX1``, corpus
stats, per-document lengths, a length-prefixed term dictionary with
delta-encoded postings, and a trailing 64-bit checksum.
"""

from __future__ import annotations

import hashlib
import math
import struct
from bisect import bisect_left
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping

from .corpus_store import CorpusStore, Document, get_tokenizer
from .errors import (
    ChecksumMismatchError,
    EmptyCorpusError,
    MagicMismatchError,
    NoPositiveScoreError,
    SelectionBudgetError,
    TruncatedArtifactError,
)
from .keyword_extract import DomainKeywordSet

INDEX_MAGIC = b"DFIDX1"
DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
MAX_QUERY_REPETITIONS = 3


@dataclass
class InvertedIndex:
    """Postings, document lengths, and the BM25 parameters.

    Postings map term -> [(doc_id, term_frequency), ...] sorted by doc_id;
    ``doc_lengths[doc_id]`` is that document's token count.
    """

    postings: dict[str, list[tuple[int, int]]]
    doc_lengths: list[int]
    avgdl: float
    k1: float = DEFAULT_K1
    b: float = DEFAULT_B
    tokenizer_id: str = ""

    @property
    def num_docs(self) -> int:
        return len(self.doc_lengths)

    def doc_frequency(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def term_frequency(self, term: str, doc_id: int) -> int:
        plist = self.postings.get(term)
        if not plist:
            return 0
        pos = bisect_left(plist, (doc_id,))
        if pos < len(plist) and plist[pos][0] == doc_id:
            return plist[pos][1]
        return 0


@dataclass(frozen=True)
class ExpandedQuery:
    """Query term multiset; each keyword is repeated per its capped weight."""

    counts: Mapping[str, int]

    def terms_with_multiplicity(self) -> Iterator[str]:
        for term, count in self.counts.items():
            for _ in range(count):
                yield term

    def __len__(self) -> int:
        return sum(self.counts.values())


@dataclass(frozen=True)
class ScoredDoc:
    doc_id: int
    score: float


def build_index(
    store: CorpusStore, k1: float = DEFAULT_K1, b: float = DEFAULT_B
) -> InvertedIndex:
    """Build the complete inverted index over a non-empty store."""
    if len(store) == 0:
        raise EmptyCorpusError("cannot index an empty corpus (avgdl undefined)")
    if k1 <= 0.0:
        raise ValueError(f"k1 must be positive, got {k1}")
    if not 0.0 <= b <= 1.0:
        raise ValueError(f"b must be in [0, 1], got {b}")
    tokenizer = get_tokenizer(store.tokenizer_id)
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_lengths: list[int] = []
    for doc in store:
        tokens = tokenizer.tokenize(doc.text)
        doc_lengths.append(len(tokens))
        freqs: dict[str, int] = {}
        for tok in tokens:
            freqs[tok] = freqs.get(tok, 0) + 1
        for term, tf in freqs.items():
            postings.setdefault(term, []).append((doc.doc_id, tf))
    avgdl = sum(doc_lengths) / len(doc_lengths)
    return InvertedIndex(
        postings=postings,
        doc_lengths=doc_lengths,
        avgdl=avgdl,
        k1=k1,
        b=b,
        tokenizer_id=store.tokenizer_id,
    )


def idf(index: InvertedIndex, term: str) -> float:
    """Nonnegative IDF: ln(1 + (N - n + 0.5) / (n + 0.5))."""
    n = index.doc_frequency(term)
    return math.log(1.0 + (index.num_docs - n + 0.5) / (n + 0.5))


def _tf_component(index: InvertedIndex, tf: int, doc_len: int) -> float:
    norm = 1.0 - index.b + index.b * doc_len / index.avgdl
    return tf * (index.k1 + 1.0) / (tf + index.k1 * norm)


def bm25_score(index: InvertedIndex, doc_id: int, query: ExpandedQuery) -> float:
    """Relevance of one document: sum over query terms with multiplicity.

    Terms absent from the index contribute exactly 0.  Terms are accumulated
    in sorted order so single-document scoring, ranked retrieval, and any
    brute-force re-scorer all add the same floats in the same order.
    """
    if not 0 <= doc_id < index.num_docs:
        raise ValueError(f"doc_id {doc_id} out of range [0, {index.num_docs})")
    doc_len = index.doc_lengths[doc_id]
    score = 0.0
    # count stays the outer factor: repeating a term c times then scales its
    # one-occurrence contribution by exactly c
    for term in sorted(query.counts):
        tf = index.term_frequency(term, doc_id)
        if tf == 0:
            continue
        unit = idf(index, term) * _tf_component(index, tf, doc_len)
        score += query.counts[term] * unit
    return score


def expand_query(kset: DomainKeywordSet, tokenizer_id: str) -> ExpandedQuery:
    """Repeat each keyword max(1, min(floor(weight), 3)) times.

    Keywords are tokenized with the index tokenizer; a multi-token keyword
    contributes every one of its tokens at the keyword's multiplicity.
    """
    tokenizer = get_tokenizer(tokenizer_id)
    counts: dict[str, int] = {}
    for entry in kset.entries:
        reps = max(1, min(math.floor(entry.weight), MAX_QUERY_REPETITIONS))
        for token in tokenizer.tokenize(entry.keyword):
            counts[token] = counts.get(token, 0) + reps
    return ExpandedQuery(counts=counts)


def retrieve_top_n(index: InvertedIndex, query: ExpandedQuery, n: int) -> list[ScoredDoc]:
    """The n highest positive-scoring documents, score-descending, id-ascending."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    scores: dict[int, float] = {}
    for term in sorted(query.counts):
        plist = index.postings.get(term)
        if not plist:
            continue
        count = query.counts[term]
        idf_val = idf(index, term)
        for doc_id, tf in plist:
            # same association as bm25_score so both add identical floats
            unit = idf_val * _tf_component(index, tf, index.doc_lengths[doc_id])
            scores[doc_id] = scores.get(doc_id, 0.0) + count * unit
    ranked = sorted(
        (ScoredDoc(d, s) for d, s in scores.items() if s > 0.0),
        key=lambda sd: (-sd.score, sd.doc_id),
    )
    return ranked[:n]


@dataclass(frozen=True)
class CorpusSelection:
    """A budgeted selection: the new store plus its provenance mapping.

    ``provenance[new_doc_id] = (original_doc_id, score)``.
    """

    store: CorpusStore
    provenance: tuple[tuple[int, float], ...]

    @property
    def selected_tokens(self) -> int:
        return self.store.total_tokens


def select_corpus(
    index: InvertedIndex,
    store: CorpusStore,
    query: ExpandedQuery,
    token_budget: int,
) -> CorpusSelection:
    """Greedily take ranked documents until the next one would exceed the budget.

    All selected documents have positive score; doc_ids are re-densified in
    the output store and the provenance mapping records the original ids.
    """
    if token_budget < 1:
        raise ValueError(f"token_budget must be >= 1, got {token_budget}")
    ranked = retrieve_top_n(index, query, n=max(1, index.num_docs))
    if not ranked:
        raise NoPositiveScoreError(
            "no positive-score documents for the expanded query "
            f"({len(query)} query terms over {index.num_docs} documents)"
        )
    docs: list[Document] = []
    provenance: list[tuple[int, float]] = []
    used = 0
    for sd in ranked:
        doc = store.documents[sd.doc_id]
        if used + doc.token_count > token_budget:
            break
        docs.append(
            Document(
                doc_id=len(docs),
                title=doc.title,
                text=doc.text,
                token_count=doc.token_count,
            )
        )
        provenance.append((sd.doc_id, sd.score))
        used += doc.token_count
    if not docs:
        top = store.documents[ranked[0].doc_id]
        raise SelectionBudgetError(
            f"token budget {token_budget} is smaller than the top-ranked "
            f"document (doc_id {top.doc_id}, {top.token_count} tokens)"
        )
    new_store = CorpusStore(documents=tuple(docs), tokenizer_id=store.tokenizer_id)
    return CorpusSelection(store=new_store, provenance=tuple(provenance))


# ---------------------------------------------------------------------------
# Persistence

def _checksum(data: bytes) -> bytes:
    return hashlib.blake2b(data, digest_size=8).digest()


def save_index(index: InvertedIndex, path: str | Path) -> None:
    """Write the versioned binary index; saves are byte-deterministic."""
    out = bytearray()
    out += INDEX_MAGIC
    out += struct.pack("<Q", index.num_docs)
    out += struct.pack("<ddd", index.avgdl, index.k1, index.b)
    tok_id = index.tokenizer_id.encode("utf-8")
    out += struct.pack("<I", len(tok_id))
    out += tok_id
    for length in index.doc_lengths:
        out += struct.pack("<Q", length)
    out += struct.pack("<Q", len(index.postings))
    for term in sorted(index.postings):
        term_bytes = term.encode("utf-8")
        plist = index.postings[term]
        out += struct.pack("<I", len(term_bytes))
        out += term_bytes
        out += struct.pack("<Q", len(plist))
        prev = 0
        for doc_id, tf in plist:
            out += struct.pack("<II", doc_id - prev, tf)
            prev = doc_id
    out += _checksum(bytes(out))
    Path(path).write_bytes(bytes(out))


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedArtifactError(
                self.path, f"needed {n} bytes at offset {self.pos}, file ends early"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_index(path: str | Path) -> InvertedIndex:
    """Read an index file, verifying magic and trailing checksum.

    Structural parsing runs before checksum verification so a chopped file
    reports truncation rather than a checksum failure.
    """
    path = Path(path)
    data = path.read_bytes()
    if len(data) < len(INDEX_MAGIC) + 8:
        raise TruncatedArtifactError(path, "file too short for an index")
    if data[: len(INDEX_MAGIC)] != INDEX_MAGIC:
        raise MagicMismatchError(path, f"expected magic {INDEX_MAGIC!r}")

    reader = _Reader(data[:-8], path)
    reader.take(len(INDEX_MAGIC))
    (num_docs,) = reader.unpack("<Q")
    avgdl, k1, b = reader.unpack("<ddd")
    (tok_len,) = reader.unpack("<I")
    tokenizer_id = reader.take(tok_len).decode("utf-8")
    doc_lengths = [reader.unpack("<Q")[0] for _ in range(num_docs)]
    (num_terms,) = reader.unpack("<Q")
    postings: dict[str, list[tuple[int, int]]] = {}
    for _ in range(num_terms):
        (term_len,) = reader.unpack("<I")
        term = reader.take(term_len).decode("utf-8")
        (plen,) = reader.unpack("<Q")
        plist: list[tuple[int, int]] = []
        doc_id = 0
        for _ in range(plen):
            delta, tf = reader.unpack("<II")
            doc_id += delta
            plist.append((doc_id, tf))
        postings[term] = plist
    if reader.pos != len(reader.data):
        raise TruncatedArtifactError(path, "trailing bytes after postings")
    if _checksum(data[:-8]) != data[-8:]:
        raise ChecksumMismatchError(path, "index checksum mismatch")
    return InvertedIndex(
        postings=postings,
        doc_lengths=doc_lengths,
        avgdl=avgdl,
        k1=k1,
        b=b,
        tokenizer_id=tokenizer_id,
    )


def save_provenance(selection: CorpusSelection, path: str | Path) -> None:
    """Write new_doc_id<TAB>original_doc_id<TAB>score lines."""
    lines = [
        f"{new_id}\t{orig_id}\t{score!r}"
        for new_id, (orig_id, score) in enumerate(selection.provenance)
    ]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")
