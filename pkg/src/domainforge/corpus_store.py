"""Corpus ingestion: text cleaning, tokenization, and the line-record store format.

A store file is UTF-8 text: a magic first line, one tab-separated record per
document (tabs/newlines inside fields are escaped), and a footer line carrying
document count, total token count, tokenizer id, and a 64-bit checksum of all
preceding bytes.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Protocol, Sequence

from .errors import (
    ChecksumMismatchError,
    DuplicateSourceIdError,
    MagicMismatchError,
    TruncatedArtifactError,
)

STORE_MAGIC = "DFSTORE1"
DEFAULT_MIN_TOKENS = 10

# ---------------------------------------------------------------------------
# Cleaning

# Full-width ASCII variants (U+FF01..U+FF5E) fold onto U+21..U+7E; a few CJK
# punctuation marks get explicit half-width equivalents.
_PUNCT_TABLE = {cp: cp - 0xFF01 + 0x21 for cp in range(0xFF01, 0xFF5F)}
_PUNCT_TABLE.update(
    {
        0x3000: ord(" "),   # ideographic space
        0x3001: ord(","),   # 、
        0x3002: ord("."),   # 。
        0xFF61: ord("."),
        0xFF62: ord("["),
        0xFF63: ord("]"),
        0xFF64: ord(","),
        0x2018: ord("'"),
        0x2019: ord("'"),
        0x201C: ord('"'),
        0x201D: ord('"'),
    }
)

_TAG_RE = re.compile(r"<[^<>]*>")
_BRACE_RE = re.compile(r"\{\{[^{}]*\}\}")
# A URL run ends at whitespace, markup delimiters, or the first ideographic
# character (prose is often glued straight onto a link, with no space).
_URL_RE = re.compile(
    r"(?:https?://|www\.)"
    r"[^\s<>{}　-鿿豈-﫿\U00020000-\U0003134F]+",
    re.IGNORECASE,
)
# Control characters other than \t, \n, \r (those collapse as whitespace below).
_CONTROL_RE = re.compile(r"[\x00-\x08\x0b\x0c\x0e-\x1f\x7f-\x9f]")
_WS_RE = re.compile(r"\s+")


def clean_text(raw: str) -> str:
    """Strip markup spans, template braces, URLs, and control characters.

    Full-width punctuation is folded to half-width, whitespace runs collapse
    to a single space, and the result is trimmed.  Idempotent: the removal
    rules run to a fixpoint, so cleaning cleaned text is a no-op.
    """
    text = raw.translate(_PUNCT_TABLE)
    text = _CONTROL_RE.sub("", text)
    prev = None
    while prev != text:
        prev = text
        text = _URL_RE.sub(" ", text)
        text = _BRACE_RE.sub(" ", text)
        text = _TAG_RE.sub(" ", text)
    return _WS_RE.sub(" ", text).strip()


# ---------------------------------------------------------------------------
# Tokenization

def _is_cjk(cp: int) -> bool:
    return (
        0x4E00 <= cp <= 0x9FFF      # unified ideographs
        or 0x3400 <= cp <= 0x4DBF   # extension A
        or 0xF900 <= cp <= 0xFAFF   # compatibility ideographs
        or 0x20000 <= cp <= 0x3134F # extensions B and beyond
    )


class Tokenizer(Protocol):
    """Deterministic text -> token-list mapping, keyed by ``tokenizer_id``."""

    tokenizer_id: str

    def tokenize(self, text: str) -> list[str]: ...


@dataclass(frozen=True)
class CjkCharTokenizer:
    """Default tokenizer: one token per CJK codepoint, non-CJK runs split on
    whitespace/punctuation with Latin lowercased."""

    tokenizer_id: str = "cjk-char-v1"

    def tokenize(self, text: str) -> list[str]:
        tokens: list[str] = []
        buf: list[str] = []
        for ch in text.lower():
            if _is_cjk(ord(ch)):
                if buf:
                    tokens.append("".join(buf))
                    buf = []
                tokens.append(ch)
            elif ch.isalnum():
                buf.append(ch)
            else:
                if buf:
                    tokens.append("".join(buf))
                    buf = []
        if buf:
            tokens.append("".join(buf))
        return tokens


_TOKENIZERS: dict[str, Tokenizer] = {}


def register_tokenizer(tokenizer: Tokenizer) -> None:
    _TOKENIZERS[tokenizer.tokenizer_id] = tokenizer


def get_tokenizer(tokenizer_id: str) -> Tokenizer:
    try:
        return _TOKENIZERS[tokenizer_id]
    except KeyError:
        raise KeyError(f"unknown tokenizer_id: {tokenizer_id!r}") from None


register_tokenizer(CjkCharTokenizer())

DEFAULT_TOKENIZER_ID = "cjk-char-v1"


def tokenize(text: str, tokenizer: Tokenizer) -> list[str]:
    """Tokenize ``text`` with the given tokenizer."""
    return tokenizer.tokenize(text)


# ---------------------------------------------------------------------------
# Store

@dataclass(frozen=True)
class RawRecord:
    """One raw input record prior to cleaning."""

    source_id: str
    title: str
    body: str


@dataclass(frozen=True)
class Document:
    """One cleaned document with a dense id and its token count."""

    doc_id: int
    title: str
    text: str
    token_count: int


@dataclass(frozen=True)
class CorpusStore:
    """Immutable ordered document collection; iteration follows doc_id order."""

    documents: tuple[Document, ...]
    tokenizer_id: str

    @property
    def total_tokens(self) -> int:
        return sum(d.token_count for d in self.documents)

    def __len__(self) -> int:
        return len(self.documents)

    def __iter__(self) -> Iterator[Document]:
        return iter(self.documents)


def ingest(
    records: Sequence[RawRecord],
    tokenizer: Tokenizer,
    min_tokens: int = DEFAULT_MIN_TOKENS,
) -> CorpusStore:
    """Clean records, drop the too-short ones, and assign dense doc_ids.

    Records whose cleaned body is empty or shorter than ``min_tokens`` tokens
    are dropped; survivors keep their input order.  Duplicate source ids
    reject the whole run.
    """
    seen: dict[str, int] = {}
    offenders: set[str] = set()
    for rec in records:
        seen[rec.source_id] = seen.get(rec.source_id, 0) + 1
        if seen[rec.source_id] > 1:
            offenders.add(rec.source_id)
    if offenders:
        raise DuplicateSourceIdError(sorted(offenders))

    docs: list[Document] = []
    for rec in records:
        text = clean_text(rec.body)
        if not text:
            continue
        tokens = tokenizer.tokenize(text)
        if len(tokens) < min_tokens:
            continue
        docs.append(
            Document(
                doc_id=len(docs),
                title=clean_text(rec.title),
                text=text,
                token_count=len(tokens),
            )
        )
    return CorpusStore(documents=tuple(docs), tokenizer_id=tokenizer.tokenizer_id)


# ---------------------------------------------------------------------------
# Persistence

_FOOTER_PREFIX = "#footer"


def _escape(field: str) -> str:
    return (
        field.replace("\\", "\\\\")
        .replace("\t", "\\t")
        .replace("\n", "\\n")
        .replace("\r", "\\r")
    )


def _unescape(field: str) -> str:
    out: list[str] = []
    it = iter(field)
    for ch in it:
        if ch != "\\":
            out.append(ch)
            continue
        nxt = next(it, "")
        out.append({"t": "\t", "n": "\n", "r": "\r", "\\": "\\"}.get(nxt, nxt))
    return "".join(out)


def _checksum(data: bytes) -> str:
    return hashlib.blake2b(data, digest_size=8).hexdigest()


def save_store(store: CorpusStore, path: str | Path) -> None:
    """Write a store file; identical stores produce byte-identical files."""
    lines = [STORE_MAGIC]
    for doc in store.documents:
        lines.append(
            f"{doc.doc_id}\t{_escape(doc.title)}\t{_escape(doc.text)}\t{doc.token_count}"
        )
    body = ("\n".join(lines) + "\n").encode("utf-8")
    footer = (
        f"{_FOOTER_PREFIX}\t{len(store.documents)}\t{store.total_tokens}"
        f"\t{_escape(store.tokenizer_id)}\t{_checksum(body)}\n"
    )
    Path(path).write_bytes(body + footer.encode("utf-8"))


def load_store(path: str | Path) -> CorpusStore:
    """Read a store file, verifying magic, completeness, and checksum."""
    path = Path(path)
    data = path.read_bytes()
    text = data.decode("utf-8")
    lines = text.split("\n")
    if not lines or lines[0] != STORE_MAGIC:
        raise MagicMismatchError(path, f"expected magic {STORE_MAGIC!r}")
    if lines[-1] == "":
        lines = lines[:-1]
    if len(lines) < 2 or not lines[-1].startswith(_FOOTER_PREFIX + "\t"):
        raise TruncatedArtifactError(path, "missing footer record")

    footer_fields = lines[-1].split("\t")
    if len(footer_fields) != 5:
        raise TruncatedArtifactError(path, "malformed footer record")
    _, count_s, total_s, tok_id_esc, checksum = footer_fields
    footer_len = len(lines[-1].encode("utf-8"))
    if data.endswith(b"\n"):
        footer_len += 1
    body = data[: len(data) - footer_len]
    if _checksum(body) != checksum:
        raise ChecksumMismatchError(path, "store body checksum mismatch")

    docs: list[Document] = []
    for line in lines[1:-1]:
        fields = line.split("\t")
        if len(fields) != 4:
            raise TruncatedArtifactError(path, f"malformed record: {line[:60]!r}")
        docs.append(
            Document(
                doc_id=int(fields[0]),
                title=_unescape(fields[1]),
                text=_unescape(fields[2]),
                token_count=int(fields[3]),
            )
        )
    if len(docs) != int(count_s):
        raise TruncatedArtifactError(
            path, f"footer declares {count_s} documents, found {len(docs)}"
        )
    store = CorpusStore(documents=tuple(docs), tokenizer_id=_unescape(tok_id_esc))
    if store.total_tokens != int(total_s):
        raise TruncatedArtifactError(
            path, f"footer declares {total_s} tokens, found {store.total_tokens}"
        )
    for i, doc in enumerate(docs):
        if doc.doc_id != i:
            raise TruncatedArtifactError(path, f"doc_id gap at position {i}")
    return store


def load_raw_records(path: str | Path) -> list[RawRecord]:
    """Read raw records from a JSON-lines file with source_id/title/body fields."""
    import json

    records: list[RawRecord] = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            records.append(
                RawRecord(
                    source_id=str(obj["source_id"]),
                    title=str(obj.get("title", "")),
                    body=str(obj["body"]),
                )
            )
    return records
