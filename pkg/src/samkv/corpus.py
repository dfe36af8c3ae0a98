"""Seeded synthetic multi-document corpora with a shared consensus span."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError


@dataclass(eq=False)
class Corpus:
    seed: int
    docs: list[np.ndarray]
    query: np.ndarray
    consensus: np.ndarray
    consensus_offsets: list[int]
    overlap_fraction: float

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for d in self.docs:
            h.update(np.asarray(d, dtype="<i8").tobytes())
            h.update(b"|")
        h.update(np.asarray(self.query, dtype="<i8").tobytes())
        return h.hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "overlap_fraction": self.overlap_fraction,
            "docs": [d.tolist() for d in self.docs],
            "query": self.query.tolist(),
            "consensus": self.consensus.tolist(),
            "consensus_offsets": list(self.consensus_offsets),
            "fingerprint": self.fingerprint(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Corpus":
        try:
            return cls(
                seed=int(d["seed"]),
                docs=[np.asarray(x, dtype=np.int64) for x in d["docs"]],
                query=np.asarray(d["query"], dtype=np.int64),
                consensus=np.asarray(d.get("consensus", []), dtype=np.int64),
                consensus_offsets=[int(x) for x in d.get("consensus_offsets", [])],
                overlap_fraction=float(d.get("overlap_fraction", 0.0)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed corpus file: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()))

    @classmethod
    def load(cls, path: str | Path) -> "Corpus":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise FormatError(f"corpus file is not JSON: {exc}") from exc


def generate_corpus(
    seed: int,
    num_docs: int,
    doc_len: int,
    overlap_fraction: float,
    *,
    vocab_size: int = 1024,
    query_len: int = 16,
    shared_vocab: int = 256,
    margin: int = 64,
) -> Corpus:
    """Documents built from private vocabularies plus one shared consensus span.

    Token ids ``[0, shared_vocab)`` are reserved for the consensus and the
    query; the rest is split evenly into one private pool per document, so
    documents only share tokens through the consensus. The span is placed at
    a random offset, away from the first and last ``margin`` tokens when the
    document is long enough.
    """
    if num_docs < 1 or doc_len < 1 or query_len < 1:
        raise ConfigurationError("num_docs, doc_len and query_len must be positive", stage="corpus")
    if not 0.0 <= overlap_fraction <= 1.0:
        raise ConfigurationError("overlap_fraction must lie in [0, 1]", stage="corpus")
    pool = (vocab_size - shared_vocab) // num_docs
    if shared_vocab < 1 or pool < 1:
        raise ConfigurationError(
            f"vocab {vocab_size} too small for {num_docs} private pools", stage="corpus"
        )
    rng = np.random.default_rng(seed)
    c_len = int(round(overlap_fraction * doc_len))
    consensus = rng.integers(0, shared_vocab, size=c_len)
    docs, offsets = [], []
    for i in range(num_docs):
        lo = shared_vocab + i * pool
        doc = rng.integers(lo, lo + pool, size=doc_len)
        if c_len:
            first, last = margin, doc_len - c_len - 2 * margin
            if last < first:
                first, last = 0, doc_len - c_len
            off = int(rng.integers(first, last + 1))
            doc[off : off + c_len] = consensus
            offsets.append(off)
        docs.append(doc.astype(np.int64))
    if c_len >= query_len:
        start = int(rng.integers(0, c_len - query_len + 1))
        query = consensus[start : start + query_len].copy()
    else:
        query = np.concatenate([consensus, rng.integers(0, shared_vocab, size=query_len - c_len)])
    return Corpus(seed, docs, query.astype(np.int64), consensus.astype(np.int64), offsets, overlap_fraction)


def pairwise_overlap(a: np.ndarray, b: np.ndarray) -> float:
    """Fraction of positions in ``a`` whose token also occurs in ``b``."""
    return float(np.isin(a, b).mean())
