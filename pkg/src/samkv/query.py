"""Generic and per-document personalised query vectors."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .engine import ModelWeights, incremental_prefill
from .errors import InputError, StateError
from .kv_store import DocumentCache, Role, build_composite_initial_local

log = logging.getLogger(__name__)

ZERO_NORM = 1e-12


@dataclass(eq=False)
class QueryVector:
    """Pooled query, ``vec`` is ``(layers, heads, head_dim)``.

    ``provenance`` is ``"generic"`` or ``"personalized:<doc_id>"``.
    """

    vec: np.ndarray
    provenance: str = "generic"

    @property
    def num_layers(self) -> int:
        return self.vec.shape[0]


@dataclass(eq=False)
class LocalQCache:
    doc_id: str
    vec: np.ndarray  # (layers, heads, head_dim)
    fallback: bool = False  # True when pooled from initial blocks instead


def generic_query_vector(
    weights: ModelWeights, query_tokens: Sequence[int], docs: Sequence[DocumentCache]
) -> QueryVector:
    """Mean-pooled Q of the query prefilled over all initial+local blocks."""
    if len(query_tokens) == 0:
        raise InputError("empty query", stage="query")
    composite = build_composite_initial_local(docs)
    acts = incremental_prefill(weights, query_tokens, composite)
    vec = np.stack([a.q.mean(axis=1, dtype=np.float32) for a in acts])
    return QueryVector(vec.astype(np.float32), "generic")


def local_q_cache(doc: DocumentCache) -> LocalQCache:
    if doc.q is None:
        raise StateError(f"document {doc.doc_id} was prefilled without Q retention", stage="query")
    blocks = doc.blocks_with_role(Role.LOCAL)
    fallback = not blocks
    if fallback:
        blocks = doc.blocks_with_role(Role.INITIAL)
        log.info("document %s has no local blocks, pooling initial-block Q", doc.doc_id)
    if not blocks:
        raise StateError(f"document {doc.doc_id} has no initial or local blocks", stage="query")
    rows = np.concatenate([doc.block_rows(doc.q, b) for b in blocks], axis=2)
    return LocalQCache(doc.doc_id, rows.mean(axis=2, dtype=np.float32).astype(np.float32), fallback)


def cosine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cosine along the last axis; zero when either side has (near) zero norm."""
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    na = np.linalg.norm(a64, axis=-1)
    nb = np.linalg.norm(b64, axis=-1)
    dot = (a64 * b64).sum(axis=-1)
    ok = (na >= ZERO_NORM) & (nb >= ZERO_NORM)
    return np.where(ok, dot / np.where(ok, na * nb, 1.0), 0.0)


def bias_weights(q_que: QueryVector, locals_: Sequence[LocalQCache]) -> np.ndarray:
    """``|cos(Q_que, Q_loc_j)|`` per local cache, layer and head: ``(D, N, H)``."""
    return np.stack([np.abs(cosine(q_que.vec, loc.vec)) for loc in locals_])


def personalize(
    q_que: QueryVector, locals_: Sequence[LocalQCache], target_doc: str
) -> QueryVector:
    D = len(locals_)
    ids = [loc.doc_id for loc in locals_]
    if D < 1 or target_doc not in ids:
        raise InputError(f"target document {target_doc!r} not among local caches", stage="query")
    if D == 1:
        return QueryVector(q_que.vec.copy(), f"personalized:{target_doc}")
    weights = bias_weights(q_que, locals_)
    bias = np.zeros(q_que.vec.shape, dtype=np.float64)
    for j, loc in enumerate(locals_):
        if loc.doc_id == target_doc:
            continue
        bias += weights[j][..., None] * loc.vec
    vec = q_que.vec + (bias / (D - 1)).astype(np.float32)
    return QueryVector(vec.astype(np.float32), f"personalized:{target_doc}")
