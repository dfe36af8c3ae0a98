"""Deterministic attention-only transformer used as the cache testbed.

Each layer is ``h <- h + MHA(h) @ Wo`` with causal softmax attention and no
MLP or normalisation. K/V at layer ``n`` are projections of the layer-``n``
input, so cross-document attention at layer ``n`` changes every cache entry
from layer ``n + 1`` upward. Logits use the tied embedding table.
"""

from __future__ import annotations

import enum
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Protocol, Sequence

import numpy as np

from . import binfmt
from .errors import CacheError, ConfigurationError, FormatError, InputError, ScheduleError
from .kv_store import AlignedCache, DocumentCache, partition_blocks

F32 = np.float32

# Init gains. Q/K are shared-plus-private so matching tokens attend to each
# other; the residual branch is damped to keep activations O(1) over depth.
QK_GAIN = 1.6
QK_SHARED = 0.8
VO_GAIN = 0.6
ATTN_CHUNK = 256


class PositionalMode(str, enum.Enum):
    NONE = "none"
    ABSOLUTE = "absolute-learned"


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int = 4
    num_heads: int = 4
    head_dim: int = 16
    hidden_dim: int | None = None
    vocab_size: int = 1024
    positional_mode: PositionalMode = PositionalMode.NONE
    seed: int = 0
    max_positions: int = 16384

    def __post_init__(self):
        if self.hidden_dim is None:
            object.__setattr__(self, "hidden_dim", self.num_heads * self.head_dim)
        object.__setattr__(self, "positional_mode", PositionalMode(self.positional_mode))

    def validate(self) -> None:
        for name in ("num_layers", "num_heads", "head_dim", "vocab_size", "max_positions"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.hidden_dim != self.num_heads * self.head_dim:
            raise ConfigurationError(
                f"hidden_dim {self.hidden_dim} != num_heads*head_dim "
                f"{self.num_heads * self.head_dim}"
            )
        if not -(2**63) <= self.seed < 2**63:
            raise ConfigurationError("seed must fit in 64 bits")


@dataclass(frozen=True, eq=False)
class ModelWeights:
    spec: ModelSpec
    embedding: np.ndarray  # (vocab, hidden)
    wq: np.ndarray  # (N, hidden, hidden)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    positions: np.ndarray | None = None  # (max_positions, hidden)

    def tensors(self) -> list[np.ndarray]:
        out = [self.embedding, self.wq, self.wk, self.wv, self.wo]
        if self.positions is not None:
            out.append(self.positions)
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for t in self.tensors():
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()


@dataclass(eq=False)
class LayerActivation:
    """Per-layer tensors for the tokens processed by one forward call.

    ``q``/``k``/``v`` are ``(heads, tokens, head_dim)``; ``attn`` (when kept)
    is ``(heads, tokens, keys)`` and ``out`` is the layer output hidden state.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    out: np.ndarray
    attn: np.ndarray | None = None


class KVContext(Protocol):
    num_layers: int
    end_position: int

    def layer_kv(self, n: int) -> tuple[np.ndarray, np.ndarray]: ...


def build_model(spec: ModelSpec) -> ModelWeights:
    spec.validate()
    rng = np.random.default_rng(np.uint64(spec.seed % 2**64))
    D, N = spec.hidden_dim, spec.num_layers

    def gauss(*shape: int, std: float) -> np.ndarray:
        return (rng.standard_normal(shape) * std).astype(F32)

    embedding = gauss(spec.vocab_size, D, std=1.0)
    shared = gauss(N, D, D, std=QK_GAIN / np.sqrt(D))
    wq = (QK_SHARED * shared + gauss(N, D, D, std=QK_GAIN * (1 - QK_SHARED) / np.sqrt(D))).astype(F32)
    wk = (QK_SHARED * shared + gauss(N, D, D, std=QK_GAIN * (1 - QK_SHARED) / np.sqrt(D))).astype(F32)
    wv = gauss(N, D, D, std=VO_GAIN / np.sqrt(D))
    wo = gauss(N, D, D, std=VO_GAIN / np.sqrt(D))
    positions = None
    if spec.positional_mode is PositionalMode.ABSOLUTE:
        positions = gauss(spec.max_positions, D, std=0.5)
    return ModelWeights(spec, embedding, wq, wk, wv, wo, positions)


def _split(x: np.ndarray, heads: int) -> np.ndarray:
    t, hd = x.shape
    return x.reshape(t, heads, hd // heads).transpose(1, 0, 2)


def _merge(x: np.ndarray) -> np.ndarray:
    h, t, d = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * d)


def _softmax(scores: np.ndarray) -> np.ndarray:
    scores = scores - scores.max(axis=-1, keepdims=True)
    np.exp(scores, out=scores)
    scores /= scores.sum(axis=-1, keepdims=True)
    return scores


def _tiles(rows: np.ndarray) -> Iterator[tuple[int, int, int]]:
    """Split sorted absolute row indices into ATTN_CHUNK-aligned tiles.

    Yields ``(i, j, lo)``: ``rows[i:j]`` fall in the tile starting at ``lo``.
    """
    i, n = 0, rows.size
    while i < n:
        lo = int(rows[i]) // ATTN_CHUNK * ATTN_CHUNK
        j = int(np.searchsorted(rows, lo + ATTN_CHUNK, side="left"))
        yield i, j, lo
        i = j


def _scatter(x: np.ndarray, at: np.ndarray) -> np.ndarray:
    # place rows at their offsets in a full tile so BLAS always sees the same
    # shape, whichever subset of rows is being computed
    if at.size == ATTN_CHUNK:
        return x
    tile = np.zeros(x.shape[:-2] + (ATTN_CHUNK, x.shape[-1]), dtype=F32)
    tile[..., at, :] = x
    return tile


def _pad_rows(x: np.ndarray, length: int) -> np.ndarray:
    if x.shape[-2] >= length:
        return x
    pad = np.zeros(x.shape[:-2] + (length - x.shape[-2], x.shape[-1]), dtype=F32)
    return np.concatenate([x, pad], axis=-2)


def row_matmul(x: np.ndarray, w: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """``x @ w`` for rows at absolute indices ``rows``, bit-stable across batching.

    BLAS kernels pick their reduction order from the matrix shape, so a row's
    result depends on how many rows share the call. Computing every row inside
    a zero-filled tile of fixed size and alignment makes it depend only on the
    row itself.
    """
    out = np.empty(x.shape[:-1] + (w.shape[-1],), dtype=F32)
    for i, j, lo in _tiles(rows):
        at = rows[i:j] - lo
        out[..., i:j, :] = np.matmul(_scatter(x[..., i:j, :], at), w)[..., at, :]
    return out


def attend(
    q: np.ndarray, k: np.ndarray, v: np.ndarray, rows: np.ndarray, keep: bool = False
) -> tuple[np.ndarray, np.ndarray | None]:
    """Causal attention where the query at absolute row ``r`` sees keys ``[0, r]``.

    ``rows`` must be increasing. Queries are processed in aligned tiles; the
    tile starting at ``lo`` reads keys ``[0, lo + ATTN_CHUNK)``, zero-padded
    past the end of the cache, so every tile has a fixed shape.
    """
    scale = F32(1.0 / np.sqrt(q.shape[-1]))
    H, T, _ = q.shape
    rows = np.asarray(rows)
    out = np.empty((H, T, v.shape[2]), dtype=F32)
    S = k.shape[1]
    probs_full = np.zeros((H, T, S), dtype=F32) if keep else None
    if T:
        span = (int(rows[-1]) // ATTN_CHUNK + 1) * ATTN_CHUNK
        k, v = _pad_rows(k, span), _pad_rows(v, span)
    for i, j, lo in _tiles(rows):
        at = rows[i:j] - lo
        width = lo + ATTN_CHUNK
        scores = np.matmul(_scatter(q[:, i:j], at), k[:, :width].transpose(0, 2, 1)) * scale
        mask = np.arange(width)[None, :] > (lo + np.arange(ATTN_CHUNK))[:, None]
        scores[:, mask] = -np.inf
        probs = _softmax(scores)
        out[:, i:j] = np.matmul(probs, v[:, :width])[:, at]
        if keep:
            probs_full[:, i:j, : min(width, S)] = probs[:, at, :S]
    return out, probs_full


def embed(weights: ModelWeights, token_ids: np.ndarray, positions: np.ndarray) -> np.ndarray:
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.size and (token_ids.min() < 0 or token_ids.max() >= weights.spec.vocab_size):
        raise InputError("token id out of vocabulary", stage="engine")
    h = weights.embedding[token_ids].copy()
    if weights.positions is not None:
        if positions.size and positions.max() >= weights.spec.max_positions:
            raise InputError("position exceeds max_positions", stage="engine")
        h += weights.positions[positions]
    return h


def _project(w: np.ndarray, h: np.ndarray, heads: int, rows: np.ndarray) -> np.ndarray:
    return _split(row_matmul(h, w, rows), heads)


def _forward(
    weights: ModelWeights,
    token_ids: np.ndarray,
    context: KVContext | None,
    start_pos: int,
    keep_attn: bool,
) -> list[LayerActivation]:
    spec = weights.spec
    token_ids = np.asarray(token_ids, dtype=np.int64)
    if token_ids.ndim != 1 or token_ids.size == 0:
        raise InputError("token sequence must be a non-empty 1-d array", stage="engine")
    if context is not None and context.num_layers != spec.num_layers:
        raise CacheError(
            f"context has {context.num_layers} layers, model has {spec.num_layers}", stage="engine"
        )
    T = token_ids.shape[0]
    h = embed(weights, token_ids, start_pos + np.arange(T))
    acts = []
    for n in range(spec.num_layers):
        base = 0 if context is None else context.layer_kv(n)[0].shape[1]
        rows = base + np.arange(T)
        q = _project(weights.wq[n], h, spec.num_heads, rows)
        k = _project(weights.wk[n], h, spec.num_heads, rows)
        v = _project(weights.wv[n], h, spec.num_heads, rows)
        if context is not None:
            ck, cv = context.layer_kv(n)
            kk, vv = np.concatenate([ck, k], axis=1), np.concatenate([cv, v], axis=1)
        else:
            kk, vv = k, v
        out, probs = attend(q, kk, vv, rows, keep=keep_attn)
        h = h + row_matmul(_merge(out), weights.wo[n], rows)
        acts.append(LayerActivation(q=q, k=k, v=v, out=h, attn=probs))
    return acts


def prefill_full(
    weights: ModelWeights, token_ids: Sequence[int], *, retain_q: bool = False, keep_attn: bool = False
) -> tuple[DocumentCache, list[LayerActivation]]:
    """Causal prefill of the whole sequence from an empty cache."""
    acts = _forward(weights, np.asarray(token_ids), None, 0, keep_attn)
    cache = DocumentCache(
        doc_id="",
        token_ids=np.asarray(token_ids, dtype=np.int64).copy(),
        k=np.stack([a.k for a in acts]),
        v=np.stack([a.v for a in acts]),
        q=np.stack([a.q for a in acts]) if retain_q else None,
    )
    return cache, acts


def prefill_document(
    weights: ModelWeights,
    token_ids: Sequence[int],
    doc_id: str,
    *,
    block_size: int = 64,
    n_initial: int = 1,
    n_local: int = 2,
    retain_q: bool = False,
    keep_attention: bool = False,
) -> DocumentCache:
    """Independent prefill of one document, tiled into role-labelled blocks.

    With ``keep_attention`` the head-averaged attention maps are attached to
    the returned cache for block analysis.
    """
    cache, acts = prefill_full(weights, token_ids, retain_q=retain_q, keep_attn=keep_attention)
    cache.doc_id = doc_id
    if keep_attention:
        cache.attention = np.stack([a.attn.mean(axis=0, dtype=F32) for a in acts])
    return partition_blocks(cache, block_size, n_initial, n_local)


def incremental_prefill(
    weights: ModelWeights,
    token_ids: Sequence[int],
    context: KVContext | None,
    *,
    start_pos: int | None = None,
    keep_attn: bool = False,
) -> list[LayerActivation]:
    """Prefill new tokens on top of an existing (possibly sparse) cache.

    New tokens are positioned after ``context.end_position`` unless
    ``start_pos`` is given.
    """
    if start_pos is None:
        start_pos = 0 if context is None else context.end_position
    return _forward(weights, np.asarray(token_ids), context, start_pos, keep_attn)


def logits(weights: ModelWeights, hidden: np.ndarray) -> np.ndarray:
    return hidden @ weights.embedding.T


UpdateFn = Callable[[np.ndarray, np.ndarray], np.ndarray]

# trace codes for the K/V entry of (layer, slot)
KV_REUSED, KV_COMPUTED, KV_PADDED = 0, 1, 2


@dataclass(eq=False)
class RecomputeTrace:
    """What happened to every (layer, slot) during selective recomputation.

    ``kv[n, s]`` is one of ``KV_REUSED``/``KV_COMPUTED``/``KV_PADDED``;
    ``output[n, s]`` is True when the layer-``n`` output of slot ``s`` was
    computed.
    """

    kv: np.ndarray
    output: np.ndarray


def recompute_selective(
    weights: ModelWeights,
    aligned: AlignedCache,
    flags: np.ndarray,
    update: UpdateFn | None = None,
) -> tuple[AlignedCache, RecomputeTrace]:
    """Recompute the K/V entries flagged in ``flags[layer, slot]``.

    A slot flagged at layer ``n`` gets its outputs computed at every layer
    below ``n``, attending to the current composite cache; unflagged entries
    are read from the cache as-is. ``update(old, new)`` merges recomputed rows
    (``(heads, rows, head_dim)``) into the cache; default overwrites.
    """
    spec = weights.spec
    N, S = spec.num_layers, aligned.length
    flags = np.asarray(flags, dtype=bool)
    if flags.shape != (N, S):
        raise ScheduleError(f"flags shape {flags.shape} does not match cache ({N}, {S})")
    if aligned.num_layers != N:
        raise CacheError("aligned cache layer count does not match model", stage="engine")
    out = aligned.copy()
    kv_trace = np.where(out.padding, KV_PADDED, KV_REUSED).astype(np.int8)
    out_trace = np.zeros((N, S), dtype=bool)
    # slots whose layer-n output is needed by a flag at some higher layer
    above = np.zeros((N, S), dtype=bool)
    for n in range(N - 2, -1, -1):
        above[n] = above[n + 1] | flags[n + 1]
    live = np.flatnonzero(flags[0] | above[0])
    h = embed(weights, aligned.tokens[live], aligned.positions[live])
    for n in range(N):
        rows = np.flatnonzero(flags[n])
        if rows.size:
            sel = np.searchsorted(live, rows)
            hk = h[sel]
            new_k = _project(weights.wk[n], hk, spec.num_heads, rows)
            new_v = _project(weights.wv[n], hk, spec.num_heads, rows)
            old_k, old_v = out.k[n][:, rows], out.v[n][:, rows]
            if update is not None:
                new_k, new_v = update(old_k, new_k), update(old_v, new_v)
            out.k[n][:, rows] = new_k
            out.v[n][:, rows] = new_v
            kv_trace[n, rows] = KV_COMPUTED
        need = np.flatnonzero(above[n])
        if need.size == 0:
            break
        sel = np.searchsorted(live, need)
        hq = h[sel]
        q = _project(weights.wq[n], hq, spec.num_heads, need)
        o, _ = attend(q, out.k[n], out.v[n], need)
        h = hq + row_matmul(_merge(o), weights.wo[n], need)
        live = need
        out_trace[n, need] = True
    return out, RecomputeTrace(kv_trace, out_trace)


def save_weights(weights: ModelWeights, path: str | Path) -> None:
    s = weights.spec
    w = binfmt.Writer(binfmt.RECORD_WEIGHTS)
    for x in (s.num_layers, s.num_heads, s.head_dim, s.hidden_dim, s.vocab_size, s.max_positions):
        w.u32(x)
    w.u8(0 if s.positional_mode is PositionalMode.NONE else 1)
    w.i64(s.seed)
    for t in weights.tensors():
        w.tensor(t)
    Path(path).write_bytes(w.getvalue())


def load_weights(path: str | Path) -> ModelWeights:
    r = binfmt.Reader(Path(path).read_bytes(), binfmt.RECORD_WEIGHTS)
    layers, heads, head_dim, hidden, vocab, max_pos = (r.u32() for _ in range(6))
    mode_code = r.u8()
    if mode_code not in (0, 1):
        raise FormatError(f"unknown positional mode {mode_code}")
    spec = ModelSpec(
        num_layers=layers,
        num_heads=heads,
        head_dim=head_dim,
        hidden_dim=hidden,
        vocab_size=vocab,
        positional_mode=PositionalMode.NONE if mode_code == 0 else PositionalMode.ABSOLUTE,
        seed=r.i64(),
        max_positions=max_pos,
    )
    try:
        spec.validate()
    except ConfigurationError as exc:
        raise FormatError(f"invalid model header: {exc}") from exc
    tensors = [r.tensor() for _ in range(5)]
    positions = r.tensor() if mode_code == 1 else None
    r.done()
    D = spec.hidden_dim
    expected = [(vocab, D)] + [(layers, D, D)] * 4
    if [t.shape for t in tensors] != expected:
        raise FormatError("weight tensor shapes do not match header")
    if positions is not None and positions.shape != (max_pos, D):
        raise FormatError("position table shape does not match header")
    return ModelWeights(spec, *tensors, positions=positions)
