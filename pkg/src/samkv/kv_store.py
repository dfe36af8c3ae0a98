"""Block-level KV cache management.

A :class:`DocumentCache` holds the dense per-layer K/V (and optionally Q)
tensors of one independently prefilled document, tiled into fixed-size
:class:`KVBlock` s that carry a role label. Composite caches are assembled
from ``(document, block)`` references and never mutate their sources.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import binfmt
from .errors import ConfigurationError, FormatError, InputError


class Role(str, enum.Enum):
    INITIAL = "initial"
    MIDDLE = "middle"
    LOCAL = "local"


class Generation(str, enum.Enum):
    OLD = "old"
    NEW = "new"


_ROLE_CODES = {Role.INITIAL: 0, Role.MIDDLE: 1, Role.LOCAL: 2}
_ROLE_FROM_CODE = {v: k for k, v in _ROLE_CODES.items()}
_GEN_CODES = {Generation.OLD: 0, Generation.NEW: 1}
_GEN_FROM_CODE = {v: k for k, v in _GEN_CODES.items()}


@dataclass(frozen=True, eq=False)
class KVBlock:
    block_index: int
    start: int
    end: int
    role: Role
    mean_key: np.ndarray  # (N, H, d)

    @property
    def span(self) -> tuple[int, int]:
        return (self.start, self.end)

    def __len__(self) -> int:
        return self.end - self.start


@dataclass(eq=False)
class DocumentCache:
    """Prefilled K/V of one document.

    ``k`` and ``v`` have shape ``(layers, heads, tokens, head_dim)``; ``q`` has
    the same shape when Q retention was requested. ``attention`` optionally
    holds head-averaged post-softmax maps ``(layers, tokens, tokens)`` and is
    never persisted.
    """

    doc_id: str
    token_ids: np.ndarray
    k: np.ndarray
    v: np.ndarray
    q: np.ndarray | None = None
    blocks: list[KVBlock] = field(default_factory=list)
    generation: Generation = Generation.OLD
    block_size: int = 64
    n_initial: int = 1
    n_local: int = 2
    attention: np.ndarray | None = None

    @property
    def num_layers(self) -> int:
        return self.k.shape[0]

    @property
    def num_tokens(self) -> int:
        return self.k.shape[2]

    def __len__(self) -> int:
        return self.num_tokens

    def blocks_with_role(self, role: Role) -> list[KVBlock]:
        return [b for b in self.blocks if b.role is role]

    @property
    def middle_blocks(self) -> list[KVBlock]:
        return self.blocks_with_role(Role.MIDDLE)

    @property
    def pinned_blocks(self) -> list[KVBlock]:
        """Initial and local blocks, in document order."""
        return [b for b in self.blocks if b.role is not Role.MIDDLE]

    def block_rows(self, tensor: np.ndarray, block: KVBlock) -> np.ndarray:
        return tensor[:, :, block.start : block.end]

    def equals(self, other: "DocumentCache") -> bool:
        """Bit-exact comparison of every persisted field."""
        if (
            self.doc_id != other.doc_id
            or self.generation is not other.generation
            or (self.block_size, self.n_initial, self.n_local)
            != (other.block_size, other.n_initial, other.n_local)
            or len(self.blocks) != len(other.blocks)
        ):
            return False
        if not np.array_equal(self.token_ids, other.token_ids):
            return False
        for a, b in ((self.k, other.k), (self.v, other.v)):
            if a.dtype != b.dtype or a.tobytes() != b.tobytes():
                return False
        if (self.q is None) != (other.q is None):
            return False
        if self.q is not None and self.q.tobytes() != other.q.tobytes():
            return False
        for a, b in zip(self.blocks, other.blocks):
            if (a.block_index, a.start, a.end, a.role) != (b.block_index, b.start, b.end, b.role):
                return False
            if a.mean_key.tobytes() != b.mean_key.tobytes():
                return False
        return True


def assign_roles(n_blocks: int, n_initial: int, n_local: int) -> list[Role]:
    # short documents: initial claims first, local takes what is left at the tail
    roles = [Role.MIDDLE] * n_blocks
    n_ini = min(n_initial, n_blocks)
    for i in range(n_ini):
        roles[i] = Role.INITIAL
    for i in range(max(n_ini, n_blocks - n_local), n_blocks):
        roles[i] = Role.LOCAL
    return roles


def block_mean_key(k: np.ndarray, start: int, end: int) -> np.ndarray:
    return k[:, :, start:end].mean(axis=2, dtype=np.float32).astype(np.float32)


def partition_blocks(
    cache: DocumentCache, block_size: int, n_initial: int = 1, n_local: int = 2
) -> DocumentCache:
    """Tile ``cache`` into contiguous blocks and label their roles."""
    if block_size < 1:
        raise ConfigurationError(f"block_size must be >= 1, got {block_size}")
    if n_initial < 0 or n_local < 0:
        raise ConfigurationError("n_initial and n_local must be non-negative")
    n = cache.num_tokens
    n_blocks = math.ceil(n / block_size)
    roles = assign_roles(n_blocks, n_initial, n_local)
    blocks = []
    for i, role in enumerate(roles):
        start, end = i * block_size, min((i + 1) * block_size, n)
        blocks.append(KVBlock(i, start, end, role, block_mean_key(cache.k, start, end)))
    return replace(
        cache, blocks=blocks, block_size=block_size, n_initial=n_initial, n_local=n_local
    )


def check_tiling(cache: DocumentCache) -> None:
    pos = 0
    for i, b in enumerate(cache.blocks):
        if b.block_index != i or b.start != pos or b.end <= b.start:
            raise InputError(f"block {i} breaks the tiling of {cache.doc_id}")
        if len(b) > cache.block_size or (len(b) < cache.block_size and i != len(cache.blocks) - 1):
            raise InputError(f"block {i} of {cache.doc_id} has bad length {len(b)}")
        pos = b.end
    if pos != cache.num_tokens:
        raise InputError(f"blocks of {cache.doc_id} cover {pos} of {cache.num_tokens} tokens")


BlockRef = tuple[int, int]  # (document index, block index)


@dataclass(eq=False)
class CompositeCache:
    """Per-layer concatenation of blocks drawn from several documents.

    Layer ``n`` exposes ``slots[n]`` rows of ``(doc index, token position)``
    in order; ``k[n]``/``v[n]`` are ``(heads, len(slots[n]), head_dim)``.
    ``positions[n]`` are the slots' positions in the end-to-end concatenation
    of the source documents, which ends at ``end_position``.
    """

    doc_ids: tuple[str, ...]
    blocks: list[list[BlockRef]]
    slots: list[np.ndarray]
    tokens: list[np.ndarray]
    k: list[np.ndarray]
    v: list[np.ndarray]
    padding: list[np.ndarray]
    positions: list[np.ndarray]
    end_position: int

    @property
    def num_layers(self) -> int:
        return len(self.k)

    def layer_kv(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self.k[n], self.v[n]

    def layer_length(self, n: int) -> int:
        return int(self.slots[n].shape[0])

    @property
    def length(self) -> int:
        return max((self.layer_length(n) for n in range(self.num_layers)), default=0)

    def position_set(self, n: int) -> set[tuple[int, int]]:
        return {(int(d), int(p)) for d, p in self.slots[n]}

    def strip_padding(self) -> "CompositeCache":
        keep = [~p for p in self.padding]
        return CompositeCache(
            doc_ids=self.doc_ids,
            blocks=[list(b) for b in self.blocks],
            slots=[s[m] for s, m in zip(self.slots, keep)],
            tokens=[t[m] for t, m in zip(self.tokens, keep)],
            k=[k[:, m] for k, m in zip(self.k, keep)],
            v=[v[:, m] for v, m in zip(self.v, keep)],
            padding=[p[m] for p, m in zip(self.padding, keep)],
            positions=[p[m] for p, m in zip(self.positions, keep)],
            end_position=self.end_position,
        )


def _slots_for(docs: Sequence[DocumentCache], refs: Sequence[BlockRef]) -> tuple[np.ndarray, np.ndarray]:
    rows, toks = [], []
    for d, b in refs:
        blk = docs[d].blocks[b]
        pos = np.arange(blk.start, blk.end, dtype=np.int64)
        rows.append(np.stack([np.full_like(pos, d), pos], axis=1))
        toks.append(np.asarray(docs[d].token_ids[blk.start : blk.end], dtype=np.int64))
    if not rows:
        return np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(rows), np.concatenate(toks)


def doc_offsets(docs: Sequence[DocumentCache]) -> np.ndarray:
    """Start of each document in the end-to-end concatenation, plus the total."""
    return np.concatenate([[0], np.cumsum([d.num_tokens for d in docs])]).astype(np.int64)


def _gather(docs: Sequence[DocumentCache], slots: np.ndarray, layer: int, which: str) -> np.ndarray:
    parts = []
    for d in range(len(docs)):
        sel = slots[:, 0] == d
        if sel.any():
            parts.append((np.flatnonzero(sel), getattr(docs[d], which)[layer][:, slots[sel, 1]]))
    ref = getattr(docs[0], which)[layer]
    out = np.empty((ref.shape[0], slots.shape[0], ref.shape[2]), dtype=np.float32)
    for idx, rows in parts:
        out[:, idx] = rows
    return out


def assemble(docs: Sequence[DocumentCache], layer_blocks: Sequence[Sequence[BlockRef]]) -> CompositeCache:
    """Build a composite cache from per-layer ordered block references."""
    if not docs:
        raise InputError("composite cache needs at least one document")
    if len(layer_blocks) != docs[0].num_layers:
        raise InputError("layer_blocks must list one selection per layer")
    offsets = doc_offsets(docs)
    slots, tokens, ks, vs, pads, pos = [], [], [], [], [], []
    for n, refs in enumerate(layer_blocks):
        s, t = _slots_for(docs, refs)
        slots.append(s)
        tokens.append(t)
        ks.append(_gather(docs, s, n, "k"))
        vs.append(_gather(docs, s, n, "v"))
        pads.append(np.zeros(s.shape[0], dtype=bool))
        pos.append(offsets[s[:, 0]] + s[:, 1])
    return CompositeCache(
        doc_ids=tuple(d.doc_id for d in docs),
        blocks=[list(r) for r in layer_blocks],
        slots=slots,
        tokens=tokens,
        k=ks,
        v=vs,
        padding=pads,
        positions=pos,
        end_position=int(offsets[-1]),
    )


def build_composite_initial_local(docs: Sequence[DocumentCache]) -> CompositeCache:
    """Concatenate each document's initial blocks, then its local blocks."""
    if not docs:
        raise InputError("empty document list")
    refs: list[BlockRef] = []
    for d, doc in enumerate(docs):
        refs += [(d, b.block_index) for b in doc.blocks_with_role(Role.INITIAL)]
        refs += [(d, b.block_index) for b in doc.blocks_with_role(Role.LOCAL)]
    return assemble(docs, [refs] * docs[0].num_layers)


def full_document_refs(docs: Sequence[DocumentCache]) -> list[BlockRef]:
    return [(d, b.block_index) for d, doc in enumerate(docs) for b in doc.blocks]


@dataclass(eq=False)
class AlignedCache:
    """Composite cache whose layers all expose the same slot set.

    Slots absent from a layer's own selection are padding at that layer and
    hold the token's prefilled K/V.
    """

    doc_ids: tuple[str, ...]
    layer_blocks: list[list[BlockRef]]
    union_blocks: list[BlockRef]
    slots: np.ndarray  # (S, 2)
    tokens: np.ndarray  # (S,)
    k: np.ndarray  # (N, H, S, d)
    v: np.ndarray
    padding: np.ndarray  # (N, S) bool
    positions: np.ndarray  # (S,)
    end_position: int

    @property
    def num_layers(self) -> int:
        return self.k.shape[0]

    @property
    def length(self) -> int:
        return int(self.slots.shape[0])

    def layer_kv(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        return self.k[n], self.v[n]

    def layer_length(self, n: int) -> int:
        return self.length

    def slot_index(self) -> dict[tuple[int, int], int]:
        return {(int(d), int(p)): i for i, (d, p) in enumerate(self.slots)}

    def copy(self) -> "AlignedCache":
        return replace(self, k=self.k.copy(), v=self.v.copy(), padding=self.padding.copy())

    def strip_padding(self) -> CompositeCache:
        keep = ~self.padding
        return CompositeCache(
            doc_ids=self.doc_ids,
            blocks=[list(b) for b in self.layer_blocks],
            slots=[self.slots[m] for m in keep],
            tokens=[self.tokens[m] for m in keep],
            k=[self.k[n][:, m] for n, m in enumerate(keep)],
            v=[self.v[n][:, m] for n, m in enumerate(keep)],
            padding=[np.zeros(int(m.sum()), dtype=bool) for m in keep],
            positions=[self.positions[m] for m in keep],
            end_position=self.end_position,
        )


def align(docs: Sequence[DocumentCache], layer_blocks: Sequence[Sequence[BlockRef]]) -> AlignedCache:
    """Expose the union of every layer's blocks at every layer."""
    if not docs:
        raise InputError("empty document list")
    union = sorted({ref for refs in layer_blocks for ref in refs})
    slots, tokens = _slots_for(docs, union)
    n_layers = docs[0].num_layers
    k = np.stack([_gather(docs, slots, n, "k") for n in range(n_layers)])
    v = np.stack([_gather(docs, slots, n, "v") for n in range(n_layers)])
    padding = np.zeros((n_layers, slots.shape[0]), dtype=bool)
    # slot -> block lookup, blocks are contiguous runs in union order
    slot_block = np.concatenate(
        [np.full(len(docs[d].blocks[b]), i, dtype=np.int64) for i, (d, b) in enumerate(union)]
    ) if union else np.zeros(0, dtype=np.int64)
    for n, refs in enumerate(layer_blocks):
        present = np.zeros(len(union), dtype=bool)
        lookup = {ref: i for i, ref in enumerate(union)}
        for ref in refs:
            present[lookup[ref]] = True
        padding[n] = ~present[slot_block]
    offsets = doc_offsets(docs)
    return AlignedCache(
        doc_ids=tuple(d.doc_id for d in docs),
        layer_blocks=[sorted(r) for r in layer_blocks],
        union_blocks=union,
        slots=slots,
        tokens=tokens,
        k=k,
        v=v,
        padding=padding,
        positions=offsets[slots[:, 0]] + slots[:, 1],
        end_position=int(offsets[-1]),
    )


def save_cache(cache: DocumentCache, path: str | Path) -> None:
    w = binfmt.Writer(binfmt.RECORD_CACHE)
    w.string(cache.doc_id)
    w.u8(_GEN_CODES[cache.generation])
    w.u32(cache.block_size)
    w.u32(cache.n_initial)
    w.u32(cache.n_local)
    w.tensor(np.asarray(cache.token_ids), dtype="<u4")
    w.u32(len(cache.blocks))
    for b in cache.blocks:
        w.u32(b.block_index)
        w.u32(b.start)
        w.u32(b.end)
        w.u8(_ROLE_CODES[b.role])
        w.tensor(b.mean_key)
    w.tensor(cache.k)
    w.tensor(cache.v)
    w.u8(cache.q is not None)
    if cache.q is not None:
        w.tensor(cache.q)
    Path(path).write_bytes(w.getvalue())


def load_cache(path: str | Path) -> DocumentCache:
    r = binfmt.Reader(Path(path).read_bytes(), binfmt.RECORD_CACHE)
    doc_id = r.string()
    gen_code = r.u8()
    if gen_code not in _GEN_FROM_CODE:
        raise FormatError(f"unknown generation tag {gen_code}")
    block_size, n_initial, n_local = r.u32(), r.u32(), r.u32()
    token_ids = r.tensor("<u4").astype(np.int64)
    blocks = []
    for _ in range(r.u32()):
        idx, start, end = r.u32(), r.u32(), r.u32()
        code = r.u8()
        if code not in _ROLE_FROM_CODE:
            raise FormatError(f"unknown role code {code}")
        blocks.append(KVBlock(idx, start, end, _ROLE_FROM_CODE[code], r.tensor()))
    k = r.tensor()
    v = r.tensor()
    q = r.tensor() if r.u8() else None
    r.done()
    if k.ndim != 4 or v.shape != k.shape or (q is not None and q.shape != k.shape):
        raise FormatError("inconsistent tensor shapes")
    if k.shape[2] != token_ids.shape[0]:
        raise FormatError("token count does not match tensor rows")
    return DocumentCache(
        doc_id=doc_id,
        token_ids=token_ids,
        k=k,
        v=v,
        q=q,
        blocks=blocks,
        generation=_GEN_FROM_CODE[gen_code],
        block_size=block_size,
        n_initial=n_initial,
        n_local=n_local,
    )
