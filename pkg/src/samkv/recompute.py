"""Selective recomputation of a sparse multi-document cache.

Scheduled tokens are recomputed against the composite built from every
document's retained blocks. Layers whose selections differ are first padded
to a common slot set; a token recomputed at layer ``n`` has its outputs
computed at every lower layer, and everything else is reused from cache.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .analysis import BlockAttribute, pauta_outliers
from .engine import (
    KV_COMPUTED,
    KV_PADDED,
    ModelWeights,
    RecomputeTrace,
    incremental_prefill,
    logits,
    recompute_selective,
)
from .errors import ConfigurationError, ScheduleError
from .kv_store import AlignedCache, CompositeCache, DocumentCache, align
from .query import cosine
from .selection import SelectionPlan

F32 = np.float32


class Source(str, enum.Enum):
    INITIAL = "initial"
    LOCAL = "local"
    HIGH_ATTENTION = "high_attention"
    FILL = "fill"


class Policy(str, enum.Enum):
    OVERWRITE = "overwrite"
    FUSION = "fusion"


Token = tuple[str, int]  # (doc_id, position)


@dataclass
class RecomputeSchedule:
    """Tokens to recompute per layer, tagged by why they were picked."""

    layers: list[frozenset[Token]]
    sources: dict[Token, Source]
    policy: Policy
    total_tokens: int
    order: list[Token] = field(default_factory=list)

    @property
    def tokens(self) -> set[Token]:
        return set().union(*self.layers) if self.layers else set()

    @property
    def recomputation_ratio(self) -> float:
        return len(self.tokens) / self.total_tokens if self.total_tokens else 0.0

    def count_by_source(self) -> dict[str, int]:
        out = {s.value: 0 for s in Source}
        for t in self.tokens:
            out[self.sources[t].value] += 1
        return out

    @classmethod
    def empty(cls, num_layers: int, total_tokens: int, policy: Policy = Policy.OVERWRITE):
        return cls([frozenset()] * num_layers, {}, Policy(policy), total_tokens)


def high_attention_tokens(
    plan: SelectionPlan, attrs: Mapping[int, Sequence[BlockAttribute]], layers: Sequence[int]
) -> dict[int, tuple[float, set[int]]]:
    """Low-alpha PauTa outliers among a document's middle tokens.

    Applied per layer, restricted to retained middle blocks and merged over
    layers. Returns ``position -> (best alpha, layers where flagged)``.
    """
    retained = set(plan.retained)
    found: dict[int, tuple[float, set[int]]] = {}
    for n in layers:
        mids = [a for a in attrs[n] if a.role == "middle"]
        if not mids:
            continue
        pos = np.concatenate([np.arange(a.start, a.end) for a in mids])
        alphas = np.concatenate([a.token_alphas for a in mids])
        block_of = np.concatenate([np.full(a.end - a.start, a.block_index) for a in mids])
        if alphas.size < 2:
            continue
        for i in pauta_outliers(alphas, side="low"):
            if int(block_of[i]) not in retained:
                continue
            p = int(pos[i])
            best, where = found.get(p, (math.inf, set()))
            found[p] = (min(best, float(alphas[i])), where | {int(n)})
    return found


def build_schedule(
    plans: Sequence[SelectionPlan],
    attrs: Mapping[str, Mapping[int, Sequence[BlockAttribute]]],
    recompute_budget: float,
    *,
    num_layers: int,
    stable_layers: Sequence[int] | None = None,
    policy: Policy | str = Policy.OVERWRITE,
    fill: bool = False,
    per_layer: bool = False,
) -> RecomputeSchedule:
    """Pick recompute tokens in priority order until the budget is spent.

    Priority: initial/local tokens, then high-attention middle tokens (lowest
    alpha first), then, with ``fill``, the remaining retained middle tokens
    by ascending alpha. The budget is a fraction of all original tokens.
    """
    if not 0.0 < recompute_budget <= 1.0:
        raise ConfigurationError(f"recompute_budget must be in (0, 1], got {recompute_budget}")
    policy = Policy(policy)
    total = sum(p.num_tokens for p in plans)
    cap = math.floor(recompute_budget * total + 1e-9)
    pinned: list[tuple[Token, Source]] = []
    high: list[tuple[float, int, int, Token, set[int]]] = []
    rest: list[tuple[float, int, int, Token]] = []
    for plan in plans:
        doc_attrs = attrs.get(plan.doc_id, {})
        layers = list(stable_layers) if stable_layers is not None else sorted(doc_attrs)
        for b in plan.pinned:
            src = Source.INITIAL if plan.block_roles[b] == "initial" else Source.LOCAL
            s, e = plan.block_spans[b]
            pinned += [((plan.doc_id, p), src) for p in range(s, e)]
        outliers = high_attention_tokens(plan, doc_attrs, layers) if layers else {}
        for p, (alpha, where) in outliers.items():
            high.append((alpha, plan.doc_index, p, (plan.doc_id, p), where))
        if fill:
            tok_alpha = _token_alpha_min(doc_attrs, layers)
            for b in sorted(plan.retained):
                s, e = plan.block_spans[b]
                for p in range(s, e):
                    if p not in outliers:
                        rest.append((tok_alpha.get(p, math.inf), plan.doc_index, p, (plan.doc_id, p)))
    high.sort(key=lambda t: t[:3])
    rest.sort(key=lambda t: t[:3])
    ordered: list[tuple[Token, Source, set[int] | None]] = [(t, s, None) for t, s in pinned]
    ordered += [(t, Source.HIGH_ATTENTION, where) for *_, t, where in high]
    ordered += [(t, Source.FILL, None) for *_, t in rest]
    ordered = ordered[:cap]
    all_layers = set(range(num_layers))
    per = [set() for _ in range(num_layers)]
    sources = {}
    for tok, src, where in ordered:
        sources[tok] = src
        for n in (where if per_layer and where is not None else all_layers):
            per[n].add(tok)
    return RecomputeSchedule(
        [frozenset(s) for s in per], sources, policy, total, order=[t for t, _, _ in ordered]
    )


def _token_alpha_min(doc_attrs: Mapping[int, Sequence[BlockAttribute]], layers) -> dict[int, float]:
    out: dict[int, float] = {}
    for n in layers:
        for a in doc_attrs.get(n, []):
            for i, alpha in enumerate(a.token_alphas):
                p = a.start + i
                out[p] = min(out.get(p, math.inf), float(alpha))
    return out


def align_layers(plans: Sequence[SelectionPlan], docs: Sequence[DocumentCache]) -> AlignedCache:
    """Pad per-layer selections so every layer exposes the same positions."""
    by_index = sorted(plans, key=lambda p: p.doc_index)
    if [p.doc_id for p in by_index] != [d.doc_id for d in docs]:
        raise ScheduleError("plans and documents disagree on order", stage="align")
    N = docs[0].num_layers
    layer_refs = [
        [(p.doc_index, b) for p in by_index for b in p.blocks_at(n)] for n in range(N)
    ]
    return align(docs, layer_refs)


def fusion_weights(old: np.ndarray, new: np.ndarray) -> np.ndarray:
    """Per-token ``clip(cos(new, old), 0, 1)`` over head-flattened rows.

    ``old``/``new`` are ``(heads, rows, head_dim)``; returns ``(rows,)``.
    """
    R = old.shape[1]
    a = new.transpose(1, 0, 2).reshape(R, -1)
    b = old.transpose(1, 0, 2).reshape(R, -1)
    return np.clip(cosine(a, b), 0.0, 1.0).astype(F32)


def apply_update(
    old_kv: np.ndarray, new_kv: np.ndarray, policy: Policy | str
) -> tuple[np.ndarray, np.ndarray | None]:
    """Overwrite, or blend ``theta * new + (1 - theta) * old`` per token."""
    if old_kv.shape != new_kv.shape:
        raise ScheduleError(f"shape mismatch {old_kv.shape} vs {new_kv.shape}")
    if Policy(policy) is Policy.OVERWRITE:
        return new_kv.astype(F32, copy=True), None
    theta = fusion_weights(old_kv, new_kv)
    t = theta[None, :, None]
    fused = t * new_kv.astype(F32) + (F32(1.0) - t) * old_kv.astype(F32)
    return fused.astype(F32), theta


def schedule_flags(aligned: AlignedCache, schedule: RecomputeSchedule) -> np.ndarray:
    index = aligned.slot_index()
    doc_index = {d: i for i, d in enumerate(aligned.doc_ids)}
    flags = np.zeros((aligned.num_layers, aligned.length), dtype=bool)
    if len(schedule.layers) != aligned.num_layers:
        raise ScheduleError("schedule layer count does not match cache")
    for n, toks in enumerate(schedule.layers):
        for doc_id, pos in toks:
            key = (doc_index.get(doc_id, -1), pos)
            if key not in index:
                raise ScheduleError(f"scheduled token {doc_id}:{pos} absent from aligned cache")
            flags[n, index[key]] = True
    return flags


@dataclass(eq=False)
class RecomputeResult:
    cache: CompositeCache
    aligned: AlignedCache
    trace: RecomputeTrace
    flags: np.ndarray
    thetas: list[np.ndarray] = field(default_factory=list)

    def theta_stats(self) -> dict:
        if not self.thetas:
            return {"count": 0, "mean": None, "min": None, "max": None}
        t = np.concatenate(self.thetas).astype(np.float64)
        return {"count": int(t.size), "mean": float(t.mean()), "min": float(t.min()), "max": float(t.max())}

    def trace_json(self) -> dict:
        names = {KV_COMPUTED: "computed", KV_PADDED: "padded"}
        rows = []
        for n in range(self.trace.kv.shape[0]):
            for s, (d, p) in enumerate(self.aligned.slots):
                rows.append(
                    {
                        "layer": n,
                        "doc": self.aligned.doc_ids[int(d)],
                        "pos": int(p),
                        "kv": names.get(int(self.trace.kv[n, s]), "reused"),
                        "output": bool(self.trace.output[n, s]),
                    }
                )
        return {"entries": rows}


def run_recompute(
    aligned: AlignedCache, schedule: RecomputeSchedule, weights: ModelWeights
) -> RecomputeResult:
    """Recompute scheduled tokens layer by layer, update, then strip padding."""
    flags = schedule_flags(aligned, schedule)
    thetas: list[np.ndarray] = []

    def update(old: np.ndarray, new: np.ndarray) -> np.ndarray:
        merged, theta = apply_update(old, new, schedule.policy)
        if theta is not None:
            thetas.append(theta)
        return merged

    updated, trace = recompute_selective(weights, aligned, flags, update)
    return RecomputeResult(updated.strip_padding(), updated, trace, flags, thetas)


@dataclass(eq=False)
class Answer:
    token: int
    logits: np.ndarray
    hidden: np.ndarray


def final_answer_prefill(
    weights: ModelWeights, query_tokens: Sequence[int], new_cache
) -> Answer:
    """Prefill the query over the rebuilt cache and read the greedy next token."""
    acts = incremental_prefill(weights, query_tokens, new_cache)
    hidden = acts[-1].out[-1].copy()
    lg = logits(weights, hidden)
    return Answer(int(np.argmax(lg)), lg, hidden)
