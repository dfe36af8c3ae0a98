"""Anchor-based Top-P selection of middle blocks and cross-context filtering."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .analysis import BlockAttribute
from .errors import ConfigurationError
from .kv_store import DocumentCache
from .query import QueryVector

CEIL_SLACK = 1e-9


@dataclass
class AnchorScores:
    doc_id: str
    layers: list[int]
    s_anc: np.ndarray
    s_max: np.ndarray
    s_min: np.ndarray
    max_block: list[int]
    min_block: list[int]

    @property
    def empty(self) -> bool:
        return len(self.layers) == 0


@dataclass
class SelectionPlan:
    """Block retention decision for one document.

    ``retained`` lists kept middle blocks with their raw selection scores;
    ``normalized`` holds the per-context min-max scores used by the
    cross-context filter. ``layer_retained``, when set, overrides the
    retained middle blocks per layer.
    """

    doc_id: str
    doc_index: int
    p: float
    layer_p: dict[int, float]
    num_tokens: int
    block_spans: list[tuple[int, int]]
    pinned: list[int]
    middle: list[int]
    block_roles: list[str] = field(default_factory=list)
    retained: dict[int, float] = field(default_factory=dict)
    normalized: dict[int, float] = field(default_factory=dict)
    layer_retained: list[list[int]] | None = None

    def middle_at(self, layer: int) -> list[int]:
        if self.layer_retained is not None:
            return sorted(self.layer_retained[layer])
        return sorted(self.retained)

    def blocks_at(self, layer: int) -> list[int]:
        return sorted(set(self.pinned) | set(self.middle_at(layer)))

    def block_tokens(self, blocks: Sequence[int]) -> int:
        return sum(self.block_spans[b][1] - self.block_spans[b][0] for b in blocks)

    @property
    def retained_tokens(self) -> int:
        return self.block_tokens(sorted(set(self.pinned) | set(self.retained)))

    @property
    def sequence_ratio(self) -> float:
        return self.retained_tokens / self.num_tokens

    def to_dict(self) -> dict:
        return {
            "doc_id": self.doc_id,
            "p": self.p,
            "layer_p": {str(k): v for k, v in sorted(self.layer_p.items())},
            "num_tokens": self.num_tokens,
            "pinned_blocks": list(self.pinned),
            "middle_blocks": len(self.middle),
            "retained_blocks": sorted(self.retained),
            "scores": {str(b): s for b, s in sorted(self.retained.items())},
            "normalized_scores": {str(b): s for b, s in sorted(self.normalized.items())},
            "retained_tokens": self.retained_tokens,
            "sequence_ratio": self.sequence_ratio,
        }


def _head_mean_dot(q: np.ndarray, k: np.ndarray) -> float:
    # q, k: (heads, head_dim)
    return float((q.astype(np.float64) * k.astype(np.float64)).sum(axis=-1).mean())


def anchor_scores(
    q_hat: QueryVector,
    doc: DocumentCache,
    attrs: Mapping[int, Sequence[BlockAttribute]],
    stable: Sequence[int],
) -> AnchorScores:
    """Inner products of ``q_hat`` with the anchor, max and min block keys."""
    middle = {b.block_index for b in doc.middle_blocks}
    pinned = doc.pinned_blocks
    if not middle or not pinned:
        z = np.zeros(0)
        return AnchorScores(doc.doc_id, [], z, z, z, [], [])
    layers, s_anc, s_max, s_min, mx, mn = [], [], [], [], [], []
    for n in stable:
        mids = [a for a in attrs[n] if a.block_index in middle]
        best = min(mids, key=lambda a: (a.alpha, a.block_index))
        worst = min(mids, key=lambda a: (a.unimportance_score, a.block_index))
        anchor = np.mean([b.mean_key[n] for b in pinned], axis=0, dtype=np.float64)
        q = q_hat.vec[n]
        layers.append(int(n))
        s_anc.append(_head_mean_dot(q, anchor))
        s_max.append(_head_mean_dot(q, doc.blocks[best.block_index].mean_key[n]))
        s_min.append(_head_mean_dot(q, doc.blocks[worst.block_index].mean_key[n]))
        mx.append(best.block_index)
        mn.append(worst.block_index)
    return AnchorScores(doc.doc_id, layers, np.array(s_anc), np.array(s_max), np.array(s_min), mx, mn)


def layer_p(s_anc: float, s_max: float, s_min: float, anchor_below_min: str = "zero") -> float:
    """Fraction of middle blocks expected to beat the anchor at one layer.

    With ``anchor_below_min="one"`` an anchor at or below the min block
    selects everything instead of nothing.
    """
    if anchor_below_min not in ("zero", "one"):
        raise ConfigurationError(f"anchor_below_min must be 'zero' or 'one', got {anchor_below_min!r}")
    if s_min < s_anc <= s_max:
        return (s_max - s_anc) / (s_max - s_min)
    if anchor_below_min == "one" and s_anc <= s_min < s_max:
        return 1.0
    return 0.0


def doc_p(per_layer: Sequence[float]) -> float:
    if len(per_layer) == 0:
        raise ConfigurationError("no stable layers to average over", stage="selection")
    return float(np.mean(np.asarray(per_layer, dtype=np.float64)))


def block_scores(q_hat: QueryVector, doc: DocumentCache, layers: Sequence[int]) -> dict[int, float]:
    """Layer- and head-averaged ``<q_hat, mean_key>`` for every middle block."""
    layers = list(layers)
    q = q_hat.vec[layers].astype(np.float64)
    out = {}
    for b in doc.middle_blocks:
        mk = b.mean_key[layers].astype(np.float64)
        out[b.block_index] = float((q * mk).sum(axis=-1).mean())
    return out


def top_k(scores: Mapping[int, float], k: int) -> list[int]:
    order = sorted(scores, key=lambda b: (-scores[b], b))
    return sorted(order[:k])


def select_blocks(
    q_hat: QueryVector, doc: DocumentCache, p: float, layers: Sequence[int]
) -> dict[int, float]:
    """Top ``ceil(p * M)`` middle blocks by score, mapped to their scores."""
    if not 0.0 <= p <= 1.0:
        raise ConfigurationError(f"P must lie in [0, 1], got {p}", stage="selection")
    scores = block_scores(q_hat, doc, layers)
    k = math.ceil(p * len(scores) - CEIL_SLACK) if p > 0 else 0
    return {b: scores[b] for b in top_k(scores, k)}


def plan_document(
    q_hat: QueryVector,
    doc: DocumentCache,
    doc_index: int,
    attrs: Mapping[int, Sequence[BlockAttribute]],
    stable: Sequence[int],
    *,
    force_p: float | None = None,
    anchor_below_min: str = "zero",
    select_middle: bool = True,
) -> tuple[SelectionPlan, AnchorScores]:
    scores = anchor_scores(q_hat, doc, attrs, stable)
    per_layer = {
        n: layer_p(a, hi, lo, anchor_below_min)
        for n, a, hi, lo in zip(scores.layers, scores.s_anc, scores.s_max, scores.s_min)
    }
    if not select_middle:
        p = 0.0
    elif force_p is not None:
        p = float(force_p)
    elif scores.empty:
        p = 0.0
    else:
        p = doc_p(list(per_layer.values()))
    retained = select_blocks(q_hat, doc, p, stable) if doc.middle_blocks else {}
    plan = SelectionPlan(
        doc_id=doc.doc_id,
        doc_index=doc_index,
        p=p,
        layer_p=per_layer,
        num_tokens=doc.num_tokens,
        block_spans=[b.span for b in doc.blocks],
        pinned=[b.block_index for b in doc.pinned_blocks],
        middle=[b.block_index for b in doc.middle_blocks],
        block_roles=[b.role.value for b in doc.blocks],
        retained=retained,
    )
    return plan, scores


def _minmax(scores: Mapping[int, float]) -> dict[int, float]:
    if not scores:
        return {}
    lo, hi = min(scores.values()), max(scores.values())
    if hi == lo:
        return {b: 1.0 for b in scores}
    return {b: (s - lo) / (hi - lo) for b, s in scores.items()}


def cross_context_filter(plans: Sequence[SelectionPlan]) -> list[SelectionPlan]:
    """Keep the globally best ``floor(T / D)`` retained middle blocks.

    Scores are min-max normalised per context before pooling; ties go to the
    earlier context, then the earlier block.
    """
    if not plans:
        raise ConfigurationError("no plans to filter", stage="selection")
    D = len(plans)
    normalized = [_minmax(p.retained) for p in plans]
    pool = [(-s, i, b) for i, norm in enumerate(normalized) for b, s in norm.items()]
    T = len(pool)
    if T == 0:
        return [replace(p, normalized={}) for p in plans]
    keep = set((i, b) for _, i, b in sorted(pool)[: T // D])
    return [
        replace(
            p,
            retained={b: s for b, s in p.retained.items() if (i, b) in keep},
            normalized={b: s for b, s in normalized[i].items() if (i, b) in keep},
        )
        for i, p in enumerate(plans)
    ]


def per_layer_selection(
    plan: SelectionPlan, q_hat: QueryVector, doc: DocumentCache
) -> SelectionPlan:
    """Re-rank middle blocks with each layer's own scores, keeping the count."""
    k = len(plan.retained)
    layer_sel = [top_k(block_scores(q_hat, doc, [n]), k) for n in range(doc.num_layers)]
    return replace(plan, layer_retained=layer_sel)


def sequence_ratio(plans: Sequence[SelectionPlan]) -> float:
    total = sum(p.num_tokens for p in plans)
    return sum(p.retained_tokens for p in plans) / total if total else 0.0
