"""Static attention analysis over document blocks.

Per block, the token that keeps drawing attention from later tokens is its
representative. The decay of that token's attention column with distance is
fit to ``y = c * x**-alpha``; a smaller ``alpha`` means attention persists,
so blocks are ranked by ascending ``alpha``. The column's mean attention is
the block's unimportance score (lower = less important).
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .errors import AnalysisError
from .kv_store import DocumentCache, KVBlock

log = logging.getLogger(__name__)

EPS = 1e-12
SIGMA_RULE = 3.0
# alphas / column means closer than this are ties, broken by position
TIE_DECIMALS = 9


@dataclass(eq=False)
class BlockAttribute:
    block_index: int
    start: int
    end: int
    role: str
    alpha: float
    fit_c: float
    importance_rank: int
    unimportance_score: float
    representative_token: int
    token_alphas: np.ndarray = field(repr=False, default_factory=lambda: np.zeros(0))

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("token_alphas")
        d["alpha"] = None if not math.isfinite(self.alpha) else self.alpha
        return d


@dataclass
class StableLayerReport:
    scores: list[int]
    stable_layers: list[int]
    threshold: float
    fallback: bool = False
    preset: bool = False
    beta_blocks: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def column_means(attn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of each column over rows strictly below the diagonal, and row counts."""
    T = attn.shape[0]
    below = np.tril(attn.astype(np.float64), k=-1).sum(axis=0)
    counts = T - 1 - np.arange(T)
    means = np.divide(below, counts, out=np.zeros(T), where=counts > 0)
    return means, counts


def representative_token(
    attn: np.ndarray, start: int, end: int, stats: tuple[np.ndarray, np.ndarray] | None = None
) -> int:
    """Absolute position of the in-span column with the highest mean later attention.

    ``stats`` may carry precomputed :func:`column_means` output.
    """
    means, counts = column_means(attn) if stats is None else stats
    cand = np.arange(start, end)
    cand = cand[counts[cand] > 0]
    if cand.size == 0:
        # only the final token: fall back to rows inside the span
        sub = attn[start:end, start:end].astype(np.float64)
        within = np.tril(sub).sum(axis=0) / (end - start - np.arange(end - start))
        return start + int(np.argmax(within))
    vals = np.round(means[cand], TIE_DECIMALS + 3)
    return int(cand[np.argmax(vals)])


def fit_power_law(series: Sequence[float]) -> tuple[float, float]:
    """Least-squares fit of ``log y = log c - alpha * log x`` at ``x = 1..n``."""
    y = np.asarray(series, dtype=np.float64)
    if y.size < 3:
        raise AnalysisError(f"power-law fit needs >= 3 samples, got {y.size}")
    bad = y <= 0
    if bad.any():
        log.debug("clamping %d non-positive samples to %g", int(bad.sum()), EPS)
        y = np.where(bad, EPS, y)
    lx = np.log(np.arange(1, y.size + 1, dtype=np.float64))
    slope, intercept = np.polyfit(lx, np.log(y), 1)
    return float(-slope), float(math.exp(intercept))


def column_power_laws(attn: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised :func:`fit_power_law` for every column of a causal map.

    Column ``j`` is the series ``attn[j + x, j]`` for ``x = 1..T-1-j``.
    Columns with fewer than 3 samples get ``alpha = inf`` and ``c = 0``.
    """
    T = attn.shape[0]
    a = attn.astype(np.float64)
    dist = np.subtract.outer(np.arange(T), np.arange(T))
    lower = dist > 0
    ly = np.where(lower, np.log(np.where(lower & (a > 0), a, EPS)), 0.0)
    lx_mat = np.where(lower, np.log(np.maximum(dist, 1)), 0.0)
    m = (T - 1 - np.arange(T)).astype(np.float64)
    lk = np.log(np.arange(1, T, dtype=np.float64))
    sx_pref = np.concatenate([[0.0], np.cumsum(lk)])
    sxx_pref = np.concatenate([[0.0], np.cumsum(lk * lk)])
    mi = m.astype(np.int64)
    sx, sxx = sx_pref[mi], sxx_pref[mi]
    sy = ly.sum(axis=0)
    sxy = (lx_mat * ly).sum(axis=0)
    denom = m * sxx - sx * sx
    ok = m >= 3
    safe = np.where(ok, denom, 1.0)
    slope = np.where(ok, (m * sxy - sx * sy) / safe, 0.0)
    intercept = np.where(ok, (sy - slope * sx) / np.where(ok, m, 1.0), -np.inf)
    alpha = np.where(ok, -slope, np.inf)
    return alpha, np.exp(intercept)


def block_attributes(
    attn: np.ndarray, blocks: Sequence[KVBlock], token_alphas: np.ndarray | None = None
) -> list[BlockAttribute]:
    """Importance/unimportance attributes of every block for one layer's map."""
    stats = column_means(attn)
    means = stats[0]
    if token_alphas is None:
        token_alphas, _ = column_power_laws(attn)
    T = attn.shape[0]
    raw = []
    for b in blocks:
        rep = representative_token(attn, b.start, b.end, stats)
        series = attn[rep + 1 :, rep]
        try:
            alpha, c = fit_power_law(series)
        except AnalysisError:
            alpha, c = math.inf, 0.0
        unimp = float(means[rep]) if rep < T - 1 else float(attn[rep, rep])
        raw.append((b, rep, alpha, c, unimp))
    order = sorted(range(len(raw)), key=lambda i: (round(raw[i][2], TIE_DECIMALS), raw[i][0].block_index))
    rank = {i: r for r, i in enumerate(order)}
    return [
        BlockAttribute(
            block_index=b.block_index,
            start=b.start,
            end=b.end,
            role=b.role.value,
            alpha=alpha,
            fit_c=c,
            importance_rank=rank[i],
            unimportance_score=unimp,
            representative_token=rep,
            token_alphas=np.asarray(token_alphas[b.start : b.end]),
        )
        for i, (b, rep, alpha, c, unimp) in enumerate(raw)
    ]


def analyze_document(
    doc: DocumentCache, layers: Sequence[int] | None = None
) -> dict[int, list[BlockAttribute]]:
    """Block attributes of ``doc`` for each requested layer."""
    if doc.attention is None:
        raise AnalysisError(f"document {doc.doc_id} carries no attention maps")
    if layers is None:
        layers = range(doc.num_layers)
    return {n: block_attributes(doc.attention[n], doc.blocks) for n in layers}


def pauta_outliers(values: Sequence[float], side: str = "both") -> list[int]:
    """Indices lying more than three population standard deviations from the mean.

    ``side`` selects ``"both"``, ``"low"`` or ``"high"`` deviations. Non-finite
    entries are ignored and never flagged.
    """
    if side not in ("both", "low", "high"):
        raise ValueError(f"bad side {side!r}")
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise AnalysisError("PauTa criterion needs at least two values")
    finite = np.isfinite(v)
    if finite.sum() < 2:
        return []
    mu = v[finite].mean()
    sigma = v[finite].std()
    if sigma == 0.0:
        return []
    dev = np.where(finite, v - mu, 0.0)
    limit = SIGMA_RULE * sigma
    if side == "both":
        hit = np.abs(dev) > limit
    elif side == "low":
        hit = -dev > limit
    else:
        hit = dev > limit
    return [int(i) for i in np.flatnonzero(hit & finite)]


def rank_blocks(alphas: np.ndarray) -> np.ndarray:
    """Per-layer ranks (0 = most important) from an ``(layers, blocks)`` alpha array."""
    alphas = np.round(np.asarray(alphas, dtype=np.float64), TIE_DECIMALS)
    ranks = np.empty(alphas.shape, dtype=np.int64)
    for n, row in enumerate(alphas):
        order = np.lexsort((np.arange(row.size), row))
        ranks[n, order] = np.arange(row.size)
    return ranks


def detect_stable_layers(
    per_doc_alphas: Sequence[np.ndarray],
    *,
    threshold: float | None = None,
    trailing_fraction: float = 0.5,
    preset: Sequence[int] | None = None,
) -> StableLayerReport:
    """Score layers whose view of the model-wide top block is an outlier.

    ``per_doc_alphas`` holds one ``(layers, blocks)`` alpha array per
    analysis document. For each, the block with the best mean rank across
    layers is found; every layer where that block's alpha is a low-side
    PauTa outlier gains one point.
    """
    if not per_doc_alphas:
        raise AnalysisError("no analysis documents")
    N = np.asarray(per_doc_alphas[0]).shape[0]
    if preset is not None:
        layers = sorted(set(int(n) for n in preset))
        if not layers or layers[0] < 0 or layers[-1] >= N:
            raise AnalysisError(f"preset layers {list(preset)} outside [0, {N})")
        return StableLayerReport([0] * N, layers, 0.0, preset=True)
    if N == 1:
        return StableLayerReport([0], [0], 0.0)
    scores = np.zeros(N, dtype=np.int64)
    betas = []
    for alphas in per_doc_alphas:
        alphas = np.asarray(alphas, dtype=np.float64)
        if alphas.shape[0] != N:
            raise AnalysisError("analysis documents disagree on layer count")
        if alphas.shape[1] < 2:
            continue
        mean_rank = rank_blocks(alphas).mean(axis=0)
        beta = int(np.argmin(mean_rank))
        betas.append(beta)
        for n in range(N):
            if beta in pauta_outliers(alphas[n], side="low"):
                scores[n] += 1
    thr = 0.5 * float(scores.max()) if threshold is None else float(threshold)
    first = int(math.floor(N * (1.0 - trailing_fraction)))
    stable = [n for n in range(first, N) if scores[n] > 0 and scores[n] >= thr]
    fallback = not stable
    if fallback:
        stable = list(range(N - max(1, math.ceil(N / 8)), N))
    return StableLayerReport([int(s) for s in scores], stable, thr, fallback=fallback, beta_blocks=betas)
