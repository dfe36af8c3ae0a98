"""End-to-end run: prefill, select, recompute, answer, report."""

from __future__ import annotations

import collections
import contextlib
import dataclasses
import enum
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator

import numpy as np
import yaml

from .analysis import analyze_document, detect_stable_layers
from .corpus import Corpus, generate_corpus
from .engine import (
    ModelSpec,
    ModelWeights,
    build_model,
    load_weights,
    logits,
    prefill_document,
    prefill_full,
)
from .errors import ComparisonError, ConfigurationError, SamKVError
from .kv_store import assemble
from .query import QueryVector, bias_weights, generic_query_vector, local_q_cache, personalize
from .recompute import (
    Policy,
    RecomputeSchedule,
    align_layers,
    build_schedule,
    final_answer_prefill,
    run_recompute,
)
from .selection import cross_context_filter, per_layer_selection, plan_document, sequence_ratio


class Mode(str, enum.Enum):
    SAMKV = "samkv"
    FULL_RECOMPUTE = "full_recompute"
    REUSE_ONLY = "reuse_only"
    INITIAL_LOCAL_ONLY = "initial_local_only"


class PipelineError(SamKVError):
    """Stage failure; the message is prefixed with the stage name."""


@dataclass
class CorpusConfig:
    num_docs: int = 3
    doc_len: int = 1600
    overlap_fraction: float = 0.3
    query_len: int = 16


@dataclass
class PipelineConfig:
    model: ModelSpec = field(default_factory=ModelSpec)
    model_path: str | None = None
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    corpus_path: str | None = None
    block_size: int = 64
    n_initial: int = 1
    n_local: int = 2
    recompute_budget: float = 0.15
    policy: Policy = Policy.FUSION
    stable_layers: str | list[int] = "auto"
    mode: Mode = Mode.SAMKV
    seed: int = 0
    force_p: float | None = None
    cross_filter: bool = True
    fill_schedule: bool = True
    personalize: bool = True
    per_layer_selection: bool = False
    per_layer_schedule: bool = False
    anchor_below_min: str = "zero"
    output: str | None = None

    def __post_init__(self):
        self.policy = Policy(self.policy)
        self.mode = Mode(self.mode)
        if isinstance(self.model, dict):
            self.model = ModelSpec(**self.model)
        if isinstance(self.corpus, dict):
            self.corpus = CorpusConfig(**self.corpus)

    def validate(self) -> None:
        if self.block_size < 1:
            raise ConfigurationError("block_size must be >= 1")
        if self.n_initial < 1 or self.n_local < 0:
            raise ConfigurationError("need n_initial >= 1 and n_local >= 0")
        if not 0.0 < self.recompute_budget <= 1.0:
            raise ConfigurationError("recompute_budget must be in (0, 1]")
        if self.force_p is not None and not 0.0 <= self.force_p <= 1.0:
            raise ConfigurationError("force_p must be in [0, 1]")
        if self.stable_layers != "auto" and not isinstance(self.stable_layers, list):
            raise ConfigurationError("stable_layers must be 'auto' or a list of layer indices")
        if self.anchor_below_min not in ("zero", "one"):
            raise ConfigurationError("anchor_below_min must be 'zero' or 'one'")
        self.model.validate()

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["policy"] = self.policy.value
        d["mode"] = self.mode.value
        d["model"]["positional_mode"] = self.model.positional_mode.value
        return d


def _coerce(value: Any, current: Any) -> Any:
    if isinstance(current, bool):
        if isinstance(value, str):
            return value.lower() in ("1", "true", "yes", "on")
        return bool(value)
    if isinstance(current, int) and not isinstance(current, bool) and value is not None:
        return int(value)
    if isinstance(current, float) and value is not None:
        return float(value)
    return value


def config_from_mapping(data: dict | None, overrides: dict | None = None) -> PipelineConfig:
    """Build a config from nested mappings; ``overrides`` wins over ``data``."""
    merged: dict = {}
    for src in (data or {}, overrides or {}):
        for key, value in src.items():
            if value is None:
                continue
            if key in ("model", "corpus") and isinstance(value, dict):
                merged.setdefault(key, {}).update(value)
            else:
                merged[key] = value
    base = PipelineConfig()
    known = {f.name for f in dataclasses.fields(PipelineConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in merged.items():
        if key == "model":
            spec_fields = {f.name for f in dataclasses.fields(ModelSpec)}
            bad = set(value) - spec_fields
            if bad:
                raise ConfigurationError(f"unknown model keys: {sorted(bad)}")
            kwargs[key] = ModelSpec(**value)
        elif key == "corpus":
            bad = set(value) - {f.name for f in dataclasses.fields(CorpusConfig)}
            if bad:
                raise ConfigurationError(f"unknown corpus keys: {sorted(bad)}")
            cur = CorpusConfig()
            kwargs[key] = CorpusConfig(**{k: _coerce(v, getattr(cur, k)) for k, v in value.items()})
        elif key == "stable_layers" and isinstance(value, str) and value != "auto":
            kwargs[key] = [int(x) for x in value.split(",") if x.strip()]
        else:
            kwargs[key] = _coerce(value, getattr(base, key))
    try:
        cfg = PipelineConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(str(exc)) from exc
    cfg.validate()
    return cfg


def load_config(path: str | Path | None, overrides: dict | None = None) -> PipelineConfig:
    data = {}
    if path is not None:
        try:
            data = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError("config file must hold a mapping")
    return config_from_mapping(data, overrides)


class _Stages:
    def __init__(self) -> None:
        self.timings: dict[str, float] = {}

    @contextlib.contextmanager
    def __call__(self, name: str) -> Iterator[None]:
        t0 = time.perf_counter()
        try:
            yield
        except PipelineError:
            raise
        except Exception as exc:
            raise PipelineError(f"[{name}] {exc}", stage=name) from exc
        finally:
            self.timings[name] = self.timings.get(name, 0.0) + time.perf_counter() - t0


def _cos(a: np.ndarray, b: np.ndarray) -> float:
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    den = np.linalg.norm(a64) * np.linalg.norm(b64)
    return float(a64 @ b64 / den) if den > 0 else 0.0


def _floats(x: np.ndarray) -> list[float]:
    return [float(v) for v in np.asarray(x).ravel()]


def resolve_model(config: PipelineConfig) -> ModelWeights:
    if config.model_path:
        return load_weights(config.model_path)
    return build_model(config.model)


def resolve_corpus(config: PipelineConfig, vocab_size: int) -> Corpus:
    if config.corpus_path:
        return Corpus.load(config.corpus_path)
    c = config.corpus
    return generate_corpus(
        config.seed, c.num_docs, c.doc_len, c.overlap_fraction, vocab_size=vocab_size, query_len=c.query_len
    )


_MEMO: "collections.OrderedDict[tuple, Any]" = collections.OrderedDict()
MEMO_SIZE = 8


def _memo(key: tuple, compute):
    # baseline and per-document prefill are shared across modes on one corpus
    if key in _MEMO:
        _MEMO.move_to_end(key)
        return _MEMO[key]
    value = compute()
    _MEMO[key] = value
    while len(_MEMO) > MEMO_SIZE:
        _MEMO.popitem(last=False)
    return value


def clear_memo() -> None:
    _MEMO.clear()


def _baseline(weights: ModelWeights, corpus: Corpus) -> tuple[np.ndarray, int]:
    joint = np.concatenate(corpus.docs + [corpus.query])
    _, acts = prefill_full(weights, joint)
    hidden = acts[-1].out[-1].copy()
    return hidden, int(np.argmax(logits(weights, hidden)))


def _prefill_docs(weights: ModelWeights, corpus: Corpus, config: PipelineConfig):
    return [
        prefill_document(
            weights,
            toks,
            f"doc{i}",
            block_size=config.block_size,
            n_initial=config.n_initial,
            n_local=config.n_local,
            retain_q=True,
            keep_attention=True,
        )
        for i, toks in enumerate(corpus.docs)
    ]


def run_pipeline(
    config: PipelineConfig,
    *,
    weights: ModelWeights | None = None,
    corpus: Corpus | None = None,
) -> dict:
    """Execute one configured run and return the JSON-ready report."""
    stage = _Stages()
    with stage("setup"):
        config.validate()
        if weights is None:
            weights = resolve_model(config)
        if corpus is None:
            corpus = resolve_corpus(config, weights.spec.vocab_size)
    N = weights.spec.num_layers
    total_tokens = int(sum(len(d) for d in corpus.docs))

    wkey, ckey = weights.checksum(), corpus.fingerprint()
    with stage("baseline"):
        base_hidden, base_token = _memo(("baseline", wkey, ckey), lambda: _baseline(weights, corpus))

    report: dict[str, Any] = {
        "mode": config.mode.value,
        "seed": config.seed,
        "config": config.to_dict(),
        "corpus": {
            "fingerprint": corpus.fingerprint(),
            "num_docs": len(corpus.docs),
            "doc_lens": [int(len(d)) for d in corpus.docs],
            "query_len": int(len(corpus.query)),
        },
        "total_tokens": total_tokens,
        "baseline_token": base_token,
    }

    if config.mode is Mode.FULL_RECOMPUTE:
        report.update(
            sequence_ratio=1.0,
            recomputation_ratio=1.0,
            retained_tokens=total_tokens,
            scheduled_tokens=total_tokens,
            answer_token=base_token,
            hidden_cosine=1.0,
            max_rel_error=0.0,
            next_token_agree=True,
            final_hidden=_floats(base_hidden),
            p_values={},
            stable_layers=[],
            theta=None,
        )
        report["timings"] = stage.timings
        return report

    layout = (config.block_size, config.n_initial, config.n_local)
    with stage("prefill_documents"):
        docs = _memo(("docs", wkey, ckey, layout), lambda: _prefill_docs(weights, corpus, config))

    with stage("block_analysis"):
        attrs = _memo(
            ("attrs", wkey, ckey, layout), lambda: {d.doc_id: analyze_document(d) for d in docs}
        )
        preset = None if config.stable_layers == "auto" else config.stable_layers
        per_doc_alphas = [
            np.array([[a.alpha for a in attrs[d.doc_id][n]] for n in range(N)]) for d in docs
        ]
        stable_report = detect_stable_layers(per_doc_alphas, preset=preset)
        stable = stable_report.stable_layers

    with stage("query_embedding"):
        q_que = generic_query_vector(weights, corpus.query, docs)
        locals_ = [local_q_cache(d) for d in docs]
        if config.personalize:
            q_hats = [personalize(q_que, locals_, d.doc_id) for d in docs]
        else:
            q_hats = [QueryVector(q_que.vec.copy(), f"personalized:{d.doc_id}") for d in docs]
        local_cos = bias_weights(q_que, locals_)

    with stage("selection"):
        select_middle = config.mode is not Mode.INITIAL_LOCAL_ONLY
        plans = []
        for i, (doc, q_hat) in enumerate(zip(docs, q_hats)):
            plan, _ = plan_document(
                q_hat,
                doc,
                i,
                attrs[doc.doc_id],
                stable,
                force_p=config.force_p,
                anchor_below_min=config.anchor_below_min,
                select_middle=select_middle,
            )
            plans.append(plan)
        p_values = {p.doc_id: p.p for p in plans}
        if config.cross_filter:
            plans = cross_context_filter(plans)
        if config.per_layer_selection:
            plans = [per_layer_selection(p, q, d) for p, q, d in zip(plans, q_hats, docs)]

    theta = None
    if config.mode is Mode.REUSE_ONLY:
        with stage("assemble"):
            refs = [[(p.doc_index, b) for p in plans for b in p.blocks_at(n)] for n in range(N)]
            new_cache = assemble(docs, refs)
            schedule = RecomputeSchedule.empty(N, total_tokens, config.policy)
    else:
        with stage("schedule"):
            schedule = build_schedule(
                plans,
                attrs,
                config.recompute_budget,
                num_layers=N,
                stable_layers=stable,
                policy=config.policy,
                fill=config.fill_schedule,
                per_layer=config.per_layer_schedule,
            )
        with stage("align"):
            aligned = align_layers(plans, docs)
        with stage("recompute"):
            result = run_recompute(aligned, schedule, weights)
            new_cache = result.cache
            theta = result.theta_stats()

    with stage("final_prefill"):
        answer = final_answer_prefill(weights, corpus.query, new_cache)

    denom = np.maximum(np.abs(base_hidden.astype(np.float64)), 1e-30)
    rel = np.abs(answer.hidden.astype(np.float64) - base_hidden) / denom
    report.update(
        sequence_ratio=sequence_ratio(plans),
        recomputation_ratio=schedule.recomputation_ratio,
        retained_tokens=int(sum(p.retained_tokens for p in plans)),
        scheduled_tokens=len(schedule.tokens),
        schedule_sources=schedule.count_by_source(),
        answer_token=answer.token,
        hidden_cosine=_cos(answer.hidden, base_hidden),
        max_rel_error=float(rel.max()),
        next_token_agree=answer.token == base_token,
        final_hidden=_floats(answer.hidden),
        p_values=p_values,
        stable_layers=list(stable),
        stable_report=stable_report.to_dict(),
        theta=theta,
        query_local_cosine={
            "min": float(local_cos.min()),
            "max": float(local_cos.max()),
            "mean": float(local_cos.mean()),
        },
        plans=[p.to_dict() for p in plans],
    )
    report["timings"] = stage.timings
    return report


TIMING_KEYS = ("timings",)


def canonical_json(report: dict, *, drop_timings: bool = False) -> str:
    data = {k: v for k, v in report.items() if not (drop_timings and k in TIMING_KEYS)}
    return json.dumps(data, sort_keys=True, indent=2, allow_nan=False, default=_json_default)


def _json_default(o: Any) -> Any:
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, enum.Enum):
        return o.value
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def write_report(report: dict, path: str | Path) -> None:
    Path(path).write_text(canonical_json(report) + "\n")


def compare_runs(report_a: dict, report_b: dict) -> dict:
    fa, fb = report_a["corpus"]["fingerprint"], report_b["corpus"]["fingerprint"]
    if fa != fb:
        raise ComparisonError(f"reports were produced on different corpora ({fa} vs {fb})")
    ha = np.asarray(report_a["final_hidden"], dtype=np.float64)
    hb = np.asarray(report_b["final_hidden"], dtype=np.float64)
    return {
        "modes": [report_a["mode"], report_b["mode"]],
        "sequence_ratio_delta": report_b["sequence_ratio"] - report_a["sequence_ratio"],
        "recomputation_ratio_delta": report_b["recomputation_ratio"] - report_a["recomputation_ratio"],
        "baseline_cosine_delta": report_b["hidden_cosine"] - report_a["hidden_cosine"],
        "hidden_cosine": _cos(ha, hb),
        "token_agreement": report_a["answer_token"] == report_b["answer_token"],
    }


def analyze_layers(config: PipelineConfig, *, weights: ModelWeights | None = None) -> dict:
    """Block attributes per layer and the stable-layer report for the configured corpus."""
    stage = _Stages()
    with stage("setup"):
        config.validate()
        weights = weights or resolve_model(config)
        corpus = resolve_corpus(config, weights.spec.vocab_size)
    N = weights.spec.num_layers
    with stage("prefill_documents"):
        docs = [
            prefill_document(
                weights,
                toks,
                f"doc{i}",
                block_size=config.block_size,
                n_initial=config.n_initial,
                n_local=config.n_local,
                keep_attention=True,
            )
            for i, toks in enumerate(corpus.docs)
        ]
    with stage("block_analysis"):
        attrs = {d.doc_id: analyze_document(d) for d in docs}
        preset = None if config.stable_layers == "auto" else config.stable_layers
        per_doc = [np.array([[a.alpha for a in attrs[d.doc_id][n]] for n in range(N)]) for d in docs]
        stable = detect_stable_layers(per_doc, preset=preset)
    return {
        "corpus": {"fingerprint": corpus.fingerprint()},
        "stable_report": stable.to_dict(),
        "documents": {
            doc_id: {str(n): [a.to_dict() for a in layer] for n, layer in per_layer.items()}
            for doc_id, per_layer in attrs.items()
        },
    }
